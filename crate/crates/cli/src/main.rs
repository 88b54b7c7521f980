fn main() {
    std::process::exit(shades_cli::run(std::env::args_os()));
}
