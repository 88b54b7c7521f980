//! Self-supervised monocular depth estimation with non-Lambertian image
//! decomposition (albedo, shading, specular residual), plus the training,
//! inference, and evaluation machinery around it.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod ingest;
pub mod io;
pub mod losses;
pub mod networks;
pub mod selftest;
pub mod specular;
pub mod synthetic;
pub mod tape;
pub mod trainer;
pub mod util;
pub mod warp;

pub use error::{Result, ShadesError};
