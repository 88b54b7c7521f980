//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and a backward closure. [`Tape::backward`] then walks the nodes in
//! reverse and accumulates gradients. Everything is `f64` and single-threaded,
//! so a run is bit-reproducible; that property is load-bearing for the
//! finite-difference checks and the deterministic training mode.
//!
//! Array conventions: images are `[C, H, W]`, depth maps `[H, W]`, vectors
//! `[N]`, scalars 0-dimensional.

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(usize);

/// Context handed to a backward closure.
pub struct BackCtx<'a> {
    /// Value of the node itself.
    pub value: &'a ArrayD<f64>,
    /// Values of the parent nodes, in recording order.
    pub parents: Vec<&'a ArrayD<f64>>,
}

type BackFn = Box<dyn Fn(&ArrayD<f64>, &BackCtx) -> Vec<ArrayD<f64>>>;

struct Node {
    parents: Vec<usize>,
    back: Option<BackFn>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of the given shape when the node does not
    /// influence the root.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// The recording tape. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input node: parameters, images, constants.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, vec![], None)
    }

    /// 0-dimensional leaf.
    pub fn scalar(&mut self, v: f64) -> VarId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    /// Value of a 0-dimensional node.
    pub fn scalar_value(&self, id: VarId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.len() == 1, "scalar_value on non-scalar node");
        v.sum()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, back: Option<BackFn>) -> VarId {
        self.values.push(value);
        self.nodes.push(Node { parents, back });
        VarId(self.nodes.len() - 1)
    }

    // ---- elementwise binary ops (same shape, or one side 0-dim) ----

    fn binary(
        &mut self,
        a: VarId,
        b: VarId,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> VarId {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let value = broadcast_zip(va, vb, f);
        let back: BackFn = Box::new(move |g, ctx| {
            let (pa, pb) = (ctx.parents[0], ctx.parents[1]);
            let mut ga = ArrayD::zeros(pa.raw_dim());
            let mut gb = ArrayD::zeros(pb.raw_dim());
            broadcast_scatter(pa, pb, g, df, &mut ga, &mut gb);
            vec![ga, gb]
        });
        self.push(value, vec![a.0, b.0], Some(back))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min2(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(
            a,
            b,
            f64::min,
            |x, y| if x <= y { (1.0, 0.0) } else { (0.0, 1.0) },
        )
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max2(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(
            a,
            b,
            f64::max,
            |x, y| if x >= y { (1.0, 0.0) } else { (0.0, 1.0) },
        )
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, a: VarId, f: fn(f64) -> f64, df: fn(f64) -> f64) -> VarId {
        let value = self.values[a.0].mapv(f);
        let back: BackFn = Box::new(move |g, ctx| {
            let x = ctx.parents[0];
            let mut ga = x.mapv(df);
            ga *= g;
            vec![ga]
        });
        self.push(value, vec![a.0], Some(back))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| -x, |_| -1.0)
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(
            a,
            f64::abs,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn sin(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::sin, f64::cos)
    }

    pub fn cos(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::cos, |x| -x.sin())
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        self.unary(a, softplus, sigmoid)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::tanh, |x| 1.0 - x.tanh() * x.tanh())
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: VarId) -> VarId {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            |x| if x > 0.0 { 1.0 } else { x.exp() },
        )
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.values[a.0].mapv(|x| x * c);
        let back: BackFn = Box::new(move |g, _| vec![g.mapv(|v| v * c)]);
        self.push(value, vec![a.0], Some(back))
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.values[a.0].mapv(|x| x + c);
        let back: BackFn = Box::new(|g, _| vec![g.clone()]);
        self.push(value, vec![a.0], Some(back))
    }

    /// max(x, c); gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.values[a.0].mapv(|x| x.max(c));
        let back: BackFn = Box::new(move |g, ctx| {
            let x = ctx.parents[0];
            let mut ga = x.mapv(|v| if v > c { 1.0 } else { 0.0 });
            ga *= g;
            vec![ga]
        });
        self.push(value, vec![a.0], Some(back))
    }

    // ---- reductions and shape ops ----

    pub fn sum(&mut self, a: VarId) -> VarId {
        let value = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum());
        let back: BackFn = Box::new(|g, ctx| {
            let gv = g.sum();
            vec![ArrayD::from_elem(ctx.parents[0].raw_dim(), gv)]
        });
        self.push(value, vec![a.0], Some(back))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.values[a.0].len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum() / n);
        let back: BackFn = Box::new(move |g, ctx| {
            let gv = g.sum() / n;
            vec![ArrayD::from_elem(ctx.parents[0].raw_dim(), gv)]
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Extract one element as a 0-dim node.
    pub fn get(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let value = ArrayD::from_elem(IxDyn(&[]), self.values[a.0][IxDyn(idx)]);
        let idx = idx.to_vec();
        let back: BackFn = Box::new(move |g, ctx| {
            let mut ga = ArrayD::zeros(ctx.parents[0].raw_dim());
            ga[IxDyn(&idx)] = g.sum();
            vec![ga]
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Mean over the channel axis: `[C, H, W]` -> `[H, W]`.
    pub fn mean_channels(&mut self, a: VarId) -> VarId {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 3, "mean_channels expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let value = x
            .sum_axis(ndarray::Axis(0))
            .mapv(|v| v / c as f64)
            .into_dyn();
        let back: BackFn = Box::new(move |g, _| {
            let mut ga = ArrayD::zeros(IxDyn(&[c, h, w]));
            let scale = 1.0 / c as f64;
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        ga[[ci, i, j]] = g[[i, j]] * scale;
                    }
                }
            }
            vec![ga]
        });
        self.push(value, vec![a.0], Some(back))
    }

    /// Tile a `[1,H,W]` map to `[n,H,W]`.
    pub fn repeat_channel(&mut self, a: VarId, n: usize) -> VarId {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 3);
        assert_eq!(x.shape()[0], 1, "repeat_channel expects [1,H,W]");
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[n, h, w]));
        for c in 0..n {
            for i in 0..h {
                for j in 0..w {
                    out[[c, i, j]] = x[[0, i, j]];
                }
            }
        }
        let back: BackFn = Box::new(move |g, _| {
            let mut ga = ArrayD::zeros(IxDyn(&[1, h, w]));
            for c in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        ga[[0, i, j]] += g[[c, i, j]];
                    }
                }
            }
            vec![ga]
        });
        self.push(out, vec![a.0], Some(back))
    }

    /// Concatenate along the channel axis: `[C1,H,W] ++ [C2,H,W]`.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.ndim(), 3);
        assert_eq!(vb.ndim(), 3);
        assert_eq!(va.shape()[1..], vb.shape()[1..]);
        let c1 = va.shape()[0];
        let value = ndarray::concatenate(ndarray::Axis(0), &[va.view(), vb.view()]).unwrap();
        let back: BackFn = Box::new(move |g, ctx| {
            let ga = g.slice(ndarray::s![..c1, .., ..]).to_owned().into_dyn();
            let gb = g.slice(ndarray::s![c1.., .., ..]).to_owned().into_dyn();
            let _ = ctx;
            vec![ga, gb]
        });
        self.push(value, vec![a.0, b.0], Some(back))
    }

    /// Forward difference along the last axis; `[.., W]` -> `[.., W-1]`.
    pub fn diff_x(&mut self, a: VarId) -> VarId {
        self.forward_diff(a, true)
    }

    /// Forward difference along the second-to-last axis; `[.., H, W]` -> `[.., H-1, W]`.
    pub fn diff_y(&mut self, a: VarId) -> VarId {
        self.forward_diff(a, false)
    }

    fn forward_diff(&mut self, a: VarId, along_x: bool) -> VarId {
        let x = &self.values[a.0];
        let nd = x.ndim();
        assert!(nd == 2 || nd == 3, "forward_diff expects [H,W] or [C,H,W]");
        let axis = if along_x { nd - 1 } else { nd - 2 };
        let n = x.shape()[axis];
        assert!(n >= 2);
        let hi = x.slice_axis(ndarray::Axis(axis), ndarray::Slice::from(1..));
        let lo = x.slice_axis(ndarray::Axis(axis), ndarray::Slice::from(..n - 1));
        let value = (&hi - &lo).to_owned();
        let back: BackFn = Box::new(move |g, ctx| {
            let mut ga = ArrayD::zeros(ctx.parents[0].raw_dim());
            {
                let mut hi = ga.slice_axis_mut(ndarray::Axis(axis), ndarray::Slice::from(1..));
                hi += g;
            }
            {
                let mut lo =
                    ga.slice_axis_mut(ndarray::Axis(axis), ndarray::Slice::from(..n - 1));
                lo -= g;
            }
            vec![ga]
        });
        self.push(value, vec![a.0], Some(back))
    }

    // ---- neural network ops ----

    /// 2-D convolution with zero padding. `x: [Cin,H,W]`, `w: [Cout,Cin,kh,kw]`,
    /// `b: [Cout]` -> `[Cout,Ho,Wo]`.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let (vx, vw, vb) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        let value = conv2d_forward(vx, vw, vb, stride, pad);
        let back: BackFn = Box::new(move |g, ctx| {
            conv2d_backward(g, ctx.parents[0], ctx.parents[1], stride, pad)
        });
        self.push(value, vec![x.0, w.0, b.0], Some(back))
    }

    /// Nearest-neighbour 2x upsampling: `[C,H,W]` -> `[C,2H,2W]`.
    pub fn upsample2x(&mut self, a: VarId) -> VarId {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 3);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        let back: BackFn = Box::new(move |g, _| {
            let mut ga = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        ga[[ci, i, j]] = g[[ci, 2 * i, 2 * j]]
                            + g[[ci, 2 * i + 1, 2 * j]]
                            + g[[ci, 2 * i, 2 * j + 1]]
                            + g[[ci, 2 * i + 1, 2 * j + 1]];
                    }
                }
            }
            vec![ga]
        });
        self.push(out, vec![a.0], Some(back))
    }

    /// Spatial mean: `[C,H,W]` -> `[C]`.
    pub fn global_avg_pool(&mut self, a: VarId) -> VarId {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 3);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = (h * w) as f64;
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        for ci in 0..c {
            out[[ci]] = x.index_axis(ndarray::Axis(0), ci).sum() / n;
        }
        let back: BackFn = Box::new(move |g, _| {
            let mut ga = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                let gv = g[[ci]] / n;
                ga.index_axis_mut(ndarray::Axis(0), ci).fill(gv);
            }
            vec![ga]
        });
        self.push(out, vec![a.0], Some(back))
    }

    /// Dense layer: `w: [M,N]`, `x: [N]`, `b: [M]` -> `[M]`.
    pub fn linear(&mut self, w: VarId, x: VarId, b: VarId) -> VarId {
        let (vw, vx, vb) = (&self.values[w.0], &self.values[x.0], &self.values[b.0]);
        let (m, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.shape(), &[n]);
        assert_eq!(vb.shape(), &[m]);
        let mut out = ArrayD::zeros(IxDyn(&[m]));
        for i in 0..m {
            let mut acc = vb[[i]];
            for j in 0..n {
                acc += vw[[i, j]] * vx[[j]];
            }
            out[[i]] = acc;
        }
        let back: BackFn = Box::new(move |g, ctx| {
            let (pw, px) = (ctx.parents[0], ctx.parents[1]);
            let mut gw = ArrayD::zeros(IxDyn(&[m, n]));
            let mut gx = ArrayD::zeros(IxDyn(&[n]));
            let mut gb = ArrayD::zeros(IxDyn(&[m]));
            for i in 0..m {
                let gi = g[[i]];
                gb[[i]] = gi;
                for j in 0..n {
                    gw[[i, j]] = gi * px[[j]];
                    gx[[j]] += gi * pw[[i, j]];
                }
            }
            vec![gw, gx, gb]
        });
        self.push(out, vec![w.0, x.0, b.0], Some(back))
    }

    /// 3x3 mean pooling with reflection padding (edge row/column not repeated),
    /// shape-preserving on `[C,H,W]`.
    pub fn mean_pool3_reflect(&mut self, a: VarId) -> VarId {
        let x = &self.values[a.0];
        assert_eq!(x.ndim(), 3);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h >= 2 && w >= 2, "reflection padding needs at least 2 pixels");
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let ii = reflect_101(i as i64 + di, h);
                            let jj = reflect_101(j as i64 + dj, w);
                            acc += x[[ci, ii, jj]];
                        }
                    }
                    out[[ci, i, j]] = acc / 9.0;
                }
            }
        }
        let back: BackFn = Box::new(move |g, _| {
            let mut ga = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let gv = g[[ci, i, j]] / 9.0;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                let ii = reflect_101(i as i64 + di, h);
                                let jj = reflect_101(j as i64 + dj, w);
                                ga[[ci, ii, jj]] += gv;
                            }
                        }
                    }
                }
            }
            vec![ga]
        });
        self.push(out, vec![a.0], Some(back))
    }

    /// Bilinear sampling of `src: [C,H,W]` at pixel coordinates
    /// `(u, v): [Ho,Wo]` each. Samples outside the image contribute zero.
    /// Differentiable w.r.t. `src`, `u`, and `v`.
    pub fn grid_sample(&mut self, src: VarId, u: VarId, v: VarId) -> VarId {
        let (vs, vu, vv) = (&self.values[src.0], &self.values[u.0], &self.values[v.0]);
        assert_eq!(vs.ndim(), 3);
        assert_eq!(vu.shape(), vv.shape());
        let c = vs.shape()[0];
        let (ho, wo) = (vu.shape()[0], vu.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[c, ho, wo]));
        for i in 0..ho {
            for j in 0..wo {
                let (uu, vv_) = (vu[[i, j]], vv[[i, j]]);
                if !uu.is_finite() || !vv_.is_finite() {
                    continue;
                }
                let taps = bilinear_taps(uu, vv_, vs.shape()[1], vs.shape()[2]);
                for ci in 0..c {
                    let mut acc = 0.0;
                    for &(y, x, wgt) in taps.iter().flatten() {
                        acc += wgt * vs[[ci, y, x]];
                    }
                    out[[ci, i, j]] = acc;
                }
            }
        }
        let back: BackFn = Box::new(move |g, ctx| {
            let (ps, pu, pv) = (ctx.parents[0], ctx.parents[1], ctx.parents[2]);
            let (h, w) = (ps.shape()[1], ps.shape()[2]);
            let mut gs = ArrayD::zeros(ps.raw_dim());
            let mut gu = ArrayD::zeros(pu.raw_dim());
            let mut gv = ArrayD::zeros(pv.raw_dim());
            for i in 0..ho {
                for j in 0..wo {
                    let (uu, vv_) = (pu[[i, j]], pv[[i, j]]);
                    if !uu.is_finite() || !vv_.is_finite() {
                        continue;
                    }
                    let x0 = uu.floor();
                    let y0 = vv_.floor();
                    let a = uu - x0;
                    let b = vv_ - y0;
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    // value at integer corner, zero outside
                    let pick = |y: i64, x: i64, ci: usize| -> f64 {
                        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                            ps[[ci, y as usize, x as usize]]
                        } else {
                            0.0
                        }
                    };
                    for ci in 0..c {
                        let go = g[[ci, i, j]];
                        if go == 0.0 {
                            continue;
                        }
                        let v00 = pick(y0, x0, ci);
                        let v01 = pick(y0, x0 + 1, ci);
                        let v10 = pick(y0 + 1, x0, ci);
                        let v11 = pick(y0 + 1, x0 + 1, ci);
                        // d out / d u and d out / d v
                        gu[[i, j]] += go * ((1.0 - b) * (v01 - v00) + b * (v11 - v10));
                        gv[[i, j]] += go * ((1.0 - a) * (v10 - v00) + a * (v11 - v01));
                        // scatter into source
                        let mut scatter = |y: i64, x: i64, wgt: f64| {
                            if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                                gs[[ci, y as usize, x as usize]] += go * wgt;
                            }
                        };
                        scatter(y0, x0, (1.0 - a) * (1.0 - b));
                        scatter(y0, x0 + 1, a * (1.0 - b));
                        scatter(y0 + 1, x0, (1.0 - a) * b);
                        scatter(y0 + 1, x0 + 1, a * b);
                    }
                }
            }
            vec![gs, gu, gv]
        });
        self.push(out, vec![src.0, u.0, v.0], Some(back))
    }

    /// Run backpropagation from a scalar root. Returns gradients for every
    /// node that influences the root; leaves keep theirs for the caller.
    pub fn backward(&mut self, root: VarId) -> Gradients {
        assert!(
            self.values[root.0].len() == 1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0));
        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let node = &self.nodes[idx];
            let Some(back) = node.back.as_ref() else {
                continue;
            };
            let g = grads[idx].take().expect("checked above");
            let ctx = BackCtx {
                value: &self.values[idx],
                parents: node.parents.iter().map(|&p| &self.values[p]).collect(),
            };
            let contribs = back(&g, &ctx);
            debug_assert_eq!(contribs.len(), node.parents.len());
            grads[idx] = Some(g);
            for (p, contrib) in node.parents.clone().into_iter().zip(contribs) {
                match &mut grads[p] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Reflection without edge repetition (`-1 -> 1`, `n -> n-2`). Valid for a
/// single pad step on extents >= 2.
fn reflect_101(k: i64, n: usize) -> usize {
    let n = n as i64;
    let k = if k < 0 { -k } else if k >= n { 2 * n - 2 - k } else { k };
    k as usize
}

/// Up to four (row, col, weight) taps of a bilinear sample; out-of-image taps
/// are dropped, which realizes the zero-fill convention.
fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> [Option<(usize, usize, f64)>; 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let a = u - x0;
    let b = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut taps = [None; 4];
    let mut put = |slot: usize, y: i64, x: i64, wgt: f64| {
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            taps[slot] = Some((y as usize, x as usize, wgt));
        }
    };
    put(0, y0, x0, (1.0 - a) * (1.0 - b));
    put(1, y0, x0 + 1, a * (1.0 - b));
    put(2, y0 + 1, x0, (1.0 - a) * b);
    put(3, y0 + 1, x0 + 1, a * b);
    taps
}

fn broadcast_zip(a: &ArrayD<f64>, b: &ArrayD<f64>, f: fn(f64, f64) -> f64) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
        out
    } else if b.ndim() == 0 {
        let bv = b.sum();
        a.mapv(|av| f(av, bv))
    } else if a.ndim() == 0 {
        let av = a.sum();
        b.mapv(|bv| f(av, bv))
    } else {
        panic!(
            "shape mismatch in tape binary op: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
}

fn broadcast_scatter(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    g: &ArrayD<f64>,
    df: fn(f64, f64) -> (f64, f64),
    ga: &mut ArrayD<f64>,
    gb: &mut ArrayD<f64>,
) {
    if a.shape() == b.shape() {
        ndarray::Zip::from(ga)
            .and(gb)
            .and(a)
            .and(b)
            .and(g)
            .for_each(|gao, gbo, &av, &bv, &gv| {
                let (da, db) = df(av, bv);
                *gao = gv * da;
                *gbo = gv * db;
            });
    } else if b.ndim() == 0 {
        let bv = b.sum();
        let mut acc = 0.0;
        ndarray::Zip::from(ga).and(a).and(g).for_each(|gao, &av, &gv| {
            let (da, db) = df(av, bv);
            *gao = gv * da;
            acc += gv * db;
        });
        gb[IxDyn(&[])] = acc;
    } else {
        let av = a.sum();
        let mut acc = 0.0;
        ndarray::Zip::from(gb).and(b).and(g).for_each(|gbo, &bv, &gv| {
            let (da, db) = df(av, bv);
            *gbo = gv * db;
            acc += gv * da;
        });
        ga[IxDyn(&[])] = acc;
    }
}

fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xs = x.as_slice().expect("conv input must be contiguous");
    let ws = w.as_slice().expect("conv weight must be contiguous");
    let mut out = vec![0.0f64; cout * ho * wo];
    for oc in 0..cout {
        let bias = b[[oc]];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias;
                for ic in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let xrow = ic * h * wd + iy as usize * wd;
                        let wrow = ((oc * cin + ic) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= wd as i64 {
                                continue;
                            }
                            acc += xs[xrow + ix as usize] * ws[wrow + kx];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[cout, ho, wo]), out).unwrap()
}

fn conv2d_backward(
    g: &ArrayD<f64>,
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> Vec<ArrayD<f64>> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let mut gx = vec![0.0f64; cin * h * wd];
    let mut gw = vec![0.0f64; w.len()];
    let mut gb = vec![0.0f64; cout];
    for oc in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gs[(oc * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                gb[oc] += gv;
                for ic in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let xrow = ic * h * wd + iy as usize * wd;
                        let wrow = ((oc * cin + ic) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= wd as i64 {
                                continue;
                            }
                            gx[xrow + ix as usize] += gv * ws[wrow + kx];
                            gw[wrow + kx] += gv * xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    vec![
        ArrayD::from_shape_vec(IxDyn(&[cin, h, wd]), gx).unwrap(),
        ArrayD::from_shape_vec(w.raw_dim(), gw).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap(),
    ]
}

/// Central finite-difference gradient of `f` at `x0`, step `h` per element.
/// The reference oracle for every gradient check in the test suites.
pub fn finite_difference_gradient<F>(f: F, x0: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in ndarray::indices(x0.raw_dim()) {
        let orig = x[&idx];
        x[&idx] = orig + h;
        let fp = f(&x);
        x[&idx] = orig - h;
        let fm = f(&x);
        x[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative L2 error between an analytic and a finite-difference gradient.
pub fn gradient_rel_error(analytic: &ArrayD<f64>, fd: &ArrayD<f64>) -> f64 {
    let diff = (analytic - fd).mapv(|v| v * v).sum().sqrt();
    let denom = fd
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(analytic.mapv(|v| v * v).sum().sqrt())
        .max(1e-12);
    diff / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_array(shape: &[usize], rng: &mut StdRng) -> ArrayD<f64> {
        Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(0.05..0.95))
    }

    /// FD-check the gradient of mean(op(x)) w.r.t. x.
    fn check_unary<F>(build: F, shape: &[usize], seed: u64, tol: f64)
    where
        F: Fn(&mut Tape, VarId) -> VarId,
    {
        let mut rng = StdRng::seed_from_u64(seed);
        let x0 = rand_array(shape, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let loss = tape.mean(y);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let fd = finite_difference_gradient(
            |xv| {
                let mut t = Tape::new();
                let x = t.leaf(xv.clone());
                let y = build(&mut t, x);
                let l = t.mean(y);
                t.scalar_value(l)
            },
            &x0,
            1e-5,
        );
        let err = gradient_rel_error(&analytic, &fd);
        assert!(err < tol, "gradient error {err} exceeds {tol}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        check_unary(|t, x| t.sigmoid(x), &[3, 4], 1, 1e-6);
        check_unary(|t, x| t.softplus(x), &[3, 4], 2, 1e-6);
        check_unary(|t, x| t.exp(x), &[3, 4], 3, 1e-6);
        check_unary(|t, x| t.sqrt(x), &[3, 4], 4, 1e-6);
        check_unary(|t, x| t.tanh(x), &[3, 4], 5, 1e-6);
        check_unary(|t, x| t.elu(x), &[3, 4], 6, 1e-6);
        check_unary(|t, x| t.square(x), &[3, 4], 7, 1e-6);
        check_unary(
            |t, x| {
                let y = t.scale(x, 1.7);
                t.add_const(y, 0.3)
            },
            &[5],
            8,
            1e-6,
        );
    }

    #[test]
    fn binary_and_broadcast_gradients() {
        let mut rng = StdRng::seed_from_u64(11);
        let a0 = rand_array(&[4, 3], &mut rng);
        let b0 = rand_array(&[4, 3], &mut rng);
        let s0 = rand_array(&[], &mut rng);

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let s = tape.leaf(s0.clone());
        let ab = tape.div(a, b);
        let scaled = tape.mul(ab, s);
        let loss = tape.mean(scaled);
        let grads = tape.backward(loss);

        let run = |a0: &ArrayD<f64>, b0: &ArrayD<f64>, s0: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(a0.clone());
            let b = t.leaf(b0.clone());
            let s = t.leaf(s0.clone());
            let ab = t.div(a, b);
            let scaled = t.mul(ab, s);
            let l = t.mean(scaled);
            t.scalar_value(l)
        };
        for (id, x0, rebuild) in [
            (a, &a0, 0usize),
            (b, &b0, 1),
            (s, &s0, 2),
        ] {
            let fd = finite_difference_gradient(
                |xv| match rebuild {
                    0 => run(xv, &b0, &s0),
                    1 => run(&a0, xv, &s0),
                    _ => run(&a0, &b0, xv),
                },
                x0,
                1e-5,
            );
            let err = gradient_rel_error(grads.get(id).unwrap(), &fd);
            assert!(err < 1e-6, "err {err}");
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(21);
        let x0 = rand_array(&[2, 6, 6], &mut rng);
        let w0 = rand_array(&[3, 2, 3, 3], &mut rng).mapv(|v| v - 0.5);
        let b0 = rand_array(&[3], &mut rng);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let run = |xv: &ArrayD<f64>, wv: &ArrayD<f64>, bv: &ArrayD<f64>| {
                let mut t = Tape::new();
                let x = t.leaf(xv.clone());
                let w = t.leaf(wv.clone());
                let b = t.leaf(bv.clone());
                let y = t.conv2d(x, w, b, stride, pad);
                let l = t.mean(y);
                t.scalar_value(l)
            };
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let w = tape.leaf(w0.clone());
            let b = tape.leaf(b0.clone());
            let y = tape.conv2d(x, w, b, stride, pad);
            let loss = tape.mean(y);
            let grads = tape.backward(loss);
            for (id, x0v, which) in [(x, &x0, 0usize), (w, &w0, 1), (b, &b0, 2)] {
                let fd = finite_difference_gradient(
                    |v| match which {
                        0 => run(v, &w0, &b0),
                        1 => run(&x0, v, &b0),
                        _ => run(&x0, &w0, v),
                    },
                    x0v,
                    1e-5,
                );
                let err = gradient_rel_error(grads.get(id).unwrap(), &fd);
                assert!(err < 1e-6, "stride {stride} input {which}: err {err}");
            }
        }
    }

    #[test]
    fn structural_op_gradients() {
        check_unary(|t, x| t.upsample2x(x), &[2, 3, 3], 31, 1e-6);
        check_unary(|t, x| t.mean_pool3_reflect(x), &[1, 5, 4], 32, 1e-6);
        check_unary(|t, x| t.mean_channels(x), &[3, 4, 4], 33, 1e-6);
        check_unary(|t, x| t.diff_x(x), &[4, 5], 34, 1e-6);
        check_unary(|t, x| t.diff_y(x), &[2, 4, 5], 35, 1e-6);
        check_unary(|t, x| t.global_avg_pool(x), &[3, 4, 4], 36, 1e-6);
        check_unary(|t, x| t.get(x, &[1, 2]), &[3, 4], 37, 1e-6);
        check_unary(|t, x| t.repeat_channel(x, 3), &[1, 4, 4], 38, 1e-6);
    }

    #[test]
    fn grid_sample_matches_scalar_oracle_and_gradients() {
        let mut rng = StdRng::seed_from_u64(41);
        let src0 = rand_array(&[3, 6, 6], &mut rng);
        // keep coords strictly interior and off the integer lattice
        let u0 = Array::from_shape_simple_fn(IxDyn(&[4, 4]), || rng.gen_range(0.3..4.7));
        let v0 = Array::from_shape_simple_fn(IxDyn(&[4, 4]), || rng.gen_range(0.3..4.7));

        let mut tape = Tape::new();
        let src = tape.leaf(src0.clone());
        let u = tape.leaf(u0.clone());
        let v = tape.leaf(v0.clone());
        let out = tape.grid_sample(src, u, v);

        // scalar 4-neighbour oracle
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let (uu, vv) = (u0[[i, j]], v0[[i, j]]);
                    let (x0f, y0f) = (uu.floor(), vv.floor());
                    let (a, b) = (uu - x0f, vv - y0f);
                    let (x0i, y0i) = (x0f as usize, y0f as usize);
                    let expect = (1.0 - a) * (1.0 - b) * src0[[c, y0i, x0i]]
                        + a * (1.0 - b) * src0[[c, y0i, x0i + 1]]
                        + (1.0 - a) * b * src0[[c, y0i + 1, x0i]]
                        + a * b * src0[[c, y0i + 1, x0i + 1]];
                    let got = tape.value(out)[[c, i, j]];
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }

        let loss = tape.mean(out);
        let grads = tape.backward(loss);
        let run = |sv: &ArrayD<f64>, uv: &ArrayD<f64>, vv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let s = t.leaf(sv.clone());
            let u = t.leaf(uv.clone());
            let v = t.leaf(vv.clone());
            let o = t.grid_sample(s, u, v);
            let l = t.mean(o);
            t.scalar_value(l)
        };
        for (id, x0v, which) in [(src, &src0, 0usize), (u, &u0, 1), (v, &v0, 2)] {
            let fd = finite_difference_gradient(
                |x| match which {
                    0 => run(x, &u0, &v0),
                    1 => run(&src0, x, &v0),
                    _ => run(&src0, &u0, x),
                },
                x0v,
                1e-5,
            );
            let err = gradient_rel_error(grads.get(id).unwrap(), &fd);
            assert!(err < 1e-6, "grid_sample input {which}: err {err}");
        }
    }

    #[test]
    fn grid_sample_zero_fill_outside() {
        let mut tape = Tape::new();
        let src = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 1.0));
        let u = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1]), 10.0));
        let v = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1]), 10.0));
        let out = tape.grid_sample(src, u, v);
        assert_eq!(tape.value(out)[[0, 0, 0]], 0.0);
    }

    #[test]
    fn concat_and_linear_gradients() {
        check_unary(
            |t, x| {
                let y = t.scale(x, 2.0);
                t.concat_channels(x, y)
            },
            &[2, 3, 3],
            51,
            1e-6,
        );
        let mut rng = StdRng::seed_from_u64(52);
        let w0 = rand_array(&[4, 6], &mut rng);
        let x0 = rand_array(&[6], &mut rng);
        let b0 = rand_array(&[4], &mut rng);
        let run = |wv: &ArrayD<f64>, xv: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let w = t.leaf(wv.clone());
            let x = t.leaf(xv.clone());
            let b = t.leaf(bv.clone());
            let y = t.linear(w, x, b);
            let l = t.mean(y);
            t.scalar_value(l)
        };
        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone());
        let x = tape.leaf(x0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.linear(w, x, b);
        let loss = tape.mean(y);
        let grads = tape.backward(loss);
        for (id, x0v, which) in [(w, &w0, 0usize), (x, &x0, 1), (b, &b0, 2)] {
            let fd = finite_difference_gradient(
                |v| match which {
                    0 => run(v, &x0, &b0),
                    1 => run(&w0, v, &b0),
                    _ => run(&w0, &x0, v),
                },
                x0v,
                1e-5,
            );
            let err = gradient_rel_error(grads.get(id).unwrap(), &fd);
            assert!(err < 1e-6, "linear input {which}: err {err}");
        }
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        // y = x * x + x; dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 3.0));
        let xx = tape.mul(x, x);
        let y = tape.add(xx, x);
        let grads = tape.backward(y);
        let g = grads.get(x).unwrap().sum();
        assert!((g - 7.0).abs() < 1e-12);
    }
}
