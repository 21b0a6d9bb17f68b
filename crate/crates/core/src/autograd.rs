//! Reverse-mode automatic differentiation over dynamic-shape f64 tensors.
//!
//! A `Tape` records operations as they execute; `backward` replays the
//! record in reverse. The op set is exactly what the denoiser, the
//! feature extractor, and the projection head need, plus a
//! `custom_scalar` hook that lets a loss contribute a hand-derived
//! gradient for its input. Ops assert on shape mismatches: shapes are
//! static properties of the model, not runtime data.
//!
//! Everything is f64. Gradient verification against central finite
//! differences at step 1e-4 needs roughly twelve significant digits of
//! headroom, which f32 does not have.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a value recorded on a tape. Cheap to copy; only valid for
/// the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<BackFn>,
}

/// Accumulates gradient contributions by node id during backward.
pub struct GradSink {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradSink {
    /// Adds a contribution to the gradient of node `id`.
    pub fn add(&mut self, v: Var, g: ArrayD<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of a scalar with respect to every recorded node, kept only
/// for nodes without a backward function (leaves and constants).
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or None if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values but no backward functions. Used for
    /// teacher passes and sampling, where gradients are never wanted.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let back = if self.grad_enabled { back } else { None };
        nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Records an input. Gradients flow into leaves and can be read back
    /// after `backward`.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Alias for `leaf` used at call sites where the value is
    /// semantically a constant; the tape treats both identically and
    /// simply reports whatever gradient arrives (usually none).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        *val.first().unwrap()
    }

    /// Runs the reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let nodes = self.nodes.borrow();
        let seed_shape = nodes[loss.0].value.shape().to_vec();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut sink = GradSink {
            grads: vec![None; loss.0 + 1],
        };
        sink.grads[loss.0] = Some(ArrayD::ones(IxDyn(&seed_shape)));
        for id in (0..=loss.0).rev() {
            if sink.grads[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].back {
                let g = sink.grads[id].take().unwrap();
                back(&g, &mut sink);
            }
            // Interior nodes free their gradient once propagated;
            // leaves keep theirs for the caller.
        }
        Gradients { grads: sink.grads }
    }

    // ----- elementwise and shape ops -----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.mapv(|x| -x));
            })),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.mapv(|x| x * k)))),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g * &*vb);
                sink.add(b, g * &*va);
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old_shape = va.shape().to_vec();
        let out = va
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let back = g
                    .to_shape(IxDyn(&old_shape))
                    .expect("reshape backward")
                    .to_owned();
                sink.add(a, back);
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.max(0.0));
        let mask = Rc::new(va.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g * &*mask))),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), va.sum());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gs = *g.first().unwrap();
                sink.add(a, ArrayD::from_elem(IxDyn(&shape), gs));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let shape = va.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), va.sum() / n);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gs = *g.first().unwrap() / n;
                sink.add(a, ArrayD::from_elem(IxDyn(&shape), gs));
            })),
        )
    }

    /// Mean squared error against a fixed target.
    pub fn mse_const(&self, a: Var, target: &ArrayD<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape(), "mse_const shape mismatch");
        let diff = Rc::new(&*va - target);
        let n = va.len() as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), diff.iter().map(|d| d * d).sum::<f64>() / n);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gs = *g.first().unwrap();
                sink.add(a, diff.mapv(|d| 2.0 * d * gs / n));
            })),
        )
    }

    // ----- dense layers -----

    /// x: (M, I), w: (O, I), b: (O) -> (M, O)
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("linear x 2-d");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear w 2-d");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("linear b 1-d");
        assert_eq!(x2.ncols(), w2.ncols(), "linear in-features mismatch");
        assert_eq!(w2.nrows(), b1.len(), "linear out-features mismatch");
        let mut y = x2.dot(&w2.t());
        y += &b1;
        let (vx_c, vw_c) = (vx.clone(), vw.clone());
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x2 = vx_c.view().into_dimensionality::<Ix2>().unwrap();
                let w2 = vw_c.view().into_dimensionality::<Ix2>().unwrap();
                sink.add(x, g2.dot(&w2).into_dyn());
                sink.add(w, g2.t().dot(&x2).into_dyn());
                sink.add(b, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Gathers rows of an embedding table: table (L, E), ids of length N
    /// -> (N, E). Backward scatter-adds into the table gradient.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let t2 = vt
            .view()
            .into_dimensionality::<Ix2>()
            .expect("embedding table 2-d");
        let (l, e) = (t2.nrows(), t2.ncols());
        let mut out = Array2::<f64>::zeros((ids.len(), e));
        for (row, &id) in ids.iter().enumerate() {
            assert!(id < l, "embedding id out of range");
            out.row_mut(row).assign(&t2.row(id));
        }
        let ids_c: Vec<usize> = ids.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<f64>::zeros((l, e));
                for (row, &id) in ids_c.iter().enumerate() {
                    let mut dst = dt.row_mut(id);
                    dst += &g2.row(row);
                }
                sink.add(table, dt.into_dyn());
            })),
        )
    }

    // ----- convolution and pooling (NCHW) -----

    /// Stride-1 convolution with symmetric zero padding.
    /// x: (N, Ci, H, W), w: (Co, Ci, kh, kw), b: (Co).
    pub fn conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv x 4-d");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv w 4-d");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("conv b 1-d");
        let (n, ci, h, wd) = x4.dim();
        let (co, ciw, kh, kw) = w4.dim();
        assert_eq!(ci, ciw, "conv channel mismatch");
        assert_eq!(co, b1.len(), "conv bias mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel too large");
        let ho = h + 2 * pad - kh + 1;
        let wo = wd + 2 * pad - kw + 1;

        let cols = Rc::new(im2col(&x4, kh, kw, pad, ho, wo));
        let wm = w4
            .to_shape((co, ci * kh * kw))
            .expect("conv weight reshape")
            .to_owned();
        let ym = wm.dot(&*cols); // (Co, N*Ho*Wo)
        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        for ni in 0..n {
            for c in 0..co {
                let bias = b1[c];
                for y in 0..ho {
                    for xq in 0..wo {
                        out[[ni, c, y, xq]] = ym[[c, (ni * ho + y) * wo + xq]] + bias;
                    }
                }
            }
        }
        let cols_c = cols.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gm = Array2::<f64>::zeros((co, n * ho * wo));
                let mut db = Array1::<f64>::zeros(co);
                for ni in 0..n {
                    for c in 0..co {
                        for y in 0..ho {
                            for xq in 0..wo {
                                let gv = g4[[ni, c, y, xq]];
                                gm[[c, (ni * ho + y) * wo + xq]] = gv;
                                db[c] += gv;
                            }
                        }
                    }
                }
                let dw = gm.dot(&cols_c.t()); // (Co, Ci*kh*kw)
                sink.add(
                    w,
                    dw.into_shape_with_order((co, ci, kh, kw))
                        .unwrap()
                        .into_dyn(),
                );
                sink.add(b, db.into_dyn());
                let dcols = wm.t().dot(&gm); // (Ci*kh*kw, N*Ho*Wo)
                let dx = col2im(&dcols, n, ci, h, wd, kh, kw, pad, ho, wo);
                sink.add(x, dx.into_dyn());
            })),
        )
    }

    /// 2x2 average pooling; H and W must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("pool x 4-d");
        let (n, c, h, w) = x4.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extent");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..ho {
                    for xq in 0..wo {
                        let s = x4[[ni, ci, 2 * y, 2 * xq]]
                            + x4[[ni, ci, 2 * y, 2 * xq + 1]]
                            + x4[[ni, ci, 2 * y + 1, 2 * xq]]
                            + x4[[ni, ci, 2 * y + 1, 2 * xq + 1]];
                        out[[ni, ci, y, xq]] = s * 0.25;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..ho {
                            for xq in 0..wo {
                                let gv = g4[[ni, ci, y, xq]] * 0.25;
                                dx[[ni, ci, 2 * y, 2 * xq]] += gv;
                                dx[[ni, ci, 2 * y, 2 * xq + 1]] += gv;
                                dx[[ni, ci, 2 * y + 1, 2 * xq]] += gv;
                                dx[[ni, ci, 2 * y + 1, 2 * xq + 1]] += gv;
                            }
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("upsample 4-d");
        let (n, c, h, w) = x4.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xq in 0..w {
                        let v = x4[[ni, ci, y, xq]];
                        out[[ni, ci, 2 * y, 2 * xq]] = v;
                        out[[ni, ci, 2 * y, 2 * xq + 1]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * xq]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * xq + 1]] = v;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for xq in 0..w {
                                dx[[ni, ci, y, xq]] = g4[[ni, ci, 2 * y, 2 * xq]]
                                    + g4[[ni, ci, 2 * y, 2 * xq + 1]]
                                    + g4[[ni, ci, 2 * y + 1, 2 * xq]]
                                    + g4[[ni, ci, 2 * y + 1, 2 * xq + 1]];
                            }
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
            })),
        )
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("gap x 4-d");
        let (n, c, h, w) = x4.dim();
        let area = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for xq in 0..w {
                        s += x4[[ni, ci, y, xq]];
                    }
                }
                out[[ni, ci]] = s / area;
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g2[[ni, ci]] / area;
                        for y in 0..h {
                            for xq in 0..w {
                                dx[[ni, ci, y, xq]] = gv;
                            }
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
            })),
        )
    }

    /// Adds a per-sample, per-channel bias: x (N, C, H, W) + b (N, C).
    /// This is how time and label embeddings enter convolutional blocks.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(b);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("bias x 4-d");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("bias b 2-d");
        let (n, c, h, w) = x4.dim();
        assert_eq!(b2.dim(), (n, c), "channel bias shape mismatch");
        let mut out = x4.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let bv = b2[[ni, ci]];
                for y in 0..h {
                    for xq in 0..w {
                        out[[ni, ci, y, xq]] += bv;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut db = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let mut s = 0.0;
                        for y in 0..h {
                            for xq in 0..w {
                                s += g4[[ni, ci, y, xq]];
                            }
                        }
                        db[[ni, ci]] = s;
                    }
                }
                sink.add(x, g.clone());
                sink.add(b, db.into_dyn());
            })),
        )
    }

    // ----- normalization -----

    /// Batch normalization over rows of a (M, C) matrix using batch
    /// statistics (biased variance). Returns the output together with
    /// the batch mean and variance so the caller can maintain running
    /// statistics.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vbt = self.value(beta);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("bn x 2-d");
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("bn gamma 1-d");
        let bt1 = vbt.view().into_dimensionality::<Ix1>().expect("bn beta 1-d");
        let (m, c) = x2.dim();
        assert!(m > 0, "batchnorm on empty batch");
        assert_eq!(g1.len(), c, "bn gamma length");
        assert_eq!(bt1.len(), c, "bn beta length");
        let mean = x2.mean_axis(Axis(0)).unwrap();
        let mut var = Array1::<f64>::zeros(c);
        for j in 0..c {
            let mu = mean[j];
            var[j] = x2.column(j).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        }
        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = Array2::<f64>::zeros((m, c));
        let mut out = Array2::<f64>::zeros((m, c));
        for i in 0..m {
            for j in 0..c {
                let xh = (x2[[i, j]] - mean[j]) * inv_std[j];
                xhat[[i, j]] = xh;
                out[[i, j]] = g1[j] * xh + bt1[j];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std_c = inv_std.clone();
        let gamma_vals = g1.to_owned();
        let var_out = var.clone();
        let out_var = self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mf = m as f64;
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for i in 0..m {
                    for j in 0..c {
                        dgamma[j] += g2[[i, j]] * xhat[[i, j]];
                        dbeta[j] += g2[[i, j]];
                    }
                }
                let mut dx = Array2::<f64>::zeros((m, c));
                for j in 0..c {
                    let mean_dy = dbeta[j] / mf;
                    let mean_dy_xhat = dgamma[j] / mf;
                    let scale = gamma_vals[j] * inv_std_c[j];
                    for i in 0..m {
                        dx[[i, j]] =
                            scale * (g2[[i, j]] - mean_dy - xhat[[i, j]] * mean_dy_xhat);
                    }
                }
                sink.add(x, dx.into_dyn());
                sink.add(gamma, dgamma.into_dyn());
                sink.add(beta, dbeta.into_dyn());
            })),
        );
        (out_var, mean, var_out)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vbt = self.value(beta);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("bn x 2-d");
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("bn gamma 1-d");
        let bt1 = vbt.view().into_dimensionality::<Ix1>().expect("bn beta 1-d");
        let (m, c) = x2.dim();
        assert_eq!(running_mean.len(), c, "bn running mean length");
        assert_eq!(running_var.len(), c, "bn running var length");
        let inv_std: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = Array2::<f64>::zeros((m, c));
        let mut out = Array2::<f64>::zeros((m, c));
        for i in 0..m {
            for j in 0..c {
                let xh = (x2[[i, j]] - running_mean[j]) * inv_std[j];
                xhat[[i, j]] = xh;
                out[[i, j]] = g1[j] * xh + bt1[j];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std_c = inv_std.clone();
        let gamma_vals = g1.to_owned();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Array2::<f64>::zeros((m, c));
                for i in 0..m {
                    for j in 0..c {
                        dgamma[j] += g2[[i, j]] * xhat[[i, j]];
                        dbeta[j] += g2[[i, j]];
                        dx[[i, j]] = g2[[i, j]] * gamma_vals[j] * inv_std_c[j];
                    }
                }
                sink.add(x, dx.into_dyn());
                sink.add(gamma, dgamma.into_dyn());
                sink.add(beta, dbeta.into_dyn());
            })),
        )
    }

    /// Normalizes along the last axis to unit Euclidean norm. Rows with
    /// zero norm map to zero and receive zero gradient.
    pub fn l2_normalize_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let c = *shape.last().expect("l2 normalize needs an axis");
        let rows: usize = vx.len() / c;
        let flat = vx
            .to_shape((rows, c))
            .expect("l2 normalize reshape")
            .to_owned();
        let mut out = Array2::<f64>::zeros((rows, c));
        let mut norms = Array1::<f64>::zeros(rows);
        for r in 0..rows {
            let n2: f64 = flat.row(r).iter().map(|v| v * v).sum();
            let n = n2.sqrt();
            norms[r] = n;
            if n > 0.0 {
                for j in 0..c {
                    out[[r, j]] = flat[[r, j]] / n;
                }
            }
        }
        let out_rc = Rc::new(out.clone());
        let shape_c = shape.clone();
        self.push(
            out.into_dyn()
                .to_shape(IxDyn(&shape))
                .unwrap()
                .to_owned(),
            Some(Box::new(move |g, sink| {
                let g2 = g.to_shape((rows, c)).unwrap().to_owned();
                let mut dx = Array2::<f64>::zeros((rows, c));
                for r in 0..rows {
                    let n = norms[r];
                    if n == 0.0 {
                        continue;
                    }
                    let y = out_rc.row(r);
                    let dot: f64 = y.iter().zip(g2.row(r).iter()).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[[r, j]] = (g2[[r, j]] - y[j] * dot) / n;
                    }
                }
                sink.add(
                    x,
                    dx.into_dyn().to_shape(IxDyn(&shape_c)).unwrap().to_owned(),
                );
            })),
        )
    }

    /// Records a unary op with a caller-supplied backward: `back` maps
    /// the output gradient to the input gradient.
    pub fn custom_unary(
        &self,
        input: Var,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var {
        self.push(
            value,
            Some(Box::new(move |g, sink| sink.add(input, back(g)))),
        )
    }

    /// Records a scalar whose gradient with respect to `input` was
    /// computed by hand. This is the bridge between closed-form loss
    /// gradients and the tape: the loss value and d(loss)/d(input) are
    /// supplied, and backward multiplies through by the incoming scalar
    /// gradient. Only `input` receives gradient; any other tensors the
    /// loss consumed are invisible to the tape, which is exactly the
    /// stop-gradient behaviour wanted for teacher quantities.
    pub fn custom_scalar(&self, value: f64, input: Var, grad_wrt_input: ArrayD<f64>) -> Var {
        assert_eq!(
            self.value(input).shape(),
            grad_wrt_input.shape(),
            "custom_scalar gradient shape mismatch"
        );
        let grad = Rc::new(grad_wrt_input);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            Some(Box::new(move |g, sink| {
                let gs = *g.first().unwrap();
                sink.add(input, grad.mapv(|x| x * gs));
            })),
        )
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Unrolls padded input patches into a (Ci*kh*kw, N*Ho*Wo) matrix.
fn im2col(
    x: &ndarray::ArrayView4<f64>,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, ci, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, n * ho * wo));
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for ni in 0..n {
                    for y in 0..ho {
                        let sy = (y + dy) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xq in 0..wo {
                            let sx = (xq + dx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[[row, (ni * ho + y) * wo + xq]] =
                                x[[ni, c, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds column gradients back to input
/// positions.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros((n, ci, h, w));
    for c in 0..ci {
        for dy in 0..kh {
            for dx_k in 0..kw {
                let row = (c * kh + dy) * kw + dx_k;
                for ni in 0..n {
                    for y in 0..ho {
                        let sy = (y + dy) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xq in 0..wo {
                            let sx = (xq + dx_k) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[ni, c, sy as usize, sx as usize]] +=
                                cols[[row, (ni * ho + y) * wo + xq]];
                        }
                    }
                }
            }
        }
    }
    dx
}
