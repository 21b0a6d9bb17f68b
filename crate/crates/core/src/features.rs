//! Feature extraction for distillation: a small convolutional
//! classifier whose last activation map supplies pixel embeddings, and
//! the projection head applied to student pixel rows before the
//! memory-based loss.
//!
//! Pixel indexing convention: a feature map (N, C, H, W) flattens to
//! (N, A, C) with A = H * W and pixel a = y * W + x, row-major over the
//! spatial grid.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, normal_init, zeros, Binder, ParamId, ParamStore};
use crate::util::TensorData;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix4};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// (N, C, H, W) -> (N, A, C) with a = y * W + x.
pub fn flatten_spatial(map: &ArrayD<f64>) -> Array3<f64> {
    let m4 = map
        .view()
        .into_dimensionality::<Ix4>()
        .expect("feature map must be 4-d");
    let (n, c, h, w) = m4.dim();
    let mut out = Array3::zeros((n, h * w, c));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ni, y * w + x, ci]] = m4[[ni, ci, y, x]];
                }
            }
        }
    }
    out
}

/// Tape version of `flatten_spatial`: a transpose-reshape whose
/// backward exactly undoes it.
pub fn flatten_spatial_on_tape(tape: &Tape, map: Var) -> Var {
    let v = tape.value(map);
    let shape = v.shape().to_vec();
    assert_eq!(shape.len(), 4, "feature map must be 4-d");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = flatten_spatial(&v).into_dyn();
    tape.custom_unary(map, flat, move |g| {
        let g3 = g
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("gradient must be 3-d");
        let mut back = ndarray::Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        back[[ni, ci, y, x]] = g3[[ni, y * w + x, ci]];
                    }
                }
            }
        }
        back.into_dyn()
    })
}

/// Inverse of `flatten_spatial`: (N, A, C) with A = h * w back to
/// (N, C, h, w). Exact, no arithmetic.
pub fn unflatten_spatial(f: &Array3<f64>, h: usize, w: usize) -> Result<ArrayD<f64>> {
    let (n, a, c) = f.dim();
    if a != h * w {
        return Err(Error::ShapeMismatch {
            expected: vec![n, h * w, c],
            actual: vec![n, a, c],
        });
    }
    let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ni, ci, y, x]] = f[[ni, y * w + x, ci]];
                }
            }
        }
    }
    Ok(out.into_dyn())
}

/// Spatial average of a (N, C, H, W) map: the row-mean over the A
/// pixel rows of the flattened, unnormalized map.
pub fn pooled_from_map(map: &ArrayD<f64>) -> Array2<f64> {
    let flat = flatten_spatial(map);
    let (n, a, c) = flat.dim();
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for r in 0..a {
            for j in 0..c {
                out[[i, j]] += flat[[i, r, j]] / a as f64;
            }
        }
    }
    out
}

/// Normalizes each pixel row of (N, A, C) to unit length. Zero rows
/// stay zero.
pub fn l2_normalize_rows(f: &Array3<f64>) -> Array3<f64> {
    let mut out = f.clone();
    let (n, a, _c) = f.dim();
    for i in 0..n {
        for r in 0..a {
            let mut row = out.index_axis_mut(Axis(0), i);
            let norm: f64 = row.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.row_mut(r).mapv_inplace(|v| v / norm);
            }
        }
    }
    out
}

/// Extracts features from pixel space for distillation supervision.
pub trait FeatureExtractor {
    /// Channel count of the pixel embedding rows.
    fn feature_dim(&self) -> usize;

    /// Spatial size (H, W) of the tapped feature map.
    fn feature_hw(&self) -> (usize, usize);

    /// Feature map (N, C_f, H_f, W_f) without gradient tracking.
    fn feature_map(&self, x: &ArrayD<f64>) -> ArrayD<f64>;

    /// Per-sample pooled features (N, C_f) without gradient tracking.
    fn pooled(&self, x: &ArrayD<f64>) -> Array2<f64>;

    /// Normalized pixel rows (N, A, C_f) without gradient tracking.
    fn pixel_rows(&self, x: &ArrayD<f64>) -> Array3<f64> {
        l2_normalize_rows(&flatten_spatial(&self.feature_map(x)))
    }
}

/// Layout of the classifier: 3x3 conv + ReLU blocks, each followed by
/// 2x2 average pooling until the map is `final_hw` wide, then one last
/// conv + ReLU whose output is the tapped feature map, global average
/// pooling, and a linear head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub image_hw: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub final_hw: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 || self.base_width == 0 {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        if self.final_hw == 0 || !self.image_hw.is_multiple_of(self.final_hw) {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of the final map size {}",
                self.image_hw, self.final_hw
            )));
        }
        let ratio = self.image_hw / self.final_hw;
        if !ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsampling ratio {ratio} must be a power of two"
            )));
        }
        Ok(())
    }

    fn num_pools(&self) -> usize {
        (self.image_hw / self.final_hw).trailing_zeros() as usize
    }

    /// Channel widths per conv: doubles at each pooled stage, capped at
    /// 4x the base width.
    fn widths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut w = self.base_width;
        for _ in 0..=self.num_pools() {
            out.push(w);
            w = (w * 2).min(self.base_width * 4);
        }
        out
    }
}

struct ClassifierParams {
    convs: Vec<(ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Small convolutional classifier; its last post-ReLU activation map is
/// the feature tap used for distillation supervision.
pub struct ConvClassifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
    ids: ClassifierParams,
}

impl ConvClassifier {
    pub fn new(cfg: ClassifierConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let widths = cfg.widths();
        let mut convs = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            let w = params.add(
                &format!("conv{i}.weight"),
                kaiming_normal(rng, &[c_out, c_in, 3, 3], c_in * 9),
            );
            let b = params.add(&format!("conv{i}.bias"), zeros(&[c_out]));
            convs.push((w, b));
            c_in = c_out;
        }
        let feat = *widths.last().unwrap();
        let head_w = params.add(
            "head.weight",
            normal_init(rng, &[cfg.num_classes, feat], (1.0 / feat as f64).sqrt()),
        );
        let head_b = params.add("head.bias", zeros(&[cfg.num_classes]));
        Ok(Self {
            cfg,
            params,
            ids: ClassifierParams {
                convs,
                head_w,
                head_b,
            },
        })
    }

    pub fn feature_width(&self) -> usize {
        *self.cfg.widths().last().unwrap()
    }

    /// Differentiable pass to the tapped feature map (N, C_f, Hf, Wf).
    pub fn feature_map_train(&self, tape: &Tape, binder: &Binder, x: Var) -> Var {
        let pools = self.cfg.num_pools();
        let mut h = x;
        for (i, (w, b)) in self.ids.convs.iter().enumerate() {
            h = tape.conv2d(h, binder.var(*w), binder.var(*b), 1);
            h = tape.relu(h);
            if i < pools {
                h = tape.avg_pool2(h);
            }
        }
        h
    }

    /// Differentiable pass to logits (N, classes). Also returns the
    /// tapped feature map.
    pub fn logits_train(&self, tape: &Tape, binder: &Binder, x: Var) -> (Var, Var) {
        let fmap = self.feature_map_train(tape, binder, x);
        let pooled = tape.global_avg_pool(fmap);
        let logits = tape.linear(pooled, binder.var(self.ids.head_w), binder.var(self.ids.head_b));
        (logits, fmap)
    }

    /// Class probabilities (N, classes) without gradient tracking.
    pub fn probs(&self, x: &ArrayD<f64>) -> Array2<f64> {
        let tape = Tape::no_grad();
        let binder = Binder::new(&self.params, &tape);
        let xv = tape.constant(x.clone());
        let (logits, _) = self.logits_train(&tape, &binder, xv);
        let l = tape.value(logits);
        let l2 = l.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        crate::losses::softmax_rows(&l2.to_owned(), 1.0).expect("unit temperature")
    }
}

impl FeatureExtractor for ConvClassifier {
    fn feature_dim(&self) -> usize {
        self.feature_width()
    }

    fn feature_hw(&self) -> (usize, usize) {
        (self.cfg.final_hw, self.cfg.final_hw)
    }

    fn feature_map(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let tape = Tape::no_grad();
        let binder = Binder::new(&self.params, &tape);
        let xv = tape.constant(x.clone());
        let f = self.feature_map_train(&tape, &binder, xv);
        tape.value(f).as_ref().clone()
    }

    fn pooled(&self, x: &ArrayD<f64>) -> Array2<f64> {
        let tape = Tape::no_grad();
        let binder = Binder::new(&self.params, &tape);
        let xv = tape.constant(x.clone());
        let f = self.feature_map_train(&tape, &binder, xv);
        let p = tape.global_avg_pool(f);
        tape.value(p)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }
}

// ----- projection head -----

/// Two pointwise linear layers with a batch-norm + ReLU in between,
/// applied independently to every pixel row of the student feature map,
/// followed by re-normalization to unit length. Used only on the
/// student side of the memory loss and discarded at inference.
///
/// With identity initialization and fresh running statistics the head
/// is exactly the identity on nonnegative unit rows, which post-ReLU
/// features are.
pub struct ProjectionHead {
    pub dim: usize,
    pub params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    gamma: ParamId,
    beta: ParamId,
    w2: ParamId,
    b2: ParamId,
    running_mean: RefCell<Array1<f64>>,
    running_var: RefCell<Array1<f64>>,
    momentum: f64,
    eps: f64,
}

impl ProjectionHead {
    /// Identity initialization: both linears start as the identity map,
    /// batch norm starts with gamma 1, beta 0, running stats (0, 1).
    pub fn identity(dim: usize) -> Self {
        let mut params = ParamStore::new();
        let eye = {
            let mut m = Array2::<f64>::zeros((dim, dim));
            for i in 0..dim {
                m[[i, i]] = 1.0;
            }
            m.into_dyn()
        };
        let w1 = params.add("proj.w1", eye.clone());
        let b1 = params.add("proj.b1", zeros(&[dim]));
        let gamma = params.add("proj.gamma", crate::nn::ones(&[dim]));
        let beta = params.add("proj.beta", zeros(&[dim]));
        let w2 = params.add("proj.w2", eye);
        let b2 = params.add("proj.b2", zeros(&[dim]));
        Self {
            dim,
            params,
            w1,
            b1,
            gamma,
            beta,
            w2,
            b2,
            running_mean: RefCell::new(Array1::zeros(dim)),
            running_var: RefCell::new(Array1::ones(dim)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Applies the head to (N, A, C) rows. In training mode batch
    /// statistics normalize the rows and the running statistics are
    /// updated; otherwise the stored running statistics are used.
    pub fn forward(&self, tape: &Tape, binder: &Binder, rows: Var, train: bool) -> Var {
        let shape = tape.value(rows).shape().to_vec();
        assert_eq!(shape.len(), 3, "projection input must be (N, A, C)");
        assert_eq!(shape[2], self.dim, "projection dim mismatch");
        let flat = tape.reshape(rows, &[shape[0] * shape[1], shape[2]]);
        let h = tape.linear(flat, binder.var(self.w1), binder.var(self.b1));
        let bn = if train {
            let (out, mean, var) = tape.batchnorm_train(
                h,
                binder.var(self.gamma),
                binder.var(self.beta),
                self.eps,
            );
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for j in 0..self.dim {
                rm[j] = (1.0 - self.momentum) * rm[j] + self.momentum * mean[j];
                rv[j] = (1.0 - self.momentum) * rv[j] + self.momentum * var[j];
            }
            out
        } else {
            tape.batchnorm_eval(
                h,
                binder.var(self.gamma),
                binder.var(self.beta),
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            )
        };
        let act = tape.relu(bn);
        let out = tape.linear(act, binder.var(self.w2), binder.var(self.b2));
        let back = tape.reshape(out, &shape);
        tape.l2_normalize_last(back)
    }

    pub fn buffers(&self) -> (Array1<f64>, Array1<f64>) {
        (
            self.running_mean.borrow().clone(),
            self.running_var.borrow().clone(),
        )
    }

    pub fn set_buffers(&self, mean: Array1<f64>, var: Array1<f64>) -> Result<()> {
        if mean.len() != self.dim || var.len() != self.dim {
            return Err(Error::Container("projection buffer length mismatch".into()));
        }
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
        Ok(())
    }

    pub fn buffers_to_tensors(&self) -> BTreeMap<String, TensorData> {
        let mut out = BTreeMap::new();
        out.insert(
            "running_mean".to_string(),
            TensorData::from_array(&self.running_mean.borrow().clone().into_dyn()),
        );
        out.insert(
            "running_var".to_string(),
            TensorData::from_array(&self.running_var.borrow().clone().into_dyn()),
        );
        out
    }

    pub fn buffers_from_tensors(&self, map: &BTreeMap<String, TensorData>) -> Result<()> {
        let mean = map
            .get("running_mean")
            .ok_or_else(|| Error::Container("missing running_mean".into()))?
            .to_array()?;
        let var = map
            .get("running_var")
            .ok_or_else(|| Error::Container("missing running_var".into()))?
            .to_array()?;
        self.set_buffers(
            mean.into_dimensionality()
                .map_err(|e| Error::Container(e.to_string()))?,
            var.into_dimensionality()
                .map_err(|e| Error::Container(e.to_string()))?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use ndarray::{Array4, IxDyn};
    use rand::Rng;

    #[test]
    fn flatten_uses_row_major_pixel_order() {
        let mut m = Array4::<f64>::zeros((1, 2, 2, 3));
        // Value encodes (channel, y, x).
        for c in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    m[[0, c, y, x]] = (c * 100 + y * 10 + x) as f64;
                }
            }
        }
        let f = flatten_spatial(&m.into_dyn());
        assert_eq!(f.dim(), (1, 6, 2));
        // pixel a = y * W + x: a = 4 is (y = 1, x = 1).
        assert_eq!(f[[0, 4, 0]], 11.0);
        assert_eq!(f[[0, 4, 1]], 111.0);
        assert_eq!(f[[0, 2, 0]], 2.0);
    }

    #[test]
    fn flatten_on_tape_roundtrips_gradient() {
        let mut rng = stream_rng(31, "init");
        let x =
            ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, 2]), |_| rng.random_range(-1.0..1.0_f64));
        let probe = Array3::from_shape_fn((2, 4, 3), |_| rng.random_range(-1.0..1.0_f64));
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let f = flatten_spatial_on_tape(&tape, xv);
        assert_eq!(tape.value(f).shape(), &[2, 4, 3]);
        let p = tape.constant(probe.clone().into_dyn());
        let m = tape.mul(f, p);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss);
        let g = grads.wrt(xv).unwrap();
        // d(sum(flat * probe))/dx = probe mapped back to NCHW.
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..2 {
                    for x_ in 0..2 {
                        let want = probe[[n, y * 2 + x_, c]];
                        assert!((g4[[n, c, y, x_]] - want).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn l2_rows_have_unit_norm() {
        let mut rng = stream_rng(32, "init");
        let f = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-2.0..2.0_f64));
        let n = l2_normalize_rows(&f);
        for i in 0..2 {
            for r in 0..5 {
                let norm: f64 = n
                    .index_axis(Axis(0), i)
                    .row(r)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_shapes_and_tap() {
        let mut rng = stream_rng(33, "init");
        let cfg = ClassifierConfig {
            in_channels: 1,
            image_hw: 16,
            num_classes: 4,
            base_width: 6,
            final_hw: 4,
        };
        let clf = ConvClassifier::new(cfg, &mut rng).unwrap();
        assert_eq!(clf.feature_dim(), 24);
        assert_eq!(clf.feature_hw(), (4, 4));
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 1, 16, 16]), |_| rng.random_range(-1.0..1.0_f64));
        let fmap = clf.feature_map(&x);
        assert_eq!(fmap.shape(), &[3, 24, 4, 4]);
        // Post-ReLU tap: never negative.
        assert!(fmap.iter().all(|v| *v >= 0.0));
        let rows = clf.pixel_rows(&x);
        assert_eq!(rows.dim(), (3, 16, 24));
        let probs = clf.probs(&x);
        assert_eq!(probs.dim(), (3, 4));
        for i in 0..3 {
            assert!((probs.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let pooled = clf.pooled(&x);
        assert_eq!(pooled.dim(), (3, 24));
        // Pooled is the row-mean of the unnormalized map, elementwise.
        let want = pooled_from_map(&fmap);
        for (a, b) in pooled.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_matches_row_mean_oracle() {
        let mut rng = stream_rng(38, "init");
        // Random (2, 3, 2, 2) map against an independent mean loop.
        let map = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, 2]), |_| rng.random_range(-1.0..1.0_f64));
        let pooled = pooled_from_map(&map);
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        acc += map[[n, c, y, x]];
                    }
                }
                assert!((pooled[[n, c]] - acc / 4.0).abs() < 1e-12);
            }
        }
        // Constant-zero map pools to zeros.
        let zero = ArrayD::zeros(IxDyn(&[1, 3, 2, 2]));
        assert!(pooled_from_map(&zero).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_exact() {
        let mut rng = stream_rng(39, "init");
        let map = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 5]), |_| rng.random_range(-1.0..1.0_f64));
        let back = unflatten_spatial(&flatten_spatial(&map), 4, 5).unwrap();
        assert_eq!(map, back);
        let flat = flatten_spatial(&map);
        assert!(unflatten_spatial(&flat, 5, 5).is_err());
    }

    #[test]
    fn classifier_rejects_bad_geometry() {
        let mut rng = stream_rng(34, "init");
        let cfg = ClassifierConfig {
            in_channels: 1,
            image_hw: 12,
            num_classes: 2,
            base_width: 4,
            final_hw: 4,
        };
        assert!(ConvClassifier::new(cfg, &mut rng).is_err());
    }

    #[test]
    fn identity_head_in_eval_mode_is_identity_on_unit_rows() {
        let mut rng = stream_rng(35, "init");
        // Nonnegative rows, as post-ReLU features are, then normalized.
        let raw = Array3::from_shape_fn((2, 4, 5), |_| rng.random_range(0.0..1.0_f64));
        let rows = l2_normalize_rows(&raw);
        let head = ProjectionHead::identity(5);
        let tape = Tape::no_grad();
        let binder = Binder::new(&head.params, &tape);
        let v = tape.constant(rows.clone().into_dyn());
        let out = head.forward(&tape, &binder, v, false);
        let got = tape.value(out);
        for (a, b) in got.iter().zip(rows.iter()) {
            assert!((a - b).abs() < 2e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn head_gradients_reach_all_parameters_in_train_mode() {
        let mut rng = stream_rng(36, "init");
        let raw = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(0.1..1.0_f64));
        let rows = l2_normalize_rows(&raw);
        let head = ProjectionHead::identity(4);
        let tape = Tape::new();
        let binder = Binder::new(&head.params, &tape);
        let v = tape.constant(rows.into_dyn());
        let out = head.forward(&tape, &binder, v, true);
        let probe = ArrayD::from_shape_fn(IxDyn(&[3, 4, 4]), |_| rng.random_range(-1.0..1.0_f64));
        let p = tape.constant(probe);
        let m = tape.mul(out, p);
        let loss = tape.sum_all(m);
        let mut grads = tape.backward(loss);
        let collected = binder.collect_grads(&mut grads);
        let with_grad = collected.iter().filter(|g| g.is_some()).count();
        assert_eq!(with_grad, head.params.len());
    }

    #[test]
    fn head_running_stats_move_in_train_mode_only() {
        let mut rng = stream_rng(37, "init");
        let rows = Array3::from_shape_fn((2, 8, 3), |_| rng.random_range(0.0..2.0_f64));
        let head = ProjectionHead::identity(3);
        let before = head.buffers();
        {
            let tape = Tape::no_grad();
            let binder = Binder::new(&head.params, &tape);
            let v = tape.constant(rows.clone().into_dyn());
            head.forward(&tape, &binder, v, false);
        }
        let after_eval = head.buffers();
        assert_eq!(before.0, after_eval.0);
        {
            let tape = Tape::no_grad();
            let binder = Binder::new(&head.params, &tape);
            let v = tape.constant(rows.into_dyn());
            head.forward(&tape, &binder, v, true);
        }
        let after_train = head.buffers();
        assert_ne!(before.0, after_train.0);
    }
}
