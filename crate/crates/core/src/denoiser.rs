//! Denoising models that predict the clean image from a noisy input
//! and a time value.
//!
//! The main model is a small U-shaped conv net: a stem, conv blocks
//! with 2x2 average pooling on the way down, a bottleneck, and
//! upsampling blocks with additive skip connections on the way up.
//! Time enters every block as a learned per-channel bias derived from a
//! sinusoidal embedding; class labels, when enabled, add a learned
//! embedding to the time signal before its MLP.
//!
//! `BiasModel` is a degenerate denoiser whose output is a single
//! learned image, independent of the input. It exists so training-loop
//! behaviour can be verified against closed-form expectations.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, normal_init, zeros, Binder, ParamId, ParamStore};
use crate::schedule::Denoiser;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    #[default]
    Unet,
    Bias,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub in_channels: usize,
    pub image_hw: usize,
    pub base_width: usize,
    pub time_dim: usize,
    pub num_classes: Option<usize>,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_hw == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        match self.kind {
            DenoiserKind::Bias => Ok(()),
            DenoiserKind::Unet => {
                if self.base_width == 0 {
                    return Err(Error::Config("base width must be positive".into()));
                }
                if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
                    return Err(Error::Config("time embedding dim must be even".into()));
                }
                if self.image_hw < 8 || !self.image_hw.is_multiple_of(4) {
                    return Err(Error::Config(format!(
                        "image size {} must be a multiple of 4 and at least 8",
                        self.image_hw
                    )));
                }
                let ratio = self.image_hw / 4;
                if !ratio.is_power_of_two() {
                    return Err(Error::Config(format!(
                        "image size {} must be 4 * 2^k",
                        self.image_hw
                    )));
                }
                Ok(())
            }
        }
    }

    /// Number of pooling stages down to a 4x4 bottleneck.
    fn depth(&self) -> usize {
        (self.image_hw / 4).trailing_zeros() as usize
    }

    /// Channel width of each resolution level, outermost first.
    fn widths(&self) -> Vec<usize> {
        (0..self.depth())
            .map(|i| self.base_width * (1 << i.min(2)))
            .collect()
    }
}

/// Sinusoidal features of a batch of times: column pairs
/// (sin(w_k t), cos(w_k t)) with w_k = pi * 2^k.
pub fn time_embedding(ts: &[f64], dim: usize) -> Array2<f64> {
    assert!(dim.is_multiple_of(2), "time embedding dim must be even");
    let mut out = Array2::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..dim / 2 {
            let w = std::f64::consts::PI * (1u64 << k) as f64;
            out[[i, 2 * k]] = (w * t).sin();
            out[[i, 2 * k + 1]] = (w * t).cos();
        }
    }
    out
}

struct ConvBlock {
    w: ParamId,
    b: ParamId,
    time_w: ParamId,
    time_b: ParamId,
}

struct UnetIds {
    stem_w: ParamId,
    stem_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    label_table: Option<ParamId>,
    down: Vec<ConvBlock>,
    mid: ConvBlock,
    up: Vec<ConvBlock>,
    out_w: ParamId,
    out_b: ParamId,
}

enum Arch {
    Unet(UnetIds),
    Bias { value: ParamId },
}

pub struct DenoiserModel {
    pub cfg: DenoiserConfig,
    pub params: ParamStore,
    arch: Arch,
}

impl DenoiserModel {
    pub fn new(cfg: DenoiserConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let arch = match cfg.kind {
            DenoiserKind::Bias => {
                let value = params.add(
                    "bias.value",
                    zeros(&[cfg.in_channels, cfg.image_hw, cfg.image_hw]),
                );
                Arch::Bias { value }
            }
            DenoiserKind::Unet => {
                let widths = cfg.widths();
                let d = cfg.time_dim;
                let block = |name: &str,
                             c_in: usize,
                             c_out: usize,
                             params: &mut ParamStore,
                             rng: &mut ChaCha12Rng| {
                    ConvBlock {
                        w: params.add(
                            &format!("{name}.weight"),
                            kaiming_normal(rng, &[c_out, c_in, 3, 3], c_in * 9),
                        ),
                        b: params.add(&format!("{name}.bias"), zeros(&[c_out])),
                        time_w: params.add(
                            &format!("{name}.time.weight"),
                            normal_init(rng, &[c_out, d], (1.0 / d as f64).sqrt()),
                        ),
                        time_b: params.add(&format!("{name}.time.bias"), zeros(&[c_out])),
                    }
                };
                let stem_w = params.add(
                    "stem.weight",
                    kaiming_normal(rng, &[widths[0], cfg.in_channels, 3, 3], cfg.in_channels * 9),
                );
                let stem_b = params.add("stem.bias", zeros(&[widths[0]]));
                let time_w1 = params.add(
                    "time_mlp.weight",
                    normal_init(rng, &[d, d], (1.0 / d as f64).sqrt()),
                );
                let time_b1 = params.add("time_mlp.bias", zeros(&[d]));
                let label_table = cfg.num_classes.map(|l| {
                    params.add("label_embed", normal_init(rng, &[l, d], 0.02))
                });
                let mut down = Vec::new();
                let mut cur = widths[0];
                for (i, &wd) in widths.iter().enumerate() {
                    down.push(block(&format!("down{i}"), cur, wd, &mut params, rng));
                    cur = wd;
                }
                let mid = block("mid", cur, cur, &mut params, rng);
                let mut up = Vec::new();
                for i in (0..widths.len()).rev() {
                    up.push(block(&format!("up{i}"), cur, widths[i], &mut params, rng));
                    cur = widths[i];
                }
                up.reverse(); // index i matches down level i
                let out_w = params.add(
                    "out.weight",
                    normal_init(rng, &[cfg.in_channels, widths[0], 3, 3], 1e-3),
                );
                let out_b = params.add("out.bias", zeros(&[cfg.in_channels]));
                Arch::Unet(UnetIds {
                    stem_w,
                    stem_b,
                    time_w1,
                    time_b1,
                    label_table,
                    down,
                    mid,
                    up,
                    out_w,
                    out_b,
                })
            }
        };
        Ok(Self { cfg, params, arch })
    }

    /// Differentiable forward pass. `z` is (N, C, H, W) on the tape;
    /// `ts` holds one time per sample. Labels are required when the
    /// model is class conditional and ignored otherwise.
    pub fn forward_train(
        &self,
        tape: &Tape,
        binder: &Binder,
        z: Var,
        ts: &[f64],
        labels: Option<&[usize]>,
    ) -> Var {
        let n = tape.value(z).shape()[0];
        assert_eq!(ts.len(), n, "one time per sample");
        match &self.arch {
            Arch::Bias { value } => {
                let v = binder.var(*value);
                let shape = [
                    n,
                    self.cfg.in_channels,
                    self.cfg.image_hw,
                    self.cfg.image_hw,
                ];
                let val = tape.value(v);
                let mut stacked = ArrayD::zeros(IxDyn(&shape));
                for i in 0..n {
                    stacked.index_axis_mut(Axis(0), i).assign(&val);
                }
                tape.custom_unary(v, stacked, move |g| {
                    g.sum_axis(Axis(0))
                })
            }
            Arch::Unet(ids) => {
                let temb = time_embedding(ts, self.cfg.time_dim);
                let mut t0 = tape.constant(temb.into_dyn());
                if let Some(table) = ids.label_table {
                    let labels = labels.expect("class-conditional model needs labels");
                    assert_eq!(labels.len(), n, "one label per sample");
                    let emb = tape.embedding(binder.var(table), labels);
                    t0 = tape.add(t0, emb);
                }
                let th = tape.linear(t0, binder.var(ids.time_w1), binder.var(ids.time_b1));
                let th = tape.relu(th);

                let apply = |h: Var, blk: &ConvBlock| {
                    let conv = tape.conv2d(h, binder.var(blk.w), binder.var(blk.b), 1);
                    let bias = tape.linear(th, binder.var(blk.time_w), binder.var(blk.time_b));
                    let biased = tape.add_channel_bias(conv, bias);
                    tape.relu(biased)
                };

                let stem = tape.conv2d(z, binder.var(ids.stem_w), binder.var(ids.stem_b), 1);
                let mut h = tape.relu(stem);
                let mut skips = Vec::new();
                for blk in &ids.down {
                    h = apply(h, blk);
                    skips.push(h);
                    h = tape.avg_pool2(h);
                }
                h = apply(h, &ids.mid);
                for i in (0..ids.up.len()).rev() {
                    h = tape.upsample2(h);
                    h = apply(h, &ids.up[i]);
                    h = tape.add(h, skips[i]);
                }
                tape.conv2d(h, binder.var(ids.out_w), binder.var(ids.out_b), 1)
            }
        }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

impl Denoiser for DenoiserModel {
    fn denoise(&self, z: &ArrayD<f64>, ts: &[f64], labels: Option<&[usize]>) -> ArrayD<f64> {
        let tape = Tape::no_grad();
        let binder = Binder::new(&self.params, &tape);
        let zv = tape.constant(z.clone());
        let out = self.forward_train(&tape, &binder, zv, ts, labels);
        tape.value(out).as_ref().clone()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (self.cfg.in_channels, self.cfg.image_hw, self.cfg.image_hw)
    }

    fn num_classes(&self) -> Option<usize> {
        match self.arch {
            Arch::Unet(ref ids) if ids.label_table.is_some() => self.cfg.num_classes,
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{central_diff, rel_err, stream_rng};
    use rand::Rng;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            kind: DenoiserKind::Unet,
            in_channels: 1,
            image_hw: 8,
            base_width: 3,
            time_dim: 4,
            num_classes: None,
        }
    }

    #[test]
    fn time_embedding_is_bounded_and_distinguishes_times() {
        let e = time_embedding(&[0.0, 0.25, 0.5, 1.0], 8);
        assert_eq!(e.dim(), (4, 8));
        for v in e.iter() {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d: f64 = (0..8).map(|k| (e[[i, k]] - e[[j, k]]).powi(2)).sum();
                assert!(d > 1e-6, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn unet_output_shape_and_determinism() {
        let mut rng = stream_rng(41, "init");
        let model = DenoiserModel::new(tiny_cfg(), &mut rng).unwrap();
        let mut rng2 = stream_rng(41, "init");
        let model2 = DenoiserModel::new(tiny_cfg(), &mut rng2).unwrap();
        assert_eq!(model.checksum(), model2.checksum());

        let mut nrng = stream_rng(41, "noise");
        let z = ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 8]), |_| nrng.random_range(-1.0..1.0_f64));
        let out = model.denoise(&z, &[0.5, 1.0], None);
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        assert!(out.iter().all(|v| v.is_finite()));
        let out2 = model2.denoise(&z, &[0.5, 1.0], None);
        assert_eq!(out, out2);
    }

    #[test]
    fn unet_depends_on_time() {
        let mut rng = stream_rng(42, "init");
        let model = DenoiserModel::new(tiny_cfg(), &mut rng).unwrap();
        let mut nrng = stream_rng(42, "noise");
        let z = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| nrng.random_range(-1.0..1.0_f64));
        let a = model.denoise(&z, &[0.25], None);
        let b = model.denoise(&z, &[0.75], None);
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "output ignores the time input");
    }

    #[test]
    fn conditional_unet_depends_on_label() {
        let mut rng = stream_rng(43, "init");
        let cfg = DenoiserConfig {
            num_classes: Some(3),
            ..tiny_cfg()
        };
        let model = DenoiserModel::new(cfg, &mut rng).unwrap();
        assert_eq!(model.num_classes(), Some(3));
        let mut nrng = stream_rng(43, "noise");
        let z = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| nrng.random_range(-1.0..1.0_f64));
        let a = model.denoise(&z, &[0.5], Some(&[0]));
        let b = model.denoise(&z, &[0.5], Some(&[2]));
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "output ignores the label input");
    }

    #[test]
    fn unet_parameter_gradients_match_finite_differences() {
        let mut rng = stream_rng(44, "init");
        let model = DenoiserModel::new(tiny_cfg(), &mut rng).unwrap();
        let mut nrng = stream_rng(44, "noise");
        let z = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| nrng.random_range(-1.0..1.0_f64));
        let target =
            ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| nrng.random_range(-1.0..1.0_f64));
        let ts = [0.5];

        // Loss for perturbed weights: rebuild the model from tensors.
        let loss_value = |name: &str, idx: usize, v: f64| {
            let mut tensors = model.params.to_tensors();
            tensors.get_mut(name).unwrap().data[idx] = v;
            let mut rng2 = stream_rng(44, "init");
            let mut m2 = DenoiserModel::new(tiny_cfg(), &mut rng2).unwrap();
            m2.params.load_tensors(&tensors).unwrap();
            let out = m2.denoise(&z, &ts, None);
            out.iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / out.len() as f64
        };

        let tape = Tape::new();
        let binder = Binder::new(&model.params, &tape);
        let zv = tape.constant(z.clone());
        let out = model.forward_train(&tape, &binder, zv, &ts, None);
        let loss = tape.mse_const(out, &target);
        let mut grads = tape.backward(loss);
        let collected = binder.collect_grads(&mut grads);

        // Spot-check a handful of scalar weights in every parameter.
        let mut check_rng = stream_rng(44, "queue");
        for (i, id) in model.params.ids().enumerate() {
            let g = collected[i]
                .as_ref()
                .unwrap_or_else(|| panic!("no grad for {}", model.params.name(id)));
            let len = model.params.get(id).len();
            for _ in 0..3.min(len) {
                let idx = check_rng.random_range(0..len);
                let base = model.params.get(id).as_slice().unwrap()[idx];
                let name = model.params.name(id).to_string();
                let fd = central_diff(|v| loss_value(&name, idx, v), base, 1e-4);
                let an = g.as_slice().unwrap()[idx];
                assert!(
                    rel_err(an, fd, 1e-6) < 1e-3,
                    "param {} idx {idx}: analytic {an} vs fd {fd}",
                    model.params.name(id)
                );
            }
        }
    }

    #[test]
    fn bias_model_broadcasts_and_sums_gradient() {
        let mut rng = stream_rng(45, "init");
        let cfg = DenoiserConfig {
            kind: DenoiserKind::Bias,
            in_channels: 1,
            image_hw: 4,
            base_width: 0,
            time_dim: 0,
            num_classes: None,
        };
        let mut model = DenoiserModel::new(cfg, &mut rng).unwrap();
        let id = model.params.id_of("bias.value").unwrap();
        let val = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |_| rng.random_range(-1.0..1.0_f64));
        model.params.set(id, val.clone());

        let z = ArrayD::zeros(IxDyn(&[3, 1, 4, 4]));
        let out = model.denoise(&z, &[0.1, 0.5, 0.9], None);
        for i in 0..3 {
            let oi = out.index_axis(Axis(0), i);
            for (a, b) in oi.iter().zip(val.iter()) {
                assert_eq!(a, b);
            }
        }

        // Gradient of mean over batch: each batch element contributes
        // 1/(N*D), summed over N copies.
        let tape = Tape::new();
        let binder = Binder::new(&model.params, &tape);
        let zv = tape.constant(z.clone());
        let o = model.forward_train(&tape, &binder, zv, &[0.1, 0.5, 0.9], None);
        let loss = tape.mean_all(o);
        let mut grads = tape.backward(loss);
        let collected = binder.collect_grads(&mut grads);
        let g = collected[0].as_ref().unwrap();
        for v in g.iter() {
            assert!((v - 3.0 / 48.0).abs() < 1e-15);
        }
    }
}
