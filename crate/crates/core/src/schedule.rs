//! Continuous-time noise schedule, deterministic sampler steps, and the
//! two-half-step teacher targets used when halving a sampler's step
//! count.
//!
//! Time runs in [0, 1]: t = 0 is clean data, t = 1 is pure noise. The
//! schedule is variance preserving, alpha(t)^2 + sigma(t)^2 = 1, with
//! alpha(t) = cos(pi t / 2) and sigma(t) = sin(pi t / 2).
//!
//! Models predict the clean image x directly. A deterministic step from
//! time t down to s maps
//!
//!   z_s = alpha_s * x_hat + (sigma_s / sigma_t) * (z_t - alpha_t * x_hat)
//!
//! which is exact for s = t and lands on x_hat at s = 0.

use crate::error::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

/// Inference-side interface of a denoising model: given noisy images
/// and a per-sample time, predict the clean images. Implementations do
/// not record gradients; training-time forward passes live on the
/// concrete model types.
pub trait Denoiser {
    /// z: (N, C, H, W), ts: N times in [0, 1]. Returns predicted clean
    /// images with the same shape as z.
    fn denoise(&self, z: &ArrayD<f64>, ts: &[f64], labels: Option<&[usize]>) -> ArrayD<f64>;

    fn image_shape(&self) -> (usize, usize, usize);

    /// Number of label classes for conditional models.
    fn num_classes(&self) -> Option<usize> {
        None
    }
}

/// Which analytic schedule to use. A single kind today; the enum keeps
/// checkpoints self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScheduleKind {
    #[default]
    CosineVp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::CosineVp,
        }
    }

    /// Signal level at time t.
    pub fn alpha(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t), "time out of range: {t}");
        (std::f64::consts::FRAC_PI_2 * t).cos()
    }

    /// Noise level at time t.
    pub fn sigma(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t), "time out of range: {t}");
        (std::f64::consts::FRAC_PI_2 * t).sin()
    }

    /// Signal-to-noise ratio alpha^2 / sigma^2. Infinite at t = 0.
    pub fn snr(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        let s = self.sigma(t);
        if s == 0.0 {
            f64::INFINITY
        } else {
            (a * a) / (s * s)
        }
    }
}

pub fn validate_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(Error::InvalidTime { t });
    }
    Ok(())
}

/// Uniform time grid for an n-step sampler: points k/n for k = 0..=n,
/// traversed from 1 down to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepGrid {
    n: u32,
}

impl StepGrid {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSteps);
        }
        Ok(Self { n })
    }

    pub fn steps(&self) -> u32 {
        self.n
    }

    pub fn time(&self, k: u32) -> f64 {
        assert!(k <= self.n, "grid index out of range");
        k as f64 / self.n as f64
    }

    /// Times visited by a full sampling pass, descending from 1 to 0.
    pub fn descending_times(&self) -> Vec<f64> {
        (0..=self.n).rev().map(|k| self.time(k)).collect()
    }

    /// Checks that t coincides with a grid point and returns its index.
    pub fn index_of(&self, t: f64) -> Result<u32> {
        validate_time(t)?;
        let k = (t * self.n as f64).round();
        if (t - k / self.n as f64).abs() > 1e-9 {
            return Err(Error::OffGrid { t, n: self.n });
        }
        Ok(k as u32)
    }
}

/// Step counts visited when repeatedly halving from `start` to `end`.
/// Both must be powers of two with start >= end >= 1.
pub fn halving_chain(start: u32, end: u32) -> Result<Vec<u32>> {
    if !start.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(start));
    }
    if !end.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(end));
    }
    if end > start {
        return Err(Error::Config(format!(
            "halving chain must descend: start {start} < end {end}"
        )));
    }
    let mut chain = Vec::new();
    let mut n = start;
    loop {
        chain.push(n);
        if n == end {
            break;
        }
        n /= 2;
    }
    Ok(chain)
}

/// Mixes clean data with noise at time t: z_t = alpha_t x + sigma_t eps.
pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    x: &ArrayD<f64>,
    eps: &ArrayD<f64>,
    t: f64,
) -> Result<ArrayD<f64>> {
    validate_time(t)?;
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            actual: eps.shape().to_vec(),
        });
    }
    let a = schedule.alpha(t);
    let s = schedule.sigma(t);
    Ok(x.mapv(|v| a * v) + &eps.mapv(|v| s * v))
}

/// Per-sample version: sample i is diffused to its own time ts[i].
pub fn forward_diffuse_each(
    schedule: &NoiseSchedule,
    x: &ArrayD<f64>,
    eps: &ArrayD<f64>,
    ts: &[f64],
) -> Result<ArrayD<f64>> {
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            actual: eps.shape().to_vec(),
        });
    }
    if x.shape()[0] != ts.len() {
        return Err(Error::DimMismatch {
            expected: x.shape()[0],
            actual: ts.len(),
        });
    }
    for &t in ts {
        validate_time(t)?;
    }
    let mut out = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        let a = schedule.alpha(t);
        let s = schedule.sigma(t);
        let xi = x.index_axis(Axis(0), i);
        let ei = eps.index_axis(Axis(0), i);
        let mut oi = out.index_axis_mut(Axis(0), i);
        oi.assign(&(&xi.mapv(|v| a * v) + &ei.mapv(|v| s * v)));
    }
    Ok(out)
}

/// One deterministic sampler step from time t to time s (s <= t) for a
/// whole batch at the same times.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    z_t: &ArrayD<f64>,
    t: f64,
    s: f64,
    labels: Option<&[usize]>,
) -> Result<ArrayD<f64>> {
    let n = z_t.shape()[0];
    ddim_step_each(schedule, model, z_t, &vec![t; n], &vec![s; n], labels)
}

/// Deterministic step with per-sample source and destination times.
pub fn ddim_step_each(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    z_t: &ArrayD<f64>,
    ts: &[f64],
    ss: &[f64],
    labels: Option<&[usize]>,
) -> Result<ArrayD<f64>> {
    let n = z_t.shape()[0];
    if ts.len() != n || ss.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: ts.len().min(ss.len()),
        });
    }
    for (&t, &s) in ts.iter().zip(ss) {
        validate_time(t)?;
        validate_time(s)?;
        if s > t {
            return Err(Error::StepOrder { s, t });
        }
    }
    let x_hat = model.denoise(z_t, ts, labels);
    if x_hat.shape() != z_t.shape() {
        return Err(Error::ShapeMismatch {
            expected: z_t.shape().to_vec(),
            actual: x_hat.shape().to_vec(),
        });
    }
    let mut out = z_t.clone();
    for i in 0..n {
        let (t, s) = (ts[i], ss[i]);
        let zi = z_t.index_axis(Axis(0), i);
        let mut oi = out.index_axis_mut(Axis(0), i);
        if s == t {
            // Exact identity; also covers t = 0 where sigma_t = 0.
            oi.assign(&zi);
            continue;
        }
        let xi = x_hat.index_axis(Axis(0), i);
        let a_t = schedule.alpha(t);
        let a_s = schedule.alpha(s);
        let ratio = schedule.sigma(s) / schedule.sigma(t);
        // z_s = a_s x + ratio (z - a_t x)
        let stepped = &xi.mapv(|v| (a_s - ratio * a_t) * v) + &zi.mapv(|v| ratio * v);
        oi.assign(&stepped);
    }
    Ok(out)
}

/// Runs the full deterministic sampler from pure noise at t = 1 down to
/// t = 0 on a uniform n-step grid, returning the final images.
pub fn ddim_sample(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    z_init: &ArrayD<f64>,
    steps: u32,
    labels: Option<&[usize]>,
) -> Result<ArrayD<f64>> {
    let grid = StepGrid::new(steps)?;
    let mut z = z_init.clone();
    for k in (1..=steps).rev() {
        let t = grid.time(k);
        let s = grid.time(k - 1);
        z = ddim_step(schedule, model, &z, t, s, labels)?;
    }
    Ok(z)
}

/// Reconstructs the clean-image target that makes a single step from t
/// to t_end reproduce `z_end`, given that `z_end` was produced from
/// `z_t` by some sampler trajectory:
///
///   x = (z_end - (sigma_end / sigma_t) z_t)
///       / (alpha_end - (sigma_end / sigma_t) alpha_t)
///
/// Fails if the denominator is smaller than 1e-12 in magnitude.
pub fn reconstruct_target(
    schedule: &NoiseSchedule,
    z_t: &ArrayD<f64>,
    z_end: &ArrayD<f64>,
    t: f64,
    t_end: f64,
) -> Result<ArrayD<f64>> {
    validate_time(t)?;
    validate_time(t_end)?;
    if t_end > t {
        return Err(Error::StepOrder { s: t_end, t });
    }
    if z_t.shape() != z_end.shape() {
        return Err(Error::ShapeMismatch {
            expected: z_t.shape().to_vec(),
            actual: z_end.shape().to_vec(),
        });
    }
    if t_end == 0.0 {
        // sigma(0) = 0 and alpha(0) = 1: the formula collapses to z_end.
        return Ok(z_end.clone());
    }
    let ratio = schedule.sigma(t_end) / schedule.sigma(t);
    let denom = schedule.alpha(t_end) - ratio * schedule.alpha(t);
    if denom.abs() < 1e-12 {
        return Err(Error::SingularTarget { t, t_end });
    }
    Ok((z_end - &z_t.mapv(|v| ratio * v)).mapv(|v| v / denom))
}

/// Target for training an n_student-step model to match two consecutive
/// half-size steps of its teacher. The teacher walks t -> t - 1/(2N) ->
/// t - 1/N; the returned image is what a single student step from t to
/// t - 1/N must predict to land exactly on the teacher's endpoint.
///
/// `t` must be a positive point on the student's step grid.
pub fn distill_target(
    schedule: &NoiseSchedule,
    teacher: &dyn Denoiser,
    z_t: &ArrayD<f64>,
    t: f64,
    n_student: u32,
    labels: Option<&[usize]>,
) -> Result<ArrayD<f64>> {
    let n = z_t.shape()[0];
    distill_target_each(schedule, teacher, z_t, &vec![t; n], n_student, labels)
}

/// Per-sample version of `distill_target`; each sample sits at its own
/// grid time. The teacher is invoked twice, batched.
pub fn distill_target_each(
    schedule: &NoiseSchedule,
    teacher: &dyn Denoiser,
    z_t: &ArrayD<f64>,
    ts: &[f64],
    n_student: u32,
    labels: Option<&[usize]>,
) -> Result<ArrayD<f64>> {
    let grid = StepGrid::new(n_student)?;
    let batch = z_t.shape()[0];
    if ts.len() != batch {
        return Err(Error::DimMismatch {
            expected: batch,
            actual: ts.len(),
        });
    }
    let step = 1.0 / n_student as f64;
    let half = 0.5 * step;
    let mut mids = Vec::with_capacity(batch);
    let mut ends = Vec::with_capacity(batch);
    for &t in ts {
        let k = grid.index_of(t)?;
        if k == 0 {
            return Err(Error::InvalidTime { t });
        }
        let mid = t - half;
        let end = if k == 1 { 0.0 } else { t - step };
        mids.push(mid.max(0.0));
        ends.push(end.max(0.0));
    }
    let z_mid = ddim_step_each(schedule, teacher, z_t, ts, &mids, labels)?;
    let z_end = ddim_step_each(schedule, teacher, &z_mid, &mids, &ends, labels)?;

    let mut out = z_end.clone();
    for i in 0..batch {
        let zi_t = z_t.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
        let zi_end = z_end.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
        let target = reconstruct_target(schedule, &zi_t.into_dyn(), &zi_end.into_dyn(), ts[i], ends[i])?;
        out.index_axis_mut(Axis(0), i)
            .assign(&target.index_axis(Axis(0), 0));
    }
    Ok(out)
}

// ----- reference denoisers for tests and oracles -----

/// Denoiser that ignores its input and always predicts one image.
pub struct ConstantDenoiser {
    pub value: ArrayD<f64>,
    pub shape: (usize, usize, usize),
}

impl ConstantDenoiser {
    pub fn new(value: ArrayD<f64>) -> Self {
        let s = value.shape().to_vec();
        assert_eq!(s.len(), 3, "constant denoiser value must be (C, H, W)");
        let shape = (s[0], s[1], s[2]);
        Self { value, shape }
    }
}

impl Denoiser for ConstantDenoiser {
    fn denoise(&self, z: &ArrayD<f64>, ts: &[f64], _labels: Option<&[usize]>) -> ArrayD<f64> {
        assert_eq!(z.shape()[0], ts.len());
        let mut out = z.clone();
        for i in 0..ts.len() {
            out.index_axis_mut(Axis(0), i).assign(&self.value);
        }
        out
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }
}

/// Denoiser defined by an arbitrary closure over (batch, times).
pub struct FnDenoiser<F>
where
    F: Fn(&ArrayD<f64>, &[f64]) -> ArrayD<f64>,
{
    pub f: F,
    pub shape: (usize, usize, usize),
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&ArrayD<f64>, &[f64]) -> ArrayD<f64>,
{
    fn denoise(&self, z: &ArrayD<f64>, ts: &[f64], _labels: Option<&[usize]>) -> ArrayD<f64> {
        (self.f)(z, ts)
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }
}

/// Samples standard normal noise with the given shape.
pub fn sample_noise(rng: &mut rand_chacha::ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    use rand_distr::{Distribution, StandardNormal};
    ArrayD::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(rng))
}
