//! Distillation losses and their hand-derived gradients.
//!
//! Every loss here is a pure function from arrays to a scalar value and
//! the gradient with respect to the student-side input. Teacher inputs
//! never receive gradient. The `*_on_tape` wrappers record a loss on an
//! autograd tape through `custom_scalar`, so the closed-form gradients
//! are what flows back into the student network.
//!
//! Distribution-matching losses share a single form: rows of a relation
//! matrix are turned into probabilities with a temperature softmax and
//! compared with KL(teacher || student). Student probabilities are
//! floored at 1e-12 inside the log; 0 * log 0 counts as 0.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::schedule::{validate_time, NoiseSchedule};
use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3};

const PROB_FLOOR: f64 = 1e-12;

/// Row-wise temperature softmax. Rejects nonpositive temperatures and
/// non-finite inputs.
pub fn softmax_rows(x: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let (r, c) = x.dim();
    let mut out = Array2::<f64>::zeros((r, c));
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = ((row[j] - max) / tau).exp();
            out[[i, j]] = e;
            z += e;
        }
        for j in 0..c {
            out[[i, j]] /= z;
        }
    }
    Ok(out)
}

/// KL(q || p) for one pair of probability rows, with the floor and
/// 0-log-0 conventions above. Inputs are trusted (softmax outputs).
pub fn kl_div(q: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(q.len(), p.len());
    let mut acc = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > 0.0 {
            acc += qi * (qi.ln() - pi.max(PROB_FLOOR).ln());
        }
    }
    acc
}

/// Validated KL divergence for externally supplied vectors: lengths
/// must match and both sides must sum to 1 within 1e-5.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::DimMismatch {
            expected: q.len(),
            actual: p.len(),
        });
    }
    for (name, v) in [("q", q), ("p", p)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::NotProbability(format!("{name} sums to {sum}")));
        }
    }
    Ok(kl_div(q, p))
}

/// Dot products of every row of `f` against every row of `g`, both
/// (A, C) with unit-norm rows: the relation matrix whose row a holds
/// the similarities of anchor pixel a.
pub fn spatial_relation(f: &Array2<f64>, g: &Array2<f64>) -> Result<Array2<f64>> {
    if f.ncols() != g.ncols() {
        return Err(Error::DimMismatch {
            expected: f.ncols(),
            actual: g.ncols(),
        });
    }
    Ok(f.dot(&g.t()))
}

/// Weights and temperatures of the combined distillation objective.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LossWeights {
    /// Weight of the cross-instance relation term.
    pub alpha: f64,
    /// Weight of the memory relation term.
    pub beta: f64,
    /// Softening temperature of the pooled-feature term (teacher side).
    pub tau_pooled: f64,
    /// Softening temperature of the cross-instance relation rows.
    pub tau_instance: f64,
    /// Softening temperature of the memory relation rows.
    pub tau_memory: f64,
    /// Weighting rule for the reconstruction term.
    #[serde(default)]
    pub omega_clip: OmegaRule,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            tau_pooled: 1.0,
            tau_instance: 1.0,
            tau_memory: 0.1,
            omega_clip: OmegaRule::TruncatedSnr,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [
            ("tau_pooled", self.tau_pooled),
            ("tau_instance", self.tau_instance),
            ("tau_memory", self.tau_memory),
        ] {
            if tau <= 0.0 || !tau.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {tau}")));
            }
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Combines the three feature-loss components into the total training
/// objective: pooled + alpha * instance_set + beta * memory. A queue
/// that is not yet ready reports its component as exactly 0, which
/// leaves the total unaffected.
pub fn combined_loss(pooled: f64, instance_set: f64, memory: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [
        ("pooled", pooled),
        ("instance_set", instance_set),
        ("memory", memory),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        if v < -1e-9 {
            return Err(Error::NegativeComponent {
                name: name.to_string(),
                value: v,
            });
        }
    }
    Ok(pooled + w.alpha * instance_set + w.beta * memory)
}

fn ensure_finite(name: &str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(value)
}

fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

// ----- step-matching reconstruction loss -----

/// Truncated signal-to-noise weight max(alpha^2/sigma^2, 1). Rejects
/// t = 0, where the ratio diverges.
pub fn truncated_snr_weight(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    validate_time(t)?;
    if t == 0.0 {
        return Err(Error::InvalidTime { t });
    }
    Ok(schedule.snr(t).max(1.0))
}

/// Selects the per-time weight applied to the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaRule {
    /// max(snr, 1): emphasizes low-noise times without ever
    /// down-weighting below plain MSE.
    #[default]
    TruncatedSnr,
    /// Constant 1: plain MSE at every time.
    Unit,
}

impl OmegaRule {
    pub fn weight(self, schedule: &NoiseSchedule, t: f64) -> Result<f64> {
        match self {
            OmegaRule::TruncatedSnr => truncated_snr_weight(schedule, t),
            OmegaRule::Unit => {
                validate_time(t)?;
                if t == 0.0 {
                    return Err(Error::InvalidTime { t });
                }
                Ok(1.0)
            }
        }
    }
}

/// Weighted reconstruction loss against the two-step teacher target:
/// mean over samples of w(t_i) * ||pred_i - target_i||^2 / D, where D
/// is the per-sample element count. Returns the value and its gradient
/// with respect to `pred`.
pub fn step_match_loss(
    schedule: &NoiseSchedule,
    pred: &ArrayD<f64>,
    target: &ArrayD<f64>,
    ts: &[f64],
    rule: OmegaRule,
) -> Result<(f64, ArrayD<f64>)> {
    if pred.shape() != target.shape() {
        return Err(shape_err(pred.shape(), target.shape()));
    }
    let n = pred.shape()[0];
    if ts.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: ts.len(),
        });
    }
    let d: usize = pred.len() / n.max(1);
    let mut loss = 0.0;
    let mut grad = ArrayD::zeros(pred.raw_dim());
    for (i, &t) in ts.iter().enumerate() {
        let w = rule.weight(schedule, t)?;
        let pi = pred.index_axis(Axis(0), i);
        let qi = target.index_axis(Axis(0), i);
        let mut gi = grad.index_axis_mut(Axis(0), i);
        let mut sq = 0.0;
        ndarray::Zip::from(&mut gi).and(&pi).and(&qi).for_each(|g, &a, &b| {
            let diff = a - b;
            sq += diff * diff;
            *g = w * 2.0 * diff / (n as f64 * d as f64);
        });
        loss += w * sq / d as f64;
    }
    loss /= n as f64;
    Ok((ensure_finite("step_match_loss", loss)?, grad))
}

// ----- pooled feature matching -----

/// Pooled-feature distillation: rows are per-sample feature vectors,
/// the teacher row is softened by `tau`, the student row uses
/// temperature 1, and rows are compared with KL(teacher || student),
/// averaged over the batch. Returns the gradient with respect to the
/// student features.
pub fn pooled_feature_loss(
    teacher: &Array2<f64>,
    student: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if teacher.dim() != student.dim() {
        return Err(shape_err(
            &[teacher.nrows(), teacher.ncols()],
            &[student.nrows(), student.ncols()],
        ));
    }
    let n = teacher.nrows();
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let q = softmax_rows(teacher, tau)?;
    let p = softmax_rows(student, 1.0)?;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(student.dim());
    for i in 0..n {
        loss += kl_div(q.row(i).as_slice().unwrap(), p.row(i).as_slice().unwrap());
        for j in 0..teacher.ncols() {
            grad[[i, j]] = (p[[i, j]] - q[[i, j]]) / n as f64;
        }
    }
    loss /= n as f64;
    Ok((ensure_finite("pooled_feature_loss", loss)?, grad))
}

// ----- relation-row matching (shared core) -----

/// Row-distribution matching between two relation matrices of equal
/// shape: both sides are softened by `tau`, each row pair is compared
/// with KL(teacher || student), and rows are averaged. Returns the
/// gradient with respect to the student matrix:
/// (1 / (rows * tau)) * (p - q).
pub fn relation_row_loss(
    teacher: &Array2<f64>,
    student: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if teacher.dim() != student.dim() {
        return Err(shape_err(
            &[teacher.nrows(), teacher.ncols()],
            &[student.nrows(), student.ncols()],
        ));
    }
    let rows = teacher.nrows();
    if rows == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let q = softmax_rows(teacher, tau)?;
    let p = softmax_rows(student, tau)?;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(student.dim());
    for a in 0..rows {
        loss += kl_div(q.row(a).as_slice().unwrap(), p.row(a).as_slice().unwrap());
        for j in 0..teacher.ncols() {
            grad[[a, j]] = (p[[a, j]] - q[[a, j]]) / (rows as f64 * tau);
        }
    }
    loss /= rows as f64;
    Ok((ensure_finite("relation_row_loss", loss)?, grad))
}

/// Pairwise pixel-affinity matching inside one instance: the relation
/// matrices are pixel-by-pixel similarity maps of a single image from
/// teacher and student.
pub fn instance_internal_loss(
    m_teacher: &Array2<f64>,
    m_student: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    relation_row_loss(m_teacher, m_student, tau)
}

// ----- cross-instance pixel relations -----

/// Pixel relations across every ordered pair of instances in the batch,
/// the diagonal pairs included. Features are (N, A, C) with rows
/// already normalized; the relation for a pair (i, j) is F_i F_j^T.
/// Returns the gradient with respect to the student features.
pub fn instance_set_loss(
    f_teacher: &Array3<f64>,
    f_student: &Array3<f64>,
    tau: f64,
) -> Result<(f64, Array3<f64>)> {
    if f_teacher.dim() != f_student.dim() {
        let (a, b, c) = f_teacher.dim();
        let (d, e, f) = f_student.dim();
        return Err(shape_err(&[a, b, c], &[d, e, f]));
    }
    let (n, _a, _c) = f_teacher.dim();
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let pairs = (n * n) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros(f_student.dim());
    for i in 0..n {
        let ft_i = f_teacher.index_axis(Axis(0), i);
        let fs_i = f_student.index_axis(Axis(0), i);
        for j in 0..n {
            let ft_j = f_teacher.index_axis(Axis(0), j);
            let fs_j = f_student.index_axis(Axis(0), j);
            let r_t = ft_i.dot(&ft_j.t());
            let r_s = fs_i.dot(&fs_j.t());
            let (l, g) = relation_row_loss(&r_t, &r_s, tau)?;
            loss += l / pairs;
            // R = F_i F_j^T: dF_i += G F_j, dF_j += G^T F_i.
            let gi = g.dot(&fs_j);
            let gj = g.t().dot(&fs_i);
            let mut grad_i = grad.index_axis_mut(Axis(0), i);
            grad_i += &gi.mapv(|v| v / pairs);
            let mut grad_j = grad.index_axis_mut(Axis(0), j);
            grad_j += &gj.mapv(|v| v / pairs);
        }
    }
    Ok((ensure_finite("instance_set_loss", loss)?, grad))
}

/// Pixel relations against a bank of stored teacher pixel embeddings:
/// for each instance, P = F E^T with E the (V, C) bank, rows matched as
/// in `relation_row_loss`, averaged over the batch. The student input
/// is the projected student feature map; the gradient is with respect
/// to it.
pub fn memory_loss(
    f_teacher: &Array3<f64>,
    f_student: &Array3<f64>,
    bank: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array3<f64>)> {
    if f_teacher.dim() != f_student.dim() {
        let (a, b, c) = f_teacher.dim();
        let (d, e, f) = f_student.dim();
        return Err(shape_err(&[a, b, c], &[d, e, f]));
    }
    let (n, _a, c) = f_teacher.dim();
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    if bank.ncols() != c {
        return Err(Error::DimMismatch {
            expected: c,
            actual: bank.ncols(),
        });
    }
    if bank.nrows() == 0 {
        return Err(Error::QueueNotReady { need: 1, have: 0 });
    }
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros(f_student.dim());
    for i in 0..n {
        let p_t = f_teacher.index_axis(Axis(0), i).dot(&bank.t());
        let p_s = f_student.index_axis(Axis(0), i).dot(&bank.t());
        let (l, g) = relation_row_loss(&p_t, &p_s, tau)?;
        loss += l / n as f64;
        // P = F E^T: dF = G E.
        let gf = g.dot(bank);
        let mut grad_i = grad.index_axis_mut(Axis(0), i);
        grad_i += &gf.mapv(|v| v / n as f64);
    }
    Ok((ensure_finite("memory_loss", loss)?, grad))
}

// ----- tape wiring -----

fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d value")
        .to_owned()
}

fn as3(v: &ArrayD<f64>) -> Array3<f64> {
    v.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a 3-d value")
        .to_owned()
}

/// Records the step-matching loss on the tape with its closed-form
/// gradient flowing into `pred`.
pub fn step_match_on_tape(
    tape: &Tape,
    schedule: &NoiseSchedule,
    pred: Var,
    target: &ArrayD<f64>,
    ts: &[f64],
    rule: OmegaRule,
) -> Result<Var> {
    let (value, grad) = step_match_loss(schedule, &tape.value(pred), target, ts, rule)?;
    Ok(tape.custom_scalar(value, pred, grad))
}

pub fn pooled_feature_on_tape(
    tape: &Tape,
    teacher: &Array2<f64>,
    student: Var,
    tau: f64,
) -> Result<Var> {
    let s = as2(&tape.value(student));
    let (value, grad) = pooled_feature_loss(teacher, &s, tau)?;
    Ok(tape.custom_scalar(value, student, grad.into_dyn()))
}

pub fn instance_set_on_tape(
    tape: &Tape,
    f_teacher: &Array3<f64>,
    f_student: Var,
    tau: f64,
) -> Result<Var> {
    let s = as3(&tape.value(f_student));
    let (value, grad) = instance_set_loss(f_teacher, &s, tau)?;
    Ok(tape.custom_scalar(value, f_student, grad.into_dyn()))
}

pub fn memory_on_tape(
    tape: &Tape,
    f_teacher: &Array3<f64>,
    f_student: Var,
    bank: &Array2<f64>,
    tau: f64,
) -> Result<Var> {
    let s = as3(&tape.value(f_student));
    let (value, grad) = memory_loss(f_teacher, &s, bank, tau)?;
    Ok(tape.custom_scalar(value, f_student, grad.into_dyn()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{central_diff, rel_err, stream_rng};
    use ndarray::{arr2, IxDyn};
    use rand::Rng;

    fn rand2(rng: &mut rand_chacha::ChaCha12Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
    }

    fn rand3(rng: &mut rand_chacha::ChaCha12Rng, n: usize, a: usize, c: usize) -> Array3<f64> {
        Array3::from_shape_fn((n, a, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_tau() {
        let x = arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let p1 = softmax_rows(&x, 1.0).unwrap();
        for i in 0..2 {
            let s: f64 = p1.row(i).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Higher temperature flattens the distribution.
        let p5 = softmax_rows(&x, 5.0).unwrap();
        assert!(p5[[0, 2]] < p1[[0, 2]]);
        assert!(p5[[0, 0]] > p1[[0, 0]]);
        assert!(matches!(
            softmax_rows(&x, 0.0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(softmax_rows(&x, -1.0).is_err());
    }

    #[test]
    fn kl_zero_iff_equal_and_nonnegative() {
        let q = [0.2, 0.5, 0.3];
        assert_eq!(kl_div(&q, &q), 0.0);
        let p = [0.3, 0.4, 0.3];
        assert!(kl_div(&q, &p) > 0.0);
        // Zero mass in q contributes nothing even where p is tiny.
        let q0 = [0.0, 1.0];
        let p0 = [1e-300, 1.0];
        assert!(kl_div(&q0, &p0).abs() < 1e-12);
    }

    #[test]
    fn snr_weight_truncates_at_one() {
        let sched = NoiseSchedule::cosine();
        // Below the crossover t = 0.5 the ratio dominates.
        let w = truncated_snr_weight(&sched, 0.25).unwrap();
        let expected = 3.0 + 2.0 * (2.0f64).sqrt(); // cot^2(pi/8)
        assert!((w - expected).abs() < 1e-9);
        // Above the crossover the floor takes over. At the crossover
        // itself snr is 1 up to rounding.
        assert_eq!(truncated_snr_weight(&sched, 0.75).unwrap(), 1.0);
        assert!((truncated_snr_weight(&sched, 0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            truncated_snr_weight(&sched, 0.0),
            Err(Error::InvalidTime { .. })
        ));
    }

    #[test]
    fn step_match_matches_naive_loops() {
        let sched = NoiseSchedule::cosine();
        let mut rng = stream_rng(21, "noise");
        let pred = ArrayD::from_shape_fn(IxDyn(&[3, 1, 2, 2]), |_| rng.random_range(-1.0..1.0));
        let target = ArrayD::from_shape_fn(IxDyn(&[3, 1, 2, 2]), |_| rng.random_range(-1.0..1.0));
        let ts = [0.25, 0.5, 1.0];
        let (loss, grad) = step_match_loss(&sched, &pred, &target, &ts, OmegaRule::TruncatedSnr).unwrap();

        let mut want = 0.0;
        for (i, &t) in ts.iter().enumerate() {
            let snr = {
                let a = (std::f64::consts::FRAC_PI_2 * t).cos();
                let s = (std::f64::consts::FRAC_PI_2 * t).sin();
                (a * a) / (s * s)
            };
            let w = snr.max(1.0);
            let mut sq = 0.0;
            for e in 0..4 {
                let p = pred.as_slice().unwrap()[i * 4 + e];
                let q = target.as_slice().unwrap()[i * 4 + e];
                sq += (p - q) * (p - q);
            }
            want += w * sq / 4.0;
        }
        want /= 3.0;
        assert!((loss - want).abs() < 1e-12);

        // Gradient against finite differences.
        for idx in 0..pred.len() {
            let fd = central_diff(
                |v| {
                    let mut p = pred.clone();
                    p.as_slice_mut().unwrap()[idx] = v;
                    step_match_loss(&sched, &p, &target, &ts, OmegaRule::TruncatedSnr).unwrap().0
                },
                pred.as_slice().unwrap()[idx],
                1e-5,
            );
            let an = grad.as_slice().unwrap()[idx];
            assert!(rel_err(an, fd, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn step_match_rejects_t_zero() {
        let sched = NoiseSchedule::cosine();
        let pred = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        assert!(step_match_loss(&sched, &pred, &pred.clone(), &[0.0], OmegaRule::TruncatedSnr).is_err());
        assert!(step_match_loss(&sched, &pred, &pred.clone(), &[0.0], OmegaRule::Unit).is_err());
    }

    #[test]
    fn unit_rule_gives_plain_mse() {
        let sched = NoiseSchedule::cosine();
        let mut rng = stream_rng(22, "noise");
        let pred = ArrayD::from_shape_fn(IxDyn(&[2, 1, 2, 2]), |_| rng.random_range(-1.0..1.0));
        let target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 2, 2]), |_| rng.random_range(-1.0..1.0));
        // Low times where snr > 1, so the rules genuinely differ.
        let ts = [0.2, 0.3];
        let (unit, _) = step_match_loss(&sched, &pred, &target, &ts, OmegaRule::Unit).unwrap();
        let mse: f64 = pred
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 8.0;
        assert!((unit - mse).abs() < 1e-12);
        let (snr, _) = step_match_loss(&sched, &pred, &target, &ts, OmegaRule::TruncatedSnr).unwrap();
        assert!(snr > unit);
    }

    #[test]
    fn pooled_feature_hand_example() {
        // teacher logits [ln 4, 0] at tau 1 give q = (0.8, 0.2);
        // student zeros give p = (0.5, 0.5).
        let t = arr2(&[[4.0f64.ln(), 0.0]]);
        let s = arr2(&[[0.0, 0.0]]);
        let (loss, grad) = pooled_feature_loss(&t, &s, 1.0).unwrap();
        let want = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((grad[[0, 0]] - (0.5 - 0.8)).abs() < 1e-12);
        assert!((grad[[0, 1]] - (0.5 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn pooled_feature_gradient_fd() {
        let mut rng = stream_rng(22, "noise");
        for trial in 0..5 {
            let (n, d) = (2 + trial % 3, 3 + trial % 4);
            let teacher = rand2(&mut rng, n, d);
            let student = rand2(&mut rng, n, d);
            let tau = [0.5, 0.9, 1.0, 2.0][trial % 4];
            let (_, grad) = pooled_feature_loss(&teacher, &student, tau).unwrap();
            for idx in 0..student.len() {
                let fd = central_diff(
                    |v| {
                        let mut s = student.clone();
                        s.as_slice_mut().unwrap()[idx] = v;
                        pooled_feature_loss(&teacher, &s, tau).unwrap().0
                    },
                    student.as_slice().unwrap()[idx],
                    1e-5,
                );
                let an = grad.as_slice().unwrap()[idx];
                assert!(rel_err(an, fd, 1e-8) < 1e-6, "trial {trial} idx {idx}");
            }
        }
    }

    #[test]
    fn relation_row_zero_at_equality_with_zero_gradient() {
        let mut rng = stream_rng(23, "noise");
        let m = rand2(&mut rng, 4, 4);
        let (loss, grad) = relation_row_loss(&m, &m.clone(), 0.7).unwrap();
        assert!(loss.abs() < 1e-14);
        for g in grad.iter() {
            assert!(g.abs() < 1e-14);
        }
    }

    #[test]
    fn relation_row_gradient_fd_includes_temperature() {
        let mut rng = stream_rng(24, "noise");
        for &tau in &[0.4, 1.0, 2.5] {
            let teacher = rand2(&mut rng, 3, 5);
            let student = rand2(&mut rng, 3, 5);
            let (_, grad) = relation_row_loss(&teacher, &student, tau).unwrap();
            for idx in 0..student.len() {
                let fd = central_diff(
                    |v| {
                        let mut s = student.clone();
                        s.as_slice_mut().unwrap()[idx] = v;
                        relation_row_loss(&teacher, &s, tau).unwrap().0
                    },
                    student.as_slice().unwrap()[idx],
                    1e-5,
                );
                let an = grad.as_slice().unwrap()[idx];
                assert!(rel_err(an, fd, 1e-8) < 1e-6, "tau {tau} idx {idx}");
            }
        }
    }

    #[test]
    fn instance_set_matches_pair_loop_oracle() {
        let mut rng = stream_rng(25, "noise");
        let (n, a, c) = (3, 4, 3);
        let ft = rand3(&mut rng, n, a, c);
        let fs = rand3(&mut rng, n, a, c);
        let tau = 0.8;
        let (loss, _) = instance_set_loss(&ft, &fs, tau).unwrap();

        // Oracle: explicit loops over ordered pairs, rows, and entries.
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..n {
                for row in 0..a {
                    // relation row: dot of pixel `row` of instance i
                    // with every pixel of instance j.
                    let mut rt = vec![0.0; a];
                    let mut rs = vec![0.0; a];
                    for col in 0..a {
                        for k in 0..c {
                            rt[col] += ft[[i, row, k]] * ft[[j, col, k]];
                            rs[col] += fs[[i, row, k]] * fs[[j, col, k]];
                        }
                    }
                    let soft = |v: &[f64]| {
                        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
                        let z: f64 = e.iter().sum();
                        e.into_iter().map(|x| x / z).collect::<Vec<f64>>()
                    };
                    let q = soft(&rt);
                    let p = soft(&rs);
                    let mut kl = 0.0;
                    for k in 0..a {
                        if q[k] > 0.0 {
                            kl += q[k] * (q[k].ln() - p[k].max(1e-12).ln());
                        }
                    }
                    want += kl / a as f64;
                }
            }
        }
        want /= (n * n) as f64;
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn instance_set_gradient_fd() {
        let mut rng = stream_rng(26, "noise");
        let (n, a, c) = (2, 3, 2);
        let ft = rand3(&mut rng, n, a, c);
        let fs = rand3(&mut rng, n, a, c);
        let tau = 1.0;
        let (_, grad) = instance_set_loss(&ft, &fs, tau).unwrap();
        for idx in 0..fs.len() {
            let fd = central_diff(
                |v| {
                    let mut s = fs.clone();
                    s.as_slice_mut().unwrap()[idx] = v;
                    instance_set_loss(&ft, &s, tau).unwrap().0
                },
                fs.as_slice().unwrap()[idx],
                1e-5,
            );
            let an = grad.as_slice().unwrap()[idx];
            assert!(rel_err(an, fd, 1e-8) < 1e-6, "idx {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn memory_loss_matches_loop_oracle_and_fd() {
        let mut rng = stream_rng(27, "noise");
        let (n, a, c, v) = (2, 3, 4, 5);
        let ft = rand3(&mut rng, n, a, c);
        let fs = rand3(&mut rng, n, a, c);
        let bank = rand2(&mut rng, v, c);
        let tau = 0.6;
        let (loss, grad) = memory_loss(&ft, &fs, &bank, tau).unwrap();

        let mut want = 0.0;
        for i in 0..n {
            for row in 0..a {
                let mut pt = vec![0.0; v];
                let mut ps = vec![0.0; v];
                for col in 0..v {
                    for k in 0..c {
                        pt[col] += ft[[i, row, k]] * bank[[col, k]];
                        ps[col] += fs[[i, row, k]] * bank[[col, k]];
                    }
                }
                let soft = |vals: &[f64]| {
                    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = vals.iter().map(|x| ((x - m) / tau).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(|x| x / z).collect::<Vec<f64>>()
                };
                let q = soft(&pt);
                let p = soft(&ps);
                for k in 0..v {
                    if q[k] > 0.0 {
                        want += q[k] * (q[k].ln() - p[k].max(1e-12).ln()) / (n * a) as f64;
                    }
                }
            }
        }
        assert!((loss - want).abs() < 1e-12);

        for idx in 0..fs.len() {
            let fd = central_diff(
                |x| {
                    let mut s = fs.clone();
                    s.as_slice_mut().unwrap()[idx] = x;
                    memory_loss(&ft, &s, &bank, tau).unwrap().0
                },
                fs.as_slice().unwrap()[idx],
                1e-5,
            );
            let an = grad.as_slice().unwrap()[idx];
            assert!(rel_err(an, fd, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn memory_loss_rejects_empty_bank_and_bad_dims() {
        let ft = Array3::zeros((1, 2, 3));
        let fs = Array3::zeros((1, 2, 3));
        let empty = Array2::zeros((0, 3));
        assert!(matches!(
            memory_loss(&ft, &fs, &empty, 1.0),
            Err(Error::QueueNotReady { .. })
        ));
        let wrong = Array2::zeros((4, 2));
        assert!(memory_loss(&ft, &fs, &wrong, 1.0).is_err());
    }

    #[test]
    fn tape_wiring_routes_gradients_to_student_only() {
        let mut rng = stream_rng(28, "noise");
        let ft = rand3(&mut rng, 2, 3, 2);
        let fs = rand3(&mut rng, 2, 3, 2);
        let tape = Tape::new();
        let teacher_var = tape.constant(ft.clone().into_dyn());
        let student_var = tape.leaf(fs.clone().into_dyn());
        let loss = instance_set_on_tape(&tape, &ft, student_var, 1.0).unwrap();
        let grads = tape.backward(loss);
        assert!(grads.wrt(teacher_var).is_none());
        let g = grads.wrt(student_var).unwrap();
        let (_, want) = instance_set_loss(&ft, &fs, 1.0).unwrap();
        for (a, b) in g.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn losses_reject_shape_mismatch() {
        let a2 = Array2::<f64>::zeros((2, 3));
        let b2 = Array2::<f64>::zeros((3, 2));
        assert!(pooled_feature_loss(&a2, &b2, 1.0).is_err());
        assert!(relation_row_loss(&a2, &b2, 1.0).is_err());
        let a3 = Array3::<f64>::zeros((1, 2, 3));
        let b3 = Array3::<f64>::zeros((2, 2, 3));
        assert!(instance_set_loss(&a3, &b3, 1.0).is_err());
    }

    #[test]
    fn softmax_named_examples() {
        // A constant row maps to the uniform distribution.
        let c = arr2(&[[3.7, 3.7, 3.7, 3.7]]);
        let p = softmax_rows(&c, 1.0).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // (0, ln 3) at tau = 1 gives (1/4, 3/4) exactly.
        let x = arr2(&[[0.0, 3.0f64.ln()]]);
        let p = softmax_rows(&x, 1.0).unwrap();
        assert!((p[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.75).abs() < 1e-12);
        // Very high temperature flattens toward the closed form
        // 1 / (1 + 3^(1/100)).
        let p = softmax_rows(&x, 100.0).unwrap();
        let expect = 1.0 / (1.0 + 3.0f64.powf(0.01));
        assert!((p[[0, 0]] - expect).abs() < 1e-12);
        // Non-finite input is rejected.
        let bad = arr2(&[[f64::NAN, 0.0]]);
        assert!(matches!(softmax_rows(&bad, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn high_temperature_limit_approaches_uniform() {
        // At tau = 100 a relation row (entries in [-1,1], length A) sits
        // within spread / (tau * A) of uniform. At A = 64 even the
        // adversarial half-and-half vector lands within 1e-3.
        let mut worst = arr2(&[[0.0; 64]]);
        for j in 0..64 {
            worst[[0, j]] = if j < 32 { -1.0 } else { 1.0 };
        }
        let mut rng = stream_rng(93, "noise");
        let mut cases = vec![worst];
        for _ in 0..20 {
            cases.push(Array2::from_shape_fn((1, 64), |_| rng.random_range(-1.0..1.0)));
        }
        for x in &cases {
            let p = softmax_rows(x, 100.0).unwrap();
            for v in p.iter() {
                assert!((v - 1.0 / 64.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn kl_divergence_named_example_and_validation() {
        // KL((1,0) || (1/2,1/2)) = ln 2.
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            kl_divergence(&[0.6, 0.6], &[0.5, 0.5]),
            Err(Error::NotProbability(_))
        ));
        assert!(kl_divergence(&[0.5, 0.5], &[-0.1, 1.1]).is_err());
    }

    #[test]
    fn spatial_relation_is_row_against_row_dots() {
        let f = arr2(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let g = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let r = spatial_relation(&f, &g).unwrap();
        assert_eq!(r.dim(), (3, 2));
        assert_eq!(r[[0, 0]], 0.0);
        assert_eq!(r[[0, 1]], 1.0);
        assert!((r[[2, 0]] - 0.8).abs() < 1e-15);
        assert!((r[[2, 1]] - 0.6).abs() < 1e-15);
        let bad = arr2(&[[1.0, 2.0, 3.0]]);
        assert!(matches!(
            spatial_relation(&f, &bad),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn high_temperature_shrinks_relation_losses() {
        // With tau >= 100 on inputs bounded by 1 the softened rows are
        // nearly uniform on both sides, so the relation losses collapse.
        let mut rng = stream_rng(91, "noise");
        let ft = Array3::from_shape_fn((3, 4, 2), |_| rng.random_range(-1.0..1.0));
        let fs = Array3::from_shape_fn((3, 4, 2), |_| rng.random_range(-1.0..1.0));
        let (ii_hot, _) = instance_set_loss(&ft, &fs, 100.0).unwrap();
        let (ii_cold, _) = instance_set_loss(&ft, &fs, 1.0).unwrap();
        assert!(ii_hot < 1e-4, "ii at tau=100 was {ii_hot}");
        assert!(ii_hot < ii_cold);
        let bank = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let (m_hot, _) = memory_loss(&ft, &fs, &bank, 100.0).unwrap();
        assert!(m_hot < 1e-4, "m at tau=100 was {m_hot}");
    }

    #[test]
    fn batch_of_one_instance_set_reduces_to_single_relation() {
        let mut rng = stream_rng(92, "noise");
        let ft = rand3(&mut rng, 1, 5, 3);
        let fs = rand3(&mut rng, 1, 5, 3);
        let (ii, _) = instance_set_loss(&ft, &fs, 0.8).unwrap();
        let rt = ft.index_axis(Axis(0), 0).dot(&ft.index_axis(Axis(0), 0).t());
        let rs = fs.index_axis(Axis(0), 0).dot(&fs.index_axis(Axis(0), 0).t());
        let (single, _) = relation_row_loss(&rt, &rs, 0.8).unwrap();
        assert!((ii - single).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_arithmetic_and_validation() {
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.1,
            ..LossWeights::default()
        };
        let total = combined_loss(1.0, 0.5, 0.2, &w).unwrap();
        assert!((total - 1.52).abs() < 1e-12);
        let w100 = LossWeights {
            alpha: 100.0,
            beta: 0.1,
            ..LossWeights::default()
        };
        let total = combined_loss(1.0, 0.01, 0.2, &w100).unwrap();
        assert!((total - 2.02).abs() < 1e-12);
        assert!(matches!(
            combined_loss(-0.5, 0.0, 0.0, &w),
            Err(Error::NegativeComponent { .. })
        ));
        assert!(matches!(
            combined_loss(f64::NAN, 0.0, 0.0, &w),
            Err(Error::NonFinite(_))
        ));
        let bad = LossWeights {
            tau_pooled: 0.0,
            ..LossWeights::default()
        };
        assert!(combined_loss(1.0, 0.0, 0.0, &bad).is_err());
    }
}
