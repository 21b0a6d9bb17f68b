//! Sample-quality evaluation: streaming feature statistics, the
//! Fréchet distance between feature Gaussians, the inception-style
//! class-entropy score, and the harness that samples a model and
//! reports both metrics.
//!
//! Desk-scale caveat: features and class probabilities come from the
//! small pretrained classifier, not a large pretrained network, so
//! absolute values are comparable only within this codebase. Orderings
//! and trends are the meaningful output.

use crate::error::{Error, Result};
use crate::features::{ConvClassifier, FeatureExtractor};
use crate::losses::kl_div;
use crate::schedule::{ddim_sample, sample_noise, Denoiser, NoiseSchedule};
use crate::util::{stream_rng, TensorData};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ----- feature statistics -----

#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    /// Unbiased covariance.
    pub cov: Array2<f64>,
    pub count: usize,
}

/// Welford accumulator: one pass, O(C^2) memory regardless of sample
/// count.
pub struct StatsAccumulator {
    mean: Array1<f64>,
    m2: Array2<f64>,
    count: usize,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            m2: Array2::zeros((dim, dim)),
            count: 0,
        }
    }

    pub fn push(&mut self, x: &Array1<f64>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean.scaled_add(1.0 / self.count as f64, &delta);
        let delta2 = x - &self.mean;
        // m2 += delta (outer) delta2
        for i in 0..delta.len() {
            for j in 0..delta.len() {
                self.m2[[i, j]] += delta[i] * delta2[j];
            }
        }
    }

    pub fn push_rows(&mut self, rows: &Array2<f64>) {
        for r in rows.rows() {
            self.push(&r.to_owned());
        }
    }

    pub fn finish(self) -> Result<FeatureStats> {
        if self.count < 2 {
            return Err(Error::TooFewSamples {
                need: 2,
                got: self.count,
            });
        }
        let cov = self.m2.mapv(|v| v / (self.count - 1) as f64);
        Ok(FeatureStats {
            mean: self.mean,
            cov,
            count: self.count,
        })
    }
}

/// Mean and unbiased covariance of feature rows (samples x dim).
pub fn stats_from_features(rows: &Array2<f64>) -> Result<FeatureStats> {
    let mut acc = StatsAccumulator::new(rows.ncols());
    acc.push_rows(rows);
    acc.finish()
}

/// Streams a dataset through the extractor's pooled features in
/// batches.
pub fn collect_stats(
    extr: &dyn FeatureExtractor,
    images: &Array4<f64>,
    batch: usize,
) -> Result<FeatureStats> {
    let n = images.dim().0;
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let batch = batch.max(1);
    let mut acc = StatsAccumulator::new(extr.feature_dim());
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let chunk = images.slice_axis(Axis(0), ndarray::Slice::from(start..end));
        let pooled = extr.pooled(&chunk.to_owned().into_dyn());
        acc.push_rows(&pooled);
        start = end;
    }
    acc.finish()
}

// ----- Fréchet distance -----

fn check_symmetric(m: &Array2<f64>, tol: f64) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[[i, j]] - m[[j, i]]).abs() > tol {
                return Err(Error::Config(format!(
                    "covariance asymmetric at ({i},{j}): {} vs {}",
                    m[[i, j]],
                    m[[j, i]]
                )));
            }
        }
    }
    Ok(())
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [-tol, 0) are clamped to 0; below -tol the input is rejected.
fn psd_sqrt(m: &Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    let d = m.nrows();
    let sym = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut min_eig = f64::INFINITY;
    for &v in eig.eigenvalues.iter() {
        min_eig = min_eig.min(v);
    }
    if min_eig < -tol {
        return Err(Error::NotPsd {
            min_eigenvalue: min_eig,
        });
    }
    let mut out = Array2::<f64>::zeros((d, d));
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] += lam * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    Ok(out)
}

/// ||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)),
/// computed through the symmetric product sqrt(A) B sqrt(A) so the
/// square root stays real. Tiny negative eigenvalue artifacts up to
/// 1e-6 are clamped; worse violations are diagnostic errors.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimMismatch {
            expected: a.mean.len(),
            actual: b.mean.len(),
        });
    }
    check_symmetric(&a.cov, 1e-8)?;
    check_symmetric(&b.cov, 1e-8)?;
    let tol = 1e-6;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = psd_sqrt(&a.cov, tol)?;
    // tr((A B)^(1/2)) = tr((sqrt(A) B sqrt(A))^(1/2)) for PSD A, B.
    let inner = sa.dot(&b.cov).dot(&sa);
    let sqrt_inner = psd_sqrt(&inner, tol)?;
    let trace = |m: &Array2<f64>| -> f64 { (0..m.nrows()).map(|i| m[[i, i]]).sum() };
    let fd = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * trace(&sqrt_inner);
    // Exact self-distance is 0; float noise may dip a hair below.
    Ok(fd.max(0.0))
}

// ----- inception-style score -----

/// exp(mean_i KL(p_i || mean_j p_j)) over each of `splits` contiguous
/// chunks, averaged. Rows must be probability vectors; the row count
/// must divide evenly into the splits.
pub fn inception_score(probs: &Array2<f64>, splits: usize) -> Result<f64> {
    let (m, _l) = probs.dim();
    if splits == 0 || m == 0 || m % splits != 0 {
        return Err(Error::Config(format!(
            "{m} rows cannot form {splits} equal splits"
        )));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::NotProbability(format!("row {i} sums to {sum}")));
        }
    }
    let chunk = m / splits;
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = probs.slice_axis(Axis(0), ndarray::Slice::from(s * chunk..(s + 1) * chunk));
        let marginal = part.mean_axis(Axis(0)).expect("nonempty chunk");
        let mut mean_kl = 0.0;
        for row in part.rows() {
            mean_kl += kl_div(
                row.as_slice().expect("contiguous row"),
                marginal.as_slice().expect("contiguous marginal"),
            );
        }
        mean_kl /= chunk as f64;
        scores.push(mean_kl.exp());
    }
    Ok(scores.iter().sum::<f64>() / splits as f64)
}

// ----- model evaluation harness -----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub fid: f64,
    pub inception: f64,
    pub steps: u32,
    pub n_samples: usize,
    pub seed: u64,
}

/// Samples `n_samples` images with the deterministic sampler at the
/// given step count and scores them against the reference statistics.
/// Each sample draws its noise (and label, for conditional models)
/// from a seed derived per sample index, so results do not depend on
/// the batch size.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    steps: u32,
    n_samples: usize,
    clf: &ConvClassifier,
    reference: &FeatureStats,
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    if n_samples < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: n_samples,
        });
    }
    if reference.mean.len() != clf.feature_dim() {
        return Err(Error::DimMismatch {
            expected: clf.feature_dim(),
            actual: reference.mean.len(),
        });
    }
    let (c, h, w) = model.image_shape();
    if clf.cfg.in_channels != c || clf.cfg.image_hw != h || clf.cfg.image_hw != w {
        return Err(Error::Config(format!(
            "classifier expects {}x{}x{}, model produces {c}x{h}x{w}",
            clf.cfg.in_channels, clf.cfg.image_hw, clf.cfg.image_hw
        )));
    }
    let batch = batch.max(1);
    let mut acc = StatsAccumulator::new(clf.feature_dim());
    let mut probs = Array2::<f64>::zeros((n_samples, clf.cfg.num_classes));
    let mut start = 0;
    while start < n_samples {
        let end = (start + batch).min(n_samples);
        let bn = end - start;
        let mut z = ArrayD::<f64>::zeros(IxDyn(&[bn, c, h, w]));
        let mut labels = Vec::with_capacity(bn);
        for i in 0..bn {
            let mut rng = stream_rng(seed, &format!("sample/{}", start + i));
            z.index_axis_mut(Axis(0), i)
                .assign(&sample_noise(&mut rng, &[c, h, w]));
            if let Some(classes) = model.num_classes() {
                labels.push(rand::Rng::random_range(&mut rng, 0..classes));
            }
        }
        let label_arg = if labels.is_empty() {
            None
        } else {
            Some(labels.as_slice())
        };
        let images = ddim_sample(schedule, model, &z, steps, label_arg)?;
        acc.push_rows(&clf.pooled(&images));
        probs
            .slice_axis_mut(Axis(0), ndarray::Slice::from(start..end))
            .assign(&clf.probs(&images));
        start = end;
    }
    let generated = acc.finish()?;
    let fid = frechet_distance(&generated, reference)?;
    let inception = inception_score(&probs, 1)?;
    Ok(EvalReport {
        fid,
        inception,
        steps,
        n_samples,
        seed,
    })
}

// ----- reference-statistics cache -----

#[derive(Serialize, Deserialize)]
struct StatsFile {
    format: String,
    version: u32,
    dataset: String,
    extractor_checksum: String,
    count: usize,
    mean: TensorData,
    cov: TensorData,
}

const STATS_FORMAT: &str = "rdd-feature-stats";
const STATS_VERSION: u32 = 1;

/// Cache file name for a (dataset, extractor) pair.
pub fn stats_cache_name(dataset: &str, extractor_checksum: &str) -> String {
    let tag: String = extractor_checksum.chars().take(12).collect();
    format!("stats-{dataset}-{tag}.json")
}

pub fn save_stats(
    path: &Path,
    stats: &FeatureStats,
    dataset: &str,
    extractor_checksum: &str,
) -> Result<()> {
    let file = StatsFile {
        format: STATS_FORMAT.into(),
        version: STATS_VERSION,
        dataset: dataset.into(),
        extractor_checksum: extractor_checksum.into(),
        count: stats.count,
        mean: TensorData::from_array(&stats.mean.clone().into_dyn()),
        cov: TensorData::from_array(&stats.cov.clone().into_dyn()),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads cached statistics if they exist and were produced by the same
/// extractor; otherwise returns None.
pub fn load_stats(path: &Path, extractor_checksum: &str) -> Result<Option<FeatureStats>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let file: StatsFile = serde_json::from_str(&text)?;
    if file.format != STATS_FORMAT || file.version != STATS_VERSION {
        return Err(Error::Container(format!(
            "unexpected stats container {}/{}",
            file.format, file.version
        )));
    }
    if file.extractor_checksum != extractor_checksum {
        return Ok(None);
    }
    let mean = file.mean.to_array()?.into_dimensionality().map_err(|_| {
        Error::Container("stats mean is not 1-d".into())
    })?;
    let cov = file.cov.to_array()?.into_dimensionality().map_err(|_| {
        Error::Container("stats covariance is not 2-d".into())
    })?;
    Ok(Some(FeatureStats {
        mean,
        cov,
        count: file.count,
    }))
}
