//! Datasets for training and evaluation: an in-memory image store, a
//! synthetic shapes generator for desk-scale runs, loaders for the
//! CIFAR-10 binary batch layout and plain image directories, a seeded
//! epoch sampler, and holdout splitting.
//!
//! Images are (N, C, H, W) with values in [-1, 1].

use crate::error::{Error, Result};
use ndarray::{Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::fs;
use std::io::Read;
use std::path::Path;

pub struct Dataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = images.dim().0;
        if labels.len() != n {
            return Err(Error::Dataset(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Dataset("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.iter().any(|v| !v.is_finite() || *v < -1.0 - 1e-9 || *v > 1.0 + 1e-9) {
            return Err(Error::Dataset("pixel values must lie in [-1, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (C, H, W) of every image.
    pub fn resolution(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    /// Gathers the rows at `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(ArrayD<f64>, Vec<usize>)> {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::<f64>::zeros((idx.len(), c, h, w));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Dataset(format!(
                    "index {i} out of range for {} images",
                    self.len()
                )));
            }
            out.index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        Ok((out.into_dyn(), labels))
    }

    /// Splits off `frac` of the data (at least one image on each side)
    /// as a holdout set after a seeded shuffle.
    pub fn split_holdout(&self, frac: f64, rng: &mut ChaCha12Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&frac) || frac <= 0.0 {
            return Err(Error::Dataset(format!("holdout fraction {frac} not in (0, 1)")));
        }
        let n = self.len();
        let hold = ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1));
        if n < 2 {
            return Err(Error::TooFewSamples { need: 2, got: n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let take = |ids: &[usize]| -> Result<Dataset> {
            let (imgs, labels) = self.batch(ids)?;
            Dataset::new(
                imgs.into_dimensionality::<ndarray::Ix4>().expect("4-d batch"),
                labels,
                self.num_classes,
            )
        };
        let holdout = take(&order[..hold])?;
        let train = take(&order[hold..])?;
        Ok((train, holdout))
    }
}

// ----- synthetic shapes -----

/// Four-class synthetic single-channel dataset: filled disks, hollow
/// square frames, vertical stripes, and diagonal crosses, each with
/// jittered geometry and intensity so the distribution has honest
/// within-class variation. Pixels lie strictly inside [-1, 1].
pub fn toy_shapes(per_class: usize, hw: usize, rng: &mut ChaCha12Rng) -> Result<Dataset> {
    if per_class == 0 || hw < 8 {
        return Err(Error::Dataset(
            "toy dataset needs per_class >= 1 and hw >= 8".into(),
        ));
    }
    let n = per_class * 4;
    let mut images = Array4::<f64>::zeros((n, 1, hw, hw));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 4;
        labels.push(class);
        let bg = -0.9 + rng.random_range(-0.05..0.05);
        let fg = 0.9 + rng.random_range(-0.05..0.05);
        let mut img = images.index_axis_mut(Axis(0), i);
        img.fill(bg);
        let c = hw as f64 / 2.0;
        match class {
            0 => {
                // Filled disk, jittered center and radius.
                let cx = c + rng.random_range(-2.0..2.0);
                let cy = c + rng.random_range(-2.0..2.0);
                let r = rng.random_range(hw as f64 / 5.0..hw as f64 / 3.2);
                for y in 0..hw {
                    for x in 0..hw {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        if d <= r {
                            img[[0, y, x]] = fg;
                        }
                    }
                }
            }
            1 => {
                // Hollow square frame.
                let half = rng.random_range(hw as f64 / 4.0..hw as f64 / 2.6);
                let thick = rng.random_range(1.0..2.2);
                for y in 0..hw {
                    for x in 0..hw {
                        let dx = (x as f64 - c).abs();
                        let dy = (y as f64 - c).abs();
                        let outer = dx.max(dy);
                        if outer <= half && outer >= half - thick {
                            img[[0, y, x]] = fg;
                        }
                    }
                }
            }
            2 => {
                // Vertical stripes with random phase and period 4 or 5.
                let period = if rng.random_bool(0.5) { 4 } else { 5 };
                let phase = rng.random_range(0..period);
                for y in 0..hw {
                    for x in 0..hw {
                        if (x + phase) % period < period / 2 {
                            img[[0, y, x]] = fg;
                        }
                    }
                }
            }
            _ => {
                // Diagonal cross.
                let thick = rng.random_range(1.0..2.0);
                let off = rng.random_range(-1.5..1.5);
                for y in 0..hw {
                    for x in 0..hw {
                        let d1 = (y as f64 - x as f64 + off).abs();
                        let d2 = (y as f64 + x as f64 - (hw as f64 - 1.0) + off).abs();
                        if d1 <= thick || d2 <= thick {
                            img[[0, y, x]] = fg;
                        }
                    }
                }
            }
        }
        // Mild pixel noise, clamped to keep the [-1, 1] contract.
        for v in img.iter_mut() {
            *v = (*v + rng.random_range(-0.03..0.03)).clamp(-1.0, 1.0);
        }
    }
    Dataset::new(images, labels, 4)
}

// ----- CIFAR-10 binary batches -----

const CIFAR_RECORD: usize = 3073;
const CIFAR_HW: usize = 32;

/// Parses files in the CIFAR-10 binary layout: each record is one
/// label byte followed by 3072 bytes of red, green, then blue planes,
/// row-major 32x32.
pub fn load_cifar10_batches<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Dataset("no batch files given".into()));
    }
    let mut bytes = Vec::new();
    for p in paths {
        let mut f = fs::File::open(p.as_ref()).map_err(|e| {
            Error::Dataset(format!("cannot open {}: {e}", p.as_ref().display()))
        })?;
        f.read_to_end(&mut bytes)?;
    }
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "byte count {} is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Array4::<f64>::zeros((n, 3, CIFAR_HW, CIFAR_HW));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        for ch in 0..3 {
            for y in 0..CIFAR_HW {
                for x in 0..CIFAR_HW {
                    let b = rec[1 + ch * CIFAR_HW * CIFAR_HW + y * CIFAR_HW + x];
                    images[[i, ch, y, x]] = b as f64 / 127.5 - 1.0;
                }
            }
        }
    }
    Dataset::new(images, labels, 10)
}

/// Loads the `data_batch_*.bin` files (or `test_batch.bin`) under a
/// CIFAR-10 directory.
pub fn load_cifar10_dir(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    let pattern = match split {
        CifarSplit::Train => "data_batch_",
        CifarSplit::Test => "test_batch",
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "bin")
                && p.file_name()
                    .and_then(|f| f.to_str())
                    .is_some_and(|f| f.starts_with(pattern))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no {pattern}*.bin files under {}",
            dir.display()
        )));
    }
    load_cifar10_batches(&paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

// ----- image directories -----

/// Loads a directory whose immediate subdirectories are classes (in
/// sorted order) containing images of one shared resolution. `gray`
/// folds everything to a single channel; otherwise images load as RGB.
pub fn load_image_dir(dir: &Path, gray: bool) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no class subdirectories under {}",
            dir.display()
        )));
    }
    let channels = if gray { 1 } else { 3 };
    let mut raw: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut hw: Option<(usize, usize)> = None;
    for (class, cd) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(cd)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", cd.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", f.display())))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            match hw {
                None => hw = Some((h, w)),
                Some(expect) if expect != (h, w) => {
                    return Err(Error::Dataset(format!(
                        "{} is {h}x{w}, expected {}x{}",
                        f.display(),
                        expect.0,
                        expect.1
                    )));
                }
                _ => {}
            }
            let mut pixels = Vec::with_capacity(channels * h * w);
            if gray {
                let g = img.to_luma8();
                for y in 0..h {
                    for x in 0..w {
                        pixels.push(g.get_pixel(x as u32, y as u32).0[0] as f64 / 127.5 - 1.0);
                    }
                }
            } else {
                let rgb = img.to_rgb8();
                for ch in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            pixels
                                .push(rgb.get_pixel(x as u32, y as u32).0[ch] as f64 / 127.5 - 1.0);
                        }
                    }
                }
            }
            raw.push((class, pixels));
        }
    }
    let (h, w) = hw.ok_or_else(|| Error::Dataset("no images found".into()))?;
    let n = raw.len();
    let mut images = Array4::<f64>::zeros((n, channels, h, w));
    let mut labels = Vec::with_capacity(n);
    for (i, (class, pixels)) in raw.into_iter().enumerate() {
        labels.push(class);
        for (j, v) in pixels.into_iter().enumerate() {
            let ch = j / (h * w);
            let y = (j / w) % h;
            let x = j % w;
            images[[i, ch, y, x]] = v;
        }
    }
    let num_classes = class_dirs.len();
    Dataset::new(images, labels, num_classes)
}

// ----- epoch sampler -----

/// Yields fixed-size batches of indices, reshuffling at every epoch
/// boundary and dropping the final partial batch. Deterministic for a
/// fixed RNG stream.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::Dataset(format!(
                "batch size {batch} invalid for {n} images"
            )));
        }
        Ok(Self {
            n,
            batch,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn next(&mut self, rng: &mut ChaCha12Rng) -> Vec<usize> {
        if self.order.is_empty() || self.cursor + self.batch > self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }

    pub fn to_state(&self) -> SamplerState {
        SamplerState {
            n: self.n,
            batch: self.batch,
            order: self.order.clone(),
            cursor: self.cursor,
        }
    }

    pub fn from_state(state: &SamplerState) -> Result<Self> {
        if state.cursor > state.n || (!state.order.is_empty() && state.order.len() != state.n) {
            return Err(Error::Container("sampler state inconsistent".into()));
        }
        Ok(Self {
            n: state.n,
            batch: state.batch,
            order: state.order.clone(),
            cursor: state.cursor,
        })
    }
}

/// Mid-epoch position of a `BatchSampler`, for exact resume.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerState {
    pub n: usize,
    pub batch: usize,
    pub order: Vec<usize>,
    pub cursor: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use std::collections::HashSet;

    #[test]
    fn toy_shapes_contract() {
        let mut rng = stream_rng(40, "data");
        let ds = toy_shapes(5, 16, &mut rng).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.resolution(), (1, 16, 16));
        assert_eq!(ds.num_classes, 4);
        assert!(ds.images.iter().all(|v| (-1.0..=1.0).contains(v)));
        for class in 0..4 {
            let ids: Vec<usize> = (0..20).filter(|i| ds.labels[*i] == class).collect();
            assert_eq!(ids.len(), 5);
            // Jitter: two same-class images differ somewhere.
            let a = ds.images.index_axis(Axis(0), ids[0]);
            let b = ds.images.index_axis(Axis(0), ids[1]);
            assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 0.1));
        }
        // Determinism under the same stream.
        let mut rng2 = stream_rng(40, "data");
        let ds2 = toy_shapes(5, 16, &mut rng2).unwrap();
        assert_eq!(ds.images, ds2.images);
    }

    #[test]
    fn cifar_record_layout_parses() {
        let dir = tempfile::tempdir().unwrap();
        // Two records: label 3 with red plane 255 elsewhere 0, label 9
        // with blue plane 255.
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        for i in 0..1024 {
            bytes[1 + i] = 255;
        }
        bytes[CIFAR_RECORD] = 9;
        for i in 0..1024 {
            bytes[CIFAR_RECORD + 1 + 2048 + i] = 255;
        }
        let p = dir.path().join("data_batch_1.bin");
        fs::write(&p, &bytes).unwrap();
        let ds = load_cifar10_dir(dir.path(), CifarSplit::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.resolution(), (3, 32, 32));
        assert!((ds.images[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((ds.images[[0, 1, 0, 0]] + 1.0).abs() < 1e-12);
        assert!((ds.images[[1, 2, 5, 7]] - 1.0).abs() < 1e-12);
        assert!((ds.images[[1, 0, 5, 7]] + 1.0).abs() < 1e-12);
        // Truncated file is rejected.
        fs::write(dir.path().join("data_batch_2.bin"), [0u8; 100]).unwrap();
        assert!(load_cifar10_dir(dir.path(), CifarSplit::Train).is_err());
    }

    #[test]
    fn image_dir_loads_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (class, level) in [("a_first", 255u8), ("b_second", 0u8)] {
            let cd = dir.path().join(class);
            fs::create_dir(&cd).unwrap();
            for i in 0..2 {
                let img = image::GrayImage::from_pixel(8, 8, image::Luma([level]));
                img.save(cd.join(format!("img{i}.png"))).unwrap();
            }
        }
        let ds = load_image_dir(dir.path(), true).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.resolution(), (1, 8, 8));
        assert_eq!(ds.labels, vec![0, 0, 1, 1]);
        assert!((ds.images[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((ds.images[[2, 0, 0, 0]] + 1.0).abs() < 1e-12);
        // Mixed resolutions are rejected.
        let odd = image::GrayImage::from_pixel(4, 4, image::Luma([0]));
        odd.save(dir.path().join("a_first").join("odd.png")).unwrap();
        assert!(load_image_dir(dir.path(), true).is_err());
    }

    #[test]
    fn sampler_partitions_epochs_deterministically() {
        let mut s = BatchSampler::new(12, 4).unwrap();
        let mut rng = stream_rng(41, "data");
        let mut seen = HashSet::new();
        for _ in 0..3 {
            for i in s.next(&mut rng) {
                assert!(i < 12);
                assert!(seen.insert(i), "index {i} repeated within epoch");
            }
        }
        assert_eq!(seen.len(), 12);
        let mut s2 = BatchSampler::new(12, 4).unwrap();
        let mut rng2 = stream_rng(41, "data");
        let a: Vec<_> = (0..6).map(|_| s2.next(&mut rng2)).collect();
        let mut s3 = BatchSampler::new(12, 4).unwrap();
        let mut rng3 = stream_rng(41, "data");
        let b: Vec<_> = (0..6).map(|_| s3.next(&mut rng3)).collect();
        assert_eq!(a, b);
        assert!(BatchSampler::new(3, 4).is_err());
    }

    #[test]
    fn holdout_split_is_disjoint_and_complete() {
        let mut rng = stream_rng(42, "data");
        let ds = toy_shapes(10, 16, &mut rng).unwrap();
        let (train, hold) = ds.split_holdout(0.25, &mut rng).unwrap();
        assert_eq!(train.len() + hold.len(), 40);
        assert_eq!(hold.len(), 10);
        // Every image accounted for exactly once: match on the pixel
        // sum, unique with overwhelming probability under jitter.
        let key = |d: &Dataset, i: usize| {
            let s: f64 = d.images.index_axis(Axis(0), i).sum();
            (s * 1e9).round() as i64
        };
        let mut all: Vec<i64> = (0..40).map(|i| key(&ds, i)).collect();
        let mut parts: Vec<i64> = (0..train.len())
            .map(|i| key(&train, i))
            .chain((0..hold.len()).map(|i| key(&hold, i)))
            .collect();
        all.sort();
        parts.sort();
        assert_eq!(all, parts);
    }
}
