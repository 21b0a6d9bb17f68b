//! Shared small pieces: seeded RNG streams, serialization bridges for
//! tensors and RNG state, and the relative-error / finite-difference
//! helpers the gradient tests are built on.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Derives an independent RNG from a master seed and a purpose label.
///
/// Streams with different labels never overlap, so adding draws to one
/// consumer (say, the queue) cannot shift the values seen by another
/// (say, the noise sampler). That independence is what makes loss curves
/// comparable across method variants.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"/");
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Named RNG streams used across a run. One struct so call sites cannot
/// accidentally share a stream between purposes.
pub struct RngStreams {
    pub data: ChaCha12Rng,
    pub time: ChaCha12Rng,
    pub noise: ChaCha12Rng,
    pub queue: ChaCha12Rng,
    pub init: ChaCha12Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: stream_rng(seed, "data"),
            time: stream_rng(seed, "time"),
            noise: stream_rng(seed, "noise"),
            queue: stream_rng(seed, "queue"),
            init: stream_rng(seed, "init"),
        }
    }
}

/// Position of a ChaCha stream, enough to restore it exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha12Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Dynamic-shape tensor in a serde-friendly form. JSON round-trips f64
/// exactly, so checkpoints restore bit-identical weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array(a: &ArrayD<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> crate::Result<ArrayD<f64>> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(crate::Error::Container(format!(
                "tensor payload length {} does not match shape {:?}",
                self.data.len(),
                self.shape
            )));
        }
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| crate::Error::Container(e.to_string()))
    }
}

/// SHA-256 of a byte slice, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Relative error with an absolute floor: |a-b| / max(|a|, |b|, floor).
/// Values that are both below the floor compare equal.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Central finite difference of a scalar function at x0.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}
