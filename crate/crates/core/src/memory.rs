//! Fixed-capacity FIFO store of teacher pixel embeddings.
//!
//! During distillation, a few pixel rows per teacher feature map are
//! pushed each iteration; once enough rows have accumulated, random
//! subsets serve as the reference bank for the memory-based relation
//! loss. The queue is circular: when full, the oldest rows are
//! overwritten first. Only teacher embeddings are ever written, so the
//! bank is gradient-free by construction.

use crate::error::{Error, Result};
use crate::util::TensorData;
use ndarray::{Array2, Array3, Axis};
use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub struct PixelQueue {
    storage: Array2<f64>,
    capacity: usize,
    dim: usize,
    /// Next slot to write.
    cursor: usize,
    /// Number of valid rows, saturating at capacity.
    count: usize,
    /// Total rows ever pushed; drives the FIFO bookkeeping in tests.
    pushed: u64,
}

impl PixelQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(
                "queue capacity and embedding dim must be positive".into(),
            ));
        }
        Ok(Self {
            storage: Array2::zeros((capacity, dim)),
            capacity,
            dim,
            cursor: 0,
            count: 0,
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    /// True once at least `v` rows are available to sample.
    pub fn is_ready(&self, v: usize) -> bool {
        self.count >= v
    }

    /// Appends rows in order, overwriting the oldest entries when full.
    pub fn push(&mut self, rows: &Array2<f64>) -> Result<()> {
        if rows.ncols() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: rows.ncols(),
            });
        }
        for row in rows.rows() {
            self.storage.row_mut(self.cursor).assign(&row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.count = (self.count + 1).min(self.capacity);
            self.pushed += 1;
        }
        Ok(())
    }

    /// Pushes `k` pixel rows per image, chosen uniformly without
    /// replacement from each (A, C) map in the batch.
    pub fn push_from_maps(
        &mut self,
        maps: &Array3<f64>,
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        let (n, a, c) = maps.dim();
        if c != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: c,
            });
        }
        if k > a {
            return Err(Error::SampleCountExceedsPixels { k, a });
        }
        for i in 0..n {
            let map = maps.index_axis(Axis(0), i);
            let picks = index_sample(rng, a, k);
            let mut rows = Array2::zeros((k, c));
            for (out_row, src_row) in picks.into_iter().enumerate() {
                rows.row_mut(out_row).assign(&map.row(src_row));
            }
            self.push(&rows)?;
        }
        Ok(())
    }

    /// Draws `v` distinct stored rows uniformly without replacement.
    pub fn sample(&self, v: usize, rng: &mut ChaCha12Rng) -> Result<Array2<f64>> {
        if self.count < v {
            return Err(Error::QueueNotReady {
                need: v,
                have: self.count,
            });
        }
        let picks = index_sample(rng, self.count, v);
        let mut out = Array2::zeros((v, self.dim));
        for (out_row, logical) in picks.into_iter().enumerate() {
            out.row_mut(out_row).assign(&self.storage.row(self.slot(logical)));
        }
        Ok(out)
    }

    /// Physical slot of the logical row `i`, where logical order runs
    /// oldest to newest.
    fn slot(&self, i: usize) -> usize {
        debug_assert!(i < self.count);
        let oldest = (self.cursor + self.capacity - self.count) % self.capacity;
        (oldest + i) % self.capacity
    }

    /// Stored rows in logical order, oldest first.
    pub fn snapshot(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.count, self.dim));
        for i in 0..self.count {
            out.row_mut(i).assign(&self.storage.row(self.slot(i)));
        }
        out
    }

    /// Drops all contents; capacity and dim are kept.
    pub fn reset(&mut self) {
        self.cursor = 0;
        self.count = 0;
        self.pushed = 0;
    }

    pub fn to_state(&self) -> QueueState {
        QueueState {
            capacity: self.capacity,
            dim: self.dim,
            cursor: self.cursor,
            count: self.count,
            pushed: self.pushed,
            storage: TensorData::from_array(&self.storage.clone().into_dyn()),
        }
    }

    pub fn from_state(state: &QueueState) -> Result<Self> {
        let storage = state.storage.to_array()?;
        if storage.shape() != [state.capacity, state.dim] {
            return Err(Error::Container("queue storage shape mismatch".into()));
        }
        if state.count > state.capacity || state.cursor >= state.capacity.max(1) {
            return Err(Error::Container("queue indices out of range".into()));
        }
        Ok(Self {
            storage: storage.into_dimensionality().unwrap(),
            capacity: state.capacity,
            dim: state.dim,
            cursor: state.cursor,
            count: state.count,
            pushed: state.pushed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueState {
    pub capacity: usize,
    pub dim: usize,
    pub cursor: usize,
    pub count: usize,
    pub pushed: u64,
    pub storage: TensorData,
}
