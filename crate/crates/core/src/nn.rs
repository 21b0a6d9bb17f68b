//! Parameter storage and the glue between named model weights and tape
//! variables.
//!
//! A `ParamStore` owns every trainable tensor of a model by name. For a
//! forward pass, a `Binder` lends parameters to a tape as leaves,
//! memoizing so that a parameter used twice maps to one leaf and its
//! gradient contributions accumulate.

use crate::autograd::{Gradients, Tape, Var};
use crate::util::TensorData;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named collection of trainable tensors.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn clone_values(&self) -> Vec<ArrayD<f64>> {
        self.values.clone()
    }

    pub fn assign_values(&mut self, values: &[ArrayD<f64>]) {
        assert_eq!(values.len(), self.values.len(), "parameter count mismatch");
        for (i, v) in values.iter().enumerate() {
            assert_eq!(self.values[i].shape(), v.shape(), "parameter shape mismatch");
            self.values[i] = v.clone();
        }
    }

    /// Snapshot for serialization, keyed by name.
    pub fn to_tensors(&self) -> BTreeMap<String, TensorData> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), TensorData::from_array(v)))
            .collect()
    }

    /// Restores values by name. Every stored parameter must be present
    /// with a matching shape; extra entries are an error too, so a
    /// checkpoint from a different architecture cannot half-load.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, TensorData>) -> Result<()> {
        if tensors.len() != self.names.len() {
            return Err(Error::Container(format!(
                "parameter count mismatch: store has {}, checkpoint has {}",
                self.names.len(),
                tensors.len()
            )));
        }
        for (name, td) in tensors {
            let idx = *self
                .by_name
                .get(name)
                .ok_or_else(|| Error::Container(format!("unknown parameter {name}")))?;
            let arr = td.to_array()?;
            if arr.shape() != self.values[idx].shape() {
                return Err(Error::Container(format!(
                    "shape mismatch for {name}: stored {:?}, checkpoint {:?}",
                    self.values[idx].shape(),
                    arr.shape()
                )));
            }
            self.values[idx] = arr;
        }
        Ok(())
    }

    /// Hex digest over names and values, used to fingerprint a model in
    /// run manifests and stats caches.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            bytes.extend_from_slice(n.as_bytes());
            bytes.push(0);
            for d in v.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        crate::util::sha256_hex(&bytes)
    }
}

/// Lends parameters from a store to a tape, one leaf per parameter.
pub struct Binder<'a> {
    store: &'a ParamStore,
    tape: &'a Tape,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, tape: &'a Tape) -> Self {
        Self {
            store,
            tape,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn var(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        bound[id.0] = Some(v);
        v
    }

    /// Collects parameter gradients after `backward`, aligned with the
    /// store's index order. Unused or gradient-free parameters are None.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Option<ArrayD<f64>>> {
        self.bound
            .borrow()
            .iter()
            .map(|slot| slot.and_then(|v| grads.take(v)))
            .collect()
    }
}

// ----- initializers -----

/// He-style normal init for layers followed by ReLU:
/// std = sqrt(2 / fan_in).
pub fn kaiming_normal(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Plain normal init with an explicit standard deviation.
pub fn normal_init(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// Mean cross-entropy of logits against integer labels, recorded with a
/// hand-derived gradient: d/d logits = (softmax - onehot) / batch.
pub fn softmax_cross_entropy(tape: &Tape, logits: Var, labels: &[usize]) -> Var {
    let v = tape.value(logits);
    let l2 = v
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits must be (batch, classes)");
    let (m, k) = l2.dim();
    assert_eq!(labels.len(), m, "label count mismatch");
    let mut grad = ndarray::Array2::<f64>::zeros((m, k));
    let mut loss = 0.0;
    for i in 0..m {
        let row = l2.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let label = labels[i];
        assert!(label < k, "label out of range");
        loss += -(l2[[i, label]] - max - z.ln());
        for j in 0..k {
            grad[[i, j]] = (exps[j] / z - if j == label { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    tape.custom_scalar(loss / m as f64, logits, grad.into_dyn())
}

/// Argmax accuracy of logits against labels.
pub fn accuracy(logits: &ArrayD<f64>, labels: &[usize]) -> f64 {
    let l2 = logits
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits must be (batch, classes)");
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = l2.row(i);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{central_diff, rel_err, stream_rng};
    use ndarray::IxDyn;

    #[test]
    fn binder_memoizes_and_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let tape = Tape::new();
        let binder = Binder::new(&store, &tape);
        let a = binder.var(id);
        let b = binder.var(id);
        assert_eq!(a, b);
        let s = tape.add(a, b);
        let loss = tape.sum_all(s);
        let mut grads = tape.backward(loss);
        let collected = binder.collect_grads(&mut grads);
        let g = collected[0].as_ref().unwrap();
        for i in 0..3 {
            assert!((g[[i]] - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn store_roundtrip_exact() {
        let mut rng = stream_rng(5, "init");
        let mut store = ParamStore::new();
        store.add("a", normal_init(&mut rng, &[2, 3], 0.7));
        store.add("b", kaiming_normal(&mut rng, &[4], 4));
        let tensors = store.to_tensors();
        let json = serde_json::to_string(&tensors).unwrap();
        let back: std::collections::BTreeMap<String, TensorData> =
            serde_json::from_str(&json).unwrap();
        let mut store2 = ParamStore::new();
        store2.add("a", zeros(&[2, 3]));
        store2.add("b", zeros(&[4]));
        store2.load_tensors(&back).unwrap();
        for id in store.ids() {
            let other = store2.id_of(store.name(id)).unwrap();
            assert_eq!(store.get(id), store2.get(other));
        }
        assert_eq!(store.checksum(), store2.checksum());
    }

    #[test]
    fn load_rejects_missing_and_extra() {
        let mut store = ParamStore::new();
        store.add("a", zeros(&[2]));
        let empty = std::collections::BTreeMap::new();
        assert!(store.load_tensors(&empty).is_err());
        let mut wrong = std::collections::BTreeMap::new();
        wrong.insert("z".to_string(), TensorData::from_array(&zeros(&[2])));
        assert!(store.load_tensors(&wrong).is_err());
    }

    #[test]
    fn kaiming_std_is_plausible() {
        let mut rng = stream_rng(11, "init");
        let w = kaiming_normal(&mut rng, &[64, 64], 64);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 64.0;
        assert!((var - expected).abs() < expected * 0.2);
    }

    #[test]
    fn cross_entropy_matches_finite_difference() {
        let mut rng = stream_rng(3, "init");
        let logits = normal_init(&mut rng, &[4, 5], 1.0);
        let labels = vec![0usize, 3, 2, 4];
        let tape = Tape::new();
        let lv = tape.leaf(logits.clone());
        let loss = softmax_cross_entropy(&tape, lv, &labels);
        let grads = tape.backward(loss);
        let g = grads.wrt(lv).unwrap();
        for idx in 0..logits.len() {
            let fd = central_diff(
                |v| {
                    let mut p = logits.clone();
                    p.as_slice_mut().unwrap()[idx] = v;
                    let t2 = Tape::new();
                    let l = t2.leaf(p);
                    t2.scalar_value(softmax_cross_entropy(&t2, l, &labels))
                },
                logits.as_slice().unwrap()[idx],
                1e-5,
            );
            let an = g.as_slice().unwrap()[idx];
            assert!(rel_err(an, fd, 1e-8) < 1e-6, "{an} vs {fd}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_k() {
        let tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[2, 4])));
        let loss = softmax_cross_entropy(&tape, logits, &[1, 2]);
        assert!((tape.scalar_value(loss) - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = ArrayD::from_shape_vec(
            IxDyn(&[3, 2]),
            vec![1.0, 0.0, 0.0, 1.0, 5.0, -1.0],
        )
        .unwrap();
        assert!((accuracy(&logits, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
