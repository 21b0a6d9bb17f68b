//! Versioned checkpoint containers. Everything is a JSON envelope
//! {format, version, kind, body} so files are self-describing and
//! loads can reject wrong or stale containers with a usable message.

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::features::{ClassifierConfig, ConvClassifier};
use crate::util::{stream_rng, TensorData};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT: &str = "rdd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    body: T,
}

/// Writes `body` wrapped in the versioned envelope.
pub fn save_container<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        body,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string(&env)?)?;
    Ok(())
}

/// Reads a container, checking format, version, and kind.
pub fn load_container<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Container(format!("cannot read {}: {e}", path.display()))
    })?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| {
        Error::Container(format!("{} is not a valid container: {e}", path.display()))
    })?;
    if env.format != FORMAT {
        return Err(Error::Container(format!(
            "{} has format {:?}, expected {FORMAT:?}",
            path.display(),
            env.format
        )));
    }
    if env.version != VERSION {
        return Err(Error::Container(format!(
            "{} has version {}, this build reads {VERSION}",
            path.display(),
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Container(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            env.kind
        )));
    }
    Ok(env.body)
}

// ----- classifier -----

#[derive(Serialize, Deserialize)]
pub struct ClassifierCkpt {
    pub cfg: ClassifierConfig,
    pub weights: BTreeMap<String, TensorData>,
    pub holdout_accuracy: f64,
    pub seed: u64,
}

pub const KIND_CLASSIFIER: &str = "classifier";

pub fn save_classifier(
    path: &Path,
    clf: &ConvClassifier,
    holdout_accuracy: f64,
    seed: u64,
) -> Result<()> {
    let body = ClassifierCkpt {
        cfg: clf.cfg.clone(),
        weights: clf.params.to_tensors(),
        holdout_accuracy,
        seed,
    };
    save_container(path, KIND_CLASSIFIER, &body)
}

pub fn load_classifier(path: &Path) -> Result<(ConvClassifier, ClassifierCkpt)> {
    let body: ClassifierCkpt = load_container(path, KIND_CLASSIFIER)?;
    // Build the architecture, then overwrite every weight.
    let mut rng = stream_rng(0, "init");
    let mut clf = ConvClassifier::new(body.cfg.clone(), &mut rng)?;
    clf.params.load_tensors(&body.weights)?;
    Ok((clf, body))
}

// ----- denoiser -----

#[derive(Serialize, Deserialize)]
pub struct DenoiserCkpt {
    pub cfg: DenoiserConfig,
    /// Sampling step count this model is intended for.
    pub steps: u32,
    /// Live (training) weights.
    pub weights: BTreeMap<String, TensorData>,
    /// Averaged weights in parameter-store order, if maintained.
    pub ema: Option<Vec<TensorData>>,
    /// Free-form provenance: method, stage, parent checkpoint.
    pub meta: BTreeMap<String, String>,
    pub seed: u64,
}

pub const KIND_DENOISER: &str = "denoiser";

pub fn save_denoiser(path: &Path, body: &DenoiserCkpt) -> Result<()> {
    save_container(path, KIND_DENOISER, body)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, DenoiserCkpt)> {
    let body: DenoiserCkpt = load_container(path, KIND_DENOISER)?;
    let mut rng = stream_rng(0, "init");
    let mut model = DenoiserModel::new(body.cfg.clone(), &mut rng)?;
    model.params.load_tensors(&body.weights)?;
    Ok((model, body))
}

/// The model to sample with: EMA weights when the checkpoint carries
/// them, live weights otherwise.
pub fn sampling_model(body: &DenoiserCkpt) -> Result<DenoiserModel> {
    let mut rng = stream_rng(0, "init");
    let mut model = DenoiserModel::new(body.cfg.clone(), &mut rng)?;
    model.params.load_tensors(&body.weights)?;
    if let Some(ema) = &body.ema {
        if ema.len() != model.params.len() {
            return Err(Error::Container("EMA tensor count mismatch".into()));
        }
        let values = ema
            .iter()
            .map(|t| t.to_array())
            .collect::<Result<Vec<_>>>()?;
        model.params.assign_values(&values);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserKind;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    #[test]
    fn classifier_roundtrip_preserves_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream_rng(60, "init");
        let cfg = ClassifierConfig {
            in_channels: 1,
            image_hw: 16,
            num_classes: 4,
            base_width: 4,
            final_hw: 4,
        };
        let clf = ConvClassifier::new(cfg, &mut rng).unwrap();
        let path = dir.path().join("clf.json");
        save_classifier(&path, &clf, 0.83, 7).unwrap();
        let (loaded, meta) = load_classifier(&path).unwrap();
        assert_eq!(loaded.params.checksum(), clf.params.checksum());
        assert_eq!(meta.holdout_accuracy, 0.83);
        assert_eq!(meta.seed, 7);
        // Wrong kind is rejected with a usable message.
        let Err(err) = load_container::<ClassifierCkpt>(&path, "denoiser") else {
            panic!("wrong kind accepted");
        };
        assert!(err.to_string().contains("classifier"));
    }

    #[test]
    fn denoiser_roundtrip_and_ema_selection() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream_rng(61, "init");
        let cfg = DenoiserConfig {
            kind: DenoiserKind::Unet,
            in_channels: 1,
            image_hw: 8,
            base_width: 4,
            time_dim: 4,
            num_classes: None,
        };
        let model = DenoiserModel::new(cfg.clone(), &mut rng).unwrap();
        let ema: Vec<TensorData> = model
            .params
            .values()
            .iter()
            .map(|v| {
                let shifted = v.mapv(|x| x + 1.0);
                TensorData::from_array(&shifted)
            })
            .collect();
        let body = DenoiserCkpt {
            cfg,
            steps: 8,
            weights: model.params.to_tensors(),
            ema: Some(ema),
            meta: BTreeMap::from([("method".into(), "pd".into())]),
            seed: 3,
        };
        let path = dir.path().join("model.json");
        save_denoiser(&path, &body).unwrap();
        let (live, loaded) = load_denoiser(&path).unwrap();
        assert_eq!(live.checksum(), model.checksum());
        assert_eq!(loaded.steps, 8);
        let averaged = sampling_model(&loaded).unwrap();
        assert_ne!(averaged.checksum(), model.checksum());
        let diff = averaged.params.values()[0][[0, 0, 0, 0].as_slice()]
            - model.params.values()[0][[0, 0, 0, 0].as_slice()];
        assert!((diff - 1.0).abs() < 1e-12);
    }

    #[test]
    fn version_and_format_gates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        #[derive(Debug, Serialize, Deserialize)]
        struct Tiny {
            v: f64,
        }
        save_container(&path, "tiny", &Tiny { v: 1.0 }).unwrap();
        assert!(load_container::<Tiny>(&path, "tiny").is_ok());
        // Corrupt the version field.
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"version\":1", "\"version\":999")).unwrap();
        let err = load_container::<Tiny>(&path, "tiny").unwrap_err();
        assert!(err.to_string().contains("version"));
        // Garbage is a container error, not a panic.
        std::fs::write(&path, "not json").unwrap();
        assert!(load_container::<Tiny>(&path, "tiny").is_err());
        // A denoiser value that never took a gradient still roundtrips
        // through TensorData inside containers.
        let mut rng = stream_rng(62, "init");
        let t = TensorData::from_array(&ArrayD::from_shape_fn(IxDyn(&[2, 2]), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let back = t.to_array().unwrap();
        assert_eq!(back.shape(), &[2, 2]);
    }
}
