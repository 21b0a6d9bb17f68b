//! Training loops: feature-extractor pretraining, base denoiser
//! training, and step-halving distillation with relational feature
//! losses.
//!
//! A distillation stage teaches a student to cover, in one step, the
//! same move its teacher makes in two. Supervision comes either from
//! pixel-space step matching or from feature-space terms computed by a
//! frozen extractor: a pooled-feature distribution term, a
//! cross-instance relation term, and a memory relation term against a
//! FIFO queue of teacher pixel embeddings. Every random choice is drawn
//! from a purpose-labeled stream, so enabling or disabling one loss
//! term never shifts the data, time, or noise draws seen by another
//! configuration with the same seed, and the full loop state (weights,
//! optimizer moments, queue, RNG positions, sampler order) can be
//! captured and restored for exact resume.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::ckpt::{load_container, save_container};
use crate::data::{BatchSampler, Dataset, SamplerState};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::features::{
    flatten_spatial_on_tape, ClassifierConfig, ConvClassifier, FeatureExtractor, ProjectionHead,
};
use crate::losses::{
    instance_set_on_tape, memory_on_tape, pooled_feature_on_tape, step_match_on_tape, LossWeights,
    OmegaRule,
};
use crate::memory::{PixelQueue, QueueState};
use crate::nn::{accuracy, softmax_cross_entropy, Binder};
use crate::optim::{clip_global_norm, cosine_lr, Adam, AdamConfig, AdamState, Ema};
use crate::schedule::{
    distill_target_each, forward_diffuse_each, halving_chain, sample_noise, Denoiser,
    NoiseSchedule,
};
use crate::util::{sha256_hex, stream_rng, RngState, RngStreams, TensorData};

// ----- configuration -----

/// Which objective drives a distillation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Pixel-space matching of the student prediction against the
    /// two-half-step teacher target.
    StepMatch,
    /// Pooled-feature distribution matching only.
    PooledFeature,
    /// Pooled features plus the cross-instance and memory relation
    /// terms.
    Relational,
}

/// Everything a distillation stage needs besides the models and data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub weights: LossWeights,
    /// Drop the cross-instance relation term (ablation switch).
    #[serde(default)]
    pub disable_instance_set: bool,
    /// Drop the memory relation term (ablation switch).
    #[serde(default)]
    pub disable_memory: bool,
    /// Add the pixel-space step-match term on top of the feature terms.
    #[serde(default)]
    pub add_step_match: bool,
    /// FIFO queue capacity in embedding rows.
    pub queue_capacity: usize,
    /// Pixel embeddings pushed per image after each update.
    pub queue_per_image: usize,
    /// Rows drawn from the queue for each memory-loss evaluation.
    pub queue_sample: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Relational,
            weights: LossWeights::default(),
            disable_instance_set: false,
            disable_memory: false,
            add_step_match: false,
            queue_capacity: 20_000,
            queue_per_image: 8,
            queue_sample: 2048,
            batch_size: 128,
            lr: 5e-5,
            warmup: 0,
            iterations: 10_000,
            ema_decay: 0.9999,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if self.queue_capacity == 0 || self.queue_per_image == 0 || self.queue_sample == 0 {
            return Err(Error::Config(
                "queue capacity, per-image count, and sample size must be >= 1".into(),
            ));
        }
        if self.queue_sample > self.queue_capacity {
            return Err(Error::Config(format!(
                "queue_sample {} exceeds queue_capacity {}",
                self.queue_sample, self.queue_capacity
            )));
        }
        Ok(())
    }

    /// Stable fingerprint of the configuration, stored in state
    /// snapshots so a resume with edited settings is caught.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&bytes)
    }
}

/// Per-stage pooled-feature temperatures that worked well for the
/// final halving stages; earlier stages use the configured default.
pub fn suggested_stage_temperature(from_steps: u32, to_steps: u32) -> Option<f64> {
    match (from_steps, to_steps) {
        (8, 4) => Some(0.9),
        (4, 2) => Some(1.0),
        (2, 1) => Some(0.85),
        _ => None,
    }
}

// ----- records -----

/// One logged training iteration. Components are raw values before the
/// alpha/beta weighting; terms that were disabled, inactive for the
/// method, or skipped because the queue was still filling are logged
/// as exactly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub step_match: f64,
    pub pooled_feature: f64,
    pub instance_set: f64,
    pub memory: f64,
    /// The optimized objective: every active term after weighting.
    pub total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Everything a finished stage reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub from_steps: u32,
    pub to_steps: u32,
    pub seed: u64,
    pub wall_s: f64,
    pub records: Vec<IterationRecord>,
}

/// A finished stage: the live student, the averaged weights used for
/// sampling and as the next teacher, the projection head, and the log.
pub struct StageOutput {
    pub student: DenoiserModel,
    pub ema: Vec<ArrayD<f64>>,
    pub head: ProjectionHead,
    pub report: StageReport,
}

/// Rebuilds a model from a config and a flat list of parameter values
/// in store order (e.g. an EMA snapshot).
pub fn model_with_values(cfg: &DenoiserConfig, values: &[ArrayD<f64>]) -> Result<DenoiserModel> {
    let mut rng = stream_rng(0, "rebuild");
    let mut model = DenoiserModel::new(cfg.clone(), &mut rng)?;
    model.params.assign_values(values);
    Ok(model)
}

// ----- distillation stage -----

/// One step-halving stage, held open so callers can run it to
/// completion, snapshot it mid-flight, or restore it from a snapshot.
pub struct DistillStage<'a> {
    sched: &'a NoiseSchedule,
    dataset: &'a Dataset,
    teacher: &'a DenoiserModel,
    extractor: &'a ConvClassifier,
    cfg: DistillConfig,
    to_steps: u32,
    student: DenoiserModel,
    head: ProjectionHead,
    adam_student: Adam,
    adam_head: Adam,
    ema: Ema,
    queue: PixelQueue,
    sampler: BatchSampler,
    rng_data: ChaCha12Rng,
    rng_time: ChaCha12Rng,
    rng_noise: ChaCha12Rng,
    rng_queue: ChaCha12Rng,
    records: Vec<IterationRecord>,
    teacher_checksum: String,
}

fn check_stage_geometry(
    dataset: &Dataset,
    teacher: &DenoiserModel,
    extractor: &ConvClassifier,
    cfg: &DistillConfig,
) -> Result<()> {
    let (c, h, w) = dataset.resolution();
    if h != w {
        return Err(Error::Config(format!("images must be square, got {h}x{w}")));
    }
    if teacher.image_shape() != (c, h, w) {
        return Err(Error::Config(format!(
            "teacher expects {:?} images, dataset provides {:?}",
            teacher.image_shape(),
            (c, h, w)
        )));
    }
    if extractor.cfg.in_channels != c || extractor.cfg.image_hw != h {
        return Err(Error::Config(format!(
            "extractor expects {}-channel {}x{} images, dataset provides {c}-channel {h}x{h}",
            extractor.cfg.in_channels, extractor.cfg.image_hw, extractor.cfg.image_hw
        )));
    }
    if let Some(k) = teacher.num_classes() {
        if k != dataset.num_classes {
            return Err(Error::Config(format!(
                "teacher conditions on {k} classes, dataset has {}",
                dataset.num_classes
            )));
        }
    }
    let (fh, fw) = extractor.feature_hw();
    if cfg.queue_per_image > fh * fw {
        return Err(Error::SampleCountExceedsPixels {
            k: cfg.queue_per_image,
            a: fh * fw,
        });
    }
    Ok(())
}

impl<'a> DistillStage<'a> {
    /// Starts a fresh stage. The student is initialized from the
    /// teacher's weights; the projection head starts as the identity.
    pub fn new(
        sched: &'a NoiseSchedule,
        dataset: &'a Dataset,
        teacher: &'a DenoiserModel,
        extractor: &'a ConvClassifier,
        to_steps: u32,
        cfg: DistillConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if to_steps == 0 {
            return Err(Error::InvalidSteps);
        }
        check_stage_geometry(dataset, teacher, extractor, &cfg)?;
        let student = model_with_values(&teacher.cfg, &teacher.params.clone_values())?;
        let head = ProjectionHead::identity(extractor.feature_dim());
        let adam_student = Adam::new(&student.params, AdamConfig::default());
        let adam_head = Adam::new(&head.params, AdamConfig::default());
        let ema = Ema::new(&student.params, cfg.ema_decay);
        let queue = PixelQueue::new(cfg.queue_capacity, extractor.feature_dim())?;
        let sampler = BatchSampler::new(dataset.len(), cfg.batch_size)?;
        let streams = RngStreams::new(cfg.seed);
        let teacher_checksum = teacher.checksum();
        Ok(Self {
            sched,
            dataset,
            teacher,
            extractor,
            cfg,
            to_steps,
            student,
            head,
            adam_student,
            adam_head,
            ema,
            queue,
            sampler,
            rng_data: streams.data,
            rng_time: streams.time,
            rng_noise: streams.noise,
            rng_queue: streams.queue,
            records: Vec::new(),
            teacher_checksum,
        })
    }

    /// Restores a stage exactly where a snapshot left it. The teacher
    /// must be the same model the snapshot was taken against.
    pub fn from_state(
        sched: &'a NoiseSchedule,
        dataset: &'a Dataset,
        teacher: &'a DenoiserModel,
        extractor: &'a ConvClassifier,
        state: &DistillStateCkpt,
    ) -> Result<Self> {
        let cfg = state.config.clone();
        cfg.validate()?;
        if state.config_hash != cfg.config_hash() {
            return Err(Error::Container(
                "stage snapshot is internally inconsistent: config hash mismatch".into(),
            ));
        }
        if teacher.checksum() != state.teacher_checksum {
            return Err(Error::Container(
                "stage snapshot was taken against a different teacher".into(),
            ));
        }
        check_stage_geometry(dataset, teacher, extractor, &cfg)?;
        if state.records.len() > cfg.iterations {
            return Err(Error::Container(format!(
                "snapshot holds {} records but the stage runs {} iterations",
                state.records.len(),
                cfg.iterations
            )));
        }
        if state.sampler.n != dataset.len() || state.sampler.batch != cfg.batch_size {
            return Err(Error::Container(
                "snapshot sampler does not match the dataset or batch size".into(),
            ));
        }
        let mut student = {
            let mut rng = stream_rng(0, "rebuild");
            DenoiserModel::new(state.student_cfg.clone(), &mut rng)?
        };
        student.params.load_tensors(&state.student_weights)?;
        if student.image_shape() != teacher.image_shape() {
            return Err(Error::Container(
                "snapshot student geometry does not match the teacher".into(),
            ));
        }
        let mut head = ProjectionHead::identity(extractor.feature_dim());
        head.params.load_tensors(&state.head_weights)?;
        head.buffers_from_tensors(&state.head_buffers)?;
        let adam_student = Adam::from_state(&state.adam_student, &student.params)?;
        let adam_head = Adam::from_state(&state.adam_head, &head.params)?;
        let ema = Ema::from_tensors(&state.ema, &student.params, cfg.ema_decay)?;
        let queue = PixelQueue::from_state(&state.queue)?;
        if queue.dim() != extractor.feature_dim() {
            return Err(Error::Container(
                "snapshot queue dimension does not match the extractor".into(),
            ));
        }
        let sampler = BatchSampler::from_state(&state.sampler)?;
        Ok(Self {
            sched,
            dataset,
            teacher,
            extractor,
            cfg,
            to_steps: state.to_steps,
            student,
            head,
            adam_student,
            adam_head,
            ema,
            queue,
            sampler,
            rng_data: state.rng_data.restore(),
            rng_time: state.rng_time.restore(),
            rng_noise: state.rng_noise.restore(),
            rng_queue: state.rng_queue.restore(),
            records: state.records.clone(),
            teacher_checksum: state.teacher_checksum.clone(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.records.len()
    }

    pub fn is_done(&self) -> bool {
        self.records.len() >= self.cfg.iterations
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    /// Runs one training iteration: sample a batch and per-sample times
    /// on the student grid, diffuse, build the two-half-step teacher
    /// target, evaluate the method's loss terms, update the student
    /// (and head, when the memory term was active), refresh the
    /// averaged weights, and only then push this batch's teacher
    /// embeddings into the queue — so an embedding is never compared
    /// against itself in the iteration that produced it.
    pub fn step(&mut self) -> Result<IterationRecord> {
        if self.is_done() {
            return Err(Error::Config(
                "stage has already run its iteration budget".into(),
            ));
        }
        let started = Instant::now();
        let iteration = self.records.len();
        let w = self.cfg.weights.clone();

        let idx = self.sampler.next(&mut self.rng_data);
        let (x0, labels) = self.dataset.batch(&idx)?;
        let labels_opt = self
            .teacher
            .num_classes()
            .is_some()
            .then_some(labels.as_slice());
        let ts: Vec<f64> = (0..idx.len())
            .map(|_| {
                let k: u32 = self.rng_time.random_range(1..=self.to_steps);
                f64::from(k) / f64::from(self.to_steps)
            })
            .collect();
        let eps = sample_noise(&mut self.rng_noise, x0.shape());
        let z_t = forward_diffuse_each(self.sched, &x0, &eps, &ts)?;
        let target =
            distill_target_each(self.sched, self.teacher, &z_t, &ts, self.to_steps, labels_opt)?;

        let tape = Tape::new();
        let binder_student = Binder::new(&self.student.params, &tape);
        let binder_head = Binder::new(&self.head.params, &tape);
        let z_var = tape.constant(z_t);
        let pred = self
            .student
            .forward_train(&tape, &binder_student, z_var, &ts, labels_opt);

        let relational = matches!(self.cfg.method, Method::Relational);
        let want_instance = relational && !self.cfg.disable_instance_set && w.alpha > 0.0;
        let uses_queue = relational && !self.cfg.disable_memory && w.beta > 0.0;

        let mut parts: Vec<Var> = Vec::new();
        let mut step_match = 0.0;
        let mut pooled_feature = 0.0;
        let mut instance_set = 0.0;
        let mut memory = 0.0;
        let mut head_in_graph = false;
        let mut teacher_rows_cache = None;

        if matches!(self.cfg.method, Method::StepMatch) || self.cfg.add_step_match {
            let v = step_match_on_tape(&tape, self.sched, pred, &target, &ts, w.omega_clip)?;
            step_match = tape.scalar_value(v);
            parts.push(v);
        }

        if !matches!(self.cfg.method, Method::StepMatch) {
            let binder_extractor = Binder::new(&self.extractor.params, &tape);
            let fmap = self
                .extractor
                .feature_map_train(&tape, &binder_extractor, pred);
            let teacher_pooled = self.extractor.pooled(&target);
            let pooled_student = tape.global_avg_pool(fmap);
            let v = pooled_feature_on_tape(&tape, &teacher_pooled, pooled_student, w.tau_pooled)?;
            pooled_feature = tape.scalar_value(v);
            parts.push(v);

            if want_instance || uses_queue {
                let rows_student = tape.l2_normalize_last(flatten_spatial_on_tape(&tape, fmap));
                let teacher_rows = self.extractor.pixel_rows(&target);
                if want_instance {
                    let v =
                        instance_set_on_tape(&tape, &teacher_rows, rows_student, w.tau_instance)?;
                    instance_set = tape.scalar_value(v);
                    parts.push(tape.scale(v, w.alpha));
                }
                if uses_queue && self.queue.is_ready(self.cfg.queue_sample) {
                    let bank = self.queue.sample(self.cfg.queue_sample, &mut self.rng_queue)?;
                    let projected = self.head.forward(&tape, &binder_head, rows_student, true);
                    let v = memory_on_tape(&tape, &teacher_rows, projected, &bank, w.tau_memory)?;
                    memory = tape.scalar_value(v);
                    parts.push(tape.scale(v, w.beta));
                    head_in_graph = true;
                }
                teacher_rows_cache = Some(teacher_rows);
            }
        }

        let mut total_var = parts[0];
        for p in &parts[1..] {
            total_var = tape.add(total_var, *p);
        }
        let total = tape.scalar_value(total_var);
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("total loss is {total}"),
            });
        }

        let mut grads = tape.backward(total_var);
        let student_grads = binder_student.collect_grads(&mut grads);
        let head_grads = binder_head.collect_grads(&mut grads);
        let n_student = student_grads.len();
        let mut all = student_grads;
        all.extend(head_grads);
        let grad_norm = clip_global_norm(&mut all, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("gradient norm is {grad_norm}"),
            });
        }
        let head_grads = all.split_off(n_student);
        let student_grads = all;

        let lr = cosine_lr(self.cfg.lr, self.cfg.warmup, self.cfg.iterations, iteration);
        self.adam_student
            .step(&mut self.student.params, &student_grads, lr);
        if head_in_graph {
            self.adam_head.step(&mut self.head.params, &head_grads, lr);
        }
        self.ema.update(&self.student.params);

        if uses_queue {
            let rows = match teacher_rows_cache {
                Some(rows) => rows,
                None => self.extractor.pixel_rows(&target),
            };
            self.queue
                .push_from_maps(&rows, self.cfg.queue_per_image, &mut self.rng_queue)?;
        }

        let record = IterationRecord {
            iteration,
            step_match,
            pooled_feature,
            instance_set,
            memory,
            total,
            lr,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining iterations, reporting each record to the
    /// callback as it lands.
    pub fn run_with(&mut self, mut on_record: impl FnMut(&IterationRecord)) -> Result<()> {
        while !self.is_done() {
            let record = self.step()?;
            on_record(&record);
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| {})
    }

    /// Captures the complete loop state for exact resume.
    pub fn to_state(&self) -> DistillStateCkpt {
        DistillStateCkpt {
            config: self.cfg.clone(),
            config_hash: self.cfg.config_hash(),
            to_steps: self.to_steps,
            teacher_checksum: self.teacher_checksum.clone(),
            student_cfg: self.student.cfg.clone(),
            student_weights: self.student.params.to_tensors(),
            head_weights: self.head.params.to_tensors(),
            head_buffers: self.head.buffers_to_tensors(),
            ema: self.ema.to_tensors(),
            adam_student: self.adam_student.to_state(),
            adam_head: self.adam_head.to_state(),
            queue: self.queue.to_state(),
            rng_data: RngState::capture(&self.rng_data),
            rng_time: RngState::capture(&self.rng_time),
            rng_noise: RngState::capture(&self.rng_noise),
            rng_queue: RngState::capture(&self.rng_queue),
            sampler: self.sampler.to_state(),
            records: self.records.clone(),
        }
    }

    pub fn finish(self) -> StageOutput {
        let wall_s = self.records.iter().map(|r| r.wall_ms).sum::<f64>() / 1e3;
        StageOutput {
            report: StageReport {
                from_steps: self.to_steps * 2,
                to_steps: self.to_steps,
                seed: self.cfg.seed,
                wall_s,
                records: self.records,
            },
            ema: self.ema.shadow().to_vec(),
            student: self.student,
            head: self.head,
        }
    }
}

// ----- progressive halving -----

/// Observer invoked after each finished stage with (from, to, output).
pub type StageObserver<'a> = dyn FnMut(u32, u32, &StageOutput) + 'a;

/// Distills along the halving chain from `start_steps` down to
/// `end_steps`. Each stage's averaged student becomes the next stage's
/// teacher. `configure` picks the stage settings given (from, to);
/// `on_stage` observes each finished stage. `start == end` runs no
/// stages.
#[allow(clippy::too_many_arguments)]
pub fn progressive_distill(
    sched: &NoiseSchedule,
    dataset: &Dataset,
    base: &DenoiserModel,
    start_steps: u32,
    end_steps: u32,
    extractor: &ConvClassifier,
    configure: &dyn Fn(u32, u32) -> DistillConfig,
    mut on_stage: Option<&mut StageObserver<'_>>,
) -> Result<Vec<StageOutput>> {
    let chain = halving_chain(start_steps, end_steps)?;
    let mut outputs = Vec::new();
    let mut teacher: Option<DenoiserModel> = None;
    for pair in chain.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let cfg = configure(from, to);
        let current: &DenoiserModel = teacher.as_ref().unwrap_or(base);
        let mut stage = DistillStage::new(sched, dataset, current, extractor, to, cfg)?;
        stage.run()?;
        let out = stage.finish();
        let next = model_with_values(&out.student.cfg, &out.ema)?;
        if let Some(cb) = on_stage.as_deref_mut() {
            cb(from, to, &out);
        }
        outputs.push(out);
        teacher = Some(next);
    }
    Ok(outputs)
}

// ----- stage snapshots -----

pub const KIND_DISTILL_STATE: &str = "distill-state";

/// Complete mid-stage state: resuming from this snapshot and running to
/// the end produces bit-identical results to an uninterrupted run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillStateCkpt {
    pub config: DistillConfig,
    pub config_hash: String,
    pub to_steps: u32,
    pub teacher_checksum: String,
    pub student_cfg: DenoiserConfig,
    pub student_weights: BTreeMap<String, TensorData>,
    pub head_weights: BTreeMap<String, TensorData>,
    pub head_buffers: BTreeMap<String, TensorData>,
    pub ema: Vec<TensorData>,
    pub adam_student: AdamState,
    pub adam_head: AdamState,
    pub queue: QueueState,
    pub rng_data: RngState,
    pub rng_time: RngState,
    pub rng_noise: RngState,
    pub rng_queue: RngState,
    pub sampler: SamplerState,
    pub records: Vec<IterationRecord>,
}

pub fn save_distill_state(path: &Path, state: &DistillStateCkpt) -> Result<()> {
    save_container(path, KIND_DISTILL_STATE, state)
}

pub fn load_distill_state(path: &Path) -> Result<DistillStateCkpt> {
    load_container(path, KIND_DISTILL_STATE)
}

// ----- base denoiser training -----

/// Settings for training the many-step base denoiser from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    /// Grid resolution the model is trained to operate on.
    pub steps: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub ema_decay: f64,
    pub clip_norm: f64,
    #[serde(default)]
    pub omega: OmegaRule,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            batch_size: 128,
            lr: 2e-4,
            warmup: 100,
            iterations: 20_000,
            ema_decay: 0.9999,
            clip_norm: 1.0,
            omega: OmegaRule::TruncatedSnr,
            seed: 0,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidSteps);
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "batch_size and iterations must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct BaseOutput {
    pub model: DenoiserModel,
    pub ema: Vec<ArrayD<f64>>,
    pub records: Vec<BaseRecord>,
}

/// Trains a denoiser to predict the clean image from its diffused
/// version, with times drawn uniformly from the step grid.
pub fn train_base(
    sched: &NoiseSchedule,
    dataset: &Dataset,
    model_cfg: &DenoiserConfig,
    cfg: &BaseTrainConfig,
) -> Result<BaseOutput> {
    cfg.validate()?;
    let (c, h, w) = dataset.resolution();
    if h != w {
        return Err(Error::Config(format!("images must be square, got {h}x{w}")));
    }
    if model_cfg.in_channels != c || model_cfg.image_hw != h {
        return Err(Error::Config(format!(
            "model expects {}-channel {}x{} images, dataset provides {c}-channel {h}x{h}",
            model_cfg.in_channels, model_cfg.image_hw, model_cfg.image_hw
        )));
    }
    let mut streams = RngStreams::new(cfg.seed);
    let mut model = DenoiserModel::new(model_cfg.clone(), &mut streams.init)?;
    if let Some(k) = model.num_classes() {
        if k != dataset.num_classes {
            return Err(Error::Config(format!(
                "model conditions on {k} classes, dataset has {}",
                dataset.num_classes
            )));
        }
    }
    let mut adam = Adam::new(&model.params, AdamConfig::default());
    let mut ema = Ema::new(&model.params, cfg.ema_decay);
    let mut sampler = BatchSampler::new(dataset.len(), cfg.batch_size)?;
    let mut records = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let idx = sampler.next(&mut streams.data);
        let (x0, labels) = dataset.batch(&idx)?;
        let labels_opt = model.num_classes().is_some().then_some(labels.as_slice());
        let ts: Vec<f64> = (0..idx.len())
            .map(|_| {
                let k: u32 = streams.time.random_range(1..=cfg.steps);
                f64::from(k) / f64::from(cfg.steps)
            })
            .collect();
        let eps = sample_noise(&mut streams.noise, x0.shape());
        let z_t = forward_diffuse_each(sched, &x0, &eps, &ts)?;
        let tape = Tape::new();
        let binder = Binder::new(&model.params, &tape);
        let z_var = tape.constant(z_t);
        let pred = model.forward_train(&tape, &binder, z_var, &ts, labels_opt);
        let loss_var = step_match_on_tape(&tape, sched, pred, &x0, &ts, cfg.omega)?;
        let loss = tape.scalar_value(loss_var);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("loss is {loss}"),
            });
        }
        let mut grads = tape.backward(loss_var);
        let mut g = binder.collect_grads(&mut grads);
        let grad_norm = clip_global_norm(&mut g, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("gradient norm is {grad_norm}"),
            });
        }
        let lr = cosine_lr(cfg.lr, cfg.warmup, cfg.iterations, iteration);
        adam.step(&mut model.params, &g, lr);
        ema.update(&model.params);
        records.push(BaseRecord {
            iteration,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok(BaseOutput {
        ema: ema.shadow().to_vec(),
        model,
        records,
    })
}

// ----- feature extractor pretraining -----

/// Settings for pretraining the classifier whose feature maps drive
/// the relational losses and the evaluation metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub clip_norm: f64,
    /// Fraction of the dataset held out for the accuracy report.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-3,
            warmup: 50,
            iterations: 2000,
            clip_norm: 5.0,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "batch_size and iterations must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct ClassifierOutput {
    pub classifier: ConvClassifier,
    pub holdout_accuracy: f64,
    pub records: Vec<ClassifierRecord>,
}

/// Trains the classifier with cross-entropy on a shuffled split of the
/// dataset and reports accuracy on the held-out remainder.
pub fn pretrain_classifier(
    dataset: &Dataset,
    model_cfg: &ClassifierConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierOutput> {
    cfg.validate()?;
    let (c, h, w) = dataset.resolution();
    if h != w {
        return Err(Error::Config(format!("images must be square, got {h}x{w}")));
    }
    if model_cfg.in_channels != c || model_cfg.image_hw != h {
        return Err(Error::Config(format!(
            "classifier expects {}-channel {}x{} images, dataset provides {c}-channel {h}x{h}",
            model_cfg.in_channels, model_cfg.image_hw, model_cfg.image_hw
        )));
    }
    if model_cfg.num_classes != dataset.num_classes {
        return Err(Error::Config(format!(
            "classifier has {} classes, dataset has {}",
            model_cfg.num_classes, dataset.num_classes
        )));
    }
    let mut streams = RngStreams::new(cfg.seed);
    let mut holdout_rng = stream_rng(cfg.seed, "holdout");
    let (train, holdout) = dataset.split_holdout(cfg.holdout_fraction, &mut holdout_rng)?;
    let mut clf = ConvClassifier::new(model_cfg.clone(), &mut streams.init)?;
    let mut adam = Adam::new(&clf.params, AdamConfig::default());
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size)?;
    let mut records = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let idx = sampler.next(&mut streams.data);
        let (x, labels) = train.batch(&idx)?;
        let tape = Tape::new();
        let binder = Binder::new(&clf.params, &tape);
        let x_var = tape.constant(x);
        let (logits, _) = clf.logits_train(&tape, &binder, x_var);
        let loss_var = softmax_cross_entropy(&tape, logits, &labels);
        let loss = tape.scalar_value(loss_var);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("loss is {loss}"),
            });
        }
        let mut grads = tape.backward(loss_var);
        let mut g = binder.collect_grads(&mut grads);
        let grad_norm = clip_global_norm(&mut g, cfg.clip_norm);
        let lr = cosine_lr(cfg.lr, cfg.warmup, cfg.iterations, iteration);
        adam.step(&mut clf.params, &g, lr);
        records.push(ClassifierRecord {
            iteration,
            loss,
            lr,
            grad_norm,
        });
    }
    let mut weighted = 0.0;
    let mut seen = 0usize;
    let mut start = 0usize;
    while start < holdout.len() {
        let stop = (start + cfg.batch_size).min(holdout.len());
        let ids: Vec<usize> = (start..stop).collect();
        let (x, labels) = holdout.batch(&ids)?;
        let probs = clf.probs(&x);
        weighted += accuracy(&probs.into_dyn(), &labels) * (stop - start) as f64;
        seen += stop - start;
        start = stop;
    }
    let holdout_accuracy = weighted / seen.max(1) as f64;
    Ok(ClassifierOutput {
        classifier: clf,
        holdout_accuracy,
        records,
    })
}
