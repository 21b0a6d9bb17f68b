//! The five commands: classifier pretraining, base-model training,
//! progressive distillation, sampling to an image grid, and metric
//! evaluation. Every run writes its resolved config, a metrics stream,
//! and a provenance record under its run directory.

use crate::config::{DatasetSource, ExperimentConfig};
use anyhow::{bail, Context, Result};
use rdd_core::ckpt::{
    load_classifier, load_denoiser, sampling_model, save_classifier, save_denoiser, DenoiserCkpt,
};
use rdd_core::data::Dataset;
use rdd_core::eval::{
    collect_stats, evaluate_model, load_stats, save_stats, stats_cache_name, EvalReport,
};
use rdd_core::schedule::{ddim_sample, sample_noise, Denoiser, NoiseSchedule};
use rdd_core::trainer::{
    pretrain_classifier, progressive_distill, train_base, IterationRecord, Method,
};
use rdd_core::util::{sha256_hex, stream_rng};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

// ----- run-directory plumbing -----

/// Creates the run directory and drops the resolved config into it.
fn prepare_run_dir(
    cfg: &ExperimentConfig,
    default_name: &str,
    explicit: Option<PathBuf>,
) -> Result<PathBuf> {
    let dir = explicit.unwrap_or_else(|| cfg.output_dir.join(default_name));
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create run directory {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.canonical_toml()?)
        .with_context(|| format!("cannot write {}", dir.join("config.toml").display()))?;
    Ok(dir)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    package: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    /// Input checkpoints by content hash.
    inputs: BTreeMap<String, String>,
    /// Produced files (relative to the run directory) by content hash.
    artifacts: BTreeMap<String, String>,
}

/// Writes provenance.json: config hash, inputs, and the hash of every
/// produced artifact.
fn write_provenance(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    inputs: &BTreeMap<String, String>,
    artifact_names: &[&str],
) -> Result<()> {
    let mut artifacts = BTreeMap::new();
    for name in artifact_names {
        artifacts.insert((*name).to_string(), sha256_file(&dir.join(name))?);
    }
    let p = Provenance {
        command,
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.content_hash()?,
        seed: cfg.seed,
        inputs: inputs.clone(),
        artifacts,
    };
    std::fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&p)?)?;
    Ok(())
}

/// Line-delimited metrics stream.
struct Metrics {
    out: BufWriter<File>,
}

impl Metrics {
    fn create(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.jsonl");
        let file =
            File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    /// Appends one record and returns the rendered line.
    fn push<T: Serialize>(&mut self, event: &str, body: &T) -> Result<String> {
        let mut value = serde_json::to_value(body)?;
        let obj = value
            .as_object_mut()
            .context("metrics records serialize to objects")?;
        obj.insert("event".into(), serde_json::Value::String(event.into()));
        let line = serde_json::to_string(&value)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(line)
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn dataset_tag(cfg: &ExperimentConfig) -> String {
    let d = &cfg.dataset;
    match d.source {
        DatasetSource::ToyShapes => format!("toy{}x{}", d.per_class, d.resolution),
        _ => {
            let path_tag: String = sha256_hex(d.path.to_string_lossy().as_bytes())
                .chars()
                .take(8)
                .collect();
            format!("{}-{path_tag}", d.split)
        }
    }
}

fn num_classes_arg(cfg: &ExperimentConfig, dataset: &Dataset) -> Option<usize> {
    cfg.dataset.conditional.then_some(dataset.num_classes)
}

// ----- commands -----

pub fn cmd_pretrain_classifier(config: &Path, run_dir: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dataset = cfg.load_dataset()?;
    let dir = prepare_run_dir(&cfg, "classifier", run_dir)?;
    let mut metrics = Metrics::create(&dir)?;

    let out = pretrain_classifier(
        &dataset,
        &cfg.classifier_model_config_for(&dataset),
        &cfg.classifier_train_config(),
    )?;
    for r in &out.records {
        metrics.push("classifier-iteration", r)?;
    }
    metrics.push(
        "summary",
        &serde_json::json!({ "holdout_accuracy": out.holdout_accuracy }),
    )?;
    metrics.finish()?;

    let ckpt = dir.join("classifier.ckpt");
    save_classifier(&ckpt, &out.classifier, out.holdout_accuracy, cfg.seed)?;
    write_provenance(
        &dir,
        "pretrain-classifier",
        &cfg,
        &BTreeMap::new(),
        &["classifier.ckpt", "metrics.jsonl", "config.toml"],
    )?;
    println!(
        "wrote {} (holdout accuracy {:.3})",
        ckpt.display(),
        out.holdout_accuracy
    );
    Ok(())
}

pub fn cmd_train_base(config: &Path, run_dir: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dataset = cfg.load_dataset()?;
    let dir = prepare_run_dir(&cfg, "base", run_dir)?;
    let mut metrics = Metrics::create(&dir)?;

    let sched = NoiseSchedule::cosine();
    let model_cfg = cfg.denoiser_config(num_classes_arg(&cfg, &dataset));
    let out = train_base(&sched, &dataset, &model_cfg, &cfg.base_train_config())?;
    for r in &out.records {
        metrics.push("base-iteration", r)?;
    }
    metrics.finish()?;

    let body = DenoiserCkpt {
        cfg: model_cfg,
        steps: cfg.base.steps,
        weights: out.model.params.to_tensors(),
        ema: Some(
            out.ema
                .iter()
                .map(rdd_core::util::TensorData::from_array)
                .collect(),
        ),
        meta: BTreeMap::from([
            ("role".to_string(), "base".to_string()),
            ("config".to_string(), cfg.content_hash()?),
        ]),
        seed: cfg.seed,
    };
    let ckpt = dir.join("base.ckpt");
    save_denoiser(&ckpt, &body)?;
    write_provenance(
        &dir,
        "train-base",
        &cfg,
        &BTreeMap::new(),
        &["base.ckpt", "metrics.jsonl", "config.toml"],
    )?;
    println!("wrote {} ({}-step base model)", ckpt.display(), cfg.base.steps);
    Ok(())
}

#[derive(Serialize)]
struct StageIteration<'a> {
    from_steps: u32,
    to_steps: u32,
    #[serde(flatten)]
    record: &'a IterationRecord,
}

pub struct DistillArgs {
    pub config: PathBuf,
    pub teacher: PathBuf,
    pub extractor: PathBuf,
    pub method: Option<Method>,
    pub no_instance_set: bool,
    pub no_memory: bool,
    pub add_step_match: bool,
    pub run_dir: Option<PathBuf>,
}

pub fn cmd_distill(args: DistillArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(m) = args.method {
        cfg.distill.method = m;
    }
    cfg.distill.disable_instance_set |= args.no_instance_set;
    cfg.distill.disable_memory |= args.no_memory;
    cfg.distill.add_step_match |= args.add_step_match;

    let dataset = cfg.load_dataset()?;
    let (_, teacher_ckpt) = load_denoiser(&args.teacher)
        .with_context(|| format!("cannot load teacher {}", args.teacher.display()))?;
    if teacher_ckpt.steps != cfg.distill.start_steps {
        bail!(
            "teacher {} is a {}-step model, config distills from {}",
            args.teacher.display(),
            teacher_ckpt.steps,
            cfg.distill.start_steps
        );
    }
    // Distillation consumes the teacher's averaged weights.
    let teacher = sampling_model(&teacher_ckpt)?;
    let (extractor, _) = load_classifier(&args.extractor)
        .with_context(|| format!("cannot load extractor {}", args.extractor.display()))?;

    let dir = prepare_run_dir(&cfg, "distill", args.run_dir)?;
    let mut metrics = Metrics::create(&dir)?;
    let sched = NoiseSchedule::cosine();
    let method = cfg.distill.method;
    let config_hash = cfg.content_hash()?;

    let mut artifact_names: Vec<String> = vec!["metrics.jsonl".into(), "config.toml".into()];
    let mut failure: Option<anyhow::Error> = None;
    {
        let cfg_ref = &cfg;
        let teacher_checksum = teacher.checksum();
        let mut on_stage = |from: u32, to: u32, out: &rdd_core::trainer::StageOutput| {
            if failure.is_some() {
                return;
            }
            let mut save = || -> Result<()> {
                for r in &out.report.records {
                    metrics.push(
                        "distill-iteration",
                        &StageIteration { from_steps: from, to_steps: to, record: r },
                    )?;
                }
                let name = format!("student-{to}step.ckpt");
                let body = DenoiserCkpt {
                    cfg: out.student.cfg.clone(),
                    steps: to,
                    weights: out.student.params.to_tensors(),
                    ema: Some(
                        out.ema
                            .iter()
                            .map(rdd_core::util::TensorData::from_array)
                            .collect(),
                    ),
                    meta: BTreeMap::from([
                        ("role".to_string(), "student".to_string()),
                        (
                            "method".to_string(),
                            serde_json::to_value(method)?.as_str().unwrap_or("?").to_string(),
                        ),
                        ("from_steps".to_string(), from.to_string()),
                        ("teacher".to_string(), teacher_checksum.clone()),
                        ("config".to_string(), config_hash.clone()),
                    ]),
                    seed: cfg_ref.seed,
                };
                save_denoiser(&dir.join(&name), &body)?;
                artifact_names.push(name);
                println!(
                    "stage {from} -> {to}: {} iterations in {:.1}s",
                    out.report.records.len(),
                    out.report.wall_s
                );
                Ok(())
            };
            if let Err(e) = save() {
                failure = Some(e);
            }
        };

        progressive_distill(
            &sched,
            &dataset,
            &teacher,
            cfg.distill.start_steps,
            cfg.distill.end_steps,
            &extractor,
            &|from, to| cfg_ref.distill_config_for(method, from, to),
            Some(&mut on_stage),
        )?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    metrics.finish()?;

    let inputs = BTreeMap::from([
        ("teacher".to_string(), sha256_file(&args.teacher)?),
        ("extractor".to_string(), sha256_file(&args.extractor)?),
    ]);
    let names: Vec<&str> = artifact_names.iter().map(String::as_str).collect();
    write_provenance(&dir, "distill", &cfg, &inputs, &names)?;
    println!(
        "distilled {} -> {} under {}",
        cfg.distill.start_steps,
        cfg.distill.end_steps,
        dir.display()
    );
    Ok(())
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub steps: Option<u32>,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub cols: Option<usize>,
}

pub fn cmd_sample(args: SampleArgs) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be >= 1");
    }
    let (_, ckpt) = load_denoiser(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let model = sampling_model(&ckpt)?;
    let steps = args.steps.unwrap_or(ckpt.steps);
    let (c, h, w) = model.image_shape();
    if c != 1 && c != 3 {
        bail!("image grids support 1- or 3-channel models, got {c}");
    }

    // Per-sample seed streams, identical to the evaluation harness, so
    // a grid shows exactly the samples the metrics saw.
    let sched = NoiseSchedule::cosine();
    let mut z = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&[args.count, c, h, w]));
    let mut labels = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let mut rng = stream_rng(args.seed, &format!("sample/{i}"));
        z.index_axis_mut(ndarray::Axis(0), i)
            .assign(&sample_noise(&mut rng, &[c, h, w]));
        if let Some(classes) = model.num_classes() {
            labels.push(rand::Rng::random_range(&mut rng, 0..classes));
        }
    }
    let label_arg = (!labels.is_empty()).then_some(labels.as_slice());
    let images = ddim_sample(&sched, &model, &z, steps, label_arg)?;

    // Row-major tiles ordered by sample index.
    let cols = args.cols.unwrap_or_else(|| (args.count as f64).sqrt().ceil() as usize).max(1);
    let rows = args.count.div_ceil(cols);
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut grid = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..args.count {
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        let img = images.index_axis(ndarray::Axis(0), i);
        for y in 0..h {
            for x in 0..w {
                let px = if c == 1 {
                    let g = to_u8(img[[0, y, x]]);
                    image::Rgb([g, g, g])
                } else {
                    image::Rgb([
                        to_u8(img[[0, y, x]]),
                        to_u8(img[[1, y, x]]),
                        to_u8(img[[2, y, x]]),
                    ])
                };
                grid.put_pixel((c0 + x) as u32, (r0 + y) as u32, px);
            }
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    grid.save(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    println!(
        "wrote {} ({} samples at {steps} steps, {cols}x{rows} grid)",
        args.out.display(),
        args.count
    );
    Ok(())
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub classifier: PathBuf,
    pub steps: Option<u32>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvaluationLine<'a> {
    checkpoint: String,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dataset = cfg.load_dataset()?;
    let (clf, _) = load_classifier(&args.classifier)
        .with_context(|| format!("cannot load classifier {}", args.classifier.display()))?;
    let (_, ckpt) = load_denoiser(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let model = sampling_model(&ckpt)?;

    // Reference statistics are cached per (dataset, extractor) pair.
    std::fs::create_dir_all(&cfg.output_dir)?;
    let cache = cfg
        .output_dir
        .join(stats_cache_name(&dataset_tag(&cfg), &clf.params.checksum()));
    let reference = match load_stats(&cache, &clf.params.checksum())? {
        Some(stats) => stats,
        None => {
            let stats = collect_stats(&clf, &dataset.images, cfg.eval.batch)?;
            save_stats(&cache, &stats, &dataset_tag(&cfg), &clf.params.checksum())?;
            stats
        }
    };

    let sched = NoiseSchedule::cosine();
    let report = evaluate_model(
        &sched,
        &model,
        args.steps.unwrap_or(ckpt.steps),
        args.n_samples.unwrap_or(cfg.eval.n_samples),
        &clf,
        &reference,
        args.seed.unwrap_or(cfg.seed),
        cfg.eval.batch,
    )?;

    let dir = prepare_run_dir(&cfg, "eval", args.run_dir)?;
    let mut metrics = Metrics::create(&dir)?;
    let line = EvaluationLine {
        checkpoint: args.checkpoint.display().to_string(),
        report: &report,
    };
    let rendered = metrics.push("evaluation", &line)?;
    metrics.finish()?;
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), sha256_file(&args.checkpoint)?),
        ("classifier".to_string(), sha256_file(&args.classifier)?),
    ]);
    write_provenance(&dir, "evaluate", &cfg, &inputs, &["metrics.jsonl", "config.toml"])?;

    println!("{rendered}");
    Ok(())
}
