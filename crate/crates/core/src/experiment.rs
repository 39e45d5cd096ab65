//! Config-driven experiments: parsing, dataset construction, running a
//! continual stream end to end and writing its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cka::{cka, CkaProfile, FeatureMatrix};
use crate::continual::{
    linear_probe, run_continual, split_class_incremental, split_data_incremental, AccuracyMatrix, RunConfig, RunOutcome,
    SplitKind, TaskStream,
};
use crate::data::{gen_synthetic, load_cifar100_binary, Dataset, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::Model;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// CIFAR-100 binary files; relative paths are resolved against the
    /// directory of the config file.
    Cifar100 { train_path: PathBuf, eval_path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub kind: SplitKind,
    pub tasks: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; the command line may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub checkpoints: bool,
}

fn default_true() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, checkpoints: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub stream: StreamConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.run.validate()?;
        if cfg.stream.tasks == 0 {
            return Err(Error::Config("stream.tasks must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Reads `path` and resolves dataset paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetConfig::Cifar100 { train_path, eval_path } = &mut cfg.dataset {
            for p in [train_path, eval_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every run seed (stream, model, SSL, probe, profiling) with
    /// `seed`. The dataset seed is kept, so the data stays the same.
    pub fn reseed(&mut self, seed: u64) {
        self.stream.seed = seed;
        self.run.model_seed = seed;
        self.run.ssl.seed = seed;
        self.run.probe.seed = seed;
        self.run.profile.seed = seed;
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn build_splits(cfg: &DatasetConfig) -> Result<Splits> {
    match cfg {
        DatasetConfig::Synthetic(spec) => gen_synthetic(spec),
        DatasetConfig::Cifar100 { train_path, eval_path } => {
            Ok(Splits { train: load_cifar100_binary(train_path)?, eval: load_cifar100_binary(eval_path)? })
        }
    }
}

pub fn build_stream(cfg: &ExperimentConfig) -> Result<TaskStream> {
    let splits = build_splits(&cfg.dataset)?;
    if splits.train.image_shape() != [cfg.run.backbone.input_channels, cfg.run.backbone.input_size, cfg.run.backbone.input_size] {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the backbone expects {} channels at {}px",
            splits.train.image_shape(),
            cfg.run.backbone.input_channels,
            cfg.run.backbone.input_size
        )));
    }
    match cfg.stream.kind {
        SplitKind::ClassIncremental => split_class_incremental(&splits, cfg.stream.tasks, cfg.stream.seed),
        SplitKind::DataIncremental => split_data_incremental(&splits, cfg.stream.tasks, cfg.stream.seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub trainable_encoder_params: usize,
    pub skipped: bool,
    pub epoch_losses: Vec<f64>,
    pub mean_stability: Option<f64>,
    pub mean_plasticity: Option<f64>,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub strategy: String,
    #[serde(rename = "A")]
    pub a: Option<f64>,
    #[serde(rename = "F")]
    pub f: Option<f64>,
    #[serde(rename = "FT")]
    pub ft: Option<f64>,
    pub random_baseline: Vec<f64>,
    pub accuracy: AccuracyMatrix,
    pub stages: Vec<StageSummary>,
    pub config_digest: String,
    pub config: ExperimentConfig,
}

fn summarize(outcome: &RunOutcome<f32>, cfg: &ExperimentConfig, error: Option<String>) -> Result<MetricsReport> {
    let stages = outcome
        .reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let stage = i + 1;
            let profile = outcome.profiles.iter().find(|p| p.stage == stage);
            StageSummary {
                stage,
                trainable_encoder_params: outcome.trainable_params[i],
                skipped: r.skipped,
                epoch_losses: r.epoch_losses.clone(),
                mean_stability: profile.map(CkaProfile::mean_stability),
                mean_plasticity: profile.map(CkaProfile::mean_plasticity),
            }
        })
        .collect();
    Ok(MetricsReport {
        status: if error.is_some() { "failed" } else { "ok" }.into(),
        error,
        strategy: outcome.strategy.label(),
        a: outcome.metrics.map(|m| m.a),
        f: outcome.metrics.and_then(|m| m.f),
        ft: outcome.metrics.and_then(|m| m.ft),
        random_baseline: outcome.random_baseline.clone(),
        accuracy: outcome.accuracy.clone(),
        stages,
        config_digest: cfg.digest()?,
        config: cfg.clone(),
    })
}

fn write_artifacts(outcome: &RunOutcome<f32>, report: &MetricsReport, out: &Path, checkpoints: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("metrics.json"), json + "\n")?;
    fs::write(out.join("effective_config.toml"), report.config.to_toml()?)?;
    fs::write(out.join("accuracy_matrix.csv"), outcome.accuracy.to_csv())?;
    for p in &outcome.profiles {
        fs::write(out.join(format!("cka_stage_{}.csv", p.stage)), p.to_csv())?;
    }
    if checkpoints {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir)?;
        for (s, m) in outcome.stage_models.iter().enumerate() {
            save_checkpoint(m, &dir.join(format!("stage_{s}.ckpt")))?;
        }
    }
    Ok(())
}

/// Output directory: the override if given, else the config's, else `out`.
pub fn output_dir(cfg: &ExperimentConfig, override_dir: Option<&Path>) -> PathBuf {
    override_dir.map(Path::to_path_buf).or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs the experiment and writes its artifacts to `out`. A failing stage
/// still writes a partial report before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let stream = build_stream(cfg)?;
    match run_continual::<f32>(&stream, &cfg.run) {
        Ok(outcome) => {
            let report = summarize(&outcome, cfg, None)?;
            write_artifacts(&outcome, &report, out, cfg.output.checkpoints)?;
            Ok(report)
        }
        Err(failure) => {
            let report = summarize(&failure.partial, cfg, Some(failure.to_string()))?;
            write_artifacts(&failure.partial, &report, out, cfg.output.checkpoints)?;
            Err(failure.error)
        }
    }
}

/// Linear-probe accuracy of a saved encoder on every task of the configured
/// stream.
pub fn probe_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<(usize, f64)>> {
    let model: Model<f32> = load_checkpoint(checkpoint)?;
    let stream = build_stream(cfg)?;
    (1..=stream.len())
        .map(|i| {
            let t = stream.task(i);
            Ok((i, linear_probe(&model, &t.train, &t.eval, &cfg.run.probe)?))
        })
        .collect()
}

/// Per-tap CKA between two saved encoders on the eval split of `task`
/// (all tasks when `None`), capped at the profiling sample limit.
pub fn cka_between(cfg: &ExperimentConfig, a: &Path, b: &Path, task: Option<usize>) -> Result<Vec<(String, f64)>> {
    let ma: Model<f32> = load_checkpoint(a)?;
    let mb: Model<f32> = load_checkpoint(b)?;
    let stream = build_stream(cfg)?;
    let parts: Vec<&Dataset> = match task {
        Some(i) if i >= 1 && i <= stream.len() => vec![&stream.task(i).eval],
        Some(i) => return Err(Error::Config(format!("task {i} outside 1..={}", stream.len()))),
        None => stream.tasks.iter().map(|t| &t.eval).collect(),
    };
    let pool = Dataset::concat(&parts)?;
    let n = pool.len().min(cfg.run.profile.max_samples.max(2));
    let images = pool.batch::<f32>(&(0..n).collect::<Vec<_>>())?;
    let fa = ma.activations(&images, 128, cfg.run.profile.reduction)?;
    let fb = mb.activations(&images, 128, cfg.run.profile.reduction)?;
    fa.into_iter()
        .zip(fb)
        .map(|((name, x), (other, y))| {
            if name != other {
                return Err(Error::Shape(format!("tap {name} has no counterpart (found {other})")));
            }
            let score = match cka(&FeatureMatrix::from_tensor(&x.cast::<f64>())?, &FeatureMatrix::from_tensor(&y.cast::<f64>())?) {
                Ok(v) => v,
                Err(Error::UndefinedScore(_)) => 0.0,
                Err(e) => return Err(e),
            };
            Ok((name, score))
        })
        .collect()
}

/// Human-readable summary of a finished run directory. Every artifact is
/// parsed back, so this doubles as a format check.
pub fn report_summary(dir: &Path) -> Result<String> {
    let text = fs::read_to_string(dir.join("metrics.json"))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("metrics.json: {e}")))?;
    let t = report.accuracy.tasks();
    let csv = AccuracyMatrix::from_csv(t, &fs::read_to_string(dir.join("accuracy_matrix.csv"))?)?;
    if csv != report.accuracy {
        return Err(Error::Format("accuracy_matrix.csv disagrees with metrics.json".into()));
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let mut out = format!(
        "strategy {} ({})\nA {}  F {}  FT {}\n\nstage",
        report.strategy,
        report.status,
        fmt(report.a),
        fmt(report.f),
        fmt(report.ft)
    );
    for i in 1..=t {
        out.push_str(&format!("  task{i:<3}"));
    }
    out.push('\n');
    for s in 0..=t {
        out.push_str(&format!("{s:<5}"));
        for i in 1..=t {
            out.push_str(&format!("  {:<7}", csv.get(s, i).map_or("-".into(), |v| format!("{v:.4}"))));
        }
        out.push('\n');
    }
    for s in 2..=t {
        let path = dir.join(format!("cka_stage_{s}.csv"));
        if path.exists() {
            let p = CkaProfile::from_csv(s, &fs::read_to_string(path)?)?;
            out.push_str(&format!(
                "stage {s}: mean stability {:.4}, mean plasticity {:.4} over {} layers\n",
                p.mean_stability(),
                p.mean_plasticity(),
                p.layers.len()
            ));
        }
    }
    Ok(out)
}

/// Writes `splits` as CIFAR-100 style binary files `train.bin` and `eval.bin`
/// (fine label = class, coarse label 0, pixels quantised to bytes).
pub fn write_cifar_layout(splits: &Splits, dir: &Path) -> Result<()> {
    let [c, h, w] = splits.train.image_shape();
    if [c, h, w] != [3, 32, 32] || splits.train.num_classes() > 100 {
        return Err(Error::Contract("the CIFAR-100 layout needs 3×32×32 images and at most 100 classes".into()));
    }
    fs::create_dir_all(dir)?;
    for (name, d) in [("train.bin", &splits.train), ("eval.bin", &splits.eval)] {
        let mut bytes = Vec::with_capacity(d.len() * 3074);
        for i in 0..d.len() {
            bytes.push(0);
            bytes.push(d.labels()[i] as u8);
            bytes.extend(d.image(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}
