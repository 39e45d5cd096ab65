//! Task streams, the continual training loop over strategies, joint
//! references, linear-probe evaluation and the A / F / FT metrics.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::branch::{compress, expand, BranchShape};
use crate::cka::{stability_plasticity, CkaProfile, ProfileInputs};
use crate::data::{Dataset, Splits};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{BackboneSpec, FreezeStrategy, Linear, Model, Sgd, TapReduction};
use crate::scalar::Scalar;
use crate::seed::{derive_rng, derive_seed};
use crate::ssl::{ssl_train_task, SslConfig, TrainReport};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    ClassIncremental,
    DataIncremental,
}

/// One task of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub eval: Dataset,
    /// Labels present in this task, ascending.
    pub classes: Vec<usize>,
}

/// Ordered tasks `D_1..D_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub kind: SplitKind,
    pub tasks: Vec<Task>,
    /// Class label to 1-based task index (class-incremental streams only).
    pub class_to_task: Option<BTreeMap<usize, usize>>,
    pub seed: u64,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task `i`, 1-based.
    pub fn task(&self, i: usize) -> &Task {
        &self.tasks[i - 1]
    }

    /// Training data of tasks `1..=i`.
    pub fn union_train(&self, i: usize) -> Result<Dataset> {
        if i == 0 || i > self.len() {
            return Err(contract_err!("task index {i} outside 1..={}", self.len()));
        }
        Dataset::concat(&self.tasks[..i].iter().map(|t| &t.train).collect::<Vec<_>>())
    }
}

/// Sizes of `t` near-equal contiguous chunks of `n` items; the first
/// `n mod t` chunks get one extra item.
fn chunk_sizes(n: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| n / t + usize::from(i < n % t)).collect()
}

/// Classes are shuffled by `seed` and dealt into `t` contiguous groups.
/// When the class count is not divisible by `t`, earlier tasks receive one
/// extra class each.
pub fn split_class_incremental(splits: &Splits, t: usize, seed: u64) -> Result<TaskStream> {
    let n_classes = splits.train.num_classes();
    if t == 0 || t > n_classes {
        return Err(contract_err!("cannot split {n_classes} classes into {t} tasks"));
    }
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut derive_rng(seed, &[0]));
    let mut class_to_task = BTreeMap::new();
    let mut tasks = Vec::with_capacity(t);
    let mut start = 0;
    for (ti, size) in chunk_sizes(n_classes, t).into_iter().enumerate() {
        let mut classes = order[start..start + size].to_vec();
        classes.sort_unstable();
        start += size;
        classes.iter().for_each(|&c| {
            class_to_task.insert(c, ti + 1);
        });
        let pick = |d: &Dataset| {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| classes.binary_search(&d.labels()[i]).is_ok()).collect();
            d.subset(&idx)
        };
        tasks.push(Task { train: pick(&splits.train), eval: pick(&splits.eval), classes });
    }
    Ok(TaskStream { kind: SplitKind::ClassIncremental, tasks, class_to_task: Some(class_to_task), seed })
}

/// Train and eval samples are shuffled by `seed` and cut into `t` near-equal
/// contiguous chunks.
pub fn split_data_incremental(splits: &Splits, t: usize, seed: u64) -> Result<TaskStream> {
    if splits.train.is_empty() || splits.eval.is_empty() {
        return Err(contract_err!("cannot split an empty dataset"));
    }
    if t == 0 || splits.train.len() < t || splits.eval.len() < t {
        return Err(contract_err!("cannot split {} samples into {t} tasks", splits.train.len().min(splits.eval.len())));
    }
    let chunks = |d: &Dataset, salt: u64| {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.shuffle(&mut derive_rng(seed, &[salt]));
        let mut start = 0;
        chunk_sizes(d.len(), t)
            .into_iter()
            .map(|size| {
                let part = d.subset(&idx[start..start + size]);
                start += size;
                part
            })
            .collect::<Vec<_>>()
    };
    let tasks = chunks(&splits.train, 1)
        .into_iter()
        .zip(chunks(&splits.eval, 2))
        .map(|(train, eval)| Task { classes: train.classes(), train, eval })
        .collect();
    Ok(TaskStream { kind: SplitKind::DataIncremental, tasks, class_to_task: None, seed })
}

/// Linear-probe hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "ProbeConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "ProbeConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "ProbeConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "ProbeConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl ProbeConfig {
    fn default_epochs() -> usize {
        50
    }
    fn default_batch_size() -> usize {
        64
    }
    fn default_lr() -> f64 {
        0.1
    }
    fn default_momentum() -> f64 {
        0.9
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: Self::default_epochs(),
            batch_size: Self::default_batch_size(),
            lr: Self::default_lr(),
            momentum: Self::default_momentum(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

fn standardize(train: &mut [f64], eval: &mut [f64], d: usize) {
    let n = (train.len() / d) as f64;
    for j in 0..d {
        let mean = train.iter().skip(j).step_by(d).sum::<f64>() / n;
        let var = train.iter().skip(j).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var.sqrt() > 1e-8 { 1.0 / var.sqrt() } else { 1.0 };
        for buf in [&mut *train, &mut *eval] {
            buf.iter_mut().skip(j).step_by(d).for_each(|v| *v = (*v - mean) * inv);
        }
    }
}

/// Trains a fresh softmax classifier on `train` features and returns top-1
/// accuracy on `eval`. Features are standardised with training statistics.
pub fn probe_features<S: Scalar>(
    train: &Tensor<S>,
    train_labels: &[usize],
    eval: &Tensor<S>,
    eval_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let d = train.numel() / train.shape()[0];
    if train.shape()[0] != train_labels.len() || eval.shape()[0] != eval_labels.len() || eval.numel() / eval.shape()[0] != d {
        return Err(shape_err!("probe features and labels disagree"));
    }
    let mut classes: Vec<usize> = train_labels.iter().chain(eval_labels).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let distinct_eval = {
        let mut e = eval_labels.to_vec();
        e.sort_unstable();
        e.dedup();
        e.len()
    };
    if distinct_eval < 2 {
        return Err(contract_err!("linear probe needs at least 2 classes in the eval split"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(contract_err!("linear probe needs positive epochs and batch size"));
    }
    let local = |l: &usize| classes.binary_search(l).expect("class collected above");
    let ytr: Vec<usize> = train_labels.iter().map(local).collect();
    let yev: Vec<usize> = eval_labels.iter().map(local).collect();
    let mut xtr: Vec<f64> = train.data().iter().map(|v| v.as_f64()).collect();
    let mut xev: Vec<f64> = eval.data().iter().map(|v| v.as_f64()).collect();
    standardize(&mut xtr, &mut xev, d);

    let mut head = Linear::<f64>::new("probe", d, classes.len(), 1.0, &mut derive_rng(cfg.seed, &[0]))?;
    let mut opt = Sgd::<f64>::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..ytr.len()).collect();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut derive_rng(cfg.seed, &[1, epoch as u64]));
        for idx in order.chunks(cfg.batch_size) {
            tape.clear();
            let rows: Vec<f64> = idx.iter().flat_map(|&i| xtr[i * d..(i + 1) * d].iter().copied()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let x = tape.constant(&[idx.len(), d], rows)?;
            let w = tape.leaf(&head.weight);
            let b = tape.leaf(&head.bias);
            let logits = tape.matmul(x, w)?;
            let logits = tape.add_row_bias(logits, b)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let g = tape.backward(loss)?;
            head.weight.zero_grad();
            head.bias.zero_grad();
            head.weight.accumulate_grad(g.get(w).expect("weight gradient"))?;
            head.bias.accumulate_grad(g.get(b).expect("bias gradient"))?;
            opt.step_param("probe.weight", &mut head.weight);
            opt.step_param("probe.bias", &mut head.bias);
        }
    }
    let c = classes.len();
    let (w, b) = (head.weight.data(), head.bias.data());
    let correct = yev
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &xev[i * d..(i + 1) * d];
            let score = |k: usize| b[k] + row.iter().enumerate().map(|(j, v)| v * w[j * c + k]).sum::<f64>();
            let best = (1..c).fold(0, |best, k| if score(k) > score(best) { k } else { best });
            best == y
        })
        .count();
    Ok(correct as f64 / yev.len() as f64)
}

const EMBED_CHUNK: usize = 128;

/// Linear-probe accuracy of `encoder`'s embeddings. The encoder is only read.
pub fn linear_probe<S: Scalar>(encoder: &Model<S>, train: &Dataset, eval: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let ftr = encoder.embed(&train.images_tensor()?, EMBED_CHUNK)?;
    let fev = encoder.embed(&eval.images_tensor()?, EMBED_CHUNK)?;
    probe_features(&ftr, train.labels(), &fev, eval.labels(), cfg)
}

/// `Acc[stage][task]` for stages `0..=T` (0 is the random init) and tasks `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self { tasks, cells: vec![vec![None; tasks]; tasks + 1] }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn check(&self, stage: usize, task: usize) -> Result<()> {
        if stage > self.tasks || task == 0 || task > self.tasks {
            return Err(contract_err!("entry ({stage}, {task}) outside a {}-task matrix", self.tasks));
        }
        Ok(())
    }

    pub fn set(&mut self, stage: usize, task: usize, acc: f64) -> Result<()> {
        self.check(stage, task)?;
        if !(0.0..=1.0).contains(&acc) {
            return Err(contract_err!("accuracy {acc} outside [0, 1]"));
        }
        self.cells[stage][task - 1] = Some(acc);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.check(stage, task).ok()?;
        self.cells[stage][task - 1]
    }

    fn require(&self, stage: usize, task: usize) -> Result<f64> {
        self.get(stage, task).ok_or_else(|| contract_err!("accuracy entry ({stage}, {task}) is missing"))
    }

    /// `stage,task,accuracy` rows for every populated entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,task,accuracy\n");
        for (s, row) in self.cells.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    out.push_str(&format!("{s},{},{v}\n", i + 1));
                }
            }
        }
        out
    }

    pub fn from_csv(tasks: usize, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("stage,task,accuracy") {
            return Err(Error::Format("missing accuracy matrix header".into()));
        }
        let mut m = Self::new(tasks);
        for line in lines.filter(|l| !l.is_empty()) {
            let bad = || Error::Format(format!("malformed accuracy row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let (s, t, v) = (f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?);
            m.set(s, t, v)?;
        }
        Ok(m)
    }
}

/// Average accuracy, forgetting and forward transfer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub a: f64,
    /// `None` for single-task streams.
    pub f: Option<f64>,
    pub ft: Option<f64>,
}

/// `A = mean_i Acc[T][i]`;
/// `F = mean_{i<T} (max_{s∈i..T} Acc[s][i] − Acc[T][i])`;
/// `FT = mean_{i≥2} (Acc[i−1][i] − R_i)`. `baseline[i-1]` holds `R_i`.
pub fn metrics(acc: &AccuracyMatrix, baseline: &[f64]) -> Result<Metrics> {
    let t = acc.tasks();
    if t == 0 {
        return Err(contract_err!("metrics need at least one task"));
    }
    let a = (1..=t).map(|i| acc.require(t, i)).sum::<Result<f64>>()? / t as f64;
    if t == 1 {
        return Ok(Metrics { a, f: None, ft: None });
    }
    if baseline.len() != t {
        return Err(contract_err!("random baseline has {} entries for {t} tasks", baseline.len()));
    }
    let mut f = 0.0;
    for i in 1..t {
        let mut best = f64::NEG_INFINITY;
        for s in i..=t {
            best = best.max(acc.require(s, i)?);
        }
        f += best - acc.require(t, i)?;
    }
    let mut ft = 0.0;
    for i in 2..=t {
        ft += acc.require(i - 1, i)? - baseline[i - 1];
    }
    let denom = (t - 1) as f64;
    Ok(Metrics { a, f: Some(f / denom), ft: Some(ft / denom) })
}

/// How the encoder learns on tasks after the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StrategySpec", into = "StrategySpec")]
pub enum Strategy {
    FineTune,
    Fixed,
    /// `fix_bn` defaults to fixed BN for 1x3 and 3x3 branches, trainable for 1x1.
    BranchTune { shape: BranchShape, fix_bn: Option<bool> },
    FreezeGrid { variant: FreezeStrategy },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StrategyKind {
    FineTune,
    Fixed,
    BranchTune,
    FreezeGrid,
}

/// Flat wire form, so that keys which do not belong to the kind are rejected.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategySpec {
    kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<BranchShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fix_bn: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variant: Option<FreezeStrategy>,
}

impl TryFrom<StrategySpec> for Strategy {
    type Error = String;

    fn try_from(s: StrategySpec) -> std::result::Result<Self, String> {
        let extra = |ok: [bool; 3]| {
            let given = [s.shape.is_some(), s.fix_bn.is_some(), s.variant.is_some()];
            let names = ["shape", "fix_bn", "variant"];
            match (0..3).find(|&i| given[i] && !ok[i]) {
                Some(i) => Err(format!("`{}` is not valid for strategy {:?}", names[i], s.kind)),
                None => Ok(()),
            }
        };
        match s.kind {
            StrategyKind::FineTune => extra([false; 3]).map(|_| Strategy::FineTune),
            StrategyKind::Fixed => extra([false; 3]).map(|_| Strategy::Fixed),
            StrategyKind::BranchTune => {
                extra([true, true, false])?;
                let shape = s.shape.ok_or("branch_tune needs `shape`")?;
                Ok(Strategy::BranchTune { shape, fix_bn: s.fix_bn })
            }
            StrategyKind::FreezeGrid => {
                extra([false, false, true])?;
                Ok(Strategy::FreezeGrid { variant: s.variant.ok_or("freeze_grid needs `variant`")? })
            }
        }
    }
}

impl From<Strategy> for StrategySpec {
    fn from(s: Strategy) -> Self {
        let mut spec = StrategySpec { kind: StrategyKind::Fixed, shape: None, fix_bn: None, variant: None };
        match s {
            Strategy::FineTune => spec.kind = StrategyKind::FineTune,
            Strategy::Fixed => {}
            Strategy::BranchTune { shape, fix_bn } => {
                spec = StrategySpec { kind: StrategyKind::BranchTune, shape: Some(shape), fix_bn, variant: None }
            }
            Strategy::FreezeGrid { variant } => {
                spec = StrategySpec { kind: StrategyKind::FreezeGrid, shape: None, fix_bn: None, variant: Some(variant) }
            }
        }
        spec
    }
}

impl Strategy {
    pub fn branch_fix_bn(shape: BranchShape, fix_bn: Option<bool>) -> bool {
        fix_bn.unwrap_or(shape != BranchShape::K1x1)
    }

    pub fn label(&self) -> String {
        match *self {
            Strategy::FineTune => "fine_tune".into(),
            Strategy::Fixed => "fixed".into(),
            Strategy::BranchTune { shape, fix_bn } => {
                let bn = if Strategy::branch_fix_bn(shape, fix_bn) { "fix_bn" } else { "tune_bn" };
                format!("branch_tune_{shape}_{bn}")
            }
            Strategy::FreezeGrid { variant } => format!("{variant:?}"),
        }
    }
}

/// Layer-wise CKA profiling of every stage after the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default = "ProfileConfig::default_enabled")]
    pub enabled: bool,
    /// Upper bound on evaluation images per side.
    #[serde(default = "ProfileConfig::default_max_samples")]
    pub max_samples: usize,
    #[serde(default)]
    pub reduction: TapReduction,
    pub seed: u64,
}

impl ProfileConfig {
    fn default_enabled() -> bool {
        true
    }
    fn default_max_samples() -> usize {
        256
    }
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            enabled: Self::default_enabled(),
            max_samples: Self::default_max_samples(),
            reduction: TapReduction::SpatialMean,
            seed: 0,
        }
    }
}

/// Everything that defines a continual run on a given stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub backbone: BackboneSpec,
    pub model_seed: u64,
    pub ssl: SslConfig,
    pub probe: ProbeConfig,
    pub profile: ProfileConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate().map_err(|e| Error::Config(e.to_string()))?;
        let s = &self.ssl;
        if s.epochs == 0 && self.strategy != Strategy::Fixed {
            return Err(Error::Config("only the fixed strategy admits zero training epochs".into()));
        }
        if s.batch_size < 2 {
            return Err(Error::Config("ssl.batch_size must be at least 2".into()));
        }
        if !(s.temperature > 0.0) || !(s.lr >= 0.0) {
            return Err(Error::Config("ssl.temperature must be positive and ssl.lr non-negative".into()));
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 {
            return Err(Error::Config("probe.epochs and probe.batch_size must be positive".into()));
        }
        if self.profile.enabled && self.profile.max_samples < 2 {
            return Err(Error::Config("profile.max_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// Encoder trained from scratch on the union of the first `i` tasks.
#[derive(Clone, Debug)]
pub struct JointReference<S: Scalar> {
    pub model: Model<S>,
    pub samples: usize,
    pub report: TrainReport,
}

fn stage_ssl(cfg: &SslConfig, stage: usize) -> SslConfig {
    SslConfig { seed: derive_seed(cfg.seed, &[stage as u64]), ..cfg.clone() }
}

fn train_from_scratch<S: Scalar>(cfg: &RunConfig, data: &Dataset, stage: usize) -> Result<(Model<S>, TrainReport)> {
    let mut model = Model::build(&cfg.backbone, cfg.model_seed)?;
    model.set_strategy(FreezeStrategy::FineTuneAll);
    let report = ssl_train_task(&mut model, data, &stage_ssl(&cfg.ssl, stage))?;
    Ok((model, report))
}

pub fn joint_train_reference<S: Scalar>(stream: &TaskStream, i: usize, cfg: &RunConfig) -> Result<JointReference<S>> {
    let data = stream.union_train(i)?;
    let (model, report) = train_from_scratch(cfg, &data, i)?;
    Ok(JointReference { model, samples: data.len(), report })
}

/// Outcome of a continual run.
#[derive(Clone, Debug)]
pub struct RunOutcome<S: Scalar> {
    pub strategy: Strategy,
    /// Encoder after each stage; index 0 is the random init. Kept for
    /// measurement and checkpointing only.
    pub stage_models: Vec<Model<S>>,
    pub accuracy: AccuracyMatrix,
    /// `R_i` for tasks `1..=T`.
    pub random_baseline: Vec<f64>,
    pub profiles: Vec<CkaProfile>,
    pub reports: Vec<TrainReport>,
    /// Trainable encoder parameters during each stage.
    pub trainable_params: Vec<usize>,
    pub metrics: Option<Metrics>,
}

impl<S: Scalar> RunOutcome<S> {
    pub fn final_model(&self) -> &Model<S> {
        self.stage_models.last().expect("init model is always present")
    }
}

/// A stage failed; `partial` holds everything recorded before it.
#[derive(Debug)]
pub struct StageFailure<S: Scalar> {
    pub stage: usize,
    pub error: Error,
    pub partial: Box<RunOutcome<S>>,
}

impl<S: Scalar> fmt::Display for StageFailure<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl<S: Scalar> std::error::Error for StageFailure<S> {}

/// Shared state for several runs on one stream and configuration: the first
/// stage, joint references and random-init probes are computed once and
/// reused by every strategy.
pub struct Lab<'a, S: Scalar> {
    stream: &'a TaskStream,
    cfg: RunConfig,
    init: Model<S>,
    first: Option<(Model<S>, TrainReport)>,
    joints: BTreeMap<usize, JointReference<S>>,
    probes: BTreeMap<(usize, usize), f64>,
}

impl<'a, S: Scalar> Lab<'a, S> {
    /// The strategy inside `cfg` is ignored; pass one to [`Lab::run`].
    pub fn new(stream: &'a TaskStream, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if stream.is_empty() {
            return Err(contract_err!("task stream is empty"));
        }
        let init = Model::build(&cfg.backbone, cfg.model_seed)?;
        Ok(Self { stream, cfg: cfg.clone(), init, first: None, joints: BTreeMap::new(), probes: BTreeMap::new() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn joint(&mut self, i: usize) -> Result<&JointReference<S>> {
        if !self.joints.contains_key(&i) {
            let j = if i == 1 {
                let (model, report) = self.first_stage()?.clone();
                JointReference { model, samples: self.stream.task(1).train.len(), report }
            } else {
                joint_train_reference(self.stream, i, &self.cfg)?
            };
            self.joints.insert(i, j);
        }
        Ok(&self.joints[&i])
    }

    fn first_stage(&mut self) -> Result<&(Model<S>, TrainReport)> {
        if self.first.is_none() {
            self.first = Some(train_from_scratch(&self.cfg, &self.stream.task(1).train, 1)?);
        }
        Ok(self.first.as_ref().expect("just set"))
    }

    fn probe(&self, model: &Model<S>, task: usize) -> Result<f64> {
        let t = self.stream.task(task);
        linear_probe(model, &t.train, &t.eval, &self.cfg.probe)
    }

    /// Probe cache for the stages every strategy shares (0 and 1).
    fn shared_probe(&mut self, stage: usize, model: &Model<S>, task: usize) -> Result<f64> {
        if let Some(&v) = self.probes.get(&(stage, task)) {
            return Ok(v);
        }
        let v = self.probe(model, task)?;
        self.probes.insert((stage, task), v);
        Ok(v)
    }

    fn sample_eval(&self, tasks: std::ops::RangeInclusive<usize>, stage: usize, salt: u64) -> Result<Tensor<S>> {
        let parts: Vec<&Dataset> = tasks.map(|i| &self.stream.task(i).eval).collect();
        let pool = Dataset::concat(&parts)?;
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        if idx.len() > self.cfg.profile.max_samples {
            idx.shuffle(&mut derive_rng(self.cfg.profile.seed, &[stage as u64, salt]));
            idx.truncate(self.cfg.profile.max_samples);
            idx.sort_unstable();
        }
        pool.batch(&idx)
    }

    fn train_stage(&self, model: &Model<S>, strategy: Strategy, stage: usize) -> Result<(Model<S>, TrainReport, usize)> {
        let data = &self.stream.task(stage).train;
        let ssl = stage_ssl(&self.cfg.ssl, stage);
        match strategy {
            Strategy::BranchTune { shape, fix_bn } => {
                let mut expanded = expand(model, shape)?;
                let bn = if Strategy::branch_fix_bn(shape, fix_bn) {
                    FreezeStrategy::TuneConvFixBn
                } else {
                    FreezeStrategy::TuneConvTuneBn
                };
                expanded.set_strategy(bn);
                let trainable = expanded.trainable_encoder_params();
                let report = ssl_train_task(&mut expanded, data, &ssl)?;
                Ok((compress(&expanded)?, report, trainable))
            }
            other => {
                let variant = match other {
                    Strategy::FineTune => FreezeStrategy::FineTuneAll,
                    Strategy::Fixed => FreezeStrategy::FixedAll,
                    Strategy::FreezeGrid { variant } => variant,
                    Strategy::BranchTune { .. } => unreachable!("handled above"),
                };
                let mut next = model.clone();
                next.set_strategy(variant);
                let trainable = next.trainable_encoder_params();
                let report = ssl_train_task(&mut next, data, &ssl)?;
                Ok((next, report, trainable))
            }
        }
    }

    pub fn run(&mut self, strategy: Strategy) -> std::result::Result<RunOutcome<S>, StageFailure<S>> {
        let t = self.stream.len();
        let mut out = RunOutcome {
            strategy,
            stage_models: vec![self.init.clone()],
            accuracy: AccuracyMatrix::new(t),
            random_baseline: Vec::new(),
            profiles: Vec::new(),
            reports: Vec::new(),
            trainable_params: Vec::new(),
            metrics: None,
        };
        for stage in 0..=t {
            if let Err(error) = self.run_stage(stage, &mut out) {
                return Err(StageFailure { stage, error, partial: Box::new(out) });
            }
        }
        match metrics(&out.accuracy, &out.random_baseline) {
            Ok(m) => out.metrics = Some(m),
            Err(error) => return Err(StageFailure { stage: t, error, partial: Box::new(out) }),
        }
        Ok(out)
    }

    fn run_stage(&mut self, stage: usize, out: &mut RunOutcome<S>) -> Result<()> {
        let t = self.stream.len();
        if stage == 0 {
            let init = self.init.clone();
            for i in 1..=t {
                let r = self.shared_probe(0, &init, i)?;
                out.random_baseline.push(r);
                out.accuracy.set(0, i, r)?;
            }
            return Ok(());
        }
        let shared = stage == 1;
        let (model, report, trainable) = if shared {
            let (m, r) = self.first_stage()?.clone();
            let trainable = self.init.encoder_param_count();
            (m, r, trainable)
        } else {
            self.train_stage(out.final_model(), out.strategy, stage)?
        };
        for i in 1..=(stage + 1).min(t) {
            let acc = if shared { self.shared_probe(1, &model, i)? } else { self.probe(&model, i)? };
            out.accuracy.set(stage, i, acc)?;
        }
        if self.cfg.profile.enabled && stage >= 2 {
            let old = self.sample_eval(1..=stage - 1, stage, 0)?;
            let new = self.sample_eval(stage..=stage, stage, 1)?;
            let previous = out.final_model().clone();
            let joint = self.joint(stage)?.model.clone();
            out.profiles.push(stability_plasticity(&ProfileInputs {
                stage,
                previous: &previous,
                current: &model,
                joint: &joint,
                old_data: &old,
                new_data: &new,
                reduction: self.cfg.profile.reduction,
                chunk: EMBED_CHUNK,
            })?);
        }
        out.reports.push(report);
        out.trainable_params.push(trainable);
        out.stage_models.push(model);
        Ok(())
    }
}

/// One full continual run with the strategy in `cfg`.
pub fn run_continual<S: Scalar>(
    stream: &TaskStream,
    cfg: &RunConfig,
) -> std::result::Result<RunOutcome<S>, StageFailure<S>> {
    let mut lab = match Lab::new(stream, cfg) {
        Ok(lab) => lab,
        Err(error) => {
            let partial = RunOutcome {
                strategy: cfg.strategy,
                stage_models: Vec::new(),
                accuracy: AccuracyMatrix::new(stream.len()),
                random_baseline: Vec::new(),
                profiles: Vec::new(),
                reports: Vec::new(),
                trainable_params: Vec::new(),
                metrics: None,
            };
            return Err(StageFailure { stage: 0, error, partial: Box::new(partial) });
        }
    };
    lab.run(cfg.strategy)
}
