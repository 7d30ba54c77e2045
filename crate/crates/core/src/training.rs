//! Composite objective, λ controller, r schedule and the multi-seed
//! experiment runner.
//!
//! Each optimisation step minimises `ce + λ·mismatch`, where `ce` is the mean
//! cross-entropy of a training minibatch and `mismatch` is the squared
//! difference between the teacher RSM and the network RSM of the attached
//! layer over a random subset of the teacher stimuli. Both paths share one
//! tape, so one backward sweep yields the composite gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::eval::{corrupt_labels, evaluate, mean_unit_variance, superclass_error_fraction, SuperclassErrors, SuperclassMap};
use crate::nn::{build_network, save_checkpoint, Graph, Mode, Network, NetworkSpec, NodeId, Real, Tensor};
use crate::rsm::{activations_to_responses, compute_rsm, mismatch_scale, rsm_mismatch, Rsm};
use crate::stats::{mean_sem, MeanSem};
use crate::teacher::{TeacherKind, TeacherSpec};

/// Version of the record layout written by [`ExperimentRecord`].
pub const RECORD_SCHEMA: u32 = 1;

const STREAM_ORDER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_STIMULI: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Re-fit λ so that `λ·mismatch / ce` equals `r`.
    #[default]
    ConstantRatio,
    /// Hold λ at `fixed_lambda` while the teacher is active.
    Constant,
}

impl FromStr for LambdaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_ratio" | "constant-ratio" | "ratio" => Ok(Self::ConstantRatio),
            "constant" => Ok(Self::Constant),
            _ => Err(Error::Config(format!("unknown lambda mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaCadence {
    /// At the start of each epoch, from the previous epoch's mean terms (the
    /// first epoch uses the first minibatch's terms before its step).
    #[default]
    Epoch,
    /// Before every step, from that step's terms.
    Batch,
}

impl FromStr for LambdaCadence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(Self::Epoch),
            "batch" => Ok(Self::Batch),
            _ => Err(Error::Config(format!("unknown lambda cadence `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Free-form name used to group records in summaries.
    #[serde(default)]
    pub label: String,
    pub network: NetworkSpec,
    pub teacher: TeacherSpec,
    pub r: f64,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub fixed_lambda: f64,
    #[serde(default)]
    pub lambda_cadence: LambdaCadence,
    pub neural_epochs: usize,
    pub total_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stimulus_batch: usize,
    #[serde(default)]
    pub normalize_rsm_loss: bool,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub label_corruption_fraction: f64,
    #[serde(default)]
    pub allow_corruption_above_half: bool,
    /// Write a checkpoint after every K-th epoch.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
    /// Test images used for the unit-variance metric.
    pub variance_images: usize,
    /// Layer whose unit variance is reported; defaults to the V1-like layer.
    #[serde(default)]
    pub variance_tag: Option<String>,
}

impl TrainConfig {
    /// Defaults for `network`: 10 of 100 teacher epochs and batch 128 for
    /// CORNet-Z variants, 100 of 250 and batch 256 for VGG-16.
    pub fn for_network(network: NetworkSpec) -> Self {
        let vgg = network.arch == crate::nn::Architecture::Vgg16;
        Self {
            label: String::new(),
            teacher: TeacherSpec::default(),
            r: 0.0,
            lambda_mode: LambdaMode::ConstantRatio,
            fixed_lambda: 0.0,
            lambda_cadence: LambdaCadence::Epoch,
            neural_epochs: if vgg { 100 } else { 10 },
            total_epochs: if vgg { 250 } else { 100 },
            learning_rate: 0.01,
            batch_size: if vgg { 256 } else { 128 },
            stimulus_batch: 64,
            normalize_rsm_loss: false,
            seeds: (1..=10).collect(),
            label_corruption_fraction: 0.0,
            allow_corruption_above_half: false,
            checkpoint_every: None,
            precision: Precision::F32,
            variance_images: 1280,
            variance_tag: None,
            network,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.teacher.validate(&self.network)?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return bad(format!("r must be a finite non-negative number, got {}", self.r));
        }
        if !(self.fixed_lambda >= 0.0 && self.fixed_lambda.is_finite()) {
            return bad(format!("fixed_lambda must be finite and non-negative, got {}", self.fixed_lambda));
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be positive".into());
        }
        if self.neural_epochs > self.total_epochs {
            return bad(format!(
                "neural_epochs ({}) exceeds total_epochs ({})",
                self.neural_epochs, self.total_epochs
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.stimulus_batch < 2 {
            return bad("stimulus_batch must be at least 2".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let f = self.label_corruption_fraction;
        if !(0.0..=1.0).contains(&f) || (f > 0.5 && !self.allow_corruption_above_half) {
            return bad(format!("label_corruption_fraction {f} outside [0, 0.5]"));
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        if self.variance_images == 0 {
            return bad("variance_images must be positive".into());
        }
        if let Some(tag) = self.variance_tag.as_ref().filter(|t| !self.network.tags.contains_key(*t)) {
            return bad(format!("unknown layer tag `{tag}`"));
        }
        Ok(())
    }

    /// Whether any step can carry a non-zero teacher term.
    pub fn teacher_active(&self) -> bool {
        self.teacher.kind != TeacherKind::None
            && self.neural_epochs > 0
            && match self.lambda_mode {
                LambdaMode::ConstantRatio => self.r > 0.0,
                LambdaMode::Constant => self.fixed_lambda > 0.0,
            }
    }

    pub fn variance_tag(&self) -> &str {
        self.variance_tag.as_deref().unwrap_or_else(|| self.network.default_teacher_tag())
    }
}

/// `λ·mismatch + ce`.
pub fn composite_loss(ce: f64, mismatch: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("cross-entropy", ce), ("mismatch", mismatch), ("lambda", lambda)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    Ok(lambda * mismatch + ce)
}

/// Teacher ratio in force during `epoch` (0-based).
pub fn scheduled_r(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.neural_epochs {
        config.r
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub current_lambda: f64,
    pub target_r: f64,
    pub last_mismatch: f64,
    pub last_ce: f64,
}

impl LambdaState {
    pub fn new(target_r: f64) -> Self {
        Self {
            current_lambda: 0.0,
            target_r,
            last_mismatch: 0.0,
            last_ce: 0.0,
        }
    }

    /// Ratio `λ·mismatch / ce` at the stored terms.
    pub fn ratio(&self) -> f64 {
        self.current_lambda * self.last_mismatch / self.last_ce
    }
}

/// `λ ← r·ce / mismatch`. A zero term leaves λ unchanged.
pub fn update_lambda(state: &LambdaState, mismatch: f64, ce: f64) -> Result<LambdaState> {
    if !(mismatch >= 0.0 && mismatch.is_finite() && ce >= 0.0 && ce.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda update needs finite non-negative terms, got mismatch {mismatch}, ce {ce}"
        )));
    }
    if state.target_r == 0.0 {
        return Ok(LambdaState {
            current_lambda: 0.0,
            last_mismatch: mismatch,
            last_ce: ce,
            ..*state
        });
    }
    if mismatch == 0.0 || ce == 0.0 {
        log::info!("lambda kept at {} (mismatch {mismatch}, ce {ce})", state.current_lambda);
        return Ok(*state);
    }
    Ok(LambdaState {
        current_lambda: state.target_r * ce / mismatch,
        target_r: state.target_r,
        last_mismatch: mismatch,
        last_ce: ce,
    })
}

/// Stimulus images and teacher RSM for the similarity pathway.
pub struct TeacherPathway<T: Real> {
    pub stimuli: Tensor<T>,
    pub teacher: Rsm,
    pub tag: String,
    teacher_values: Vec<T>,
}

impl<T: Real> TeacherPathway<T> {
    /// The teacher must list exactly `stimulus_ids`, in order.
    pub fn new(stimuli: Tensor<T>, stimulus_ids: &[String], teacher: Rsm, tag: &str) -> Result<Self> {
        if teacher.stimulus_ids() != stimulus_ids {
            return Err(Error::StimulusMismatch(format!(
                "teacher RSM covers {} stimuli that do not match the {} stimulus images id-for-id",
                teacher.size(),
                stimulus_ids.len()
            )));
        }
        if stimuli.batch() != stimulus_ids.len() {
            return Err(Error::StimulusMismatch(format!(
                "{} stimulus images for {} ids",
                stimuli.batch(),
                stimulus_ids.len()
            )));
        }
        let teacher_values = teacher.values().iter().map(|&v| T::from_f64(v)).collect();
        Ok(Self {
            stimuli,
            teacher,
            tag: tag.to_string(),
            teacher_values,
        })
    }

    pub fn len(&self) -> usize {
        self.teacher.size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major teacher sub-matrix for `indices`.
    pub fn target_subset(&self, indices: &[usize]) -> Vec<T> {
        let m = self.len();
        let mut out = Vec::with_capacity(indices.len() * indices.len());
        for &i in indices {
            for &j in indices {
                out.push(self.teacher_values[i * m + j]);
            }
        }
        out
    }

    /// Full-set mismatch between the teacher and the network's eval-mode RSM.
    pub fn eval_mismatch(&self, net: &Network<T>, normalize: bool) -> Result<f64> {
        let acts = net.capture(&self.stimuli, &[self.tag.as_str()])?;
        let responses = activations_to_responses(&acts[&self.tag], self.teacher.stimulus_ids())?;
        rsm_mismatch(&self.teacher, &compute_rsm(&responses), normalize)
    }
}

/// Nodes of one composite-loss tape.
pub struct StepNodes {
    pub ce: NodeId,
    pub mismatch: Option<NodeId>,
}

/// Record cross-entropy on `(batch, labels)` and, with a stimulus subset,
/// the RSM mismatch at `tag` against `target` (row-major sub-RSM).
pub fn record_terms<T: Real>(
    net: &Network<T>,
    graph: &mut Graph<T>,
    batch: Tensor<T>,
    labels: &[usize],
    stimuli: Option<(Tensor<T>, &[T], &str)>,
    normalize: bool,
    dropout_rng: &mut dyn RngCore,
) -> Result<StepNodes> {
    let input = graph.leaf(batch);
    let out = net.forward_graph(graph, input, &[], false, Some(&mut *dropout_rng))?;
    let ce = graph.cross_entropy(out.logits.expect("full forward"), labels)?;
    let mismatch = match stimuli {
        None => None,
        Some((images, target, tag)) => {
            let m = images.batch();
            let s = graph.leaf(images);
            let out = net.forward_graph(graph, s, &[tag], true, Some(&mut *dropout_rng))?;
            let rsm = graph.cosine_rsm(out.captured[tag])?;
            Some(graph.squared_mismatch(rsm, target, T::from_f64(mismatch_scale(m, normalize)))?)
        }
    };
    Ok(StepNodes { ce, mismatch })
}

/// `ce + λ·mismatch` on the tape.
pub fn combine<T: Real>(graph: &mut Graph<T>, nodes: &StepNodes, lambda: f64) -> Result<NodeId> {
    match nodes.mismatch {
        Some(m) if lambda != 0.0 => {
            let weighted = graph.scale(m, T::from_f64(lambda));
            graph.add(nodes.ce, weighted)
        }
        _ => Ok(nodes.ce),
    }
}

/// Random streams of one seed's run.
pub struct SeedRngs {
    pub order: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub stimuli: ChaCha8Rng,
}

impl SeedRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            order: stream(STREAM_ORDER),
            dropout: stream(STREAM_DROPOUT),
            stimuli: stream(STREAM_STIMULI),
        }
    }
}

/// What one training epoch produced.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTraining {
    /// Mean of `batch_losses`.
    pub train_cost: f64,
    pub train_ce: f64,
    /// Mean subset mismatch over steps that evaluated it.
    pub train_rsm_mismatch: Option<f64>,
    /// λ in force at the end of the epoch.
    pub lambda: f64,
    pub batch_losses: Vec<f64>,
    /// State right after each λ re-fit during the epoch.
    pub lambda_updates: Vec<LambdaState>,
}

/// One pass over the training set in a seeded random order.
///
/// The similarity pathway runs only while the epoch's teacher weight is
/// non-zero, so a zero weight leaves the trajectory identical to training
/// without a teacher.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    pathway: Option<&TeacherPathway<T>>,
    state: &mut LambdaState,
    epoch: usize,
    config: &TrainConfig,
    rngs: &mut SeedRngs,
) -> Result<EpochTraining> {
    if labels.len() != images.batch() || labels.is_empty() {
        return Err(Error::InvalidArgument("one label per training image required".into()));
    }
    net.set_mode(Mode::Train);
    let r = scheduled_r(epoch, config);
    let active = pathway.is_some()
        && epoch < config.neural_epochs
        && match config.lambda_mode {
            LambdaMode::ConstantRatio => r > 0.0,
            LambdaMode::Constant => config.fixed_lambda > 0.0,
        };
    let mut updates = Vec::new();
    let mut refit_pending = false;
    if !active {
        *state = LambdaState::new(0.0);
    } else {
        match config.lambda_mode {
            LambdaMode::Constant => {
                state.current_lambda = config.fixed_lambda;
                state.target_r = f64::NAN;
            }
            LambdaMode::ConstantRatio => {
                state.target_r = r;
                if config.lambda_cadence == LambdaCadence::Batch || epoch == 0 || state.last_ce == 0.0 {
                    refit_pending = true;
                } else {
                    *state = update_lambda(state, state.last_mismatch, state.last_ce)?;
                    updates.push(*state);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rngs.order);
    let (mut losses, mut ces, mut mismatches) = (Vec::new(), Vec::new(), Vec::new());
    for batch_rows in order.chunks(config.batch_size) {
        let batch = images.select_rows(batch_rows)?;
        let batch_labels: Vec<usize> = batch_rows.iter().map(|&i| labels[i]).collect();
        let mut graph = Graph::new();
        let stim = if active {
            let p = pathway.expect("active implies pathway");
            let k = config.stimulus_batch.min(p.len());
            let mut idx = index::sample(&mut rngs.stimuli, p.len(), k).into_vec();
            idx.sort_unstable();
            Some((p.stimuli.select_rows(&idx)?, p.target_subset(&idx)))
        } else {
            None
        };
        let nodes = record_terms(
            net,
            &mut graph,
            batch,
            &batch_labels,
            stim.as_ref().map(|(img, t)| (img.clone(), t.as_slice(), pathway.expect("active").tag.as_str())),
            config.normalize_rsm_loss,
            &mut rngs.dropout,
        )?;
        let ce = graph.value(nodes.ce).item().as_f64();
        let mismatch = nodes.mismatch.map(|m| graph.value(m).item().as_f64());
        if let (Some(m), true) = (mismatch, refit_pending) {
            *state = update_lambda(state, m, ce)?;
            updates.push(*state);
            refit_pending = config.lambda_cadence == LambdaCadence::Batch;
        }
        let lambda = if active { state.current_lambda } else { 0.0 };
        let loss = combine(&mut graph, &nodes, lambda)?;
        losses.push(graph.value(loss).item().as_f64());
        ces.push(ce);
        if let Some(m) = mismatch {
            mismatches.push(m);
        }
        let grads = graph.backward(loss)?.for_params(&net.param_shapes());
        net.sgd_step(&grads, config.learning_rate)?;
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let train_rsm_mismatch = (!mismatches.is_empty()).then(|| mean(&mismatches));
    let train_ce = mean(&ces);
    if active && config.lambda_mode == LambdaMode::ConstantRatio {
        // Terms for the next epoch's re-fit.
        state.last_ce = train_ce;
        state.last_mismatch = train_rsm_mismatch.unwrap_or(0.0);
    }
    Ok(EpochTraining {
        train_cost: mean(&losses),
        train_ce,
        train_rsm_mismatch,
        lambda: if active { state.current_lambda } else { 0.0 },
        batch_losses: losses,
        lambda_updates: updates,
    })
}

/// One seed's metrics after one epoch (`epoch` is 0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub seed: u64,
    pub epoch: usize,
    pub r: f64,
    pub lambda: f64,
    /// Terms behind the last λ re-fit of this epoch, if any.
    pub lambda_basis: Option<LambdaBasis>,
    pub train_cost: f64,
    pub train_ce: f64,
    pub train_rsm_mismatch: Option<f64>,
    /// Teacher vs network RSM over the full stimulus set after the epoch.
    pub rsm_mismatch: Option<f64>,
    pub test_accuracy: f64,
    pub test_cost: f64,
    /// `train_ce − test_cost`.
    pub generalization_gap: f64,
    pub superclass: SuperclassErrors,
    pub mean_unit_variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaBasis {
    pub target_r: f64,
    pub mismatch: f64,
    pub ce: f64,
}

impl EpochRow {
    /// Numeric metrics aggregated across seeds, by column name.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("r", Some(self.r)),
            ("lambda", Some(self.lambda)),
            ("train_cost", Some(self.train_cost)),
            ("train_ce", Some(self.train_ce)),
            ("train_rsm_mismatch", self.train_rsm_mismatch),
            ("rsm_mismatch", self.rsm_mismatch),
            ("test_accuracy", Some(self.test_accuracy)),
            ("test_cost", Some(self.test_cost)),
            ("generalization_gap", Some(self.generalization_gap)),
            ("superclass_error_fraction", self.superclass.value()),
            ("mean_unit_variance", Some(self.mean_unit_variance)),
        ]
    }
}

pub const METRIC_COLUMNS: [&str; 11] = [
    "r",
    "lambda",
    "train_cost",
    "train_ce",
    "train_rsm_mismatch",
    "rsm_mismatch",
    "test_accuracy",
    "test_cost",
    "generalization_gap",
    "superclass_error_fraction",
    "mean_unit_variance",
];

/// Mean ± SEM across seeds for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub epoch: usize,
    pub n_seeds: usize,
    pub metrics: BTreeMap<String, MeanSem>,
    /// Superclass fraction over errors pooled across seeds.
    pub superclass_pooled: Option<f64>,
    pub superclass_within: usize,
    pub superclass_errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema: u32,
    pub config: TrainConfig,
    /// Sorted by `(seed, epoch)`.
    pub rows: Vec<EpochRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Aggregate rows per epoch. Metrics missing for some seeds are averaged
/// over the seeds that have them.
pub fn aggregate(rows: &[EpochRow]) -> Vec<AggregateRow> {
    let mut by_epoch: BTreeMap<usize, Vec<&EpochRow>> = BTreeMap::new();
    for r in rows {
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    by_epoch
        .into_iter()
        .map(|(epoch, rows)| {
            let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for r in &rows {
                for (name, v) in r.metrics() {
                    if let Some(v) = v {
                        columns.entry(name).or_default().push(v);
                    }
                }
            }
            let (within, total) = rows.iter().fold((0, 0), |(w, t), r| {
                let (a, b) = r.superclass.counts();
                (w + a, t + b)
            });
            AggregateRow {
                epoch,
                n_seeds: rows.len(),
                metrics: columns
                    .into_iter()
                    .filter_map(|(k, v)| mean_sem(&v).map(|m| (k.to_string(), m)))
                    .collect(),
                superclass_pooled: (total > 0).then(|| within as f64 / total as f64),
                superclass_within: within,
                superclass_errors: total,
            }
        })
        .collect()
}

impl ExperimentRecord {
    pub fn new(config: TrainConfig, mut rows: Vec<EpochRow>) -> Self {
        rows.sort_by_key(|r| (r.seed, r.epoch));
        let aggregates = aggregate(&rows);
        Self {
            schema: RECORD_SCHEMA,
            config,
            rows,
            aggregates,
        }
    }

    pub fn final_aggregate(&self) -> Option<&AggregateRow> {
        self.aggregates.last()
    }

    /// Per-seed rows of the last epoch.
    pub fn final_rows(&self) -> Vec<&EpochRow> {
        let last = self.rows.iter().map(|r| r.epoch).max();
        self.rows.iter().filter(|r| Some(r.epoch) == last).collect()
    }

    /// Write `record.json`, `rows.jsonl` and `summary.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join("record.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let mut lines = String::new();
        for row in &self.rows {
            lines.push_str(&serde_json::to_string(row).map_err(|e| Error::Config(e.to_string()))?);
            lines.push('\n');
        }
        let path = dir.join("rows.jsonl");
        fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.csv");
        fs::write(&path, summary_csv(&self.config.label, &self.aggregates)).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let record: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if record.schema != RECORD_SCHEMA {
            return Err(Error::parse(path, format!("record schema {} (expected {RECORD_SCHEMA})", record.schema)));
        }
        Ok(record)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One CSV line per epoch: `label,epoch,n_seeds`, then `<metric>_mean` and
/// `<metric>_sem` for each metric, then pooled superclass columns.
pub fn summary_csv(label: &str, aggregates: &[AggregateRow]) -> String {
    let mut out = String::from("label,epoch,n_seeds");
    for c in METRIC_COLUMNS {
        out.push_str(&format!(",{c}_mean,{c}_sem"));
    }
    out.push_str(",superclass_pooled,superclass_within,superclass_errors\n");
    for a in aggregates {
        out.push_str(&format!("{label},{},{}", a.epoch, a.n_seeds));
        for c in METRIC_COLUMNS {
            let m = a.metrics.get(c);
            out.push_str(&format!(",{},{}", fmt_opt(m.map(|m| m.mean)), fmt_opt(m.and_then(|m| m.sem))));
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            fmt_opt(a.superclass_pooled),
            a.superclass_within,
            a.superclass_errors
        ));
    }
    out
}

/// Run every seed of `config` on `data`. Seeds are independent and run
/// concurrently; each is deterministic on its own. Checkpoints go under
/// `checkpoint_dir` when configured.
pub fn run_experiment(config: &TrainConfig, data: &DatasetBundle, checkpoint_dir: Option<&Path>) -> Result<ExperimentRecord> {
    config.validate()?;
    if config.network.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "network has {} outputs but the dataset has {} classes",
            config.network.num_classes,
            data.num_classes()
        )));
    }
    if config.network.input_shape[..] != data.train.images.shape()[1..] {
        return Err(Error::Config("network input shape does not match the dataset images".into()));
    }
    if config.checkpoint_every.is_some() && checkpoint_dir.is_none() {
        return Err(Error::Config("checkpoint_every needs an output directory".into()));
    }
    let teacher = config.teacher.build(&data.stimuli.ids)?;
    if teacher.is_none() && config.r > 0.0 {
        log::warn!("r = {} has no effect without a teacher", config.r);
    }
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, data, teacher, checkpoint_dir),
        Precision::F64 => run_typed::<f64>(config, data, teacher, checkpoint_dir),
    }
}

fn run_typed<T: Real>(
    config: &TrainConfig,
    data: &DatasetBundle,
    teacher: Option<Rsm>,
    checkpoint_dir: Option<&Path>,
) -> Result<ExperimentRecord> {
    let train_images: Tensor<T> = data.train.images.cast();
    let test_images: Tensor<T> = data.test.images.cast();
    let n_var = config.variance_images.min(data.test.len());
    let variance_images = test_images.select_rows(&(0..n_var).collect::<Vec<_>>())?;
    let pathway = match teacher {
        Some(rsm) => Some(TeacherPathway::new(
            data.stimuli.images.cast(),
            &data.stimuli.ids,
            rsm,
            config.teacher.tag(&config.network),
        )?),
        None => None,
    };
    let shared = Shared {
        config,
        train_images: &train_images,
        train_labels: &data.train.labels,
        test_images: &test_images,
        test_labels: &data.test.labels,
        variance_images: &variance_images,
        superclasses: &data.superclasses,
        pathway: pathway.as_ref(),
        checkpoint_dir,
    };
    let results = crate::par::map_indexed(config.seeds.len(), |i| run_seed(&shared, config.seeds[i]));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(ExperimentRecord::new(config.clone(), rows))
}

struct Shared<'a, T: Real> {
    config: &'a TrainConfig,
    train_images: &'a Tensor<T>,
    train_labels: &'a [usize],
    test_images: &'a Tensor<T>,
    test_labels: &'a [usize],
    variance_images: &'a Tensor<T>,
    superclasses: &'a SuperclassMap,
    pathway: Option<&'a TeacherPathway<T>>,
    checkpoint_dir: Option<&'a Path>,
}

/// Checkpoint file for `seed` after `epochs_done` epochs.
pub fn checkpoint_path(dir: &Path, seed: u64, epochs_done: usize) -> PathBuf {
    dir.join(format!("seed{seed}_epoch{epochs_done:03}.ckpt"))
}

fn run_seed<T: Real>(s: &Shared<'_, T>, seed: u64) -> Result<Vec<EpochRow>> {
    let config = s.config;
    let wrap = |epoch: usize| move |e: Error| Error::SeedFailed { seed, epoch, source: Box::new(e) };
    let mut net = build_network::<T>(&config.network, seed).map_err(wrap(0))?;
    let labels = if config.label_corruption_fraction > 0.0 {
        let (labels, plan) = corrupt_labels(
            s.train_labels,
            config.network.num_classes,
            config.label_corruption_fraction,
            seed,
            config.allow_corruption_above_half,
        )
        .map_err(wrap(0))?;
        log::info!("seed {seed}: {} training labels corrupted", plan.num_changed());
        labels
    } else {
        s.train_labels.to_vec()
    };
    let mut rngs = SeedRngs::new(seed);
    let mut state = LambdaState::new(config.r);
    let variance_tag = config.variance_tag();
    let mut rows = Vec::with_capacity(config.total_epochs);
    for epoch in 0..config.total_epochs {
        let mut step = || -> Result<EpochRow> {
            let t = train_epoch(&mut net, s.train_images, &labels, s.pathway, &mut state, epoch, config, &mut rngs)?;
            let eval = evaluate(&net, s.test_images, s.test_labels)?;
            let superclass = superclass_error_fraction(&eval.predictions, s.test_labels, s.superclasses)?;
            let rsm_mismatch = match s.pathway {
                Some(p) => Some(p.eval_mismatch(&net, config.normalize_rsm_loss)?),
                None => None,
            };
            let row = EpochRow {
                seed,
                epoch,
                r: scheduled_r(epoch, config),
                lambda: t.lambda,
                lambda_basis: t.lambda_updates.last().map(|u| LambdaBasis {
                    target_r: u.target_r,
                    mismatch: u.last_mismatch,
                    ce: u.last_ce,
                }),
                train_cost: t.train_cost,
                train_ce: t.train_ce,
                train_rsm_mismatch: t.train_rsm_mismatch,
                rsm_mismatch,
                test_accuracy: eval.accuracy,
                test_cost: eval.cost,
                generalization_gap: crate::eval::generalization_gap(t.train_ce, eval.cost),
                superclass,
                mean_unit_variance: mean_unit_variance(&net, s.variance_images, variance_tag)?,
            };
            if let (Some(k), Some(dir)) = (config.checkpoint_every, s.checkpoint_dir) {
                if (epoch + 1) % k == 0 {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    save_checkpoint(&net, seed, (epoch + 1) as u64, &checkpoint_path(dir, seed, epoch + 1))?;
                }
            }
            Ok(row)
        };
        let row = step().map_err(wrap(epoch))?;
        log::info!(
            "seed {seed} epoch {epoch}: cost {:.4} acc {:.4} lambda {:.4e}",
            row.train_cost,
            row.test_accuracy,
            row.lambda
        );
        rows.push(row);
    }
    Ok(rows)
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConstantRatio => "constant_ratio",
            Self::Constant => "constant",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        let mut c = TrainConfig::for_network(NetworkSpec::cornet_z_mini(4, [3, 32, 32]));
        c.r = 0.1;
        c
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_loss(4.0, 2.0, 0.0).unwrap(), 4.0);
        assert!((composite_loss(4.0, 2.0, 0.2).unwrap() - 4.4).abs() < 1e-15);
        assert_eq!(composite_loss(3.0, 0.0, 7.0).unwrap(), 3.0);
        assert!(composite_loss(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn lambda_examples() {
        let s = update_lambda(&LambdaState::new(0.1), 2.0, 4.0).unwrap();
        assert!((s.current_lambda - 0.2).abs() < 1e-15);
        assert!((s.ratio() - 0.1).abs() < 1e-15);
        assert_eq!(update_lambda(&LambdaState::new(0.0), 2.0, 4.0).unwrap().current_lambda, 0.0);
        assert_eq!(update_lambda(&LambdaState::new(0.3), 1.5, 1.5).unwrap().current_lambda, 0.3);
        let kept = update_lambda(&s, 0.0, 4.0).unwrap();
        assert_eq!(kept, s);
        assert_eq!(update_lambda(&s, 1.0, 0.0).unwrap(), s);
    }

    #[test]
    fn schedule_examples() {
        let mut c = cfg();
        assert_eq!(scheduled_r(0, &c), 0.1);
        assert_eq!(scheduled_r(9, &c), 0.1);
        assert_eq!(scheduled_r(10, &c), 0.0);
        c.neural_epochs = 0;
        assert!((0..c.total_epochs).all(|e| scheduled_r(e, &c) == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.validate().unwrap();
        c.neural_epochs = c.total_epochs + 1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.r = -0.1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.label_corruption_fraction = 0.7;
        assert!(c.validate().is_err());
        c.allow_corruption_above_half = true;
        c.validate().unwrap();
        let mut c = cfg();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
    }
}

/// Fixture for checking the composite-loss gradient by finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub network: NetworkSpec,
    pub r: f64,
    pub batch: usize,
    pub stimuli: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub normalize_rsm_loss: bool,
}

impl GradCheckSetup {
    /// cornet-z-mini, 10 classes, 2 training images, a 3-stimulus teacher.
    pub fn cornet_mini(r: f64) -> Self {
        Self {
            network: NetworkSpec::cornet_z_mini(10, [3, 32, 32]),
            r,
            batch: 2,
            stimuli: 3,
            samples: 200,
            epsilon: 1e-5,
            seed: 1,
            normalize_rsm_loss: false,
        }
    }
}

/// Outcome of [`composite_grad_check`].
#[derive(Clone, Debug)]
pub struct CompositeGradCheck {
    pub report: crate::nn::GradCheckReport,
    pub lambda: f64,
    pub ce: f64,
    pub mismatch: f64,
}

/// Finite-difference check of `ce + λ·mismatch` in 64-bit, with λ fitted to
/// `r` at the initial parameters and a random-teacher RSM over the stimuli.
/// Dropout is active with a fixed mask.
pub fn composite_grad_check(setup: &GradCheckSetup) -> Result<CompositeGradCheck> {
    use rand::Rng;
    let net = build_network::<f64>(&setup.network, setup.seed)?;
    let [c, h, w] = setup.network.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(9);
    let mut images = |n: usize| -> Result<Tensor<f64>> {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-0.5..0.5)).collect();
        Tensor::new(vec![n, c, h, w], data)
    };
    let batch = images(setup.batch)?;
    let stim = images(setup.stimuli)?;
    let labels: Vec<usize> = (0..setup.batch).map(|i| i % setup.network.num_classes).collect();
    let ids: Vec<String> = (0..setup.stimuli).map(|i| format!("stim-{i}")).collect();
    let teacher = crate::teacher::generate_random_teacher(&ids, 39, crate::teacher::V1_MU, crate::teacher::V1_SIGMA, setup.seed)?;
    let target = teacher.values().to_vec();
    let tag = setup.network.default_teacher_tag();
    let terms = |net: &Network<f64>, g: &mut Graph<f64>| {
        let mut drop = ChaCha8Rng::seed_from_u64(setup.seed ^ 0xd0);
        record_terms(
            net,
            g,
            batch.clone(),
            &labels,
            Some((stim.clone(), target.as_slice(), tag)),
            setup.normalize_rsm_loss,
            &mut drop,
        )
    };
    let mut g = Graph::new();
    let nodes = terms(&net, &mut g)?;
    let ce = g.value(nodes.ce).item();
    let mismatch = g.value(nodes.mismatch.expect("stimuli given")).item();
    let lambda = update_lambda(&LambdaState::new(setup.r), mismatch, ce)?.current_lambda;
    let report = crate::nn::grad_check(
        &net,
        |net, g| {
            let nodes = terms(net, g)?;
            combine(g, &nodes, lambda)
        },
        setup.epsilon,
        setup.samples,
        setup.seed,
    )?;
    Ok(CompositeGradCheck {
        report,
        lambda,
        ce,
        mismatch,
    })
}
