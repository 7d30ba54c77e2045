//! Experiment configuration files, sweeps, output layout and summaries.
//!
//! An experiment file is TOML with optional sections `[data]`, `[sessions]`,
//! `[teacher]`, `[train]` and `[sweep]`. Every key of `[train]` overrides the
//! architecture defaults of [`TrainConfig`]; `arch` picks the architecture.
//! Each sweep axis multiplies the run list.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_bundle, data_root_from_env, load_cifar100, DatasetBundle, SubsetOptions, SyntheticCifar, IMAGE_BYTES};
use crate::error::{Error, Result};
use crate::eval::SuperclassMap;
use crate::nn::{Architecture, NetworkSpec};
use crate::stats::mean_sem;
use crate::teacher::{synthesize_sessions, write_sessions, TeacherKind, TeacherSpec};
use crate::training::{aggregate, run_experiment, summary_csv, EpochRow, ExperimentRecord, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CIFAR-100 binary root; falls back to the dataset environment variable,
    /// then to synthetic data.
    pub root: Option<PathBuf>,
    #[serde(flatten)]
    pub subset: SubsetOptions,
    pub synthetic: SyntheticSection,
}

/// Synthetic stand-in parameters. Classes follow the subset; per-class
/// counts include the held-aside stimuli.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub universe_seed: u64,
    pub sample_seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub jitter: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticCifar::default();
        Self {
            universe_seed: s.universe_seed,
            sample_seed: s.sample_seed,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            noise: s.noise,
            jitter: s.jitter,
        }
    }
}

/// Synthetic recording sessions used when a neural or shuffled teacher has
/// no `source`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionsSection {
    pub count: usize,
    pub seed: u64,
}

impl Default for SessionsSection {
    fn default() -> Self {
        Self { count: 10, seed: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub r: Vec<f64>,
    pub teacher: Vec<TeacherKind>,
    pub attach_tag: Vec<String>,
    pub corrupt_fraction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sessions: SessionsSection,
    #[serde(default)]
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub sweep: Sweep,
}

fn default_label() -> String {
    "experiment".into()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config")
    }
}

/// One concrete training run of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    /// Directory-safe run name, e.g. `r=0.1_teacher=neural`.
    pub name: String,
    pub config: TrainConfig,
    pub axes: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn arch(&self) -> Result<Architecture> {
        match self.train.get("arch") {
            None => Ok(Architecture::CornetZMini),
            Some(toml::Value::String(s)) => s.parse(),
            Some(other) => Err(Error::Config(format!("train.arch must be a string, got {other}"))),
        }
    }

    /// Base training config for `num_classes` outputs, before sweeps.
    pub fn base_train_config(&self, num_classes: usize) -> Result<TrainConfig> {
        let network = NetworkSpec::for_arch(self.arch()?, num_classes, crate::data::IMAGE_SHAPE);
        let mut defaults = TrainConfig::for_network(network);
        defaults.teacher = self.teacher.clone();
        defaults.label = self.label.clone();
        let mut table = toml::Table::try_from(&defaults).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in &self.train {
            if matches!(k.as_str(), "arch" | "network" | "teacher" | "label") {
                if k != "arch" {
                    return Err(Error::Config(format!("train.{k} cannot be set here")));
                }
                continue;
            }
            table.insert(k.clone(), v.clone());
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[train]: {}", e.message())))
    }

    /// Expand the sweep into validated runs. Session-based teachers without a
    /// `source` read from `session_dir` (see [`ensure_sessions`]).
    pub fn plan(&self, num_classes: usize, session_dir: &Path) -> Result<Vec<RunPlan>> {
        let base = self.base_train_config(num_classes)?;
        let mut runs = vec![RunPlan {
            name: String::new(),
            config: base,
            axes: BTreeMap::new(),
        }];
        fn expand<V: Clone>(runs: Vec<RunPlan>, values: &[V], key: &str, show: impl Fn(&V) -> String, apply: impl Fn(&mut TrainConfig, &V)) -> Vec<RunPlan> {
            if values.is_empty() {
                return runs;
            }
            let mut out = Vec::new();
            for run in &runs {
                for v in values {
                    let mut next = run.clone();
                    apply(&mut next.config, v);
                    next.axes.insert(key.to_string(), show(v));
                    out.push(next);
                }
            }
            out
        }
        runs = expand(runs, &self.sweep.r, "r", |v| format!("{v}"), |c, v| c.r = *v);
        runs = expand(runs, &self.sweep.teacher, "teacher", |v| v.to_string(), |c, v| c.teacher.kind = *v);
        runs = expand(runs, &self.sweep.attach_tag, "attach_tag", |v| v.clone(), |c, v| {
            c.teacher.attach_tag = Some(v.clone())
        });
        runs = expand(runs, &self.sweep.corrupt_fraction, "corrupt_fraction", |v| format!("{v}"), |c, v| {
            c.label_corruption_fraction = *v
        });
        for run in &mut runs {
            run.name = if run.axes.is_empty() {
                "base".into()
            } else {
                run.axes.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("_")
            };
            run.config.label = format!("{}/{}", self.label, run.name);
            let t = &mut run.config.teacher;
            if matches!(t.kind, TeacherKind::Neural | TeacherKind::Shuffled) && t.source.is_none() {
                t.source = Some(session_dir.to_path_buf());
            }
            run.config.validate().map_err(|e| Error::Config(format!("run {}: {e}", run.name)))?;
        }
        Ok(runs)
    }

    /// Load real CIFAR-100 if available, otherwise generate the synthetic
    /// stand-in for the subset's classes.
    pub fn load_data(&self) -> Result<DatasetBundle> {
        let root = self.data.root.clone().or_else(data_root_from_env);
        match root {
            Some(root) => load_cifar100(&root, &self.data.subset),
            None => {
                let map = SuperclassMap::cifar100();
                let s = &self.data.synthetic;
                let syn = SyntheticCifar {
                    universe_seed: s.universe_seed,
                    sample_seed: s.sample_seed,
                    fine_classes: self.data.subset.classes(&map)?,
                    train_per_class: s.train_per_class,
                    test_per_class: s.test_per_class,
                    noise: s.noise,
                    jitter: s.jitter,
                };
                let (train, test) = syn.generate()?;
                build_bundle(&train, &test, &self.data.subset, &map)
            }
        }
    }
}

/// Stimulus images as separate `3×32×32` vectors.
pub fn stimulus_vectors(data: &DatasetBundle) -> Vec<Vec<f32>> {
    data.stimuli.images.data().chunks(IMAGE_BYTES).map(<[f32]>::to_vec).collect()
}

/// Synthesize sessions over the stimulus set into `dir` if some run reads
/// from `dir` and it holds no sessions yet.
pub fn ensure_sessions(runs: &[RunPlan], data: &DatasetBundle, sessions: &SessionsSection, dir: &Path) -> Result<()> {
    let needed = runs.iter().any(|r| r.config.teacher.source.as_deref() == Some(dir));
    if !needed || dir.join("session_01.txt").is_file() {
        return Ok(());
    }
    let recs = synthesize_sessions(&stimulus_vectors(data), &data.stimuli.ids, (32, 32), sessions.count, sessions.seed)?;
    write_sessions(&recs, dir)
}

/// Run all planned runs, writing `<out>/<run>/…`, per-figure tables under
/// `<out>/figures/` and `manifest.json`. An `INCOMPLETE` marker exists in
/// `out` until every run and table has been written.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<Vec<(RunPlan, ExperimentRecord)>> {
    let data = config.load_data()?;
    let session_dir = out.join("sessions");
    let runs = config.plan(data.num_classes(), &session_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join("INCOMPLETE");
    fs::write(&marker, "run in progress or failed\n").map_err(|e| Error::io(&marker, e))?;
    ensure_sessions(&runs, &data, &config.sessions, &session_dir)?;
    // Surface teacher problems before any training starts.
    for r in &runs {
        r.config.teacher.build(&data.stimuli.ids)?;
    }
    let echo = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("experiment.toml"), echo).map_err(|e| Error::io(out, e))?;

    let mut results = Vec::new();
    for plan in runs {
        log::info!("run {}", plan.name);
        let dir = out.join(&plan.name);
        let record = run_experiment(&plan.config, &data, Some(&dir.join("checkpoints")))?;
        record.write(&dir)?;
        results.push((plan, record));
    }
    write_figures(&results, &out.join("figures"))?;
    let manifest: Vec<_> = results
        .iter()
        .map(|(p, _)| serde_json::json!({ "run": p.name, "axes": p.axes, "record": format!("{}/record.json", p.name) }))
        .collect();
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("json"))
        .map_err(|e| Error::io(&manifest_path, e))?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(results)
}

/// Final-epoch statistics of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalStats {
    pub run: String,
    pub r: f64,
    pub teacher: String,
    pub attach_tag: String,
    pub corrupt_fraction: f64,
    pub n_seeds: usize,
    pub columns: BTreeMap<String, (f64, Option<f64>)>,
    pub superclass_pooled: Option<f64>,
}

pub fn final_stats(name: &str, record: &ExperimentRecord) -> FinalStats {
    let c = &record.config;
    let agg = record.final_aggregate().cloned();
    FinalStats {
        run: name.to_string(),
        r: c.r,
        teacher: c.teacher.kind.to_string(),
        attach_tag: c.teacher.tag(&c.network).to_string(),
        corrupt_fraction: c.label_corruption_fraction,
        n_seeds: agg.as_ref().map_or(0, |a| a.n_seeds),
        columns: agg
            .as_ref()
            .map(|a| a.metrics.iter().map(|(k, m)| (k.clone(), (m.mean, m.sem))).collect())
            .unwrap_or_default(),
        superclass_pooled: agg.and_then(|a| a.superclass_pooled),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn table(stats: &[FinalStats], keys: &[&str], metrics: &[&str]) -> String {
    let mut out = String::from("run");
    for k in keys {
        out.push_str(&format!(",{k}"));
    }
    out.push_str(",n_seeds");
    for m in metrics {
        out.push_str(&format!(",{m}_mean,{m}_sem"));
    }
    out.push('\n');
    for s in stats {
        out.push_str(&s.run);
        for k in keys {
            let v = match *k {
                "r" => format!("{}", s.r),
                "teacher" => s.teacher.clone(),
                "attach_tag" => s.attach_tag.clone(),
                "corrupt_fraction" => format!("{}", s.corrupt_fraction),
                "superclass_pooled" => cell(s.superclass_pooled),
                _ => String::new(),
            };
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}", s.n_seeds));
        for m in metrics {
            let v = s.columns.get(*m);
            out.push_str(&format!(",{},{}", cell(v.map(|v| v.0)), cell(v.and_then(|v| v.1))));
        }
        out.push('\n');
    }
    out
}

/// Write every figure table for a set of runs.
pub fn write_figures(results: &[(RunPlan, ExperimentRecord)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stats: Vec<FinalStats> = results.iter().map(|(p, r)| final_stats(&p.name, r)).collect();
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write(
        "fig2_accuracy_vs_r.csv",
        table(&stats, &["r", "teacher", "attach_tag"], &["test_accuracy", "test_cost", "train_ce"]),
    )?;
    let mut curves = String::new();
    for (i, (p, r)) in results.iter().enumerate() {
        let csv = summary_csv(&p.name, &r.aggregates);
        curves.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
    }
    write("fig2_curves.csv", curves)?;
    write(
        "fig3c_variance_vs_r.csv",
        table(&stats, &["r", "teacher", "attach_tag"], &["mean_unit_variance"]),
    )?;
    write(
        "fig4_accuracy_by_teacher.csv",
        table(&stats, &["teacher", "r"], &["test_accuracy", "rsm_mismatch"]),
    )?;
    write(
        "fig5_superclass.csv",
        table(&stats, &["r", "teacher", "superclass_pooled"], &["superclass_error_fraction", "test_accuracy"]),
    )?;
    write(
        "fig6_corruption.csv",
        table(&stats, &["corrupt_fraction", "r", "teacher"], &["generalization_gap", "test_accuracy", "test_cost", "train_ce"]),
    )?;
    write(
        "layer_placement.csv",
        table(&stats, &["attach_tag", "r", "teacher"], &["test_accuracy", "train_ce", "rsm_mismatch"]),
    )
}

/// Aggregates recomputed from stored per-seed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    /// Per-epoch CSV over all labels.
    pub per_epoch: String,
    /// Final-epoch CSV, one line per label.
    pub final_epoch: String,
    /// Labels backed by a single seed (no SEM).
    pub single_seed: Vec<String>,
}

/// Collect `record.json` files (a directory is searched recursively).
pub fn find_records(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for e in entries {
                if e.is_dir() {
                    found.extend(find_records(&[e])?);
                } else if e.file_name().is_some_and(|n| n == "record.json") {
                    found.push(e);
                }
            }
        } else {
            found.push(p.clone());
        }
    }
    Ok(found)
}

/// Mean ± SEM per `(label, epoch)` across seeds. Output does not depend on the
/// order of `paths`; records sharing a label are pooled (their seeds must not
/// overlap).
pub fn summarize(paths: &[PathBuf]) -> Result<Summary> {
    let files = find_records(paths)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument("no record files found".into()));
    }
    let mut bad = Vec::new();
    let mut by_label: BTreeMap<String, Vec<EpochRow>> = BTreeMap::new();
    for f in &files {
        match ExperimentRecord::load(f) {
            Ok(rec) => by_label.entry(rec.config.label.clone()).or_default().extend(rec.rows),
            Err(e) => bad.push(format!("{}: {e}", f.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(format!("records with a mismatched schema:\n  {}", bad.join("\n  "))));
    }
    let mut per_epoch = String::new();
    let mut final_epoch = String::from("label,n_seeds,sem_flag");
    for c in crate::training::METRIC_COLUMNS {
        final_epoch.push_str(&format!(",{c}_mean,{c}_sem"));
    }
    final_epoch.push_str(",superclass_pooled\n");
    let mut single_seed = Vec::new();
    for (i, (label, rows)) in by_label.iter_mut().enumerate() {
        rows.sort_by_key(|r| (r.seed, r.epoch));
        if rows.windows(2).any(|w| (w[0].seed, w[0].epoch) == (w[1].seed, w[1].epoch)) {
            return Err(Error::Config(format!("label `{label}` has duplicate (seed, epoch) rows")));
        }
        let aggs = aggregate(rows);
        let csv = summary_csv(label, &aggs);
        per_epoch.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
        let last = aggs.last().expect("non-empty rows");
        let flag = if last.n_seeds < 2 {
            single_seed.push(label.clone());
            "n=1"
        } else {
            ""
        };
        final_epoch.push_str(&format!("{label},{},{flag}", last.n_seeds));
        for c in crate::training::METRIC_COLUMNS {
            let m = last.metrics.get(c);
            final_epoch.push_str(&format!(",{},{}", cell(m.map(|m| m.mean)), cell(m.and_then(|m| m.sem))));
        }
        final_epoch.push_str(&format!(",{}\n", cell(last.superclass_pooled)));
    }
    Ok(Summary {
        per_epoch,
        final_epoch,
        single_seed,
    })
}

/// Mean and SEM of one metric at the final epoch, straight from the rows.
pub fn final_metric(record: &ExperimentRecord, metric: &str) -> Option<(f64, Option<f64>)> {
    let values: Vec<f64> = record
        .final_rows()
        .iter()
        .filter_map(|r| r.metrics().into_iter().find(|(k, _)| *k == metric).and_then(|(_, v)| v))
        .collect();
    mean_sem(&values).map(|m| (m.mean, m.sem))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_plans_one_base_run() {
        let cfg = ExperimentConfig::default();
        let runs = cfg.plan(20, Path::new("sessions")).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].name, "base");
        assert_eq!(runs[0].config.batch_size, 128);
    }

    #[test]
    fn sweeps_multiply() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            label = "s"
            [teacher]
            kind = "random"
            [train]
            total_epochs = 3
            neural_epochs = 2
            [sweep]
            r = [0.0, 0.1]
            attach_tag = ["V1", "V4"]
            "#,
        )
        .unwrap();
        let runs = cfg.plan(20, Path::new("sessions")).unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(runs[3].name, "attach_tag=V4_r=0.1");
        assert_eq!(runs[3].config.teacher.attach_tag.as_deref(), Some("V4"));
        assert_eq!(runs[3].config.total_epochs, 3);
    }

    #[test]
    fn bad_train_keys_are_rejected_before_compute() {
        let cfg: ExperimentConfig = toml::from_str("[train]\nlearning_rat = 0.1").unwrap();
        assert!(cfg.plan(20, Path::new("sessions")).is_err());
        let cfg: ExperimentConfig = toml::from_str("[train]\nneural_epochs = 500").unwrap();
        assert!(cfg.plan(20, Path::new("sessions")).is_err());
        let cfg: ExperimentConfig = toml::from_str("[teacher]\nkind = \"random\"\nattach_tag = \"V9\"").unwrap();
        assert!(cfg.plan(20, Path::new("sessions")).is_err());
    }
}
