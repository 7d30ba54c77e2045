//! Evaluation: accuracy, superclass-error quality, unit variance,
//! generalization gap, label corruption and activation export.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Network, Real, Tensor};
use crate::rsm::{save_responses, ResponseFile};

const CIFAR100_TABLE: &str = include_str!("../data/cifar100_superclasses.txt");

/// Fine-class to coarse-class (superclass) assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperclassMap {
    fine_to_coarse: Vec<usize>,
    fine_names: Vec<String>,
    coarse_names: BTreeMap<usize, String>,
}

impl SuperclassMap {
    /// The 100 → 20 CIFAR-100 grouping shipped with the crate.
    pub fn cifar100() -> Self {
        let map = Self::parse(CIFAR100_TABLE).expect("bundled superclass table parses");
        map.check_cifar100().expect("bundled superclass table is complete");
        map
    }

    /// One line per fine class: `fine_index fine_name coarse_index coarse_name`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("superclass table line {}: `{line}`", n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let fine: usize = f[0].parse().map_err(|_| bad())?;
            let coarse: usize = f[2].parse().map_err(|_| bad())?;
            rows.push((fine, f[1].to_string(), coarse, f[3].to_string()));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) || rows.is_empty() {
            return Err(Error::Config("superclass table must list fine classes 0..N exactly once".into()));
        }
        let mut coarse_names = BTreeMap::new();
        for r in &rows {
            if let Some(prev) = coarse_names.insert(r.2, r.3.clone()) {
                if prev != r.3 {
                    return Err(Error::Config(format!("coarse class {} has two names", r.2)));
                }
            }
        }
        Ok(Self {
            fine_to_coarse: rows.iter().map(|r| r.2).collect(),
            fine_names: rows.iter().map(|r| r.1.clone()).collect(),
            coarse_names,
        })
    }

    pub fn to_table(&self) -> String {
        self.fine_to_coarse
            .iter()
            .enumerate()
            .map(|(i, &c)| format!("{i} {} {c} {}\n", self.fine_names[i], self.coarse_names[&c]))
            .collect()
    }

    /// 100 fine classes, 20 coarse classes, exactly 5 fine per coarse.
    pub fn check_cifar100(&self) -> Result<()> {
        if self.fine_to_coarse.len() != 100 {
            return Err(Error::Config(format!("expected 100 fine classes, got {}", self.fine_to_coarse.len())));
        }
        let mut counts = [0usize; 20];
        for &c in &self.fine_to_coarse {
            if c >= 20 {
                return Err(Error::Config(format!("coarse class {c} out of range")));
            }
            counts[c] += 1;
        }
        if counts.iter().any(|&n| n != 5) {
            return Err(Error::Config(format!("each superclass needs 5 fine classes, got {counts:?}")));
        }
        Ok(())
    }

    pub fn num_fine(&self) -> usize {
        self.fine_to_coarse.len()
    }

    pub fn coarse(&self, fine: usize) -> usize {
        self.fine_to_coarse[fine]
    }

    pub fn fine_name(&self, fine: usize) -> &str {
        &self.fine_names[fine]
    }

    pub fn coarse_name(&self, coarse: usize) -> &str {
        &self.coarse_names[&coarse]
    }

    /// Fine classes belonging to `coarse`, ascending.
    pub fn members(&self, coarse: usize) -> Vec<usize> {
        (0..self.num_fine()).filter(|&f| self.coarse(f) == coarse).collect()
    }

    /// Map over a subset of fine classes, re-indexed `0..fine.len()` in the
    /// given order; coarse indices are kept.
    pub fn restrict(&self, fine: &[usize]) -> Result<Self> {
        if let Some(&bad) = fine.iter().find(|&&f| f >= self.num_fine()) {
            return Err(Error::Config(format!("fine class {bad} not in the map")));
        }
        let fine_to_coarse: Vec<usize> = fine.iter().map(|&f| self.coarse(f)).collect();
        let coarse_names = fine_to_coarse
            .iter()
            .map(|&c| (c, self.coarse_names[&c].clone()))
            .collect();
        Ok(Self {
            fine_to_coarse,
            fine_names: fine.iter().map(|&f| self.fine_names[f].clone()).collect(),
            coarse_names,
        })
    }
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy_from_predictions(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty predictions and labels ({} vs {})",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Everything one eval-mode pass over a labelled set yields.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub cost: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate<T: Real>(net: &Network<T>, images: &Tensor<T>, labels: &[usize]) -> Result<EvalSummary> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let logits = net
        .forward(images, &[])?
        .logits
        .expect("full forward yields logits");
    let predictions = argmax_rows(&logits);
    Ok(EvalSummary {
        accuracy: accuracy_from_predictions(&predictions, labels)?,
        cost: cross_entropy(&logits, labels)?,
        predictions,
    })
}

/// Fraction of images whose arg-max class equals the label.
pub fn test_accuracy<T: Real>(net: &Network<T>, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    evaluate(net, images, labels).map(|e| e.accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SuperclassErrors {
    /// No misclassifications, so the fraction is undefined.
    NoErrors,
    Fraction { value: f64, within: usize, total: usize },
}

impl SuperclassErrors {
    pub fn value(&self) -> Option<f64> {
        match self {
            SuperclassErrors::NoErrors => None,
            SuperclassErrors::Fraction { value, .. } => Some(*value),
        }
    }
    pub fn counts(&self) -> (usize, usize) {
        match self {
            SuperclassErrors::NoErrors => (0, 0),
            SuperclassErrors::Fraction { within, total, .. } => (*within, *total),
        }
    }
}

/// Among misclassified examples only, the fraction whose predicted class
/// shares the true class's superclass.
pub fn superclass_error_fraction(predictions: &[usize], labels: &[usize], map: &SuperclassMap) -> Result<SuperclassErrors> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument("predictions and labels differ in length".into()));
    }
    let mut within = 0;
    let mut total = 0;
    for (&p, &l) in predictions.iter().zip(labels) {
        if p.max(l) >= map.num_fine() {
            return Err(Error::InvalidArgument(format!("class {} outside the superclass map", p.max(l))));
        }
        if p != l {
            total += 1;
            if map.coarse(p) == map.coarse(l) {
                within += 1;
            }
        }
    }
    Ok(if total == 0 {
        SuperclassErrors::NoErrors
    } else {
        SuperclassErrors::Fraction {
            value: within as f64 / total as f64,
            within,
            total,
        }
    })
}

/// Population variance of each unit over the rows of `activations`
/// (`N × units...`), averaged over units.
pub fn unit_variance<T: Real>(activations: &Tensor<T>) -> f64 {
    let n = activations.batch();
    let d = activations.row_len();
    let data = activations.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in data.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let dv = v.as_f64() - m;
            *s += dv * dv;
        }
    }
    var.iter().sum::<f64>() / (n as f64 * d as f64)
}

/// Mean over units of the tagged layer of each unit's variance across `images`.
pub fn mean_unit_variance<T: Real>(net: &Network<T>, images: &Tensor<T>, tag: &str) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images".into()));
    }
    if images.batch() == 1 {
        log::warn!("unit variance over a single image is zero by definition");
    }
    let captured = net.capture(images, &[tag])?;
    Ok(unit_variance(&captured[tag]))
}

/// Training cost minus testing cost, signed.
pub fn generalization_gap(train_cost: f64, test_cost: f64) -> f64 {
    train_cost - test_cost
}

/// Which labels were switched, grouped by original class, and to what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    pub fraction: f64,
    pub seed: u64,
    /// Original class → `(example index, replacement label)` pairs.
    pub per_class: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl CorruptionPlan {
    pub fn num_changed(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    /// Replay onto a fresh copy of the original labels.
    pub fn apply(&self, labels: &[usize]) -> Result<Vec<usize>> {
        let mut out = labels.to_vec();
        for (&class, changes) in &self.per_class {
            for &(idx, replacement) in changes {
                match labels.get(idx) {
                    Some(&l) if l == class => out[idx] = replacement,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "plan expects label {class} at index {idx}"
                        )))
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Relabel exactly `⌊fraction·N⌋` examples.
///
/// Selection is stratified by class (per-class counts within ±1 of each other
/// on balanced data). Replacement labels are the selected examples' own labels
/// shuffled among them, then repaired by swaps so no example keeps its label;
/// class totals are therefore unchanged. Fractions above 0.5 need
/// `allow_above_half`.
pub fn corrupt_labels(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
    allow_above_half: bool,
) -> Result<(Vec<usize>, CorruptionPlan)> {
    if !(0.0..=1.0).contains(&fraction) || (fraction > 0.5 && !allow_above_half) {
        return Err(Error::InvalidArgument(format!(
            "corruption fraction {fraction} outside [0, 0.5]"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let total = (fraction * labels.len() as f64).floor() as usize;
    let mut plan = CorruptionPlan {
        fraction,
        seed,
        per_class: BTreeMap::new(),
    };
    if total == 0 {
        return Ok((labels.to_vec(), plan));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("label corruption needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|idx| (fraction * idx.len() as f64).floor() as usize)
        .collect();
    let mut remainder = total - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..num_classes).filter(|&c| quota[c] < by_class[c].len()).collect();
    order.shuffle(&mut rng);
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remainder == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            remainder -= 1;
        }
    }
    debug_assert_eq!(remainder, 0);

    let mut selected = Vec::with_capacity(total);
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        selected.extend(idx.iter().take(quota[c]).copied());
    }
    selected.sort_unstable();

    let original: Vec<usize> = selected.iter().map(|&i| labels[i]).collect();
    let mut replacement = original.clone();
    replacement.shuffle(&mut rng);
    let n = selected.len();
    for i in 0..n {
        if replacement[i] != original[i] {
            continue;
        }
        let start = rng.random_range(0..n);
        let partner = (0..n)
            .map(|k| (start + k) % n)
            .find(|&j| replacement[j] != original[i] && replacement[i] != original[j]);
        match partner {
            Some(j) => replacement.swap(i, j),
            None => {
                let r = rng.random_range(0..num_classes - 1);
                replacement[i] = if r >= original[i] { r + 1 } else { r };
            }
        }
    }

    let mut corrupted = labels.to_vec();
    for ((&idx, &orig), &new) in selected.iter().zip(&original).zip(&replacement) {
        debug_assert_ne!(orig, new);
        corrupted[idx] = new;
        plan.per_class.entry(orig).or_default().push((idx, new));
    }
    Ok((corrupted, plan))
}

/// Write the tagged layer's flattened activations (`N × C·H·W`) with image ids
/// and labels in the response file format.
pub fn export_activations<T: Real>(
    net: &Network<T>,
    images: &Tensor<T>,
    ids: &[String],
    labels: &[usize],
    tag: &str,
    path: &Path,
) -> Result<()> {
    if ids.len() != images.batch() || labels.len() != images.batch() {
        return Err(Error::InvalidArgument("one id and one label per image required".into()));
    }
    let captured = net.capture(images, &[tag])?;
    let act = &captured[tag];
    let file = ResponseFile {
        ids: ids.to_vec(),
        labels: Some(labels.iter().map(|&l| l as u32).collect()),
        dim: act.row_len(),
        values: act.to_f64_vec(),
    };
    save_responses(&file, path)
}
