//! Mean and standard error across seeds.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Sample standard deviation over `√n`; `None` when `n < 2`.
    pub sem: Option<f64>,
    pub n: usize,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample (n − 1) standard deviation.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

pub fn mean_sem(values: &[f64]) -> Option<MeanSem> {
    if values.is_empty() {
        return None;
    }
    Some(MeanSem {
        mean: mean(values),
        sem: sample_std(values).map(|s| s / (values.len() as f64).sqrt()),
        n: values.len(),
    })
}
