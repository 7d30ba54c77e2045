//! Central finite-difference gradient checking (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::{Network, Tensor};

/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding compare on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|analytic − numeric| / max(|analytic|, |numeric|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: Vec<Probe>,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

fn eval_loss<F>(net: &Network<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&Network<f64>, &mut Graph<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let id = loss_fn(net, &mut g)?;
    let v = g.value(id).item();
    if !v.is_finite() {
        return Err(Error::NumericFailure { layer: "loss".into() });
    }
    Ok(v)
}

/// Compare backpropagated parameter gradients against central differences
/// `(L(p+ε) − L(p−ε)) / 2ε` on `sample` randomly chosen scalar parameters.
///
/// Probes are spread round-robin over the parameter tensors, so every tensor
/// gets checked; `loss_fn` must be deterministic (fix any dropout rng inside it).
pub fn grad_check<F>(net: &Network<f64>, loss_fn: F, epsilon: f64, sample: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Network<f64>, &mut Graph<f64>) -> Result<NodeId>,
{
    check_epsilon(epsilon)?;
    let mut g = Graph::new();
    let loss = loss_fn(net, &mut g)?;
    let grads = g.backward(loss)?.for_params(&net.param_shapes());

    let total: usize = net.params().iter().map(|p| p.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<(usize, usize)> = if sample >= total {
        net.params()
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| (0..p.len()).map(move |i| (pi, i)))
            .collect()
    } else {
        (0..sample)
            .map(|k| {
                let pi = k % net.params().len();
                (pi, rng.random_range(0..net.params()[pi].len()))
            })
            .collect()
    };

    let mut work = net.clone();
    let mut probes = Vec::with_capacity(targets.len());
    for (pi, idx) in targets {
        let orig = work.params()[pi].data()[idx];
        work.params_mut()[pi].data_mut()[idx] = orig + epsilon;
        let plus = eval_loss(&work, &loss_fn)?;
        work.params_mut()[pi].data_mut()[idx] = orig - epsilon;
        let minus = eval_loss(&work, &loss_fn)?;
        work.params_mut()[pi].data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[pi].data()[idx];
        probes.push(Probe {
            param: pi,
            index: idx,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    let max_relative_error = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_relative_error, probes })
}

/// Finite-difference check of gradients with respect to graph leaves.
/// `build` receives the leaf ids (in `inputs` order) and returns the scalar loss.
pub fn check_leaf_gradients<F>(inputs: &[Tensor<f64>], build: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    check_epsilon(epsilon)?;
    let run = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };
    let (mut g, ids, loss) = run(inputs)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + epsilon;
            let (gp, _, lp) = run(&work)?;
            work[k].data_mut()[i] = orig - epsilon;
            let (gm, _, lm) = run(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
