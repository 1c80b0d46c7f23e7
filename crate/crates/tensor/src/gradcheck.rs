use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central-difference step used throughout the test suites.
pub const FD_STEP: f64 = 1e-4;

/// A scalar function of a list of tensors, expressed as graph construction.
pub trait ScalarFn: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>> ScalarFn for F {}

fn evaluate(f: &impl ScalarFn, params: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.value(out).item()
}

/// Analytic gradients of `f` at `params`.
pub fn analytic_gradients(f: &impl ScalarFn, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(id, p)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Max over coordinates of `|analytic - numeric| / (|analytic| + step)` with
/// central differences. Checks every coordinate.
pub fn finite_difference_check(f: impl ScalarFn, params: &[Tensor], step: f64) -> Result<f64> {
    check_coords(&f, params, step, None)
}

/// Like [`finite_difference_check`] but samples at most `per_param`
/// coordinates of each tensor.
pub fn finite_difference_check_sampled(
    f: impl ScalarFn,
    params: &[Tensor],
    step: f64,
    per_param: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_coords(&f, params, step, Some((per_param, rng)))
}

fn check_coords(f: &impl ScalarFn, params: &[Tensor], step: f64, sample: Option<(usize, &mut Rng)>) -> Result<f64> {
    if !(step > 0.0) {
        return Err(TensorError::Contract(format!("finite difference step must be > 0, got {step}")));
    }
    let analytic = analytic_gradients(f, params)?;
    let mut sample = sample;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match sample.as_mut() {
            Some((k, rng)) if *k < p.numel() => (0..*k).map(|_| rng.below(p.numel())).collect(),
            _ => (0..p.numel()).collect(),
        };
        for ci in coords {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let fp = evaluate(f, &work)?;
            work[pi].data_mut()[ci] = orig - step;
            let fm = evaluate(f, &work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / (a.abs() + step);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
