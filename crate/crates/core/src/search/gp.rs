//! Gaussian-process regression with a Matérn-5/2 ARD kernel.
//!
//! Targets are standardized before fitting; hyperparameters are found by
//! maximizing the log marginal likelihood in log space with a box-constrained
//! spectral projected gradient method from several starts.

use ens_tensor::Rng;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{EnsError, Result};

const SQRT5: f64 = 2.236_067_977_499_79;
/// Smallest noise variance, in standardized target units.
pub const NOISE_FLOOR: f64 = 1e-6;
const FIRST_JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-2;

const SIGNAL_BOUNDS: (f64, f64) = (1e-6, 1e2);
const LENGTH_BOUNDS: (f64, f64) = (1e-2, 1e2);
const NOISE_BOUNDS: (f64, f64) = (NOISE_FLOOR, 1.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Random starts on top of the default and warm starts.
    pub restarts: usize,
    pub max_iters: usize,
    /// Hyperparameters are fitted on a random subset of at most this many
    /// points; the posterior always conditions on all of them.
    pub max_fit_points: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            restarts: 2,
            max_iters: 60,
            max_fit_points: 256,
        }
    }
}

/// Kernel hyperparameters in standardized target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn new(dims: usize) -> Self {
        GpHyper {
            signal_var: 1.0,
            lengthscales: vec![0.5; dims],
            noise_var: 1e-3,
        }
    }

    fn to_log(&self) -> Vec<f64> {
        let mut t = vec![self.signal_var.ln()];
        t.extend(self.lengthscales.iter().map(|l| l.ln()));
        t.push(self.noise_var.ln());
        t
    }

    fn from_log(t: &[f64]) -> Self {
        GpHyper {
            signal_var: t[0].exp(),
            lengthscales: t[1..t.len() - 1].iter().map(|v| v.exp()).collect(),
            noise_var: t[t.len() - 1].exp(),
        }
    }
}

fn log_bounds(dims: usize) -> Vec<(f64, f64)> {
    let ln = |(a, b): (f64, f64)| (a.ln(), b.ln());
    let mut b = vec![ln(SIGNAL_BOUNDS)];
    b.extend(std::iter::repeat_n(ln(LENGTH_BOUNDS), dims));
    b.push(ln(NOISE_BOUNDS));
    b
}

fn project(t: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in t.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

fn matern(r: f64) -> f64 {
    (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
}

fn scaled_dist(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((p, q), l)| ((p - q) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Cholesky of `K + noise I`, adding jitter `1e-8, 1e-7, ..., 1e-2` on failure.
fn factor(x: &[Vec<f64>], hyper: &GpHyper) -> Result<(DMatrix<f64>, f64)> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = hyper.signal_var * matern(scaled_dist(&x[i], &x[j], &hyper.lengthscales));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = hyper.signal_var + hyper.noise_var;
    }
    let mut jitter = 0.0;
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = kj.cholesky() {
            return Ok((ch.unpack(), jitter));
        }
        jitter = if jitter == 0.0 { FIRST_JITTER } else { jitter * 10.0 };
        if jitter > MAX_JITTER * 1.000_001 {
            return Err(EnsError::Numerical(format!(
                "kernel matrix not positive definite with jitter up to {MAX_JITTER}"
            )));
        }
    }
}

/// Negative log marginal likelihood and its gradient in log parameters.
fn neg_lml(x: &[Vec<f64>], y: &DVector<f64>, t: &[f64]) -> Option<(f64, Vec<f64>)> {
    let hyper = GpHyper::from_log(t);
    let (l, _) = factor(x, &hyper).ok()?;
    let n = x.len();
    let ch = nalgebra::Cholesky::pack_dirty(l.clone());
    let alpha = ch.solve(y);
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let value = 0.5 * y.dot(&alpha) + 0.5 * log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !value.is_finite() {
        return None;
    }
    let k_inv = ch.inverse();
    // W = alpha alpha^T - K^-1; d(lml)/dθ = tr(W dK/dθ) / 2
    let dims = hyper.lengthscales.len();
    let mut grad = vec![0.0; dims + 2];
    let mut trace_w = 0.0;
    for i in 0..n {
        let wii = alpha[i] * alpha[i] - k_inv[(i, i)];
        trace_w += wii;
        grad[0] += 0.5 * wii * hyper.signal_var;
        for j in 0..i {
            let w = alpha[i] * alpha[j] - k_inv[(i, j)];
            let r = scaled_dist(&x[i], &x[j], &hyper.lengthscales);
            let e = (-SQRT5 * r).exp();
            // both (i, j) and (j, i)
            grad[0] += w * hyper.signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e;
            let common = w * hyper.signal_var * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e;
            for (d, l) in hyper.lengthscales.iter().enumerate() {
                let q = (x[i][d] - x[j][d]) / l;
                grad[1 + d] += common * q * q;
            }
        }
    }
    grad[dims + 1] = 0.5 * hyper.noise_var * trace_w;
    // gradients above are of the log likelihood
    Some((value, grad.into_iter().map(|g| -g).collect()))
}

/// Spectral projected gradient descent on the box.
fn minimize(x: &[Vec<f64>], y: &DVector<f64>, start: Vec<f64>, bounds: &[(f64, f64)], max_iters: usize) -> Option<(f64, Vec<f64>)> {
    let mut t = start;
    project(&mut t, bounds);
    let (mut f, mut g) = neg_lml(x, y, &t)?;
    let mut step = 1.0 / g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for _ in 0..max_iters {
        let mut trial: Vec<f64> = t.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        project(&mut trial, bounds);
        let d: Vec<f64> = trial.iter().zip(&t).map(|(a, b)| a - b).collect();
        if d.iter().all(|v| v.abs() < 1e-7) {
            break;
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut s = 1.0;
        let accepted = loop {
            let cand: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            if let Some((fc, gc)) = neg_lml(x, y, &cand) {
                if fc <= f + 1e-4 * s * slope {
                    break Some((cand, fc, gc));
                }
            }
            s *= 0.5;
            if s < 1e-8 {
                break None;
            }
        };
        let Some((cand, fc, gc)) = accepted else { break };
        let sv: Vec<f64> = cand.iter().zip(&t).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = sv.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-6, 1e6) } else { 1.0 };
        let improvement = f - fc;
        t = cand;
        f = fc;
        g = gc;
        if improvement.abs() < 1e-10 * (1.0 + f.abs()) {
            break;
        }
    }
    Some((f, t))
}

/// A fitted posterior.
#[derive(Clone, Debug)]
pub struct GaussianProcess {
    pub hyper: GpHyper,
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    alpha: DVector<f64>,
    l_inv: DMatrix<f64>,
    pub jitter: f64,
    pub log_likelihood: f64,
}

/// Averages targets of bitwise-identical inputs.
fn dedup(x: &[Vec<f64>], y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut ux: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (xi, &yi) in x.iter().zip(y) {
        match ux.iter().position(|u| u.iter().zip(xi).all(|(a, b)| a.to_bits() == b.to_bits())) {
            Some(k) => {
                sums[k].0 += yi;
                sums[k].1 += 1;
            }
            None => {
                ux.push(xi.clone());
                sums.push((yi, 1));
            }
        }
    }
    (ux, sums.into_iter().map(|(s, c)| s / c as f64).collect())
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(EnsError::Contract(format!("gp needs matching non-empty data, got {} inputs and {} targets", x.len(), y.len())));
    }
    let dims = x[0].len();
    if dims == 0 || x.iter().any(|r| r.len() != dims) {
        return Err(EnsError::Contract("gp inputs must share one positive dimension".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(EnsError::Numerical("gp data contains non-finite values".into()));
    }
    Ok(dims)
}

impl GaussianProcess {
    /// Fits hyperparameters, then conditions on the data. `warm` adds a
    /// start at previously fitted hyperparameters.
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &GpConfig, warm: Option<&GpHyper>, rng: &mut Rng) -> Result<Self> {
        let dims = check_inputs(x, y)?;
        let (ux, uy) = dedup(x, y);
        let (mean, scale) = standardization(&uy);
        let mut picked: Vec<usize> = (0..ux.len()).collect();
        if ux.len() > cfg.max_fit_points.max(2) {
            rng.shuffle(&mut picked);
            picked.truncate(cfg.max_fit_points.max(2));
            picked.sort_unstable();
        }
        let fx: Vec<Vec<f64>> = picked.iter().map(|&i| ux[i].clone()).collect();
        let ys = DVector::from_iterator(picked.len(), picked.iter().map(|&i| (uy[i] - mean) / scale));
        let bounds = log_bounds(dims);
        let mut starts = vec![GpHyper::new(dims).to_log()];
        if let Some(w) = warm.filter(|w| w.lengthscales.len() == dims) {
            starts.push(w.to_log());
        }
        for _ in 0..cfg.restarts {
            starts.push(bounds.iter().map(|(lo, hi)| rng.uniform_range(*lo, *hi)).collect());
        }
        let best = starts
            .into_iter()
            .filter_map(|s| minimize(&fx, &ys, s, &bounds, cfg.max_iters))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .ok_or_else(|| EnsError::Numerical("gp likelihood could not be evaluated at any start".into()))?;
        Self::condition(ux, uy, GpHyper::from_log(&best.1))
    }

    /// Conditions on the data with fixed hyperparameters.
    pub fn with_hyper(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<Self> {
        let dims = check_inputs(x, y)?;
        if hyper.lengthscales.len() != dims {
            return Err(EnsError::Contract(format!("{} lengthscales for {dims} dimensions", hyper.lengthscales.len())));
        }
        if !(hyper.signal_var > 0.0 && hyper.noise_var > 0.0 && hyper.lengthscales.iter().all(|l| *l > 0.0)) {
            return Err(EnsError::config("gp hyperparameters must be positive"));
        }
        let (ux, uy) = dedup(x, y);
        Self::condition(ux, uy, hyper)
    }

    fn condition(x: Vec<Vec<f64>>, y: Vec<f64>, mut hyper: GpHyper) -> Result<Self> {
        hyper.noise_var = hyper.noise_var.max(NOISE_FLOOR);
        let (mean, scale) = standardization(&y);
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - mean) / scale));
        let (l, jitter) = factor(&x, &hyper)?;
        let n = x.len();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| EnsError::Numerical("singular cholesky factor".into()))?;
        let alpha = l_inv.transpose() * (&l_inv * &ys);
        let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let log_likelihood =
            -0.5 * ys.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(GaussianProcess {
            hyper,
            x,
            y_mean: mean,
            y_scale: scale,
            alpha,
            l_inv,
            jitter,
            log_likelihood,
        })
    }

    pub fn dims(&self) -> usize {
        self.x[0].len()
    }

    /// Signal variance in target units.
    pub fn signal_variance(&self) -> f64 {
        self.hyper.signal_var * self.y_scale * self.y_scale
    }

    pub fn prior_mean(&self) -> f64 {
        self.y_mean
    }

    /// Posterior mean and variance of the latent function at `q`.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        self.predict_many(std::slice::from_ref(&q.to_vec()))[0]
    }

    pub fn predict_many(&self, qs: &[Vec<f64>]) -> Vec<(f64, f64)> {
        let n = self.x.len();
        let ks = DMatrix::from_fn(n, qs.len(), |i, j| {
            self.hyper.signal_var * matern(scaled_dist(&self.x[i], &qs[j], &self.hyper.lengthscales))
        });
        let mean = ks.tr_mul(&self.alpha);
        let v = &self.l_inv * &ks;
        (0..qs.len())
            .map(|j| {
                let explained: f64 = v.column(j).iter().map(|a| a * a).sum();
                let var = (self.hyper.signal_var - explained).max(0.0);
                (self.y_mean + self.y_scale * mean[j], var * self.y_scale * self.y_scale)
            })
            .collect()
    }
}

fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
    (mean, scale)
}
