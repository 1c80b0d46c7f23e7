//! Exact expected hypervolume improvement for two minimized objectives under
//! independent Gaussian predictions.
//!
//! With the front sorted by the first objective, `a_1 < ... < a_k` and
//! `b_1 > ... > b_k`, the improvement of a point `y` splits into vertical
//! strips `[max(y1, a_i), a_{i+1})` of height `(g_i - y2)+`, where
//! `a_0 = -inf`, `a_{k+1} = r1`, `g_0 = r2` and `g_i = b_i`. Each strip's
//! expectation factorizes, and `E[(c - max(Y, a))+] = psi(c) - psi(a)` with
//! `psi(t) = E[(t - Y)+]`.

use crate::{EnsError, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `E[(t - Y)+]` for `Y ~ N(mean, sd^2)`.
pub fn expected_shortfall(t: f64, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return (t - mean).max(0.0);
    }
    let z = (t - mean) / sd;
    let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
    ((t - mean) * cdf + sd * pdf).max(0.0)
}

/// Hypervolume the point `y` would add to `front` below `reference`.
pub fn improvement(front: &[[f64; 2]], y: [f64; 2], reference: [f64; 2]) -> Result<f64> {
    ehvi(front, y, [0.0, 0.0], reference)
}

/// Expected improvement for a prediction with per-objective `mean` and
/// standard deviation `sd`. Every front member must lie strictly below the
/// reference in both objectives, and the front must be mutually
/// non-dominated.
pub fn ehvi(front: &[[f64; 2]], mean: [f64; 2], sd: [f64; 2], reference: [f64; 2]) -> Result<f64> {
    let mut pts = front.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
    if let Some(p) = pts.iter().find(|p| !(p[0] < reference[0] && p[1] < reference[1])) {
        return Err(EnsError::Contract(format!(
            "reference {reference:?} does not dominate front member {p:?}"
        )));
    }
    if pts.windows(2).any(|w| !(w[0][0] < w[1][0] && w[0][1] > w[1][1])) {
        return Err(EnsError::Contract("ehvi front contains dominated or duplicate points".into()));
    }
    if mean.iter().chain(&sd).any(|v| !v.is_finite()) || sd.iter().any(|s| *s < 0.0) {
        return Err(EnsError::Numerical(format!("bad prediction mean {mean:?} sd {sd:?}")));
    }
    let psi1 = |t: f64| expected_shortfall(t, mean[0], sd[0]);
    let psi2 = |t: f64| expected_shortfall(t, mean[1], sd[1]);
    let mut total = 0.0;
    let mut prev_psi = 0.0;
    let mut height = reference[1];
    for p in pts.iter().chain(std::iter::once(&[reference[0], f64::NAN])) {
        let right = psi1(p[0]);
        total += (right - prev_psi).max(0.0) * psi2(height);
        prev_psi = right;
        height = p[1];
    }
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_front_is_a_product() {
        let v = ehvi(&[], [0.0, 0.0], [1.0, 2.0], [1.0, 1.0]).unwrap();
        let want = expected_shortfall(1.0, 0.0, 1.0) * expected_shortfall(1.0, 0.0, 2.0);
        assert!((v - want).abs() < 1e-15);
    }

    #[test]
    fn reference_must_be_dominated() {
        assert!(ehvi(&[[2.0, 0.0]], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]).is_err());
    }

    #[test]
    fn deterministic_improvement() {
        let hvi = improvement(&[[1.0, 3.0], [3.0, 1.0]], [2.0, 2.0], [4.0, 4.0]).unwrap();
        assert!((hvi - 1.0).abs() < 1e-12);
        assert_eq!(improvement(&[[1.0, 1.0]], [2.0, 2.0], [4.0, 4.0]).unwrap(), 0.0);
    }
}
