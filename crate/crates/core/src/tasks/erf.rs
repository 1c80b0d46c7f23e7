//! Effective receptive field: input-gradient magnitude of the central
//! output activation.

use ens_tensor::{Ctx, Graph, NodeId, ParamStore, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::{EnsError, Result};

/// A normalized `h x w` map (row-major) with its center at `(h/2, w/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ErfMap {
    pub fn center(&self) -> (usize, usize) {
        (self.h / 2, self.w / 2)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Grid as CSV rows, one line per image row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.data.chunks(self.w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Mean over probes of `|d (sum_c y[c, h/2, w/2]) / d x|`, summed over input
/// channels and normalized to unit mass. `forward` maps the probe node to
/// the output node using parameters from `params`.
pub fn erf_map<F>(params: &ParamStore, forward: F, probes: &[Tensor]) -> Result<ErfMap>
where
    F: Fn(&mut Ctx, NodeId) -> Result<NodeId>,
{
    let first = probes.first().ok_or_else(|| EnsError::config("erf needs at least one probe"))?;
    let s = first.shape();
    if s.n() != 1 {
        return Err(EnsError::config("erf probes must have batch size 1"));
    }
    let (h, w) = (s.h(), s.w());
    let mut acc = vec![0.0; h * w];
    for probe in probes {
        if probe.shape() != s {
            return Err(EnsError::config("erf probes must share one shape"));
        }
        let mut g = Graph::new();
        let x = g.param(probe.clone());
        let mut ctx = Ctx::inference(&mut g, params);
        let y = forward(&mut ctx, x)?;
        let ys = g.shape(y);
        let mut mask = Tensor::zeros(ys);
        for c in 0..ys.c() {
            mask.set(0, c, ys.h() / 2, ys.w() / 2, 1.0);
        }
        let m = g.constant(mask);
        let picked = g.hadamard(y, m)?;
        let out = g.sum(picked)?;
        let grads = g.backward(out)?;
        if let Some(dx) = grads.get(x) {
            for c in 0..s.c() {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += dx.data()[c * h * w + i].abs();
                }
            }
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        for a in &mut acc {
            *a /= total;
        }
    }
    Ok(ErfMap { h, w, data: acc })
}

/// Fraction of the map's mass within Euclidean `radius` of its center.
pub fn erf_mass_within(map: &ErfMap, radius: f64) -> f64 {
    let (cy, cx) = map.center();
    let r2 = radius * radius;
    let mut inside = 0.0;
    let mut total = 0.0;
    for y in 0..map.h {
        for x in 0..map.w {
            let v = map.at(y, x);
            total += v;
            let (dy, dx) = (y as f64 - cy as f64, x as f64 - cx as f64);
            if dy * dy + dx * dx <= r2 {
                inside += v;
            }
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Standard-normal probes of shape `(1, channels, side, side)`.
pub fn gaussian_probes(channels: usize, side: usize, count: usize, rng: &mut ens_tensor::Rng) -> Vec<Tensor> {
    (0..count)
        .map(|_| Tensor::randn(Shape::new(1, channels, side, side), 1.0, rng))
        .collect()
}
