//! Knee-point selection on a two-objective front.

use serde::{Deserialize, Serialize};

/// Indices into the input front, knee first, then by distance to the knee.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeSelection {
    pub indices: Vec<usize>,
    /// More candidates were requested than the front holds.
    pub truncated: bool,
}

const TIE: f64 = 1e-12;

/// After min-max normalization, the knee is the member farthest from the
/// chord between the two extremes; ties go to the lower first objective.
pub fn knee_select(front: &[[f64; 2]], k: usize) -> KneeSelection {
    if front.is_empty() || k == 0 {
        return KneeSelection {
            indices: Vec::new(),
            truncated: k > front.len(),
        };
    }
    let norm = normalize(front);
    let mut order: Vec<usize> = (0..front.len()).collect();
    order.sort_by(|&a, &b| norm[a][0].total_cmp(&norm[b][0]).then(norm[a][1].total_cmp(&norm[b][1])));
    let first = norm[order[0]];
    let last = norm[order[order.len() - 1]];
    let (dx, dy) = (last[0] - first[0], last[1] - first[1]);
    let chord = (dx * dx + dy * dy).sqrt();
    let mut knee = order[0];
    if chord > 0.0 {
        let mut best = f64::NEG_INFINITY;
        for &i in &order {
            let p = norm[i];
            let d = (dx * (first[1] - p[1]) - dy * (first[0] - p[0])).abs() / chord;
            if d > best + TIE {
                best = d;
                knee = i;
            }
        }
    }
    let kp = norm[knee];
    let dist = |i: usize| ((norm[i][0] - kp[0]).powi(2) + (norm[i][1] - kp[1]).powi(2)).sqrt();
    let mut ranked: Vec<usize> = order.clone();
    ranked.sort_by(|&a, &b| {
        (a != knee)
            .cmp(&(b != knee))
            .then(dist(a).total_cmp(&dist(b)))
            .then(norm[a][0].total_cmp(&norm[b][0]))
    });
    ranked.truncate(k);
    KneeSelection {
        indices: ranked,
        truncated: k > front.len(),
    }
}

fn normalize(front: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in front {
        for j in 0..2 {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    front
        .iter()
        .map(|p| {
            let mut q = [0.0; 2];
            for j in 0..2 {
                let range = hi[j] - lo[j];
                q[j] = if range > 0.0 { (p[j] - lo[j]) / range } else { 0.0 };
            }
            q
        })
        .collect()
}
