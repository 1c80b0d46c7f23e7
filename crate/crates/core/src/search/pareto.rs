//! Two-objective Pareto archive and hypervolume, both objectives minimized.

use serde::{Deserialize, Serialize};

/// `a` is no worse than `b` in both objectives and better in at least one.
pub fn dominates(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

/// Non-dominated items, kept sorted by the first objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront<T> {
    members: Vec<(T, [f64; 2])>,
}

impl<T> Default for ParetoFront<T> {
    fn default() -> Self {
        ParetoFront { members: Vec::new() }
    }
}

impl<T> ParetoFront<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `item` unless an existing member dominates it or ties it on
    /// both objectives; members it dominates are dropped. Returns whether it
    /// was inserted.
    pub fn insert(&mut self, item: T, f: [f64; 2]) -> bool {
        if self.members.iter().any(|(_, m)| dominates(*m, f) || *m == f) {
            return false;
        }
        self.members.retain(|(_, m)| !dominates(f, *m));
        let at = self.members.partition_point(|(_, m)| m[0] < f[0]);
        self.members.insert(at, (item, f));
        true
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &T> {
        self.members.iter().map(|(t, _)| t)
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.members.iter().map(|(_, f)| *f).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&T, [f64; 2])> {
        self.members.iter().map(|(t, f)| (t, *f))
    }
}

/// Area dominated by `points` and bounded above by `reference`. Points not
/// strictly below the reference in both objectives contribute nothing.
pub fn hypervolume(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut inside: Vec<[f64; 2]> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .collect();
    inside.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut level = reference[1];
    let mut area = 0.0;
    for p in inside {
        if p[1] < level {
            area += (reference[0] - p[0]) * (level - p[1]);
            level = p[1];
        }
    }
    area
}

/// Per-objective maximum plus `margin` times the observed range. A zero
/// range falls back to `margin * max(|max|, 1)`.
pub fn reference_point(points: &[[f64; 2]], margin: f64) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        *o = if range > 0.0 { hi + margin * range } else { hi + margin * hi.abs().max(1.0) };
    }
    out
}
