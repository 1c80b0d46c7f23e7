//! The search loop: quasi-random initial design, then one EHVI-maximizing
//! proposal per step under two Gaussian-process surrogates.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ens_tensor::Rng;
use serde::{Deserialize, Serialize};

use super::ehvi::ehvi;
use super::gp::{GaussianProcess, GpConfig, GpHyper};
use super::knee::knee_select;
use super::pareto::{hypervolume, reference_point, ParetoFront};
use super::qmc::Halton;
use super::space::{PenaltyWeights, SearchSpace};
use crate::library::BlockLibrary;
use crate::tasks::{mean_psnr, Dataset};
use crate::unet::ArchCode;
use crate::{EnsError, Result};

/// Quality objective: PSNR lost relative to the all-teacher network.
pub trait Objective {
    fn psnr_difference(&mut self, code: &ArchCode) -> Result<f64>;
}

/// Evaluates assembled hybrids from a distilled library on a fixed set.
pub struct LibraryObjective<'a> {
    library: &'a BlockLibrary,
    data: &'a Dataset,
    teacher_psnr: f64,
}

impl<'a> LibraryObjective<'a> {
    pub fn new(library: &'a BlockLibrary, data: &'a Dataset) -> Result<Self> {
        let teacher = library.assemble(&ArchCode::teacher(library.config().stages.len()))?;
        let teacher_psnr = mean_psnr(&teacher, data)?;
        Ok(LibraryObjective {
            library,
            data,
            teacher_psnr,
        })
    }

    pub fn teacher_psnr(&self) -> f64 {
        self.teacher_psnr
    }
}

impl Objective for LibraryObjective<'_> {
    fn psnr_difference(&mut self, code: &ArchCode) -> Result<f64> {
        let net = self.library.assemble(code)?;
        Ok(self.teacher_psnr - mean_psnr(&net, self.data)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsConfig {
    pub initial: usize,
    /// Total evaluations, initial design included.
    pub budget: usize,
    pub knee_candidates: usize,
    /// Reference point margin as a fraction of each objective's range.
    pub reference_margin: f64,
    /// Quasi-random candidates per proposal.
    pub candidates: usize,
    /// Gaussian perturbations around each front member per proposal.
    pub perturbations: usize,
    pub perturbation_sigma: f64,
    /// Hyperparameters are re-optimized every this many proposals and held
    /// fixed in between.
    pub refit_every: usize,
    pub gp: GpConfig,
    pub weights: PenaltyWeights,
    /// Set by the caller for each run rather than read from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EnsConfig {
    fn default() -> Self {
        EnsConfig {
            initial: 17,
            budget: 500,
            knee_candidates: 5,
            reference_margin: 0.1,
            candidates: 4096,
            perturbations: 32,
            perturbation_sigma: 0.05,
            refit_every: 10,
            gp: GpConfig::default(),
            weights: PenaltyWeights::default(),
            seed: 0,
        }
    }
}

impl EnsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial == 0 {
            return Err(EnsError::config("initial design needs at least one point"));
        }
        if self.budget < self.initial {
            return Err(EnsError::config(format!(
                "budget {} is smaller than the initial design {}",
                self.budget, self.initial
            )));
        }
        if self.candidates == 0 {
            return Err(EnsError::config("candidate pool must be non-empty"));
        }
        if self.knee_candidates == 0 {
            return Err(EnsError::config("knee candidate count must be positive"));
        }
        if self.refit_every == 0 {
            return Err(EnsError::config("refit_every must be positive"));
        }
        if !(self.reference_margin > 0.0 && self.reference_margin.is_finite()) {
            return Err(EnsError::config("reference margin must be positive"));
        }
        if !(self.perturbation_sigma >= 0.0 && self.perturbation_sigma.is_finite()) {
            return Err(EnsError::config("perturbation sigma must be non-negative"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 1-based evaluation index.
    pub iter: usize,
    pub x: Vec<f64>,
    pub code: ArchCode,
    pub psnr_diff_db: f64,
    pub penalty: f64,
    /// Values came from an earlier evaluation of the same code.
    pub repeated: bool,
}

impl Observation {
    pub fn objectives(&self) -> [f64; 2] {
        [self.psnr_diff_db, self.penalty]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub history: Vec<Observation>,
    /// Indices into `history`, sorted by PSNR difference.
    pub front: Vec<usize>,
    /// Indices into `history`, knee first.
    pub knee: Vec<usize>,
    pub knee_truncated: bool,
    pub reference: [f64; 2],
    pub hypervolume: f64,
}

impl SearchResult {
    pub fn front_observations(&self) -> Vec<&Observation> {
        self.front.iter().map(|&i| &self.history[i]).collect()
    }

    pub fn knee_observations(&self) -> Vec<&Observation> {
        self.knee.iter().map(|&i| &self.history[i]).collect()
    }
}

/// Runs the search. Every observation is passed to `sink` as soon as it
/// exists, so a failed evaluation still leaves the earlier ones persisted.
pub fn run_ens(
    space: &SearchSpace,
    cfg: &EnsConfig,
    objective: &mut dyn Objective,
    sink: &mut dyn FnMut(&Observation) -> Result<()>,
) -> Result<SearchResult> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut halton = Halton::new(space.dims(), &mut root.fork(1));
    let mut jitter_rng = root.fork(2);
    let mut gp_rng = root.fork(3);

    let mut history: Vec<Observation> = Vec::with_capacity(cfg.budget);
    let mut cache: HashMap<ArchCode, (f64, f64)> = HashMap::new();
    let mut archive: ParetoFront<usize> = ParetoFront::new();

    let mut observe = |x: Vec<f64>,
                       history: &mut Vec<Observation>,
                       cache: &mut HashMap<ArchCode, (f64, f64)>,
                       archive: &mut ParetoFront<usize>|
     -> Result<()> {
        let code = space.decode(&x)?;
        let (psnr_diff_db, penalty, repeated) = match cache.get(&code) {
            Some(&(f1, f2)) => (f1, f2, true),
            None => {
                let f1 = objective.psnr_difference(&code).map_err(|e| EnsError::Evaluation {
                    code: code.0.clone(),
                    source: Box::new(e),
                })?;
                if !f1.is_finite() {
                    return Err(EnsError::Evaluation {
                        code: code.0.clone(),
                        source: Box::new(EnsError::Numerical(format!("psnr difference {f1}"))),
                    });
                }
                let f2 = space.penalty(&code, &cfg.weights)?;
                cache.insert(code.clone(), (f1, f2));
                (f1, f2, false)
            }
        };
        let obs = Observation {
            iter: history.len() + 1,
            x,
            code,
            psnr_diff_db,
            penalty,
            repeated,
        };
        sink(&obs)?;
        archive.insert(history.len(), obs.objectives());
        log::debug!("eval {} {} -> ({psnr_diff_db:.4}, {penalty})", obs.iter, obs.code);
        history.push(obs);
        Ok(())
    };

    for x in halton.sample(cfg.initial) {
        observe(x, &mut history, &mut cache, &mut archive)?;
    }

    let mut hypers: [Option<GpHyper>; 2] = [None, None];
    let mut proposals = 0usize;
    while history.len() < cfg.budget {
        let xs: Vec<Vec<f64>> = history.iter().map(|o| o.x.clone()).collect();
        let refit = proposals % cfg.refit_every == 0;
        let mut models = Vec::with_capacity(2);
        for (k, hyper) in hypers.iter_mut().enumerate() {
            let ys: Vec<f64> = history.iter().map(|o| o.objectives()[k]).collect();
            let model = match (refit, hyper.as_ref()) {
                (false, Some(h)) => GaussianProcess::with_hyper(&xs, &ys, h.clone())?,
                _ => GaussianProcess::fit(&xs, &ys, &cfg.gp, hyper.as_ref(), &mut gp_rng)?,
            };
            *hyper = Some(model.hyper.clone());
            models.push(model);
        }
        proposals += 1;

        let observed: Vec<[f64; 2]> = history.iter().map(Observation::objectives).collect();
        let reference = reference_point(&observed, cfg.reference_margin);
        let front = archive.points();

        let mut pool = halton.sample(cfg.candidates);
        for &i in archive.items() {
            for _ in 0..cfg.perturbations {
                pool.push(
                    history[i]
                        .x
                        .iter()
                        .map(|v| (v + cfg.perturbation_sigma * jitter_rng.normal()).clamp(0.0, 1.0))
                        .collect(),
                );
            }
        }
        let p1 = models[0].predict_many(&pool);
        let p2 = models[1].predict_many(&pool);

        // unseen codes first; fall back to the whole pool when none is left
        let mut best: Option<(bool, f64, usize)> = None;
        for (j, x) in pool.iter().enumerate() {
            let fresh = !cache.contains_key(&space.decode(x)?);
            let value = ehvi(&front, [p1[j].0, p2[j].0], [p1[j].1.sqrt(), p2[j].1.sqrt()], reference)?;
            let better = match best {
                None => true,
                Some((bf, bv, _)) => (fresh && !bf) || (fresh == bf && value > bv),
            };
            if better {
                best = Some((fresh, value, j));
            }
        }
        let (_, value, j) = best.expect("candidate pool is non-empty");
        log::info!("proposal {} ehvi {value:.4e}", history.len() + 1);
        let x = pool.swap_remove(j);
        observe(x, &mut history, &mut cache, &mut archive)?;
    }

    let front: Vec<usize> = archive.items().copied().collect();
    let points: Vec<[f64; 2]> = front.iter().map(|&i| history[i].objectives()).collect();
    let selection = knee_select(&points, cfg.knee_candidates);
    if selection.truncated {
        log::warn!(
            "front holds {} members, fewer than the {} knee candidates requested",
            front.len(),
            cfg.knee_candidates
        );
    }
    let observed: Vec<[f64; 2]> = history.iter().map(Observation::objectives).collect();
    let reference = reference_point(&observed, cfg.reference_margin);
    Ok(SearchResult {
        knee: selection.indices.iter().map(|&k| front[k]).collect(),
        knee_truncated: selection.truncated,
        hypervolume: hypervolume(&points, reference),
        reference,
        front,
        history,
    })
}

/// Header of the history CSV for `dims` stages.
pub fn history_header(dims: usize) -> String {
    let mut cols = vec!["iter".to_string()];
    cols.extend((1..=dims).map(|i| format!("x{i}")));
    cols.extend((1..=dims).map(|i| format!("z{i}")));
    cols.push("psnr_diff_db".into());
    cols.push("penalty".into());
    cols.join(",")
}

/// One CSV row; floats carry 17 significant digits.
pub fn history_row(obs: &Observation) -> String {
    let mut cells = vec![obs.iter.to_string()];
    cells.extend(obs.x.iter().map(|v| format!("{v:.16e}")));
    cells.extend(obs.code.0.iter().map(|z| z.to_string()));
    cells.push(format!("{:.16e}", obs.psnr_diff_db));
    cells.push(format!("{:.16e}", obs.penalty));
    cells.join(",")
}

pub fn write_history_csv<W: Write>(mut out: W, history: &[Observation]) -> Result<()> {
    let dims = history.first().map_or(8, |o| o.x.len());
    writeln!(out, "{}", history_header(dims))?;
    for obs in history {
        writeln!(out, "{}", history_row(obs))?;
    }
    Ok(())
}

/// Parses a history CSV written by [`write_history_csv`]. The `repeated`
/// flag is recovered from earlier rows with the same code.
pub fn read_history_csv<R: BufRead>(input: R) -> Result<Vec<Observation>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or_else(|| EnsError::config("empty history file"))?;
    let ncols = header.split(',').count();
    if ncols < 5 || (ncols - 3) % 2 != 0 {
        return Err(EnsError::config(format!("unexpected history header '{header}'")));
    }
    let dims = (ncols - 3) / 2;
    if header != history_header(dims) {
        return Err(EnsError::config(format!("unexpected history header '{header}'")));
    }
    let mut out: Vec<Observation> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let bad = || EnsError::config(format!("malformed history row {}", n + 2));
        if cells.len() != ncols {
            return Err(bad());
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let iter = cells[0].parse::<usize>().map_err(|_| bad())?;
        let x = cells[1..=dims].iter().map(|s| float(s)).collect::<Result<Vec<_>>>()?;
        let code = ArchCode(
            cells[dims + 1..=2 * dims]
                .iter()
                .map(|s| s.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?,
        );
        let repeated = out.iter().any(|o| o.code == code);
        out.push(Observation {
            iter,
            x,
            code,
            psnr_diff_db: float(cells[2 * dims + 1])?,
            penalty: float(cells[2 * dims + 2])?,
            repeated,
        });
    }
    Ok(out)
}
