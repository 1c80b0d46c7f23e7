//! Feature distillation of surrogate stages from teacher stages.

use std::time::Instant;

use ens_tensor::optim::{cosine_lr, Adam, Momentum};
use ens_tensor::{mix_seed, Ctx, Graph, Rng, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::StageVariant;
use crate::library::BlockLibrary;
use crate::unet::{Network, StageId};
use crate::{EnsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    /// Number of task images whose stage activations form the pair set.
    pub pairs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 2000,
            batch: 8,
            lr: 0.05,
            momentum: 0.9,
            optimizer: OptimizerKind::Momentum,
            pairs: 512,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.pairs == 0 || !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(EnsError::config("distill: batch and pairs must be >= 1, lr >= 0, momentum in [0, 1)"));
        }
        Ok(())
    }
}

/// One stage input and the teacher stage's response to it.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillPair {
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub stage: StageId,
    /// Option index within the stage (1 = largest surrogate).
    pub variant: usize,
    pub blocks: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub seed: u64,
    /// Not persisted, so saved libraries are byte-identical across reruns.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Stage activations of `teacher` on each image (shape `(1, 3, h, w)`),
/// for every stage at once. `result[i][k]` belongs to stage `i`, image `k`.
pub fn capture_all(teacher: &Network, images: &[Tensor]) -> Result<Vec<Vec<DistillPair>>> {
    let per_image: Vec<Vec<DistillPair>> = images
        .par_iter()
        .map(|img| {
            let mut g = Graph::new();
            let mut ctx = Ctx::inference(&mut g, teacher.params());
            let x = ctx.graph.constant(img.clone());
            let trace = teacher.forward(&mut ctx, x)?;
            Ok(trace
                .stages
                .iter()
                .map(|&(i, o)| DistillPair {
                    input: g.value(i).clone(),
                    target: g.value(o).clone(),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<DistillPair>> = vec![Vec::with_capacity(images.len()); 8];
    for pairs in per_image {
        for (i, p) in pairs.into_iter().enumerate() {
            out[i].push(p);
        }
    }
    Ok(out)
}

/// Pairs entering and leaving one named stage.
pub fn capture_features(teacher: &Network, images: &[Tensor], stage: &str) -> Result<Vec<DistillPair>> {
    let id = StageId::parse(stage)?;
    Ok(capture_all(teacher, images)?.swap_remove(id.index()))
}

fn stack(pairs: &[DistillPair], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<Tensor> = idx.iter().map(|&i| pairs[i].input.clone()).collect();
    let targets: Vec<Tensor> = idx.iter().map(|&i| pairs[i].target.clone()).collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
}

/// Mean squared feature error of `surrogate` over all pairs.
pub fn distill_loss(surrogate: &StageVariant, pairs: &[DistillPair], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in (0..pairs.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let (x, t) = stack(pairs, chunk)?;
        let y = surrogate.apply(&x)?;
        total += y
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += y.numel();
    }
    Ok(total / count as f64)
}

enum Optimizer {
    Momentum(Momentum),
    Adam(Adam),
}

/// Fits `surrogate` to the pairs by minimizing mean squared feature error.
/// If training ends above the starting loss the starting parameters are
/// restored, so the returned final loss never exceeds the initial one.
pub fn distill_stage(
    surrogate: &mut StageVariant,
    pairs: &[DistillPair],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(EnsError::Contract("distillation needs at least one pair".into()));
    }
    let mut rng = Rng::new(seed);
    let initial = distill_loss(surrogate, pairs, cfg.batch)?;
    if !initial.is_finite() {
        return Err(EnsError::Training { step: 0, last_loss: initial });
    }
    let start = surrogate.params().clone();
    let mut opt = match cfg.optimizer {
        OptimizerKind::Momentum => Optimizer::Momentum(Momentum::new(cfg.momentum)),
        OptimizerKind::Adam => Optimizer::Adam(Adam::default()),
    };
    let mut last = initial;
    let batch = cfg.batch.min(pairs.len());
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(pairs.len())).collect();
        let (x, t) = stack(pairs, &idx)?;
        let mut g = Graph::new();
        let mut ctx = Ctx::train(&mut g, surrogate.params());
        let xn = ctx.graph.constant(x);
        let y = surrogate.stage().forward(&mut ctx, xn)?;
        let tn = ctx.graph.constant(t);
        let diff = ctx.graph.sub(y, tn)?;
        let loss = ctx.graph.mean_square(diff)?;
        let value = ctx.graph.value(loss).item()?;
        if !value.is_finite() {
            return Err(EnsError::Training { step, last_loss: last });
        }
        last = value;
        let grads = ctx.graph.backward(loss)?;
        let grads = ctx.param_grads(&grads);
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        match &mut opt {
            Optimizer::Momentum(o) => o.step(surrogate.params_mut(), &grads, lr),
            Optimizer::Adam(o) => o.step(surrogate.params_mut(), &grads, lr),
        }
        if !surrogate.params().all_finite() {
            return Err(EnsError::Training { step, last_loss: last });
        }
    }
    let final_loss = distill_loss(surrogate, pairs, cfg.batch)?;
    if !final_loss.is_finite() {
        return Err(EnsError::Training { step: cfg.steps, last_loss: last });
    }
    if final_loss > initial {
        log::warn!("distillation ended above its initial loss ({final_loss:.3e} > {initial:.3e}); keeping the start");
        *surrogate.params_mut() = start;
        return Ok((initial, initial));
    }
    Ok((initial, final_loss))
}

/// Per-surrogate training seed; independent of scheduling order.
pub fn surrogate_seed(seed: u64, stage: usize, variant: usize) -> u64 {
    mix_seed(mix_seed(seed, 0xd157), (stage * 16 + variant) as u64)
}

/// Distills every surrogate in `library` against `pairs[stage]` using up to
/// `workers` threads. Results do not depend on `workers`.
pub fn distill_all(
    library: &mut BlockLibrary,
    pairs: &[Vec<DistillPair>],
    cfg: &DistillConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<DistillReport>> {
    cfg.validate()?;
    let mut jobs: Vec<(usize, usize, StageVariant)> = Vec::new();
    for stage in 0..8 {
        for (k, v) in library.surrogates(stage).iter().enumerate() {
            jobs.push((stage, k + 1, v.clone()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EnsError::config(format!("thread pool: {e}")))?;
    let results: Vec<(usize, usize, Result<(StageVariant, DistillReport)>)> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(stage, variant, mut v)| {
                let s = surrogate_seed(seed, stage, variant);
                let start = Instant::now();
                let out = distill_stage(&mut v, &pairs[stage], cfg, s).map(|(initial, fin)| {
                    let report = DistillReport {
                        stage: StageId::ALL[stage],
                        variant,
                        blocks: v.block_count(),
                        initial_loss: initial,
                        final_loss: fin,
                        steps: cfg.steps,
                        seed: s,
                        wall_time_s: start.elapsed().as_secs_f64(),
                    };
                    log::info!(
                        "distilled {} variant {variant}: loss {initial:.3e} -> {fin:.3e}",
                        report.stage
                    );
                    (v, report)
                });
                (stage, variant, out)
            })
            .collect()
    });
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for (stage, variant, out) in results {
        match out {
            Ok((v, report)) => {
                library.set_surrogate(stage, variant, v, Some(report.clone()))?;
                reports.push(report);
            }
            Err(e) => failed.push(format!("{} variant {variant} ({e})", StageId::ALL[stage])),
        }
    }
    if !failed.is_empty() {
        return Err(EnsError::Distill(failed));
    }
    Ok(reports)
}

/// Builds a library around `teacher` and distills every surrogate on the
/// teacher's stage activations for the first `cfg.pairs` degraded images.
pub fn distill_library(
    teacher: &Network,
    images: &[Tensor],
    cfg: &DistillConfig,
    seed: u64,
    workers: usize,
) -> Result<(BlockLibrary, Vec<DistillReport>)> {
    cfg.validate()?;
    let n = cfg.pairs.min(images.len());
    if n == 0 {
        return Err(EnsError::config("distillation needs at least one image"));
    }
    let mut library = BlockLibrary::from_teacher(teacher, seed)?;
    let pairs = capture_all(teacher, &images[..n])?;
    let reports = distill_all(&mut library, &pairs, cfg, seed, workers)?;
    Ok((library, reports))
}
