//! End-to-end ℓ1 training with a progressive patch schedule, and evaluation.

use ens_tensor::optim::{cosine_lr, Adam};
use ens_tensor::{Ctx, Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::metrics::{psnr, ssim, SsimConfig};
use crate::unet::Network;
use crate::{EnsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub patch: usize,
    pub batch: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    /// Peak Adam step size; decays to zero on a cosine over all phases.
    pub lr: f64,
    /// Log the running loss every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phases: vec![
                Phase { patch: 16, batch: 8, steps: 2000 },
                Phase { patch: 24, batch: 4, steps: 2000 },
                Phase { patch: 32, batch: 2, steps: 1000 },
            ],
            lr: 2e-3,
            log_every: 250,
        }
    }
}

impl TrainSchedule {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Same patch and batch progression with every phase's step count
    /// multiplied by `factor` (rounded, at least one step per phase).
    pub fn scaled(&self, factor: f64) -> TrainSchedule {
        TrainSchedule {
            phases: self
                .phases
                .iter()
                .map(|p| Phase {
                    steps: ((p.steps as f64 * factor).round() as usize).max(1),
                    ..*p
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(EnsError::config("schedule needs at least one phase"));
        }
        let mut prev = 0;
        for p in &self.phases {
            if p.patch == 0 || p.patch % 8 != 0 {
                return Err(EnsError::config(format!("patch size {} must be a positive multiple of 8", p.patch)));
            }
            if p.patch < prev {
                return Err(EnsError::config("patch sizes must be nondecreasing"));
            }
            if p.batch == 0 {
                return Err(EnsError::config("batch size must be >= 1"));
            }
            prev = p.patch;
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(EnsError::config("learning rate must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean absolute error of every step's batch.
    pub curve: Vec<f64>,
    pub wall_time_s: f64,
}

fn random_batch(data: &Dataset, patch: usize, batch: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let side = data.task.size;
    let mut xs = Vec::with_capacity(batch);
    let mut ys = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = &data.samples[rng.below(data.len())];
        let y0 = rng.below(side - patch + 1);
        let x0 = rng.below(side - patch + 1);
        xs.push(s.degraded.crop(y0, x0, patch, patch)?);
        ys.push(s.clean.crop(y0, x0, patch, patch)?);
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

/// Minimizes the mean absolute error between `network(degraded)` and the
/// clean image on random crops of `data`. On a non-finite loss or gradient
/// the network keeps the parameters of the last finite step and a training
/// error is returned.
pub fn train(network: &mut Network, data: &Dataset, schedule: &TrainSchedule, rng: &mut Rng) -> Result<TrainReport> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(EnsError::config("training set is empty"));
    }
    if let Some(p) = schedule.phases.iter().find(|p| p.patch > data.task.size) {
        return Err(EnsError::config(format!("patch {} exceeds image size {}", p.patch, data.task.size)));
    }
    let start = std::time::Instant::now();
    let total = schedule.total_steps();
    let mut opt = Adam::default();
    let mut curve = Vec::with_capacity(total);
    let mut last = f64::NAN;
    let mut step = 0;
    for phase in &schedule.phases {
        for _ in 0..phase.steps {
            let (x, y) = random_batch(data, phase.patch, phase.batch, rng)?;
            let mut g = Graph::new();
            let mut ctx = Ctx::train(&mut g, network.params());
            let xn = ctx.graph.constant(x);
            let trace = network.forward(&mut ctx, xn)?;
            let yn = ctx.graph.constant(y);
            let diff = ctx.graph.sub(trace.output, yn)?;
            let loss = ctx.graph.mean_abs(diff)?;
            let value = ctx.graph.value(loss).item()?;
            let grads = ctx.graph.backward(loss)?;
            let grads = ctx.param_grads(&grads);
            let finite = value.is_finite() && grads.iter().flatten().all(Tensor::is_finite);
            if !finite {
                return Err(EnsError::Training { step, last_loss: last });
            }
            opt.step(network.params_mut(), &grads, cosine_lr(schedule.lr, step, total));
            curve.push(value);
            last = value;
            step += 1;
            if schedule.log_every > 0 && step % schedule.log_every == 0 {
                log::info!("step {step}/{total} patch {} loss {value:.5}", phase.patch);
            }
        }
    }
    Ok(TrainReport {
        curve,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean PSNR of the clamped network outputs against the clean images.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean PSNR of the degraded inputs (the no-op baseline).
    pub input_psnr: f64,
    pub images: usize,
}

/// Network outputs on every degraded image, clamped to `[0, 1]`.
pub fn restore_all(network: &Network, data: &Dataset) -> Result<Vec<Tensor>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(CHUNK) {
        let x = Tensor::stack(&chunk.iter().map(|s| s.degraded.clone()).collect::<Vec<_>>())?;
        let y = network.apply(&x)?.map(|v| v.clamp(0.0, 1.0));
        for i in 0..chunk.len() {
            out.push(y.batch_item(i)?);
        }
    }
    Ok(out)
}

/// Mean PSNR of `network` on `data` (outputs clamped to `[0, 1]`).
pub fn mean_psnr(network: &Network, data: &Dataset) -> Result<f64> {
    let restored = restore_all(network, data)?;
    let mut total = 0.0;
    for (r, s) in restored.iter().zip(&data.samples) {
        total += psnr(r, &s.clean, 1.0)?;
    }
    Ok(total / data.len() as f64)
}

pub fn evaluate(network: &Network, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(EnsError::config("evaluation set is empty"));
    }
    let restored = restore_all(network, data)?;
    let cfg = SsimConfig::default();
    let (mut p, mut s, mut base) = (0.0, 0.0, 0.0);
    for (r, sample) in restored.iter().zip(&data.samples) {
        p += psnr(r, &sample.clean, 1.0)?;
        s += ssim(r, &sample.clean, &cfg)?;
        base += psnr(&sample.degraded.map(|v| v.clamp(0.0, 1.0)), &sample.clean, 1.0)?;
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        psnr: p / n,
        ssim: s / n,
        input_psnr: base / n,
        images: data.len(),
    })
}
