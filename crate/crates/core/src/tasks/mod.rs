//! Synthetic restoration tasks, training, metrics and receptive-field
//! diagnostics.

pub mod data;
pub mod erf;
pub mod metrics;
pub mod train;

pub use data::{generate_dataset, Dataset, Sample, Split, TaskConfig, TaskKind};
pub use erf::{erf_map, erf_mass_within, ErfMap};
pub use metrics::{mse, psnr, ssim, SsimConfig, PSNR_CAP};
pub use train::{evaluate, mean_psnr, train, EvalReport, Phase, TrainReport, TrainSchedule};
