//! Multi-objective architecture search over stage-wise block choices.

pub mod ehvi;
mod ens;
pub mod gp;
mod knee;
pub mod pareto;
mod qmc;
mod space;

pub use ehvi::{ehvi, improvement};
pub use ens::{
    history_header, history_row, read_history_csv, run_ens, write_history_csv, EnsConfig, LibraryObjective, Objective,
    Observation, SearchResult,
};
pub use gp::{GaussianProcess, GpConfig, GpHyper};
pub use knee::{knee_select, KneeSelection};
pub use pareto::{dominates, hypervolume, reference_point, ParetoFront};
pub use qmc::{radical_inverse, Halton};
pub use space::{PenaltyWeights, SearchSpace};
