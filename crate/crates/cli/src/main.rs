//! `ens`: data generation, teacher training, distillation, search,
//! fine-tuning, evaluation, ERF maps and reporting over one run directory.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ens_core::tasks::Split;
use ens_core::{EnsError, Result};
use serde_json::{json, Value};

use artifacts::Run;
use commands::{Architecture, ErfSource};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "ens", version, about = "Hybrid Restormer/Mamba U-Net search pipeline")]
struct Cli {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory every command reads from and writes to.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/val/test image pairs.
    GenData,
    /// Train the all-Restormer teacher.
    TrainTeacher,
    /// Distill every Mamba surrogate against the teacher's stages.
    Distill,
    /// Multi-objective search over hybrid codes.
    Search {
        /// Overrides the config's evaluation budget.
        #[arg(long)]
        budget: Option<usize>,
        /// Search only these stages (e.g. `e1,e2,e3`); the rest stay teacher.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// Fine-tune one hybrid end to end.
    Finetune {
        /// Explicit code, e.g. `1,0,2,0,0,0,0,1`.
        #[arg(long, conflicts_with_all = ["knee", "random_arch", "equal_split"])]
        code: Option<String>,
        /// Index into the search's knee candidates.
        #[arg(long)]
        knee: Option<usize>,
        /// A seeded uniformly random code.
        #[arg(long, conflicts_with_all = ["knee", "equal_split"])]
        random_arch: bool,
        /// Which random draw to use with `--random-arch`.
        #[arg(long, default_value_t = 0, requires = "random_arch")]
        draw: usize,
        /// Half teacher, half surrogate blocks in every stage.
        #[arg(long, conflicts_with = "knee")]
        equal_split: bool,
        /// Start from undistilled surrogates.
        #[arg(long)]
        no_distill: bool,
    },
    /// PSNR/SSIM of a saved network.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Effective receptive field of one stage.
    Erf {
        #[arg(long, required = true)]
        stage: String,
        /// Take the stage from a saved network.
        #[arg(long, conflicts_with = "library")]
        checkpoint: Option<PathBuf>,
        /// Take the stage from the block library.
        #[arg(long)]
        library: bool,
        /// Library option (0 = teacher).
        #[arg(long, default_value_t = 0)]
        variant: usize,
        /// Use the surrogate's seeded initialization instead.
        #[arg(long)]
        undistilled: bool,
    },
    /// Collect every stage's outputs into report.json and plots/*.dat.
    Report,
    /// Print the default config.
    DefaultConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::Search { .. } => "search",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Erf { .. } => "erf",
            Command::Report => "report",
            Command::DefaultConfig => "default-config",
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(EnsError::Config(format!("unknown split {s:?} (train, val, test)"))),
    }
}

fn run(cli: Cli) -> Result<Value> {
    if let Command::DefaultConfig = cli.command {
        return Ok(serde_json::to_value(RunConfig::default())?);
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let workers = if cli.workers == 0 { rayon::current_num_threads() } else { cli.workers };
    if cli.workers > 0 {
        // only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    let mut run = Run::new(cfg, cli.out.clone())?;
    let name = cli.command.name();
    let summary = match cli.command {
        Command::GenData => commands::gen_data(&mut run)?,
        Command::TrainTeacher => commands::train_teacher(&mut run)?,
        Command::Distill => commands::distill(&mut run, workers)?,
        Command::Search { budget, stages } => commands::search(&mut run, budget, &stages)?,
        Command::Finetune {
            code,
            knee,
            random_arch,
            draw,
            equal_split,
            no_distill,
        } => {
            let arch = if let Some(c) = code {
                Architecture::Code(commands::parse_code(&c)?)
            } else if random_arch {
                Architecture::Random(draw)
            } else if equal_split {
                Architecture::EqualSplit
            } else {
                Architecture::Knee(knee.unwrap_or(0))
            };
            commands::finetune(&mut run, arch, no_distill)?
        }
        Command::Evaluate { checkpoint, split } => commands::evaluate_checkpoint(&mut run, &checkpoint, parse_split(&split)?)?,
        Command::Erf {
            stage,
            checkpoint,
            library,
            variant,
            undistilled,
        } => {
            let source = match (checkpoint, library) {
                (Some(dir), _) => ErfSource::Checkpoint(dir),
                (None, true) => ErfSource::Library { variant, undistilled },
                (None, false) => return Err(EnsError::Config("erf needs --checkpoint DIR or --library".into())),
            };
            commands::erf(&mut run, source, &stage)?
        }
        Command::Report => commands::report(&mut run)?,
        Command::DefaultConfig => unreachable!("handled above"),
    };
    let hash = run.hash.clone();
    run.finish(name)?;
    let mut summary = summary;
    if let Value::Object(map) = &mut summary {
        map.insert("command".into(), json!(name));
        map.insert("config_hash".into(), json!(hash));
    }
    Ok(summary)
}

fn error_kind(e: &EnsError) -> &'static str {
    match e {
        EnsError::Tensor(_) => "tensor",
        EnsError::Config(_) => "config",
        EnsError::Code { .. } => "code",
        EnsError::Training { .. } => "training",
        EnsError::Numerical(_) => "numerical",
        EnsError::Contract(_) => "contract",
        EnsError::Distill(_) => "distill",
        EnsError::Evaluation { .. } => "evaluation",
        EnsError::Io(_) => "io",
        EnsError::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ENS_LOG", "info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = error_kind(&e);
            println!("{}", json!({ "error": kind, "message": e.to_string(), "command": name }));
            match e {
                EnsError::Config(_) | EnsError::Code { .. } | EnsError::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
