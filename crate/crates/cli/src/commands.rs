//! One function per subcommand. Each reads its inputs from the run
//! directory, writes its outputs there, and returns a JSON summary.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ens_core::blocks::StageVariant;
use ens_core::distill::distill_library;
use ens_core::library::{load_network, save_network, BlockLibrary};
use ens_core::search::{
    history_header, history_row, read_history_csv, run_ens, LibraryObjective, Observation, SearchSpace,
};
use ens_core::tasks::erf::gaussian_probes;
use ens_core::tasks::train::restore_all;
use ens_core::tasks::{
    erf_map, erf_mass_within, evaluate, generate_dataset, psnr, ssim, train, Dataset, EvalReport, Split, SsimConfig,
    TrainReport,
};
use ens_core::unet::{option_counts, ArchCode, Network, StageId};
use ens_core::{EnsError, Result};
use ens_tensor::{mix_seed, Rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::Run;
use crate::config::Stream;

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn load_split(run: &Run, split: Split) -> Result<Dataset> {
    run.require(&format!("data/{split}.bin"), "gen-data")?;
    Dataset::load(&run.path("data"), split)
}

fn loss_csv(report: &TrainReport) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in report.curve.iter().enumerate() {
        s.push_str(&format!("{},{l:.16e}\n", i + 1));
    }
    s
}

pub fn gen_data(run: &mut Run) -> Result<Value> {
    let task = run.cfg.task.clone();
    let seed = run.cfg.seed_for(Stream::Data);
    let dir = run.path("data");
    let mut sizes = serde_json::Map::new();
    for split in SPLITS {
        let data = generate_dataset(&task, split, task.split_size(split), seed)?;
        data.save(&dir)?;
        sizes.insert(split.to_string(), json!(data.len()));
    }
    run.produced(dir);
    Ok(json!({ "task": task.kind.to_string(), "size": task.size, "images": sizes }))
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    split: &'a str,
    steps: usize,
    final_loss: Option<f64>,
    params: usize,
    eval: EvalReport,
}

pub fn train_teacher(run: &mut Run) -> Result<Value> {
    let train_set = load_split(run, Split::Train)?;
    let val = load_split(run, Split::Val)?;
    let mut net = Network::teacher(&run.cfg.model, &mut Rng::new(run.cfg.seed_for(Stream::TeacherInit)))?;
    let mut rng = Rng::new(run.cfg.seed_for(Stream::TeacherTrain));
    let dir = run.path("teacher");
    let report = match train(&mut net, &train_set, &run.cfg.teacher, &mut rng) {
        Ok(r) => r,
        Err(e) => {
            // parameters hold the last finite state
            save_network(&net, &dir)?;
            run.produced(dir);
            return Err(e);
        }
    };
    save_network(&net, &dir)?;
    run.produced(dir.join("model.bin"));
    run.produced(dir.join("model.json"));
    let metrics = TrainMetrics {
        split: "val",
        steps: report.curve.len(),
        final_loss: report.curve.last().copied(),
        params: net.describe().total_params,
        eval: evaluate(&net, &val)?,
    };
    log::info!("teacher trained in {:.1}s", report.wall_time_s);
    run.write_text("teacher/loss.csv", &loss_csv(&report))?;
    run.write_json("teacher/metrics.json", &metrics)?;
    Ok(serde_json::to_value(&metrics)?)
}

pub fn distill(run: &mut Run, workers: usize) -> Result<Value> {
    run.require("teacher/model.bin", "train-teacher")?;
    let teacher = load_network(&run.path("teacher"))?;
    let train_set = load_split(run, Split::Train)?;
    let (library, reports) = distill_library(
        &teacher,
        &train_set.degraded(),
        &run.cfg.distill,
        run.cfg.seed_for(Stream::Library),
        workers,
    )?;
    let dir = run.path("library");
    library.save(&dir)?;
    run.produced(dir.clone());
    run.write_json("library/reports.json", &json!({ "reports": reports }))?;
    let improved = reports.iter().filter(|r| r.final_loss < r.initial_loss).count();
    Ok(json!({ "surrogates": reports.len(), "improved": improved }))
}

fn load_library(run: &Run) -> Result<BlockLibrary> {
    run.require("library/library.json", "distill")?;
    BlockLibrary::load(&run.path("library"))
}

pub fn parse_stages(names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| StageId::parse(n.trim()).map(StageId::index))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct KneeFile {
    candidates: Vec<Observation>,
    truncated: bool,
}

pub fn search(run: &mut Run, budget: Option<usize>, stages: &[String]) -> Result<Value> {
    let library = load_library(run)?;
    let val = load_split(run, Split::Val)?;
    let mut objective = LibraryObjective::new(&library, &val)?;
    let mut space = SearchSpace::from_specs(&run.cfg.model.stages);
    if !stages.is_empty() {
        space = space.restricted(&parse_stages(stages)?);
    }
    let mut cfg = run.cfg.search.clone();
    if let Some(b) = budget {
        cfg.budget = b;
    }
    cfg.seed = run.cfg.seed_for(Stream::Search);

    let history_path = run.path("search/history.csv");
    fs::create_dir_all(history_path.parent().expect("has parent"))?;
    let mut out = BufWriter::new(fs::File::create(&history_path)?);
    writeln!(out, "{}", history_header(space.dims()))?;
    out.flush()?;
    run.produced(history_path);
    let result = run_ens(&space, &cfg, &mut objective, &mut |obs| {
        writeln!(out, "{}", history_row(obs))?;
        out.flush()?;
        Ok(())
    });
    drop(out);
    let result = result?;

    let front: Vec<&Observation> = result.front_observations();
    run.write_json("search/front.json", &json!({ "front": front }))?;
    let knee = KneeFile {
        candidates: result.knee_observations().into_iter().cloned().collect(),
        truncated: result.knee_truncated,
    };
    run.write_json("search/knee.json", &knee)?;
    let summary = json!({
        "evaluations": result.history.len(),
        "distinct_codes": result.history.iter().filter(|o| !o.repeated).count(),
        "space_size": space.size(),
        "front_size": result.front.len(),
        "knee_candidates": knee.candidates.len(),
        "knee_truncated": knee.truncated,
        "reference": result.reference,
        "hypervolume": result.hypervolume,
        "teacher_psnr": objective.teacher_psnr(),
    });
    run.write_json("search/summary.json", &summary)?;
    Ok(summary)
}

/// Which hybrid `finetune` starts from.
pub enum Architecture {
    Code(ArchCode),
    Knee(usize),
    Random(usize),
    EqualSplit,
}

pub fn parse_code(s: &str) -> Result<ArchCode> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| EnsError::Config(format!("bad code component {t:?} in {s:?}")))
        })
        .collect::<Result<Vec<_>>>()
        .map(ArchCode)
}

fn code_label(code: &ArchCode) -> String {
    let parts: Vec<String> = code.0.iter().map(|z| z.to_string()).collect();
    format!("code-{}", parts.join("-"))
}

/// Seeded random code; draw `i` is independent of the others.
pub fn random_code(options: &[usize], seed: u64, draw: usize) -> ArchCode {
    let mut rng = Rng::new(mix_seed(seed, draw as u64));
    ArchCode(options.iter().map(|&k| rng.below(k)).collect())
}

#[derive(Serialize)]
struct FinetuneMetrics {
    label: String,
    code: Option<ArchCode>,
    distilled: bool,
    penalty: f64,
    params: usize,
    steps: usize,
    final_loss: Option<f64>,
    before_val: EvalReport,
    after_val: EvalReport,
    after_test: EvalReport,
}

pub fn finetune(run: &mut Run, arch: Architecture, no_distill: bool) -> Result<Value> {
    let distilled = load_library(run)?;
    let library = if no_distill {
        // same teacher and glue, surrogates at their seeded initialization
        let teacher = distilled.assemble(&ArchCode::teacher(8))?;
        BlockLibrary::from_teacher(&teacher, distilled.seed())?
    } else {
        distilled
    };
    let (label, code, mut net) = match arch {
        Architecture::EqualSplit => ("equal-split".to_string(), None, library.equal_split_network()?),
        Architecture::Code(code) => (code_label(&code), Some(code.clone()), library.assemble(&code)?),
        Architecture::Random(draw) => {
            let code = random_code(&option_counts(&run.cfg.model.stages), run.cfg.seed_for(Stream::RandomArch), draw);
            (format!("random-{draw}"), Some(code.clone()), library.assemble(&code)?)
        }
        Architecture::Knee(i) => {
            let path = run.require("search/knee.json", "search")?;
            let knee: KneeFile = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
            let obs = knee.candidates.get(i).ok_or_else(|| {
                EnsError::Config(format!("knee candidate {i} requested, {} available", knee.candidates.len()))
            })?;
            (format!("knee-{i}"), Some(obs.code.clone()), library.assemble(&obs.code)?)
        }
    };
    let label = if no_distill { format!("{label}-nodistill") } else { label };
    let train_set = load_split(run, Split::Train)?;
    let val = load_split(run, Split::Val)?;
    let test = load_split(run, Split::Test)?;
    let before_val = evaluate(&net, &val)?;
    // every variant sees the same batches
    let mut rng = Rng::new(run.cfg.seed_for(Stream::Finetune));
    let report = train(&mut net, &train_set, &run.cfg.finetune, &mut rng)?;
    let dir = format!("finetune/{label}");
    save_network(&net, &run.path(&dir))?;
    run.produced(run.path(&dir).join("model.bin"));
    run.produced(run.path(&dir).join("model.json"));
    let metrics = FinetuneMetrics {
        label: label.clone(),
        code,
        distilled: !no_distill,
        penalty: run.cfg.search.weights.of_kinds(net.kinds()),
        params: net.describe().total_params,
        steps: report.curve.len(),
        final_loss: report.curve.last().copied(),
        before_val,
        after_val: evaluate(&net, &val)?,
        after_test: evaluate(&net, &test)?,
    };
    run.write_text(&format!("{dir}/loss.csv"), &loss_csv(&report))?;
    run.write_json(&format!("{dir}/metrics.json"), &metrics)?;
    Ok(serde_json::to_value(&metrics)?)
}

fn checkpoint_name(dir: &Path) -> String {
    let parts: Vec<String> = dir
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    parts.into_iter().rev().collect::<Vec<_>>().join("_")
}

pub fn evaluate_checkpoint(run: &mut Run, checkpoint: &Path, split: Split) -> Result<Value> {
    let net = load_network(checkpoint)?;
    let data = load_split(run, split)?;
    let report = evaluate(&net, &data)?;
    let restored = restore_all(&net, &data)?;
    let cfg = SsimConfig::default();
    let mut csv = String::from("image,psnr_db,ssim\n");
    for (i, (r, s)) in restored.iter().zip(&data.samples).enumerate() {
        csv.push_str(&format!("{i},{:.16e},{:.16e}\n", psnr(r, &s.clean, 1.0)?, ssim(r, &s.clean, &cfg)?));
    }
    let name = checkpoint_name(checkpoint);
    run.write_text(&format!("eval/{name}_{split}.csv"), &csv)?;
    let summary = json!({ "checkpoint": name, "split": split.to_string(), "report": report });
    run.write_json(&format!("eval/{name}_{split}.json"), &summary)?;
    Ok(summary)
}

/// Where `erf` takes its stage from.
pub enum ErfSource {
    Checkpoint(PathBuf),
    Library { variant: usize, undistilled: bool },
}

pub fn erf(run: &mut Run, source: ErfSource, stage: &str) -> Result<Value> {
    let id = StageId::parse(stage)?;
    let i = id.index();
    let (label, variant): (String, StageVariant) = match source {
        ErfSource::Checkpoint(dir) => (checkpoint_name(&dir), load_network(&dir)?.stage_variant(i)?),
        ErfSource::Library { variant, undistilled } => {
            let lib = load_library(run)?;
            if variant >= run.cfg.model.stages[i].options() {
                return Err(EnsError::Config(format!("stage {id} has no option {variant}")));
            }
            if undistilled && variant > 0 {
                let v = BlockLibrary::initial_surrogate(lib.config(), i, variant, lib.seed())?;
                (format!("library-{variant}-undistilled"), v)
            } else {
                (format!("library-{variant}"), lib.variant(i, variant).clone())
            }
        }
    };
    let side = run.cfg.task.size / id.scale();
    let mut rng = Rng::new(mix_seed(run.cfg.seed_for(Stream::ErfProbes), i as u64));
    let probes = gaussian_probes(variant.channels(), side, run.cfg.erf.probes, &mut rng);
    let map = erf_map(variant.params(), |ctx, x| variant.stage().forward(ctx, x), &probes)?;
    let radius = side as f64 / 4.0;
    let mass = erf_mass_within(&map, radius);
    let stem = format!("erf/{label}_{id}");
    run.write_text(&format!("{stem}.csv"), &map.to_csv())?;
    let summary = json!({ "source": label, "stage": id.to_string(), "side": side, "probes": probes.len(),
        "radius": radius, "mass_within_radius": mass });
    run.write_json(&format!("{stem}.json"), &summary)?;
    Ok(summary)
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Turns `step,loss` CSV into whitespace-separated columns.
fn csv_to_dat(csv: &str, header: &str) -> String {
    let mut out = format!("# {header}\n");
    for line in csv.lines().skip(1) {
        out.push_str(&line.replace(',', " "));
        out.push('\n');
    }
    out
}

pub fn report(run: &mut Run) -> Result<Value> {
    let mut report = serde_json::Map::new();
    let teacher = run.path("teacher/metrics.json");
    if teacher.exists() {
        report.insert("teacher".into(), read_json(&teacher)?);
        let loss = fs::read_to_string(run.path("teacher/loss.csv"))?;
        run.write_text("plots/loss_teacher.dat", &csv_to_dat(&loss, "step loss"))?;
    }
    let reports = run.path("library/reports.json");
    if reports.exists() {
        report.insert("distill".into(), read_json(&reports)?);
    }
    let history = run.path("search/history.csv");
    if history.exists() {
        let rows = read_history_csv(BufReader::new(fs::File::open(&history)?))?;
        let mut dat = String::from("# psnr_diff_db penalty\n");
        for o in &rows {
            dat.push_str(&format!("{:.16e} {:.16e}\n", o.psnr_diff_db, o.penalty));
        }
        run.write_text("plots/pareto_history.dat", &dat)?;
        for (name, key) in [("front", "front"), ("knee", "candidates")] {
            let v = read_json(&run.path(&format!("search/{name}.json")))?;
            let mut dat = String::from("# psnr_diff_db penalty\n");
            for o in v[key].as_array().into_iter().flatten() {
                dat.push_str(&format!("{} {}\n", o["psnr_diff_db"], o["penalty"]));
            }
            run.write_text(&format!("plots/pareto_{name}.dat"), &dat)?;
            report.insert(format!("search_{name}"), v);
        }
        report.insert("search".into(), read_json(&run.path("search/summary.json"))?);
    }
    let mut finetuned = serde_json::Map::new();
    for dir in sorted_entries(&run.path("finetune"))? {
        let name = dir.file_name().expect("entry name").to_string_lossy().into_owned();
        let metrics = dir.join("metrics.json");
        if metrics.exists() {
            finetuned.insert(name.clone(), read_json(&metrics)?);
            let loss = fs::read_to_string(dir.join("loss.csv"))?;
            run.write_text(&format!("plots/loss_{name}.dat"), &csv_to_dat(&loss, "step loss"))?;
        }
    }
    if !finetuned.is_empty() {
        report.insert("finetune".into(), Value::Object(finetuned));
    }
    let mut erfs = serde_json::Map::new();
    for path in sorted_entries(&run.path("erf"))? {
        let stem = path.file_stem().expect("file stem").to_string_lossy().into_owned();
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                erfs.insert(stem, read_json(&path)?);
            }
            Some("csv") => {
                let grid = fs::read_to_string(&path)?.replace(',', " ");
                run.write_text(&format!("plots/erf_{stem}.dat"), &format!("# normalized ERF grid, row-major\n{grid}"))?;
            }
            _ => {}
        }
    }
    if !erfs.is_empty() {
        report.insert("erf".into(), Value::Object(erfs));
    }
    let mut evals = serde_json::Map::new();
    for path in sorted_entries(&run.path("eval"))? {
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let stem = path.file_stem().expect("file stem").to_string_lossy().into_owned();
            evals.insert(stem, read_json(&path)?);
        }
    }
    if !evals.is_empty() {
        report.insert("evaluate".into(), Value::Object(evals));
    }
    let sections: Vec<String> = report.keys().cloned().collect();
    run.write_json("report.json", &Value::Object(report))?;
    Ok(json!({ "sections": sections }))
}
