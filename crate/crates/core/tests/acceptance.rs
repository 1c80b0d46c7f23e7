//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p ens-core --test acceptance -- 1 4 9`.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use ens_core::blocks::{BlockConfig, MambaBlock, RestormerBlock};
use ens_core::distill::{distill_library, DistillConfig, DistillReport};
use ens_core::library::BlockLibrary;
use ens_core::search::{
    ehvi, hypervolume, reference_point, run_ens, EnsConfig, GaussianProcess, GpHyper, Halton, LibraryObjective,
    Objective, ParetoFront, PenaltyWeights, SearchResult, SearchSpace,
};
use ens_core::tasks::erf::gaussian_probes;
use ens_core::tasks::{
    erf_map, erf_mass_within, generate_dataset, mean_psnr, train, Dataset, Phase, Split, TaskConfig, TaskKind,
    TrainSchedule,
};
use ens_core::unet::{default_stage_specs, enumerate_codes, option_counts, ArchCode, ModelConfig, Network, StageId, StageSpec};
use ens_core::Result;
use ens_tensor::gradcheck::{finite_difference_check, finite_difference_check_sampled, FD_STEP};
use ens_tensor::{kernels, Ctx, Graph, NodeId, ParamStore, Rng, Shape, Tensor, TensorError, Unary};
use nalgebra::{DMatrix, DVector};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Check = fn() -> Verdict;

const CRITERIA: [(u32, &str, Check); 9] = [
    (1, "search-space fidelity", c1_search_space),
    (2, "search protocol constants", c2_protocol),
    (3, "gradient suite", c3_gradients),
    (4, "oracle equivalences", c4_oracles),
    (5, "search optimality on the reduced space", c5_optimality),
    (6, "distillation efficacy", c6_distillation),
    (7, "searched knee vs random and equal-split hybrids", c7_baselines),
    (8, "distilled vs undistilled ERF mass", c8_erf),
    (9, "structural invariants", c9_invariants),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {status} {name}: {} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- fixture

/// Desk-scale denoising setup shared by the training-based criteria.
struct Fixture {
    train: Dataset,
    val: Dataset,
    test: Dataset,
    teacher: Network,
    library: BlockLibrary,
    reports: Vec<DistillReport>,
    finetune: TrainSchedule,
    setup_s: f64,
}

const FINETUNE_SEED: u64 = 606;

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let t = Instant::now();
        let task = TaskConfig {
            kind: TaskKind::Denoise,
            size: 16,
            train: 64,
            val: 16,
            test: 16,
            ..Default::default()
        };
        let data = |split| generate_dataset(&task, split, task.split_size(split), 101).unwrap();
        let (train_set, val, test) = (data(Split::Train), data(Split::Val), data(Split::Test));
        let model = ModelConfig { width: 8, ..Default::default() };
        let mut teacher = Network::teacher(&model, &mut Rng::new(102)).unwrap();
        let schedule = TrainSchedule {
            phases: vec![
                Phase { patch: 8, batch: 8, steps: 400 },
                Phase { patch: 16, batch: 4, steps: 400 },
            ],
            lr: 2e-3,
            log_every: 0,
        };
        train(&mut teacher, &train_set, &schedule, &mut Rng::new(103)).unwrap();
        let distill = DistillConfig {
            steps: 200,
            pairs: 64,
            ..Default::default()
        };
        let (library, reports) = distill_library(&teacher, &train_set.degraded(), &distill, 104, 1).unwrap();
        let finetune = TrainSchedule {
            phases: vec![Phase { patch: 16, batch: 4, steps: 60 }],
            lr: 1e-3,
            log_every: 0,
        };
        Fixture {
            train: train_set,
            val,
            test,
            teacher,
            library,
            reports,
            finetune,
            setup_s: t.elapsed().as_secs_f64(),
        }
    })
}

fn finetuned_psnr(mut net: Network, f: &Fixture, split: &Dataset) -> f64 {
    train(&mut net, &f.train, &f.finetune, &mut Rng::new(FINETUNE_SEED)).unwrap();
    mean_psnr(&net, split).unwrap()
}

const TOY_SEARCH_SEED: u64 = 105;

/// The default-configuration search over the fixture's library, shared by
/// criteria 2 and 7.
struct ToySearch {
    result: SearchResult,
    seconds: f64,
}

fn toy_search() -> &'static ToySearch {
    static S: OnceLock<ToySearch> = OnceLock::new();
    S.get_or_init(|| {
        let f = fixture();
        let mut objective = LibraryObjective::new(&f.library, &f.val).unwrap();
        let space = SearchSpace::from_specs(&f.library.config().stages);
        let cfg = EnsConfig {
            seed: TOY_SEARCH_SEED,
            ..EnsConfig::default()
        };
        let t = Instant::now();
        let result = run_ens(&space, &cfg, &mut objective, &mut |_| Ok(())).unwrap();
        ToySearch {
            result,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------- criteria

fn c1_search_space() -> Verdict {
    let specs = default_stage_specs();
    let codes: HashSet<ArchCode> = enumerate_codes(&option_counts(&specs)).collect();
    let teacher = Network::teacher(&ModelConfig { width: 1, ..Default::default() }, &mut Rng::new(1)).unwrap();
    let lib = BlockLibrary::from_teacher(&teacher, 1).unwrap();
    let per_stage = lib.surrogates_per_stage();
    let pass = codes.len() == 34_560 && lib.surrogate_count() == 22 && per_stage == vec![2, 3, 3, 4, 3, 3, 2, 2];
    verdict(
        pass,
        format!("{} distinct codes, {} surrogates, per stage {per_stage:?}", codes.len(), lib.surrogate_count()),
    )
}

fn c2_protocol() -> Verdict {
    let s = toy_search();
    let h = &s.result.history;
    // leading rows that replay the seeded quasi-random design
    let design = Halton::new(8, &mut Rng::new(TOY_SEARCH_SEED).fork(1)).sample(h.len().min(40));
    let initial = h.iter().zip(&design).take_while(|(o, x)| &o.x == *x).count();
    let knee = s.result.knee.len();
    let pass = initial == 17 && h.len() == 500 && h.iter().enumerate().all(|(i, o)| o.iter == i + 1) && knee == 5;
    verdict(
        pass,
        format!(
            "{initial} initial points, {} history rows, {knee} knee candidates (front {}), search {:.0}s at width 8 on 16x16",
            h.len(),
            s.result.front.len(),
            s.seconds
        ),
    )
}

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-3;

fn as_tensor_err(e: ens_core::EnsError) -> TensorError {
    TensorError::Contract(e.to_string())
}

/// Worst relative error of `build` (contracted with fixed random weights)
/// over 20 seeds, checking every coordinate.
fn primitive(shapes: &[Shape], build: impl Fn(&mut Graph, &[NodeId]) -> ens_tensor::Result<NodeId>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = Rng::new(seed);
        let params: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(*s, 1.0, &mut rng)).collect();
        let f = |g: &mut Graph, p: &[NodeId]| {
            let out = build(g, p)?;
            let r = g.constant(Tensor::randn(g.shape(out), 1.0, &mut Rng::new(seed ^ 0xabcd)));
            let m = g.hadamard(out, r)?;
            g.sum(m)
        };
        worst = worst.max(finite_difference_check(f, &params, FD_STEP).unwrap());
    }
    worst
}

/// Same for a parameterized module; samples coordinates of large tensors.
fn module(
    shape: Shape,
    make: impl Fn(&mut ParamStore, &mut Rng) -> Box<dyn Fn(&mut Ctx, NodeId) -> Result<NodeId>>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = Rng::new(1000 + seed);
        let mut store = ParamStore::new();
        let forward = make(&mut store, &mut rng);
        let mut params = vec![Tensor::randn(shape, 1.0, &mut rng)];
        params.extend(store.iter().map(|(_, _, t)| t.clone()));
        let f = |g: &mut Graph, ids: &[NodeId]| {
            let mut ctx = Ctx::with_nodes(g, &store, &ids[1..]);
            let y = forward(&mut ctx, ids[0]).map_err(as_tensor_err)?;
            let r = g.constant(Tensor::randn(g.shape(y), 1.0, &mut Rng::new(seed ^ 0xabcd)));
            let m = g.hadamard(y, r)?;
            g.sum(m)
        };
        worst = worst.max(finite_difference_check_sampled(f, &params, FD_STEP, 4, &mut rng).unwrap());
    }
    worst
}

fn c3_gradients() -> Verdict {
    let s = Shape::new;
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut add = |name: &str, err: f64| results.push((name.to_string(), err));
    add("conv1x1", primitive(&[s(2, 3, 3, 2), s(4, 3, 1, 1), s(1, 4, 1, 1)], |g, p| g.conv1x1(p[0], p[1], Some(p[2]))));
    add("conv3x3", primitive(&[s(1, 2, 4, 3), s(3, 2, 3, 3), s(1, 3, 1, 1)], |g, p| g.conv3x3(p[0], p[1], Some(p[2]))));
    add(
        "depthwise_conv3x3",
        primitive(&[s(2, 3, 4, 4), s(3, 1, 3, 3), s(1, 3, 1, 1)], |g, p| g.depthwise_conv3x3(p[0], p[1], Some(p[2]))),
    );
    add(
        "layer_norm",
        primitive(&[s(2, 4, 2, 3), s(1, 4, 1, 1), s(1, 4, 1, 1)], |g, p| g.layer_norm(p[0], p[1], p[2], 1e-5)),
    );
    for u in [Unary::Gelu, Unary::Silu, Unary::Sigmoid, Unary::Softplus, Unary::Exp] {
        add(&format!("{u:?}"), primitive(&[s(1, 3, 2, 2)], |g, p| g.unary(p[0], u)));
    }
    let pair = [s(1, 2, 3, 3), s(1, 2, 3, 3)];
    add("add", primitive(&pair, |g, p| g.add(p[0], p[1])));
    add("sub", primitive(&pair, |g, p| g.sub(p[0], p[1])));
    add("hadamard", primitive(&pair, |g, p| g.hadamard(p[0], p[1])));
    add("scale", primitive(&pair[..1], |g, p| g.scale(p[0], -1.7)));
    add("broadcast_mul", primitive(&[s(2, 3, 2, 2), s(1, 3, 1, 1)], |g, p| g.broadcast_mul(p[0], p[1])));
    add("mean_pool", primitive(&[s(2, 3, 3, 2)], |g, p| g.mean_pool(p[0])));
    add(
        "mean_abs",
        primitive(&[s(2, 3, 3, 2)], |g, p| {
            let m = g.mean_abs(p[0])?;
            g.exp(m)
        }),
    );
    add(
        "mean_square",
        primitive(&[s(2, 3, 3, 2)], |g, p| {
            let m = g.mean_square(p[0])?;
            g.exp(m)
        }),
    );
    add("softmax", primitive(&[s(2, 2, 3, 4)], |g, p| g.softmax(p[0])));
    add("l2_normalize", primitive(&[s(2, 2, 3, 4)], |g, p| g.l2_normalize(p[0], 1e-12)));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { s(2, 1, 4, 3) } else { s(2, 1, 3, 4) };
        let b = if tb { s(2, 1, 5, 4) } else { s(2, 1, 4, 5) };
        add(&format!("matmul{}{}", ta as u8, tb as u8), primitive(&[a, b], |g, p| g.batched_matmul(p[0], p[1], ta, tb)));
    }
    add("reshape", primitive(&[s(1, 4, 2, 3)], |g, p| g.reshape(p[0], s(2, 2, 1, 6))));
    add("pixel_shuffle", primitive(&[s(1, 8, 2, 3)], |g, p| g.pixel_shuffle(p[0], 2)));
    add("pixel_unshuffle", primitive(&[s(1, 2, 4, 6)], |g, p| g.pixel_unshuffle(p[0], 2)));
    add("concat", primitive(&[s(2, 2, 2, 3), s(2, 3, 2, 3)], |g, p| g.concat_channels(p[0], p[1])));
    let index: Arc<[usize]> = vec![0, 3, 1, 4, 2, 5, 5].into();
    add("gather", primitive(&[s(2, 2, 2, 3)], |g, p| g.gather_plane(p[0], index.clone(), 1, 7)));
    add(
        "selective_scan",
        primitive(&[s(2, 3, 1, 5), s(2, 3, 1, 5), s(1, 1, 3, 2), s(2, 2, 1, 5), s(2, 2, 1, 5)], |g, p| {
            let delta = g.softplus(p[1])?;
            let e = g.exp(p[2])?;
            let a = g.scale(e, -1.0)?;
            g.selective_scan(p[0], delta, a, p[3], p[4])
        }),
    );

    let two_heads = BlockConfig { heads: 2, ..Default::default() };
    add(
        "MDTA",
        module(s(1, 4, 4, 5), |st, r| {
            let b = RestormerBlock::init(st, "", 4, &two_heads, r).unwrap();
            Box::new(move |c, x| b.mdta(c, x))
        }),
    );
    add(
        "GDFN",
        module(s(1, 4, 5, 4), |st, r| {
            let b = RestormerBlock::init(st, "", 4, &BlockConfig::default(), r).unwrap();
            Box::new(move |c, x| b.gdfn(c, x))
        }),
    );
    add(
        "Restormer block",
        module(s(1, 4, 6, 6), |st, r| {
            let b = RestormerBlock::init(st, "", 4, &BlockConfig::default(), r).unwrap();
            Box::new(move |c, x| b.forward(c, x))
        }),
    );
    let small_state = BlockConfig { d_state: 3, ..Default::default() };
    add(
        "RSSB",
        module(s(1, 4, 4, 5), |st, r| {
            let b = MambaBlock::init(st, "", 4, &small_state, r).unwrap();
            Box::new(move |c, x| b.forward(c, x))
        }),
    );
    add("U-Net", unet_gradients());

    let worst = results.iter().cloned().fold(("", 0.0), |acc, (n, e)| if e > acc.1 { (leak(n), e) } else { acc });
    let failing: Vec<&str> = results.iter().filter(|(_, e)| !(*e < GRAD_TOL)).map(|(n, _)| n.as_str()).collect();
    verdict(
        failing.is_empty(),
        format!(
            "{} checks x {GRAD_SEEDS} seeds, worst relative error {:.2e} ({}) < {GRAD_TOL:e}{}",
            results.len(),
            worst.1,
            worst.0,
            if failing.is_empty() { String::new() } else { format!("; failing {failing:?}") }
        ),
    )
}

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

/// Full U-Net micro-instance: one block per stage, mixed block kinds.
fn unet_gradients() -> f64 {
    let specs: Vec<StageSpec> = StageId::ALL
        .into_iter()
        .map(|id| StageSpec {
            id,
            teacher_blocks: 1,
            surrogate_blocks: vec![1],
        })
        .collect();
    let cfg = ModelConfig {
        width: 2,
        stages: specs,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = Rng::new(500 + seed);
        let code = ArchCode((0..8).map(|_| rng.below(2)).collect());
        let net = Network::from_code(&cfg, &code, &mut rng).unwrap();
        let shape = Shape::new(1, 3, 8, 8);
        let mut params = vec![Tensor::randn(shape, 1.0, &mut rng)];
        params.extend(net.params().iter().map(|(_, _, t)| t.clone()));
        let weights = Tensor::randn(shape, 1.0, &mut rng);
        let f = |g: &mut Graph, ids: &[NodeId]| {
            let mut ctx = Ctx::with_nodes(g, net.params(), &ids[1..]);
            let trace = net.forward(&mut ctx, ids[0]).map_err(as_tensor_err)?;
            let r = g.constant(weights.clone());
            let m = g.hadamard(trace.output, r)?;
            g.sum(m)
        };
        worst = worst.max(finite_difference_check_sampled(f, &params, FD_STEP, 2, &mut rng).unwrap());
    }
    worst
}

fn naive_scan(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    let (n, d, l) = (u.shape().n(), u.shape().c(), u.shape().w());
    let ns = a.shape().w();
    let mut y = Tensor::zeros(u.shape());
    for bi in 0..n {
        for ch in 0..d {
            let mut h = vec![0.0; ns];
            for t in 0..l {
                let dt = delta.at(bi, ch, 0, t);
                let x = u.at(bi, ch, 0, t);
                let mut out = 0.0;
                for s in 0..ns {
                    h[s] = (dt * a.at(0, 0, ch, s)).exp() * h[s] + dt * b.at(bi, s, 0, t) * x;
                    out += c.at(bi, s, 0, t) * h[s];
                }
                y.set(bi, ch, 0, t, out);
            }
        }
    }
    y
}

fn scan_error() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, l, ns) in [(14, 32, 8), (15, 64, 8), (16, 7, 1), (17, 64, 3), (18, 1, 4), (19, 50, 16)] {
        let mut rng = Rng::new(seed);
        let (n, d) = (2, 5);
        let u = Tensor::randn(Shape::new(n, d, 1, l), 1.0, &mut rng);
        let delta = Tensor::uniform(Shape::new(n, d, 1, l), 1.0, &mut rng).map(|v| 0.01 + v.abs());
        let a = Tensor::uniform(Shape::new(1, 1, d, ns), 1.0, &mut rng).map(|v| -0.05 - 2.0 * v.abs());
        let b = Tensor::randn(Shape::new(n, ns, 1, l), 1.0, &mut rng);
        let c = Tensor::randn(Shape::new(n, ns, 1, l), 1.0, &mut rng);
        let (y, _) = kernels::selective_scan(&u, &delta, &a, &b, &c).unwrap();
        let expect = naive_scan(&u, &delta, &a, &b, &c);
        for (p, q) in y.data().iter().zip(expect.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

fn archive_matches_brute_force() -> bool {
    let mut rng = Rng::new(31);
    // coarse values force ties on one or both objectives
    let pts: Vec<[f64; 2]> = (0..500)
        .map(|_| [rng.below(40) as f64 / 4.0, rng.below(40) as f64 / 4.0])
        .collect();
    let mut archive = ParetoFront::new();
    for (i, p) in pts.iter().enumerate() {
        archive.insert(i, *p);
    }
    let expected: Vec<usize> = (0..pts.len())
        .filter(|&i| {
            pts.iter().enumerate().all(|(j, q)| {
                let strictly = q[0] <= pts[i][0] && q[1] <= pts[i][1] && (q[0] < pts[i][0] || q[1] < pts[i][1]);
                !(strictly || (q == &pts[i] && j < i))
            })
        })
        .collect();
    let mut got: Vec<usize> = archive.items().copied().collect();
    got.sort_unstable();
    got == expected
}

/// Hypervolume by summing the dominated part of each vertical strip.
fn strip_hv(points: &[[f64; 2]], r: [f64; 2]) -> f64 {
    let mut xs: Vec<f64> = points.iter().map(|p| p[0]).filter(|v| *v < r[0]).collect();
    xs.push(r[0]);
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut area = 0.0;
    for w in xs.windows(2) {
        let low = points.iter().filter(|p| p[0] <= w[0]).map(|p| p[1]).fold(r[1], f64::min);
        area += (w[1] - w[0]) * (r[1] - low).max(0.0);
    }
    area
}

/// Largest |exact - MC| in standard errors over 50 random fronts.
fn ehvi_vs_monte_carlo() -> f64 {
    let mut rng = Rng::new(2024);
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let size = 1 + rng.below(6);
        let mut f1: Vec<f64> = (0..size).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        let mut f2: Vec<f64> = (0..size).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        f1.sort_by(f64::total_cmp);
        f2.sort_by(|a, b| b.total_cmp(a));
        let mut front: Vec<[f64; 2]> = f1.into_iter().zip(f2).map(|(a, b)| [a, b]).collect();
        front.dedup_by(|a, b| a[0] == b[0] || a[1] == b[1]);
        let r = [rng.uniform_range(2.0, 3.0), rng.uniform_range(2.0, 3.0)];
        let mean = [rng.uniform_range(0.0, 2.5), rng.uniform_range(0.0, 2.5)];
        let sd = [rng.uniform_range(0.05, 1.0), rng.uniform_range(0.05, 1.0)];
        let exact = ehvi(&front, mean, sd, r).unwrap();
        let base = strip_hv(&front, r);
        let mut pts = front.clone();
        pts.push([0.0, 0.0]);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..samples {
            *pts.last_mut().unwrap() = [mean[0] + sd[0] * rng.normal(), mean[1] + sd[1] * rng.normal()];
            let hvi = strip_hv(&pts, r) - base;
            s += hvi;
            s2 += hvi * hvi;
        }
        let m = s / samples as f64;
        let se = ((s2 / samples as f64 - m * m).max(0.0) / samples as f64).sqrt();
        worst = worst.max((exact - m).abs() / se.max(1e-300));
    }
    worst
}

fn matern52(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let r = a.iter().zip(b).zip(ls).map(|((p, q), l)| ((p - q) / l).powi(2)).sum::<f64>().sqrt();
    let s5 = 5f64.sqrt();
    (1.0 + s5 * r + 5.0 * r * r / 3.0) * (-s5 * r).exp()
}

/// Largest deviation of GP mean/variance from the dense inverse formula.
fn gp_vs_dense() -> f64 {
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for dims in [2, 3, 8] {
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..dims).map(|_| rng.uniform()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[dims - 1] + 0.1 * rng.normal()).collect();
        let hyper = GpHyper {
            signal_var: 0.8,
            lengthscales: (0..dims).map(|i| 0.3 + 0.1 * i as f64).collect(),
            noise_var: 0.01,
        };
        let gp = GaussianProcess::with_hyper(&x, &y, hyper.clone()).unwrap();
        let n = y.len();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let sd = (y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / n as f64).sqrt();
        let k = DMatrix::from_fn(n, n, |i, j| {
            hyper.signal_var * matern52(&x[i], &x[j], &hyper.lengthscales) + if i == j { hyper.noise_var } else { 0.0 }
        });
        let k_inv = k.try_inverse().unwrap();
        let yc = DVector::from_iterator(n, y.iter().map(|v| (v - ybar) / sd));
        for _ in 0..20 {
            let q: Vec<f64> = (0..dims).map(|_| rng.uniform()).collect();
            let ks = DVector::from_iterator(n, x.iter().map(|p| hyper.signal_var * matern52(p, &q, &hyper.lengthscales)));
            let mean = ybar + sd * ks.dot(&(&k_inv * &yc));
            let var = sd * sd * (hyper.signal_var - ks.dot(&(&k_inv * &ks)));
            let (m, v) = gp.predict(&q);
            worst = worst.max((m - mean).abs()).max((v - var).abs());
        }
    }
    worst
}

fn c4_oracles() -> Verdict {
    let scan = scan_error();
    let archive = archive_matches_brute_force();
    let mc = ehvi_vs_monte_carlo();
    let gp = gp_vs_dense();
    let pass = scan <= 1e-12 && archive && mc <= 3.0 && gp <= 1e-8;
    verdict(
        pass,
        format!(
            "scan vs recurrence {scan:.1e} (<= 1e-12), archive vs brute force on 500 points {}, \
             EHVI vs 1e6-sample MC worst {mc:.2} SE (<= 3) on 50 fronts, GP vs dense {gp:.1e} (<= 1e-8)",
            if archive { "exact" } else { "MISMATCH" }
        ),
    )
}

/// Cheap stand-in for the PSNR drop: grows with each stage's option
/// index, with one cross-stage interaction.
struct Proxy;

impl Objective for Proxy {
    fn psnr_difference(&mut self, code: &ArchCode) -> Result<f64> {
        let w = [0.9, 0.6, 0.5, 0.4, 0.5, 0.6, 0.8, 1.0];
        let z: Vec<f64> = code.0.iter().map(|&v| v as f64).collect();
        let base: f64 = z.iter().zip(w).map(|(v, w)| w * v.powf(1.3)).sum();
        Ok(base + 0.15 * z[0] * z[1] - 0.05 * (z[1] * z[2]).sqrt())
    }
}

fn c5_optimality() -> Verdict {
    let space = SearchSpace::from_specs(&default_stage_specs()).restricted(&[0, 1, 2]);
    let weights = PenaltyWeights::default();
    let all: Vec<[f64; 2]> = enumerate_codes(&space.options())
        .map(|c| [Proxy.psnr_difference(&c).unwrap(), space.penalty(&c, &weights).unwrap()])
        .collect();
    let reference = reference_point(&all, EnsConfig::default().reference_margin);
    let exhaustive = hypervolume(&all, reference);
    let mut ratios: Vec<f64> = (0..10)
        .map(|seed| {
            let cfg = EnsConfig {
                budget: 30,
                seed: 500 + seed,
                ..EnsConfig::default()
            };
            let r = run_ens(&space, &cfg, &mut Proxy, &mut |_| Ok(())).unwrap();
            let found: Vec<[f64; 2]> = r.history.iter().map(|o| o.objectives()).collect();
            hypervolume(&found, reference) / exhaustive
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[4] + ratios[5]);
    verdict(
        all.len() == 48 && median >= 0.95,
        format!(
            "{} codes, median hypervolume ratio {median:.4} (>= 0.95) over 10 seeds, range [{:.4}, {:.4}]",
            all.len(),
            ratios[0],
            ratios[9]
        ),
    )
}

/// Mid-penalty code: largest surrogates at E1, E2, B, D2, D1 and R,
/// teacher stages at E3 and D3. Penalty 68 of the [16, 132] range.
fn mid_code() -> ArchCode {
    ArchCode(vec![1, 1, 0, 1, 0, 1, 1, 1])
}

fn c6_distillation() -> Verdict {
    let f = fixture();
    let code = mid_code();
    let undistilled = BlockLibrary::from_teacher(&f.teacher, f.library.seed()).unwrap();
    let a = f.library.assemble(&code).unwrap();
    let b = undistilled.assemble(&code).unwrap();
    let (pre_a, pre_b) = (mean_psnr(&a, &f.val).unwrap(), mean_psnr(&b, &f.val).unwrap());
    let post_a = finetuned_psnr(a, f, &f.val);
    let post_b = finetuned_psnr(b, f, &f.val);
    let improved = f.reports.iter().filter(|r| r.final_loss < r.initial_loss).count();
    let pass = pre_a - pre_b >= 1.0 && post_a >= post_b;
    verdict(
        pass,
        format!(
            "code {code}: val PSNR before fine-tuning {pre_a:.2} vs {pre_b:.2} dB (gap {:.2} >= 1), after {} steps \
             {post_a:.2} vs {post_b:.2} dB; {improved}/22 surrogates improved; fixture setup {:.0}s",
            pre_a - pre_b,
            f.finetune.total_steps(),
            f.setup_s
        ),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c7_baselines() -> Verdict {
    let f = fixture();
    let search = toy_search();
    let space = SearchSpace::from_specs(&f.library.config().stages);
    let weights = PenaltyWeights::default();
    let knee = search.result.knee_observations()[0].code.clone();
    let knee_pen = space.penalty(&knee, &weights).unwrap();
    let knee_psnr = finetuned_psnr(f.library.assemble(&knee).unwrap(), f, &f.test);

    let mut rng = Rng::new(707);
    let options = space.options();
    let (mut psnrs, mut pens) = (Vec::new(), Vec::new());
    for _ in 0..10 {
        let code = ArchCode(options.iter().map(|&k| rng.below(k)).collect());
        pens.push(space.penalty(&code, &weights).unwrap());
        psnrs.push(finetuned_psnr(f.library.assemble(&code).unwrap(), f, &f.test));
    }
    let (rand_psnr, rand_pen) = (median(&mut psnrs), median(&mut pens));

    let eq = f.library.equal_split_network().unwrap();
    let eq_pen = weights.of_kinds(eq.kinds());
    let eq_psnr = finetuned_psnr(eq, f, &f.test);

    let weakly = |p: f64, c: f64| knee_psnr >= p && knee_pen <= c;
    let pass = weakly(rand_psnr, rand_pen) && weakly(eq_psnr, eq_pen);
    verdict(
        pass,
        format!(
            "knee {knee} ({knee_psnr:.2} dB, penalty {knee_pen}) vs random median ({rand_psnr:.2} dB, penalty {rand_pen}) \
             and equal-split ({eq_psnr:.2} dB, penalty {eq_pen}); test PSNR after {} fine-tuning steps",
            f.finetune.total_steps()
        ),
    )
}

fn c8_erf() -> Verdict {
    let f = fixture();
    let lib = &f.library;
    let size = f.train.task.size;
    let mut wins = 0;
    let mut deltas = Vec::new();
    for (i, id) in StageId::ALL.into_iter().enumerate() {
        let side = size / id.scale();
        let radius = side as f64 / 4.0;
        let probes = gaussian_probes(lib.variant(i, 1).channels(), side, 16, &mut Rng::new(800 + i as u64));
        let (mut distilled, mut undistilled) = (0.0, 0.0);
        let k = lib.surrogates(i).len();
        for z in 1..=k {
            let d = lib.variant(i, z);
            let u = BlockLibrary::initial_surrogate(lib.config(), i, z, lib.seed()).unwrap();
            let md = erf_map(d.params(), |c, x| d.stage().forward(c, x), &probes).unwrap();
            let mu = erf_map(u.params(), |c, x| u.stage().forward(c, x), &probes).unwrap();
            distilled += erf_mass_within(&md, radius) / k as f64;
            undistilled += erf_mass_within(&mu, radius) / k as f64;
        }
        if distilled > undistilled {
            wins += 1;
        }
        deltas.push(format!("{id} {:+.1e}", distilled - undistilled));
    }
    verdict(
        wins >= 6,
        format!(
            "{wins}/8 stages with larger mass within side/4 after distillation (>= 6); distilled minus undistilled: {}",
            deltas.join(", ")
        ),
    )
}

fn c9_invariants() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    // teacher anchor, through the same path the search uses
    let cfg = ModelConfig { width: 2, ..Default::default() };
    let teacher = Network::teacher(&cfg, &mut Rng::new(91)).unwrap();
    let lib = BlockLibrary::from_teacher(&teacher, 92).unwrap();
    let task = TaskConfig { size: 16, val: 4, ..Default::default() };
    let val = generate_dataset(&task, Split::Val, 4, 93).unwrap();
    let anchor = LibraryObjective::new(&lib, &val).unwrap().psnr_difference(&ArchCode::teacher(8)).unwrap();
    pass &= anchor == 0.0;
    notes.push(format!("teacher PSNR difference {anchor}"));

    // penalty extremes over the whole space
    let space = SearchSpace::from_specs(&default_stage_specs());
    let w = PenaltyWeights::default();
    let (mut lo, mut hi) = ((f64::INFINITY, Vec::new()), (f64::NEG_INFINITY, Vec::new()));
    for code in enumerate_codes(&space.options()) {
        let p = space.penalty(&code, &w).unwrap();
        if p < lo.0 {
            lo = (p, vec![code.clone()]);
        } else if p == lo.0 {
            lo.1.push(code.clone());
        }
        if p > hi.0 {
            hi = (p, vec![code.clone()]);
        } else if p == hi.0 {
            hi.1.push(code);
        }
    }
    let smallest = ArchCode::smallest(&default_stage_specs());
    pass &= hi.1 == vec![ArchCode::teacher(8)] && lo.1 == vec![smallest];
    notes.push(format!("penalty max {} only at the teacher, min {} only at the smallest", hi.0, lo.0));

    // pixel shuffle inversion
    let mut rng = Rng::new(94);
    let mut shuffle_ok = true;
    for (c, h, wd) in [(4, 3, 5), (8, 2, 2), (12, 4, 1)] {
        let x = Tensor::randn(Shape::new(2, c, h, wd), 1.0, &mut rng);
        let y = Tensor::randn(Shape::new(2, c / 4, 2 * h, 2 * wd), 1.0, &mut rng);
        shuffle_ok &= kernels::pixel_unshuffle(&kernels::pixel_shuffle(&x, 2).unwrap(), 2).unwrap() == x;
        shuffle_ok &= kernels::pixel_shuffle(&kernels::pixel_unshuffle(&y, 2).unwrap(), 2).unwrap() == y;
    }
    pass &= shuffle_ok;
    notes.push(format!("shuffle inversion {}", if shuffle_ok { "exact" } else { "INEXACT" }));

    // residual identity
    let mut net = Network::from_code(&cfg, &ArchCode(vec![1, 0, 2, 0, 1, 3, 0, 1]), &mut Rng::new(95)).unwrap();
    let s = net.params().by_name("output/w").unwrap().shape();
    net.params_mut().set("output/w", Tensor::zeros(s)).unwrap();
    let x = Tensor::uniform(Shape::new(2, 3, 16, 16), 1.0, &mut rng);
    let identity = net.apply(&x).unwrap() == x;
    pass &= identity;
    notes.push(format!("zeroed output conv {}", if identity { "returns the input exactly" } else { "CHANGES the input" }));

    verdict(pass, notes.join("; "))
}
