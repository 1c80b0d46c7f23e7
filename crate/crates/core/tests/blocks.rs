use ens_core::blocks::{BlockConfig, BlockKind, MambaBlock, RestormerBlock, ScanOrder, StageVariant, VariantKind};
use ens_tensor::gradcheck::{finite_difference_check_sampled, FD_STEP};
use ens_tensor::{kernels, Ctx, Graph, NodeId, ParamStore, Rng, Shape, Tensor, Unary};

fn cfg() -> BlockConfig {
    BlockConfig::default()
}

fn rand(shape: Shape, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.by_name(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn zero(store: &mut ParamStore, name: &str) {
    let s = p(store, name).shape();
    store.set(name, Tensor::zeros(s)).unwrap();
}

fn run<B>(block: &B, store: &ParamStore, x: &Tensor, f: impl Fn(&B, &mut Ctx, NodeId) -> ens_core::Result<NodeId>) -> Tensor {
    let mut g = Graph::new();
    let mut ctx = Ctx::inference(&mut g, store);
    let xn = ctx.graph.constant(x.clone());
    let y = f(block, &mut ctx, xn).unwrap();
    g.value(y).clone()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn delta_kernel(c: usize) -> Tensor {
    let mut w = Tensor::zeros(Shape::new(c, 1, 3, 3));
    for i in 0..c {
        w.set(i, 0, 1, 1, 1.0);
    }
    w
}

fn eye(c: usize) -> Tensor {
    let mut w = Tensor::zeros(Shape::new(c, c, 1, 1));
    for i in 0..c {
        w.set(i, i, 0, 0, 1.0);
    }
    w
}

// ---------------------------------------------------------------- MDTA / GDFN

#[test]
fn mdta_zero_query_key_gives_group_mean_of_values() {
    let mut store = ParamStore::new();
    let block = RestormerBlock::init(&mut store, "", 4, &cfg(), &mut Rng::new(1)).unwrap();
    zero(&mut store, "attn/q");
    zero(&mut store, "attn/k");
    let x = rand(Shape::new(1, 4, 5, 5), 2);
    let y = run(&block, &store, &x, |b, c, x| b.mdta(c, x));

    let v = kernels::conv1x1(&x, p(&store, "attn/v"), None).unwrap();
    let v = kernels::depthwise_conv3x3(&v, p(&store, "attn/v_dw"), None).unwrap();
    let mut mean = Tensor::zeros(v.shape());
    for yy in 0..5 {
        for xx in 0..5 {
            let m = (0..4).map(|c| v.at(0, c, yy, xx)).sum::<f64>() / 4.0;
            for c in 0..4 {
                mean.set(0, c, yy, xx, m);
            }
        }
    }
    let expect = kernels::conv1x1(&mean, p(&store, "attn/out_w"), Some(p(&store, "attn/out_b"))).unwrap();
    assert_close(&y, &expect, 1e-12);
}

#[test]
fn mdta_two_channel_single_pixel_closed_form() {
    let mut store = ParamStore::new();
    let block = RestormerBlock::init(&mut store, "", 2, &cfg(), &mut Rng::new(3)).unwrap();
    for name in ["attn/q", "attn/v", "attn/out_w"] {
        store.set(name, eye(2)).unwrap();
    }
    let mut k = eye(2);
    k.set(1, 1, 0, 0, -1.0);
    store.set("attn/k", k).unwrap();
    for name in ["attn/q_dw", "attn/k_dw", "attn/v_dw"] {
        store.set(name, delta_kernel(2)).unwrap();
    }
    zero(&mut store, "attn/out_b");
    let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
    let y = run(&block, &store, &x, |b, c, x| b.mdta(c, x));
    // q = (1, 2), k = (1, -2) normalize to (1, 1) and (1, -1); every row of
    // the logits is (1, -1), so each output is sigma(2) * 1 + sigma(-2) * 2.
    let expect = 1.0 + 1.0 / (1.0 + 2f64.exp());
    assert!((y.data()[0] - expect).abs() < 1e-9, "{y:?}");
    assert!((y.data()[1] - expect).abs() < 1e-9);
}

#[test]
fn mdta_preserves_shape_and_checks_heads() {
    let mut store = ParamStore::new();
    let block = RestormerBlock::init(&mut store, "", 8, &cfg(), &mut Rng::new(4)).unwrap();
    let x = rand(Shape::new(1, 8, 16, 16), 5);
    assert_eq!(run(&block, &store, &x, |b, c, x| b.mdta(c, x)).shape(), x.shape());

    let heads = BlockConfig { heads: 3, ..cfg() };
    assert!(RestormerBlock::init(&mut ParamStore::new(), "", 8, &heads, &mut Rng::new(0)).is_err());
    let two = BlockConfig { heads: 2, ..cfg() };
    let mut store = ParamStore::new();
    let block = RestormerBlock::init(&mut store, "", 8, &two, &mut Rng::new(4)).unwrap();
    assert_eq!(run(&block, &store, &x, |b, c, x| b.mdta(c, x)).shape(), x.shape());
}

#[test]
fn gdfn_zero_gate_gives_output_bias() {
    let mut store = ParamStore::new();
    let block = RestormerBlock::init(&mut store, "", 8, &cfg(), &mut Rng::new(6)).unwrap();
    zero(&mut store, "ffn/gate_in");
    let x = rand(Shape::new(1, 8, 8, 8), 7);
    let y = run(&block, &store, &x, |b, c, x| b.gdfn(c, x));
    assert_eq!(y.shape(), x.shape());
    let bias = p(&store, "ffn/out_b");
    for c in 0..8 {
        for i in 0..64 {
            assert_eq!(y.data()[c * 64 + i], bias.data()[c]);
        }
    }
}

#[test]
fn gdfn_matches_direct_kernel_composition() {
    let mut store = ParamStore::new();
    let block = RestormerBlock::init(&mut store, "", 4, &cfg(), &mut Rng::new(8)).unwrap();
    let x = rand(Shape::new(2, 4, 6, 5), 9);
    let y = run(&block, &store, &x, |b, c, x| b.gdfn(c, x));
    let gate = kernels::conv1x1(&x, p(&store, "ffn/gate_in"), None).unwrap();
    let gate = kernels::depthwise_conv3x3(&gate, p(&store, "ffn/gate_dw"), None).unwrap();
    let value = kernels::conv1x1(&x, p(&store, "ffn/value_in"), None).unwrap();
    let value = kernels::depthwise_conv3x3(&value, p(&store, "ffn/value_dw"), None).unwrap();
    let fused = gate.zip_map(&value, "oracle", |g, v| Unary::Gelu.apply(g) * v).unwrap();
    let expect = kernels::conv1x1(&fused, p(&store, "ffn/out_w"), Some(p(&store, "ffn/out_b"))).unwrap();
    assert_close(&y, &expect, 1e-12);
}

#[test]
fn restormer_block_with_zero_outputs_is_identity_and_deterministic() {
    let mut store = ParamStore::new();
    let block = RestormerBlock::init(&mut store, "", 4, &cfg(), &mut Rng::new(10)).unwrap();
    let x = rand(Shape::new(1, 4, 6, 6), 11);
    let a = run(&block, &store, &x, |b, c, x| b.forward(c, x));
    let b = run(&block, &store, &x, |b, c, x| b.forward(c, x));
    assert_eq!(a, b);
    assert_ne!(a, x);
    for name in ["attn/out_w", "attn/out_b", "ffn/out_w", "ffn/out_b"] {
        zero(&mut store, name);
    }
    assert_eq!(run(&block, &store, &x, |b, c, x| b.forward(c, x)), x);
}

// ------------------------------------------------------------------ scanning

/// Step-by-step recurrence with explicit loops.
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

fn scan_inputs(n: usize, d: usize, ns: usize, l: usize, seed: u64) -> [Tensor; 5] {
    let mut rng = Rng::new(seed);
    [
        Tensor::randn(Shape::new(n, d, 1, l), 1.0, &mut rng),
        Tensor::uniform(Shape::new(n, d, 1, l), 1.0, &mut rng).map(|v| 0.01 + v.abs()),
        Tensor::uniform(Shape::new(1, 1, d, ns), 1.0, &mut rng).map(|v| -0.05 - 2.0 * v.abs()),
        Tensor::randn(Shape::new(n, ns, 1, l), 1.0, &mut rng),
        Tensor::randn(Shape::new(n, ns, 1, l), 1.0, &mut rng),
    ]
}

#[test]
fn scan_single_step_has_no_history() {
    let [u, delta, a, b, c] = scan_inputs(1, 3, 4, 1, 12);
    let (y, _) = kernels::selective_scan(&u, &delta, &a, &b, &c).unwrap();
    for ch in 0..3 {
        let dt = delta.at(0, ch, 0, 0);
        let expect: f64 = (0..4).map(|s| c.at(0, s, 0, 0) * dt * b.at(0, s, 0, 0) * u.at(0, ch, 0, 0)).sum();
        assert!((y.at(0, ch, 0, 0) - expect).abs() < 1e-15);
    }
}

#[test]
fn scan_with_zero_decay_accumulates() {
    let l = 6;
    let u = rand(Shape::new(1, 1, 1, l), 13);
    let delta = Tensor::full(Shape::new(1, 1, 1, l), 0.5);
    let a = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let ones = Tensor::ones(Shape::new(1, 1, 1, l));
    let (y, _) = kernels::selective_scan(&u, &delta, &a, &ones, &ones).unwrap();
    let mut partial = 0.0;
    for t in 0..l {
        partial += 0.5 * u.data()[t];
        assert!((y.data()[t] - partial).abs() < 1e-14);
    }
}

#[test]
fn scan_matches_naive_recurrence() {
    for (seed, l, ns) in [(14, 32, 8), (15, 64, 8), (16, 7, 1), (17, 64, 3)] {
        let [u, delta, a, b, c] = scan_inputs(2, 5, ns, l, seed);
        let (y, _) = kernels::selective_scan(&u, &delta, &a, &b, &c).unwrap();
        assert_close(&y, &naive_scan(&u, &delta, &a, &b, &c), 1e-12);
    }
}

#[test]
fn scan_orders_are_inverse_permutations() {
    let x = rand(Shape::new(1, 2, 5, 7), 18);
    for order in ScanOrder::ALL {
        let seq = kernels::gather_plane(&x, &order.order(5, 7), 1, 35).unwrap();
        let back = kernels::gather_plane(&seq, &order.inverse(5, 7), 5, 7).unwrap();
        assert_eq!(back, x);
    }
    assert_eq!(ScanOrder::ColumnForward.order(2, 3), vec![0, 3, 1, 4, 2, 5]);
    assert_eq!(ScanOrder::RowReverse.order(2, 2), vec![3, 2, 1, 0]);
}

// ---------------------------------------------------------------- VSSM / RSSB

fn flatten_explicit(x: &Tensor, order: ScanOrder) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let coords: Vec<(usize, usize)> = match order {
        ScanOrder::RowForward => (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect(),
        ScanOrder::RowReverse => (0..h).rev().flat_map(|y| (0..w).rev().map(move |x| (y, x))).collect(),
        ScanOrder::ColumnForward => (0..w).flat_map(|x| (0..h).map(move |y| (y, x))).collect(),
        ScanOrder::ColumnReverse => (0..w).rev().flat_map(|x| (0..h).rev().map(move |y| (y, x))).collect(),
    };
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), 1, h * w));
    for n in 0..s.n() {
        for c in 0..s.c() {
            for (t, &(y, xx)) in coords.iter().enumerate() {
                out.set(n, c, 0, t, x.at(n, c, y, xx));
            }
        }
    }
    out
}

fn unflatten_explicit(seq: &Tensor, order: ScanOrder, h: usize, w: usize) -> Tensor {
    let s = seq.shape();
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), h, w));
    // Flatten the position grid itself to learn where each step lands.
    let mut grid = Tensor::zeros(Shape::new(1, 1, h, w));
    for i in 0..h * w {
        grid.data_mut()[i] = i as f64;
    }
    let visit = flatten_explicit(&grid, order);
    for n in 0..s.n() {
        for c in 0..s.c() {
            for t in 0..h * w {
                let pos = visit.data()[t] as usize;
                out.set(n, c, pos / w, pos % w, seq.at(n, c, 0, t));
            }
        }
    }
    out
}

fn vssm_oracle(store: &ParamStore, x: &Tensor) -> Tensor {
    let s = x.shape();
    let xin = kernels::conv1x1(x, p(store, "ssm/in_w"), Some(p(store, "ssm/in_b"))).unwrap();
    let xc = kernels::depthwise_conv3x3(&xin, p(store, "ssm/conv_w"), Some(p(store, "ssm/conv_b")))
        .unwrap()
        .map(|v| Unary::Silu.apply(v));
    let gate = kernels::conv1x1(x, p(store, "ssm/gate_w"), Some(p(store, "ssm/gate_b")))
        .unwrap()
        .map(|v| Unary::Silu.apply(v));
    let mut acc = Tensor::zeros(xc.shape());
    for (k, order) in ScanOrder::ALL.into_iter().enumerate() {
        let q = |name: &str| p(store, &format!("ssm/dir{k}/{name}")).clone();
        let seq = flatten_explicit(&xc, order);
        let b = kernels::conv1x1(&seq, &q("b_proj"), None).unwrap();
        let c = kernels::conv1x1(&seq, &q("c_proj"), None).unwrap();
        let dt = kernels::conv1x1(&seq, &q("dt_down"), None).unwrap();
        let dt = kernels::conv1x1(&dt, &q("dt_up_w"), Some(&q("dt_up_b"))).unwrap();
        let delta = dt.map(|v| (1.0 + v.exp()).ln());
        let a = q("a_log").map(|v| -v.exp());
        let y = naive_scan(&seq, &delta, &a, &b, &c);
        acc.axpy(1.0, &unflatten_explicit(&y, order, s.h(), s.w())).unwrap();
    }
    let fused = acc.zip_map(&gate, "oracle", |a, g| a * g).unwrap();
    kernels::conv1x1(&fused, p(store, "ssm/out_w"), Some(p(store, "ssm/out_b"))).unwrap()
}

#[test]
fn vssm_matches_explicit_index_oracle() {
    let mut store = ParamStore::new();
    let block = MambaBlock::init(&mut store, "", 4, &cfg(), &mut Rng::new(19)).unwrap();
    let x = rand(Shape::new(1, 4, 5, 7), 20);
    let y = run(&block, &store, &x, |b, c, x| b.vssm(c, x));
    assert_close(&y, &vssm_oracle(&store, &x), 1e-12);
}

#[test]
fn single_pixel_directions_coincide() {
    let mut store = ParamStore::new();
    let block = MambaBlock::init(&mut store, "", 4, &cfg(), &mut Rng::new(21)).unwrap();
    // Give every direction the first direction's weights.
    let names: Vec<String> = store
        .iter()
        .filter_map(|(_, n, _)| n.strip_prefix("ssm/dir0/").map(str::to_string))
        .collect();
    for k in 1..4 {
        for n in &names {
            let v = p(&store, &format!("ssm/dir0/{n}")).clone();
            store.set(&format!("ssm/dir{k}/{n}"), v).unwrap();
        }
    }
    let xc = rand(Shape::new(2, 8, 1, 1), 22);
    let one = run(&block, &store, &xc, |b, c, x| b.scan_sum(c, x, &[ScanOrder::RowForward]));
    let all = run(&block, &store, &xc, |b, c, x| b.scan_sum(c, x, &ScanOrder::ALL));
    assert_close(&all, &one.map(|v| 4.0 * v), 1e-14);
}

#[test]
fn mamba_block_zero_scale_is_identity() {
    let mut store = ParamStore::new();
    let block = MambaBlock::init(&mut store, "", 4, &cfg(), &mut Rng::new(23)).unwrap();
    let x = rand(Shape::new(1, 4, 6, 6), 24);
    let y = run(&block, &store, &x, |b, c, x| b.forward(c, x));
    assert_eq!(y.shape(), x.shape());
    assert_ne!(y, x);
    zero(&mut store, "scale");
    assert_eq!(run(&block, &store, &x, |b, c, x| b.forward(c, x)), x);
}

#[test]
fn channel_weights_in_unit_interval() {
    let mut store = ParamStore::new();
    let block = MambaBlock::init(&mut store, "", 8, &cfg(), &mut Rng::new(25)).unwrap();
    for seed in 0..10 {
        let x = Tensor::randn(Shape::new(2, 8, 4, 4), 5.0, &mut Rng::new(seed));
        let w = run(&block, &store, &x, |b, c, x| b.channel_weights(c, x));
        assert_eq!(w.shape(), Shape::new(2, 8, 1, 1));
        assert!(w.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn initial_step_size_matches_config() {
    let mut store = ParamStore::new();
    MambaBlock::init(&mut store, "", 4, &cfg(), &mut Rng::new(26)).unwrap();
    let bias = p(&store, "ssm/dir2/dt_up_b");
    assert!(bias.data().iter().all(|b| ((1.0 + b.exp()).ln() - 0.1).abs() < 1e-12));
    let a = p(&store, "ssm/dir0/a_log");
    assert_eq!(a.shape(), Shape::new(1, 1, 8, 8));
    assert!((a.at(0, 0, 3, 4).exp() - 5.0).abs() < 1e-12);
}

// --------------------------------------------------------------------- stages

#[test]
fn stage_rejects_zero_blocks() {
    assert!(StageVariant::teacher(0, 4, &cfg(), &mut Rng::new(0)).is_err());
}

#[test]
fn teacher_stage_is_composition_of_blocks() {
    let v = StageVariant::teacher(3, 4, &cfg(), &mut Rng::new(27)).unwrap();
    assert_eq!(v.kind(), VariantKind::Teacher);
    let x = rand(Shape::new(1, 4, 4, 4), 28);
    let mut g = Graph::new();
    let mut ctx = Ctx::inference(&mut g, v.params());
    let mut node = ctx.graph.constant(x.clone());
    for block in v.stage().blocks() {
        assert_eq!(block.kind(), BlockKind::Teacher);
        node = block.forward(&mut ctx, node).unwrap();
    }
    assert_eq!(g.value(node), &v.apply(&x).unwrap());
}

#[test]
fn surrogate_depth_changes_output() {
    let two = StageVariant::surrogate(2, 4, &cfg(), &mut Rng::new(29)).unwrap();
    let four = StageVariant::surrogate(4, 4, &cfg(), &mut Rng::new(29)).unwrap();
    assert_eq!(four.kind(), VariantKind::Surrogate);
    let x = rand(Shape::new(1, 4, 4, 4), 30);
    assert_ne!(two.apply(&x).unwrap(), four.apply(&x).unwrap());
    let mixed = StageVariant::new(vec![BlockKind::Teacher, BlockKind::Surrogate], 4, &cfg(), &mut Rng::new(0)).unwrap();
    assert_eq!(mixed.kind(), VariantKind::Mixed);
}

#[test]
fn variant_round_trips_through_params() {
    let v = StageVariant::surrogate(2, 4, &cfg(), &mut Rng::new(31)).unwrap();
    let back = StageVariant::from_params(v.kinds().to_vec(), 4, &cfg(), v.params()).unwrap();
    let x = rand(Shape::new(1, 4, 3, 3), 32);
    assert_eq!(v.apply(&x).unwrap(), back.apply(&x).unwrap());
    let wrong = StageVariant::surrogate(1, 4, &cfg(), &mut Rng::new(0)).unwrap();
    assert!(StageVariant::from_params(v.kinds().to_vec(), 4, &cfg(), wrong.params()).is_err());
}

// ------------------------------------------------------------------ gradients

/// Central differences on the input and a sample of every parameter tensor
/// of a standalone block, for 20 seeds.
fn block_gradcheck<B>(
    name: &str,
    shape: Shape,
    make: impl Fn(&mut ParamStore, &mut Rng) -> B,
    forward: impl Fn(&B, &mut Ctx, NodeId) -> ens_core::Result<NodeId>,
) {
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let mut store = ParamStore::new();
        let block = make(&mut store, &mut rng);
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let mut params = vec![x];
        params.extend(store.iter().map(|(_, _, t)| t.clone()));
        let weights = Tensor::randn(shape, 1.0, &mut rng);
        let f = |g: &mut Graph, ids: &[NodeId]| {
            let mut ctx = Ctx::with_nodes(g, &store, &ids[1..]);
            let y = forward(&block, &mut ctx, ids[0]).map_err(|e| ens_tensor::TensorError::Contract(e.to_string()))?;
            let r = g.constant(weights.clone());
            let m = g.hadamard(y, r)?;
            g.sum(m)
        };
        let err = finite_difference_check_sampled(f, &params, FD_STEP, 6, &mut rng).unwrap();
        assert!(err < 1e-3, "{name} seed {seed}: {err}");
    }
}

#[test]
fn mdta_gradients() {
    let c = BlockConfig { heads: 2, ..cfg() };
    block_gradcheck(
        "mdta",
        Shape::new(1, 4, 4, 5),
        |s, r| RestormerBlock::init(s, "", 4, &c, r).unwrap(),
        |b, ctx, x| b.mdta(ctx, x),
    );
}

#[test]
fn gdfn_gradients() {
    block_gradcheck(
        "gdfn",
        Shape::new(1, 4, 5, 4),
        |s, r| RestormerBlock::init(s, "", 4, &cfg(), r).unwrap(),
        |b, ctx, x| b.gdfn(ctx, x),
    );
}

#[test]
fn restormer_block_gradients() {
    block_gradcheck(
        "restormer",
        Shape::new(1, 4, 6, 6),
        |s, r| RestormerBlock::init(s, "", 4, &cfg(), r).unwrap(),
        |b, ctx, x| b.forward(ctx, x),
    );
}

#[test]
fn mamba_block_gradients() {
    let c = BlockConfig { d_state: 3, ..cfg() };
    block_gradcheck(
        "rssb",
        Shape::new(1, 4, 4, 5),
        |s, r| MambaBlock::init(s, "", 4, &c, r).unwrap(),
        |b, ctx, x| b.forward(ctx, x),
    );
}
