use std::sync::Arc;

use ens_tensor::{Ctx, NodeId, ParamId, ParamStore, Rng, Shape, Tensor};

use super::restormer::{add_bias, add_conv1x1, add_dw, add_norm};
use super::BlockConfig;
use crate::{EnsError, Result};

/// Flattening order of a feature map into a 1-D sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    RowForward,
    RowReverse,
    ColumnForward,
    ColumnReverse,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::RowForward,
        ScanOrder::RowReverse,
        ScanOrder::ColumnForward,
        ScanOrder::ColumnReverse,
    ];

    /// `order[t]` is the row-major plane index visited at sequence step `t`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let rows: Vec<usize> = (0..h * w).collect();
        let cols: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
        match self {
            ScanOrder::RowForward => rows,
            ScanOrder::RowReverse => rows.into_iter().rev().collect(),
            ScanOrder::ColumnForward => cols,
            ScanOrder::ColumnReverse => cols.into_iter().rev().collect(),
        }
    }

    /// Inverse permutation: `inverse[p]` is the step at which plane index `p`
    /// is visited.
    pub fn inverse(self, h: usize, w: usize) -> Vec<usize> {
        let order = self.order(h, w);
        let mut inv = vec![0; order.len()];
        for (t, &p) in order.iter().enumerate() {
            inv[p] = t;
        }
        inv
    }
}

#[derive(Clone, Debug)]
struct DirectionParams {
    b_proj: ParamId,
    c_proj: ParamId,
    dt_down: ParamId,
    dt_up: (ParamId, ParamId),
    a_log: ParamId,
}

/// Residual state-space block: LayerNorm, four-direction selective scan with
/// a SiLU gate, squeeze-excite channel attention and a learned residual scale.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    channels: usize,
    inner: usize,
    eps: f64,
    norm: (ParamId, ParamId),
    input: (ParamId, ParamId),
    gate: (ParamId, ParamId),
    conv: (ParamId, ParamId),
    directions: Vec<DirectionParams>,
    out: (ParamId, ParamId),
    squeeze: (ParamId, ParamId),
    excite: (ParamId, ParamId),
    scale: ParamId,
}

impl MambaBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        let c = channels;
        let d = cfg.ssm_expansion * c;
        let n = cfg.d_state;
        let rank = cfg.dt_rank_for(c);
        let reduced = (c / 4).max(1);
        let norm = add_norm(store, prefix, "norm", c);
        let input = (
            add_conv1x1(store, prefix, "ssm/in_w", c, d, rng),
            add_bias(store, prefix, "ssm/in_b", c, d, rng),
        );
        let gate = (
            add_conv1x1(store, prefix, "ssm/gate_w", c, d, rng),
            add_bias(store, prefix, "ssm/gate_b", c, d, rng),
        );
        let conv = (add_dw(store, prefix, "ssm/conv_w", d, rng), add_bias(store, prefix, "ssm/conv_b", 9, d, rng));
        // softplus(bias) = dt_init at the start of training
        let dt_bias = cfg.dt_init.exp_m1().ln();
        let a_init: Vec<f64> = (0..d).flat_map(|_| (1..=n).map(|s| (s as f64).ln())).collect();
        let mut directions = Vec::with_capacity(4);
        for k in 0..4 {
            let p = format!("{prefix}ssm/dir{k}/");
            directions.push(DirectionParams {
                b_proj: add_conv1x1(store, &p, "b_proj", d, n, rng),
                c_proj: add_conv1x1(store, &p, "c_proj", d, n, rng),
                dt_down: add_conv1x1(store, &p, "dt_down", d, rank, rng),
                dt_up: (
                    add_conv1x1(store, &p, "dt_up_w", rank, d, rng),
                    store.add(format!("{p}dt_up_b"), Tensor::full(Shape::new(1, d, 1, 1), dt_bias)),
                ),
                a_log: store.add(
                    format!("{p}a_log"),
                    Tensor::from_vec(Shape::new(1, 1, d, n), a_init.clone())?,
                ),
            });
        }
        let out = (
            add_conv1x1(store, prefix, "ssm/out_w", d, c, rng),
            add_bias(store, prefix, "ssm/out_b", d, c, rng),
        );
        let squeeze = (
            add_conv1x1(store, prefix, "ca/squeeze_w", c, reduced, rng),
            add_bias(store, prefix, "ca/squeeze_b", c, reduced, rng),
        );
        let excite = (
            add_conv1x1(store, prefix, "ca/excite_w", reduced, c, rng),
            add_bias(store, prefix, "ca/excite_b", reduced, c, rng),
        );
        let scale = store.add(format!("{prefix}scale"), Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        Ok(MambaBlock {
            channels,
            inner: d,
            eps: cfg.ln_eps,
            norm,
            input,
            gate,
            conv,
            directions,
            out,
            squeeze,
            excite,
            scale,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn inner_channels(&self) -> usize {
        self.inner
    }

    /// One directional scan over the `(n, d, h, w)` map `xc`, returned in the
    /// original spatial layout.
    fn scan_direction(&self, ctx: &mut Ctx, xc: NodeId, k: usize, order: ScanOrder) -> Result<NodeId> {
        let s = ctx.graph.shape(xc);
        let (h, w) = (s.h(), s.w());
        let dir = &self.directions[k];
        let (bp, cp, dd, du_w, du_b, a_log) = (
            ctx.p(dir.b_proj),
            ctx.p(dir.c_proj),
            ctx.p(dir.dt_down),
            ctx.p(dir.dt_up.0),
            ctx.p(dir.dt_up.1),
            ctx.p(dir.a_log),
        );
        let g = &mut *ctx.graph;
        let fwd: Arc<[usize]> = order.order(h, w).into();
        let inv: Arc<[usize]> = order.inverse(h, w).into();
        let seq = g.gather_plane(xc, fwd, 1, h * w)?;
        let b = g.conv1x1(seq, bp, None)?;
        let c = g.conv1x1(seq, cp, None)?;
        let dt = g.conv1x1(seq, dd, None)?;
        let dt = g.conv1x1(dt, du_w, Some(du_b))?;
        let delta = g.softplus(dt)?;
        let a = g.exp(a_log)?;
        let a = g.scale(a, -1.0)?;
        let y = g.selective_scan(seq, delta, a, b, c)?;
        Ok(g.gather_plane(y, inv, h, w)?)
    }

    /// Sum of the four directional scans; exposed for tests that inspect a
    /// single direction.
    pub fn scan_sum(&self, ctx: &mut Ctx, xc: NodeId, orders: &[ScanOrder]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for order in orders {
            let k = ScanOrder::ALL.iter().position(|o| o == order).expect("known order");
            let y = self.scan_direction(ctx, xc, k, *order)?;
            acc = Some(match acc {
                Some(a) => ctx.graph.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| EnsError::Contract("no scan directions".into()))
    }

    /// Gated four-direction state-space branch with its output projection.
    pub fn vssm(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let s = ctx.graph.shape(x);
        if s.c() != self.channels {
            return Err(EnsError::config(format!(
                "block expects {} channels, input has shape {s}",
                self.channels
            )));
        }
        let (iw, ib, gw, gb, cw, cb) = (
            ctx.p(self.input.0),
            ctx.p(self.input.1),
            ctx.p(self.gate.0),
            ctx.p(self.gate.1),
            ctx.p(self.conv.0),
            ctx.p(self.conv.1),
        );
        let xin = ctx.graph.conv1x1(x, iw, Some(ib))?;
        let xc = ctx.graph.depthwise_conv3x3(xin, cw, Some(cb))?;
        let xc = ctx.graph.silu(xc)?;
        let gate = ctx.graph.conv1x1(x, gw, Some(gb))?;
        let gate = ctx.graph.silu(gate)?;
        let y = self.scan_sum(ctx, xc, &ScanOrder::ALL)?;
        let fused = ctx.graph.hadamard(y, gate)?;
        let (ow, ob) = (ctx.p(self.out.0), ctx.p(self.out.1));
        Ok(ctx.graph.conv1x1(fused, ow, Some(ob))?)
    }

    /// Per-channel weights in (0, 1) from global average pooling.
    pub fn channel_weights(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let (sw, sb, ew, eb) = (
            ctx.p(self.squeeze.0),
            ctx.p(self.squeeze.1),
            ctx.p(self.excite.0),
            ctx.p(self.excite.1),
        );
        let g = &mut *ctx.graph;
        let pooled = g.mean_pool(x)?;
        let z = g.conv1x1(pooled, sw, Some(sb))?;
        let z = g.silu(z)?;
        let z = g.conv1x1(z, ew, Some(eb))?;
        Ok(g.sigmoid(z)?)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let (ng, nb) = (ctx.p(self.norm.0), ctx.p(self.norm.1));
        let normed = ctx.graph.layer_norm(x, ng, nb, self.eps)?;
        let y = self.vssm(ctx, normed)?;
        let weights = self.channel_weights(ctx, y)?;
        let y = ctx.graph.broadcast_mul(y, weights)?;
        let s = ctx.p(self.scale);
        let y = ctx.graph.broadcast_mul(y, s)?;
        Ok(ctx.graph.add(x, y)?)
    }
}
