use ens_tensor::{Ctx, NodeId, ParamId, ParamStore, Rng, Shape, Tensor};

use super::BlockConfig;
use crate::{EnsError, Result};

const QK_NORM_EPS: f64 = 1e-12;

/// One Restormer block: channel attention (MDTA) followed by a gated
/// depthwise feed-forward network (GDFN), each behind a pre-norm residual.
#[derive(Clone, Debug)]
pub struct RestormerBlock {
    channels: usize,
    heads: usize,
    eps: f64,
    norm1: (ParamId, ParamId),
    q: ParamId,
    k: ParamId,
    v: ParamId,
    q_dw: ParamId,
    k_dw: ParamId,
    v_dw: ParamId,
    temperature: ParamId,
    attn_out: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    gate_in: ParamId,
    gate_dw: ParamId,
    value_in: ParamId,
    value_dw: ParamId,
    ffn_out: (ParamId, ParamId),
}

pub(crate) fn add_norm(store: &mut ParamStore, prefix: &str, name: &str, c: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}{name}/gamma"), Tensor::full(Shape::new(1, c, 1, 1), 1.0)),
        store.add(format!("{prefix}{name}/beta"), Tensor::zeros(Shape::new(1, c, 1, 1))),
    )
}

pub(crate) fn add_conv1x1(store: &mut ParamStore, prefix: &str, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> ParamId {
    store.add_init(format!("{prefix}{name}"), Shape::new(cout, cin, 1, 1), cin, rng)
}

pub(crate) fn add_bias(store: &mut ParamStore, prefix: &str, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> ParamId {
    store.add_init(format!("{prefix}{name}"), Shape::new(1, cout, 1, 1), cin, rng)
}

pub(crate) fn add_dw(store: &mut ParamStore, prefix: &str, name: &str, c: usize, rng: &mut Rng) -> ParamId {
    store.add_init(format!("{prefix}{name}"), Shape::new(c, 1, 3, 3), 9, rng)
}

impl RestormerBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        if channels % cfg.heads != 0 {
            return Err(EnsError::config(format!(
                "{channels} channels not divisible by {} heads",
                cfg.heads
            )));
        }
        let c = channels;
        let hidden = cfg.ffn_hidden(c);
        let norm1 = add_norm(store, prefix, "norm1", c);
        let q = add_conv1x1(store, prefix, "attn/q", c, c, rng);
        let k = add_conv1x1(store, prefix, "attn/k", c, c, rng);
        let v = add_conv1x1(store, prefix, "attn/v", c, c, rng);
        let q_dw = add_dw(store, prefix, "attn/q_dw", c, rng);
        let k_dw = add_dw(store, prefix, "attn/k_dw", c, rng);
        let v_dw = add_dw(store, prefix, "attn/v_dw", c, rng);
        let temperature = store.add(
            format!("{prefix}attn/temperature"),
            Tensor::full(Shape::new(1, cfg.heads, 1, 1), 1.0),
        );
        let attn_out = (
            add_conv1x1(store, prefix, "attn/out_w", c, c, rng),
            add_bias(store, prefix, "attn/out_b", c, c, rng),
        );
        let norm2 = add_norm(store, prefix, "norm2", c);
        let gate_in = add_conv1x1(store, prefix, "ffn/gate_in", c, hidden, rng);
        let gate_dw = add_dw(store, prefix, "ffn/gate_dw", hidden, rng);
        let value_in = add_conv1x1(store, prefix, "ffn/value_in", c, hidden, rng);
        let value_dw = add_dw(store, prefix, "ffn/value_dw", hidden, rng);
        let ffn_out = (
            add_conv1x1(store, prefix, "ffn/out_w", hidden, c, rng),
            add_bias(store, prefix, "ffn/out_b", hidden, c, rng),
        );
        Ok(RestormerBlock {
            channels,
            heads: cfg.heads,
            eps: cfg.ln_eps,
            norm1,
            q,
            k,
            v,
            q_dw,
            k_dw,
            v_dw,
            temperature,
            attn_out,
            norm2,
            gate_in,
            gate_dw,
            value_in,
            value_dw,
            ffn_out,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, ctx: &Ctx, x: NodeId) -> Result<Shape> {
        let s = ctx.graph.shape(x);
        if s.c() != self.channels {
            return Err(EnsError::config(format!(
                "block expects {} channels, input has shape {s}",
                self.channels
            )));
        }
        Ok(s)
    }

    /// Transposed attention: a `(c/heads) x (c/heads)` attention map per head,
    /// computed from L2-normalized query and key rows over pixels.
    pub fn mdta(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let s = self.check(ctx, x)?;
        let per_head = Shape::new(s.n(), self.heads, s.c() / self.heads, s.plane());
        let project = |ctx: &mut Ctx, w: ParamId, dw: ParamId| -> Result<NodeId> {
            let (w, dw) = (ctx.p(w), ctx.p(dw));
            let y = ctx.graph.conv1x1(x, w, None)?;
            let y = ctx.graph.depthwise_conv3x3(y, dw, None)?;
            Ok(ctx.graph.reshape(y, per_head)?)
        };
        let q = project(ctx, self.q, self.q_dw)?;
        let k = project(ctx, self.k, self.k_dw)?;
        let v = project(ctx, self.v, self.v_dw)?;
        let g = &mut *ctx.graph;
        let q = g.l2_normalize(q, QK_NORM_EPS)?;
        let k = g.l2_normalize(k, QK_NORM_EPS)?;
        let logits = g.batched_matmul(q, k, false, true)?;
        let temperature = ctx.p(self.temperature);
        let logits = ctx.graph.broadcast_mul(logits, temperature)?;
        let attn = ctx.graph.softmax(logits)?;
        let out = ctx.graph.batched_matmul(attn, v, false, false)?;
        let out = ctx.graph.reshape(out, s)?;
        let (w, b) = (ctx.p(self.attn_out.0), ctx.p(self.attn_out.1));
        Ok(ctx.graph.conv1x1(out, w, Some(b))?)
    }

    /// Gated feed-forward: `GELU(dw(W1 x)) * dw(W2 x)`, then a 1x1 contraction.
    pub fn gdfn(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        self.check(ctx, x)?;
        let (gi, gd, vi, vd) = (
            ctx.p(self.gate_in),
            ctx.p(self.gate_dw),
            ctx.p(self.value_in),
            ctx.p(self.value_dw),
        );
        let (w, b) = (ctx.p(self.ffn_out.0), ctx.p(self.ffn_out.1));
        let g = &mut *ctx.graph;
        let gate = g.conv1x1(x, gi, None)?;
        let gate = g.depthwise_conv3x3(gate, gd, None)?;
        let gate = g.gelu(gate)?;
        let value = g.conv1x1(x, vi, None)?;
        let value = g.depthwise_conv3x3(value, vd, None)?;
        let fused = g.hadamard(gate, value)?;
        Ok(g.conv1x1(fused, w, Some(b))?)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let (g1, b1) = (ctx.p(self.norm1.0), ctx.p(self.norm1.1));
        let n1 = ctx.graph.layer_norm(x, g1, b1, self.eps)?;
        let a = self.mdta(ctx, n1)?;
        let x1 = ctx.graph.add(x, a)?;
        let (g2, b2) = (ctx.p(self.norm2.0), ctx.p(self.norm2.1));
        let n2 = ctx.graph.layer_norm(x1, g2, b2, self.eps)?;
        let f = self.gdfn(ctx, n2)?;
        Ok(ctx.graph.add(x1, f)?)
    }
}
