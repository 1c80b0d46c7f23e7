//! Reverse-mode differentiation record.
//!
//! A [`Graph`] is an append-only list of nodes. Every node stores its forward
//! value, the primitive that produced it and the ids of its inputs, so the
//! list is topologically ordered by construction. [`Graph::backward`] walks it
//! in reverse and applies each primitive's adjoint rule.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, NormStats, Unary};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Conv1x1 { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv3x3 { x: NodeId, w: NodeId, b: Option<NodeId> },
    DwConv3x3 { x: NodeId, w: NodeId, b: Option<NodeId> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Unary { x: NodeId, f: Unary },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    BroadcastMul { x: NodeId, s: NodeId },
    MeanPool { x: NodeId },
    Softmax { x: NodeId },
    L2Normalize { x: NodeId, eps: f64 },
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Reshape { x: NodeId, shape: Shape },
    PixelShuffle { x: NodeId, r: usize },
    PixelUnshuffle { x: NodeId, r: usize },
    Concat { a: NodeId, b: NodeId },
    Gather { x: NodeId, index: Arc<[usize]>, h: usize, w: usize },
    SelectiveScan { u: NodeId, delta: NodeId, a: NodeId, b: NodeId, c: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    MeanAbs { x: NodeId },
    MeanSquare { x: NodeId },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv1x1 { x, w, b } | Conv3x3 { x, w, b } | DwConv3x3 { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Concat { a, b } | Matmul { a, b, .. } => {
                vec![*a, *b]
            }
            BroadcastMul { x, s } => vec![*x, *s],
            SelectiveScan { u, delta, a, b, c } => vec![*u, *delta, *a, *b, *c],
            Unary { x, .. }
            | Scale { x, .. }
            | MeanPool { x }
            | Softmax { x }
            | L2Normalize { x, .. }
            | Reshape { x, .. }
            | PixelShuffle { x, .. }
            | PixelUnshuffle { x, .. }
            | Gather { x, .. }
            | Sum { x }
            | Mean { x }
            | MeanAbs { x }
            | MeanSquare { x } => vec![*x],
        }
    }
}

/// Forward intermediates an adjoint rule needs beyond input and output values.
enum Saved {
    None,
    Norm(NormStats),
    RowNorms(Vec<f64>),
    Scan(kernels::ScanCache),
}

struct Node {
    value: Tensor,
    op: Op,
    saved: Saved,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn sub_checked(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "sub", |x, y| x - y)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A leaf value; gradients are only accumulated for leaves registered
    /// with `requires_grad` and for nodes downstream of them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            saved: Saved::None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let (value, saved) = {
            let get = |id: NodeId| &self.nodes[id.0].value;
            eval(&op, &get)?
        };
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::Conv1x1 { x, w, b })
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::Conv3x3 { x, w, b })
    }

    pub fn depthwise_conv3x3(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::DwConv3x3 { x, w, b })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn unary(&mut self, x: NodeId, f: Unary) -> Result<NodeId> {
        self.push(Op::Unary { x, f })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Gelu)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Exp)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::Scale { x, k })
    }

    /// `x * s` with `s` of shape `(1|n, 1|c, 1, 1)`.
    pub fn broadcast_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::BroadcastMul { x, s })
    }

    /// Spatial mean, `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MeanPool { x })
    }

    /// Softmax along the last (w) axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax { x })
    }

    /// Softmax along a named axis. Only the innermost axis (3) is supported
    /// directly; callers reshape other layouts first.
    pub fn softmax_over_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        if axis != 3 {
            return Err(TensorError::shape("softmax_over_axis", format!("axis {axis} unsupported; reshape so it is innermost")));
        }
        self.softmax(x)
    }

    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::L2Normalize { x, eps })
    }

    /// Per-(n, c) matrix product over the last two axes, with optional
    /// transposition of either operand.
    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        self.push(Op::Matmul { a, b, ta, tb })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        self.push(Op::Reshape { x, shape })
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        self.push(Op::PixelShuffle { x, r })
    }

    pub fn pixel_unshuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        self.push(Op::PixelUnshuffle { x, r })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Concat { a, b })
    }

    /// Rearranges spatial positions: output position `p` takes input
    /// position `index[p]`.
    pub fn gather_plane(&mut self, x: NodeId, index: Arc<[usize]>, h: usize, w: usize) -> Result<NodeId> {
        self.push(Op::Gather { x, index, h, w })
    }

    pub fn selective_scan(&mut self, u: NodeId, delta: NodeId, a: NodeId, b: NodeId, c: NodeId) -> Result<NodeId> {
        self.push(Op::SelectiveScan { u, delta, a, b, c })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean { x })
    }

    /// Mean absolute value (l1 loss of a residual).
    pub fn mean_abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MeanAbs { x })
    }

    /// Mean squared value.
    pub fn mean_square(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MeanSquare { x })
    }

    /// Recomputes every non-leaf value from the recorded primitives and the
    /// current leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let get = |id: NodeId| &values[id.0];
                    eval(op, &get)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::Contract(format!("backward needs a scalar loss, got shape {ls}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.adjoint(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn adjoint(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x1 { x, w, b } => {
                let (dx, dw, db) = kernels::conv1x1_backward(val(*x), val(*w), g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, db.reshape(self.shape(*b))?)?;
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let (dx, dw, db) = kernels::conv3x3_backward(val(*x), val(*w), g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, db.reshape(self.shape(*b))?)?;
                }
            }
            Op::DwConv3x3 { x, w, b } => {
                let (dx, dw, db) = kernels::depthwise_conv3x3_backward(val(*x), val(*w), g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, db.reshape(self.shape(*b))?)?;
                }
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let Saved::Norm(stats) = &node.saved else {
                    unreachable!("layer norm without saved stats")
                };
                let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gamma), stats, g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dg.reshape(self.shape(*gamma))?)?;
                self.accumulate(grads, *beta, db.reshape(self.shape(*beta))?)?;
            }
            Op::Unary { x, f } => {
                let xv = val(*x);
                let mut dx = g.clone();
                for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    *d *= f.derivative(xi, yi);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), "hadamard", |x, y| x * y)?)?;
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), "hadamard", |x, y| x * y)?)?;
                }
            }
            Op::Scale { x, k } => {
                let k = *k;
                self.accumulate(grads, *x, g.map(|v| v * k))?;
            }
            Op::BroadcastMul { x, s } => {
                let (dx, ds) = kernels::broadcast_mul_backward(val(*x), val(*s), g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *s, ds)?;
            }
            Op::MeanPool { x } => {
                let xs = self.shape(*x);
                let p = xs.plane();
                let mut dx = Tensor::zeros(xs);
                for (dst, &gv) in dx.data_mut().chunks_mut(p).zip(g.data()) {
                    dst.fill(gv / p as f64);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Softmax { x } => {
                self.accumulate(grads, *x, kernels::softmax_rows_backward(&node.value, g))?;
            }
            Op::L2Normalize { x, .. } => {
                let Saved::RowNorms(norms) = &node.saved else {
                    unreachable!("normalize without saved norms")
                };
                self.accumulate(grads, *x, kernels::l2_normalize_rows_backward(val(*x), norms, g))?;
            }
            Op::Matmul { a, b, ta, tb } => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), *ta, *tb, g);
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Reshape { x, .. } => {
                self.accumulate(grads, *x, g.clone().reshape(self.shape(*x))?)?;
            }
            Op::PixelShuffle { x, r } => {
                self.accumulate(grads, *x, kernels::pixel_unshuffle(g, *r)?)?;
            }
            Op::PixelUnshuffle { x, r } => {
                self.accumulate(grads, *x, kernels::pixel_shuffle(g, *r)?)?;
            }
            Op::Concat { a, b } => {
                let (da, db) = kernels::split_channels(g, self.shape(*a).c());
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Gather { x, index, .. } => {
                let dx = kernels::gather_plane_backward(self.shape(*x), index, g);
                self.accumulate(grads, *x, dx)?;
            }
            Op::SelectiveScan { u, delta, a, b, c } => {
                let Saved::Scan(cache) = &node.saved else {
                    unreachable!("scan without saved states")
                };
                let sg = kernels::selective_scan_backward(
                    val(*u),
                    val(*delta),
                    val(*a),
                    val(*b),
                    val(*c),
                    cache,
                    g,
                );
                self.accumulate(grads, *u, sg.du)?;
                self.accumulate(grads, *delta, sg.ddelta)?;
                self.accumulate(grads, *a, sg.da)?;
                self.accumulate(grads, *b, sg.db)?;
                self.accumulate(grads, *c, sg.dc)?;
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0]))?;
            }
            Op::Mean { x } => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(s, g.data()[0] / s.numel() as f64))?;
            }
            Op::MeanAbs { x } => {
                let xv = val(*x);
                let k = g.data()[0] / xv.numel() as f64;
                self.accumulate(grads, *x, xv.map(|v| k * sign(v)))?;
            }
            Op::MeanSquare { x } => {
                let xv = val(*x);
                let k = 2.0 * g.data()[0] / xv.numel() as f64;
                self.accumulate(grads, *x, xv.map(|v| k * v))?;
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn eval<'a>(op: &Op, get: &dyn Fn(NodeId) -> &'a Tensor) -> Result<(Tensor, Saved)> {
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Conv1x1 { x, w, b } => plain(kernels::conv1x1(get(*x), get(*w), b.map(get))?),
        Op::Conv3x3 { x, w, b } => plain(kernels::conv3x3(get(*x), get(*w), b.map(get))?),
        Op::DwConv3x3 { x, w, b } => plain(kernels::depthwise_conv3x3(get(*x), get(*w), b.map(get))?),
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (y, stats) = kernels::layer_norm(get(*x), get(*gamma), get(*beta), *eps)?;
            Ok((y, Saved::Norm(stats)))
        }
        Op::Unary { x, f } => plain(get(*x).map(|v| f.apply(v))),
        Op::Add { a, b } => plain(get(*a).zip_map(get(*b), "add", |x, y| x + y)?),
        Op::Sub { a, b } => plain(sub_checked(get(*a), get(*b))?),
        Op::Mul { a, b } => plain(get(*a).zip_map(get(*b), "hadamard", |x, y| x * y)?),
        Op::Scale { x, k } => plain(get(*x).map(|v| v * k)),
        Op::BroadcastMul { x, s } => plain(kernels::broadcast_mul(get(*x), get(*s))?),
        Op::MeanPool { x } => plain(kernels::mean_pool(get(*x))),
        Op::Softmax { x } => plain(kernels::softmax_rows(get(*x))),
        Op::L2Normalize { x, eps } => {
            let (y, norms) = kernels::l2_normalize_rows(get(*x), *eps);
            Ok((y, Saved::RowNorms(norms)))
        }
        Op::Matmul { a, b, ta, tb } => plain(kernels::matmul(get(*a), get(*b), *ta, *tb)?),
        Op::Reshape { x, shape } => plain(get(*x).clone().reshape(*shape)?),
        Op::PixelShuffle { x, r } => plain(kernels::pixel_shuffle(get(*x), *r)?),
        Op::PixelUnshuffle { x, r } => plain(kernels::pixel_unshuffle(get(*x), *r)?),
        Op::Concat { a, b } => plain(kernels::concat_channels(get(*a), get(*b))?),
        Op::Gather { x, index, h, w } => plain(kernels::gather_plane(get(*x), index, *h, *w)?),
        Op::SelectiveScan { u, delta, a, b, c } => {
            let (y, cache) = kernels::selective_scan(get(*u), get(*delta), get(*a), get(*b), get(*c))?;
            Ok((y, Saved::Scan(cache)))
        }
        Op::Sum { x } => plain(Tensor::scalar(get(*x).sum())),
        Op::Mean { x } => plain(Tensor::scalar(get(*x).mean())),
        Op::MeanAbs { x } => {
            let v = get(*x);
            plain(Tensor::scalar(v.data().iter().map(|a| a.abs()).sum::<f64>() / v.numel() as f64))
        }
        Op::MeanSquare { x } => {
            let v = get(*x);
            plain(Tensor::scalar(v.data().iter().map(|a| a * a).sum::<f64>() / v.numel() as f64))
        }
    }
}
