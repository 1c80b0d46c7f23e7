//! Forward kernels and their adjoints. Every function here is pure: outputs
//! depend only on the arguments, which is what lets a record be replayed.

use crate::error::{Result, TensorError};
use crate::tensor::{Shape, Tensor};

fn check_vector(op: &'static str, v: &Tensor, len: usize) -> Result<()> {
    let s = v.shape();
    if s.numel() != len || s.c() != len {
        return Err(TensorError::dim(op, s, Shape::new(1, len, 1, 1)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 1x1 convolution

pub fn conv1x1(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c() != xs.c() || ws.h() != 1 || ws.w() != 1 {
        return Err(TensorError::dim("conv1x1", xs, ws));
    }
    let (co, ci, p) = (ws.n(), ws.c(), xs.plane());
    if let Some(b) = b {
        check_vector("conv1x1", b, co)?;
    }
    let mut out = Tensor::zeros(Shape::new(xs.n(), co, xs.h(), xs.w()));
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for n in 0..xs.n() {
        let dst = &mut od[n * co * p..(n + 1) * co * p];
        if let Some(b) = b {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        let src = &xd[n * ci * p..(n + 1) * ci * p];
        gemm(co, ci, p, wd, (ci, 1), src, (p, 1), 1.0, dst);
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub fn conv1x1_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let (co, ci, p) = (ws.n(), ws.c(), xs.plane());
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(Shape::new(1, co, 1, 1));
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();
    for n in 0..xs.n() {
        let g = &gd[n * co * p..(n + 1) * co * p];
        for (o, row) in g.chunks(p).enumerate() {
            db.data_mut()[o] += row.iter().sum::<f64>();
        }
        let src = &xd[n * ci * p..(n + 1) * ci * p];
        // dW += dY . X^T, dX = W^T . dY
        gemm(co, p, ci, g, (p, 1), src, (1, p), 1.0, dw.data_mut());
        gemm(ci, co, p, wd, (1, ci), g, (p, 1), 0.0, &mut dx.data_mut()[n * ci * p..(n + 1) * ci * p]);
    }
    (dx, dw, db)
}

/// `c = op(a) . op(b) + beta * c` for row-major `c` of shape `m x n`, with
/// `a` and `b` addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm rhs out of bounds");
    }
    // SAFETY: the assertions above keep every accessed offset inside the
    // three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// 3x3 convolutions, stride 1, zero padding 1

/// `dst[y, x] += a * src[y + oy, x + ox]` wherever the source index is valid.
fn shift_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, oy: isize, ox: isize, a: f64) {
    if a == 0.0 {
        return;
    }
    let y0 = (-oy).max(0) as usize;
    let y1 = (h as isize - oy).min(h as isize).max(0) as usize;
    let x0 = (-ox).max(0) as usize;
    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + oy) as usize;
        let drow = &mut dst[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + ox) as usize;
        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += a * s;
        }
    }
}

/// `sum_{y,x} g[y, x] * src[y + oy, x + ox]` over valid indices.
fn shift_dot(g: &[f64], src: &[f64], h: usize, w: usize, oy: isize, ox: isize) -> f64 {
    let y0 = (-oy).max(0) as usize;
    let y1 = (h as isize - oy).min(h as isize).max(0) as usize;
    let x0 = (-ox).max(0) as usize;
    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + oy) as usize;
        let sx0 = (x0 as isize + ox) as usize;
        acc += dot(
            &g[y * w + x0..y * w + x1],
            &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
        );
    }
    acc
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub fn depthwise_conv3x3(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.n() != xs.c() || ws.c() != 1 || ws.h() != 3 || ws.w() != 3 {
        return Err(TensorError::dim("depthwise_conv3x3", xs, ws));
    }
    let c = xs.c();
    if let Some(b) = b {
        check_vector("depthwise_conv3x3", b, c)?;
    }
    let (h, wd_, p) = (xs.h(), xs.w(), xs.plane());
    let mut out = Tensor::zeros(xs);
    let od = out.data_mut();
    for n in 0..xs.n() {
        for ch in 0..c {
            let base = (n * c + ch) * p;
            let dst = &mut od[base..base + p];
            if let Some(b) = b {
                dst.fill(b.data()[ch]);
            }
            let src = &x.data()[base..base + p];
            for (k, &(oy, ox)) in TAPS.iter().enumerate() {
                shift_axpy(dst, src, h, wd_, oy, ox, w.data()[ch * 9 + k]);
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv3x3_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let c = xs.c();
    let (h, wd_, p) = (xs.h(), xs.w(), xs.plane());
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(Shape::new(1, c, 1, 1));
    for n in 0..xs.n() {
        for ch in 0..c {
            let base = (n * c + ch) * p;
            let g = &dy.data()[base..base + p];
            let src = &x.data()[base..base + p];
            db.data_mut()[ch] += g.iter().sum::<f64>();
            for (k, &(oy, ox)) in TAPS.iter().enumerate() {
                dw.data_mut()[ch * 9 + k] += shift_dot(g, src, h, wd_, oy, ox);
                shift_axpy(
                    &mut dx.data_mut()[base..base + p],
                    g,
                    h,
                    wd_,
                    -oy,
                    -ox,
                    w.data()[ch * 9 + k],
                );
            }
        }
    }
    (dx, dw, db)
}

/// Dense 3x3 convolution, weight `(c_out, c_in, 3, 3)`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c() != xs.c() || ws.h() != 3 || ws.w() != 3 {
        return Err(TensorError::dim("conv3x3", xs, ws));
    }
    let (co, ci) = (ws.n(), ws.c());
    if let Some(b) = b {
        check_vector("conv3x3", b, co)?;
    }
    let (h, wd_, p) = (xs.h(), xs.w(), xs.plane());
    let mut out = Tensor::zeros(Shape::new(xs.n(), co, h, wd_));
    let od = out.data_mut();
    for n in 0..xs.n() {
        for o in 0..co {
            let dst = &mut od[(n * co + o) * p..(n * co + o + 1) * p];
            if let Some(b) = b {
                dst.fill(b.data()[o]);
            }
            for i in 0..ci {
                let src = &x.data()[(n * ci + i) * p..(n * ci + i + 1) * p];
                for (k, &(oy, ox)) in TAPS.iter().enumerate() {
                    shift_axpy(dst, src, h, wd_, oy, ox, w.data()[(o * ci + i) * 9 + k]);
                }
            }
        }
    }
    Ok(out)
}

pub fn conv3x3_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let (co, ci) = (ws.n(), ws.c());
    let (h, wd_, p) = (xs.h(), xs.w(), xs.plane());
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(Shape::new(1, co, 1, 1));
    for n in 0..xs.n() {
        for o in 0..co {
            let g = &dy.data()[(n * co + o) * p..(n * co + o + 1) * p];
            db.data_mut()[o] += g.iter().sum::<f64>();
            for i in 0..ci {
                let base = (n * ci + i) * p;
                let src = &x.data()[base..base + p];
                for (k, &(oy, ox)) in TAPS.iter().enumerate() {
                    let wi = (o * ci + i) * 9 + k;
                    dw.data_mut()[wi] += shift_dot(g, src, h, wd_, oy, ox);
                    shift_axpy(&mut dx.data_mut()[base..base + p], g, h, wd_, -oy, -ox, w.data()[wi]);
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Layer norm across the channel axis at every pixel

pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    if eps <= 0.0 {
        return Err(TensorError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let xs = x.shape();
    let (c, p) = (xs.c(), xs.plane());
    check_vector("layer_norm", gamma, c)?;
    check_vector("layer_norm", beta, c)?;
    let mut mean = vec![0.0; xs.n() * p];
    let mut var = vec![0.0; xs.n() * p];
    let xd = x.data();
    for n in 0..xs.n() {
        let m = &mut mean[n * p..(n + 1) * p];
        for ch in 0..c {
            let src = &xd[(n * c + ch) * p..(n * c + ch + 1) * p];
            for (a, s) in m.iter_mut().zip(src) {
                *a += s;
            }
        }
        m.iter_mut().for_each(|v| *v /= c as f64);
        let v = &mut var[n * p..(n + 1) * p];
        for ch in 0..c {
            let src = &xd[(n * c + ch) * p..(n * c + ch + 1) * p];
            for ((a, s), mu) in v.iter_mut().zip(src).zip(m.iter()) {
                let d = s - mu;
                *a += d * d;
            }
        }
    }
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / c as f64 + eps).sqrt()).collect();
    let mut out = Tensor::zeros(xs);
    let od = out.data_mut();
    for n in 0..xs.n() {
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            let base = (n * c + ch) * p;
            for k in 0..p {
                let xhat = (xd[base + k] - mean[n * p + k]) * rstd[n * p + k];
                od[base + k] = xhat * g + b;
            }
        }
    }
    Ok((out, NormStats { mean, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let (c, p) = (xs.c(), xs.plane());
    let mut dx = Tensor::zeros(xs);
    let mut dg = Tensor::zeros(gamma.shape());
    let mut dbt = Tensor::zeros(gamma.shape());
    let xd = x.data();
    let gd = dy.data();
    let mut sum_g = vec![0.0; p];
    let mut sum_gx = vec![0.0; p];
    for n in 0..xs.n() {
        sum_g.fill(0.0);
        sum_gx.fill(0.0);
        let mean = &stats.mean[n * p..(n + 1) * p];
        let rstd = &stats.rstd[n * p..(n + 1) * p];
        for ch in 0..c {
            let base = (n * c + ch) * p;
            let g = gamma.data()[ch];
            let mut acc_g = 0.0;
            let mut acc_b = 0.0;
            for k in 0..p {
                let xhat = (xd[base + k] - mean[k]) * rstd[k];
                let dyv = gd[base + k];
                acc_g += dyv * xhat;
                acc_b += dyv;
                let dxhat = dyv * g;
                sum_g[k] += dxhat;
                sum_gx[k] += dxhat * xhat;
            }
            dg.data_mut()[ch] += acc_g;
            dbt.data_mut()[ch] += acc_b;
        }
        let inv_c = 1.0 / c as f64;
        for ch in 0..c {
            let base = (n * c + ch) * p;
            let g = gamma.data()[ch];
            let dst = &mut dx.data_mut()[base..base + p];
            for k in 0..p {
                let xhat = (xd[base + k] - mean[k]) * rstd[k];
                let dxhat = gd[base + k] * g;
                dst[k] = rstd[k] * (dxhat - sum_g[k] * inv_c - xhat * sum_gx[k] * inv_c);
            }
        }
    }
    (dx, dg, dbt)
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Silu,
    Sigmoid,
    Softplus,
    Exp,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)),
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
                cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
        }
    }
}

// ---------------------------------------------------------------------------
// Row-wise (last axis) softmax and L2 normalization

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let w = x.shape().w();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let w = y.shape().w();
    let mut dx = Tensor::zeros(y.shape());
    for ((dxr, yr), gr) in dx
        .data_mut()
        .chunks_mut(w)
        .zip(y.data().chunks(w))
        .zip(dy.data().chunks(w))
    {
        let s = dot(yr, gr);
        for k in 0..w {
            dxr[k] = yr[k] * (gr[k] - s);
        }
    }
    dx
}

/// `y = x / sqrt(sum(x^2) + eps)` per row; returns the row norms.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let w = x.shape().w();
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.numel() / w);
    for row in out.data_mut().chunks_mut(w) {
        let nrm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        row.iter_mut().for_each(|v| *v /= nrm);
        norms.push(nrm);
    }
    (out, norms)
}

pub fn l2_normalize_rows_backward(x: &Tensor, norms: &[f64], dy: &Tensor) -> Tensor {
    let w = x.shape().w();
    let mut dx = Tensor::zeros(x.shape());
    for (((dxr, xr), gr), &nrm) in dx
        .data_mut()
        .chunks_mut(w)
        .zip(x.data().chunks(w))
        .zip(dy.data().chunks(w))
        .zip(norms)
    {
        let gx = dot(gr, xr);
        let n3 = nrm * nrm * nrm;
        for k in 0..w {
            dxr[k] = gr[k] / nrm - xr[k] * gx / n3;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Batched matrix product over the last two axes

/// Strides of `op(t)` for one `(rows, cols)` matrix stored row-major.
fn op_strides(rows: usize, cols: usize, transposed: bool) -> ((usize, usize), usize, usize) {
    if transposed {
        ((1, cols), cols, rows)
    } else {
        ((cols, 1), rows, cols)
    }
}

/// `out[i] = op(a[i]) . op(b[i]) + beta * out[i]` over every batch element.
fn batched_gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor, beta: f64) {
    let sa = a.shape();
    let sb = b.shape();
    let (astr, m, k) = op_strides(sa.h(), sa.w(), ta);
    let (bstr, _, p) = op_strides(sb.h(), sb.w(), tb);
    let (asz, bsz) = (sa.h() * sa.w(), sb.h() * sb.w());
    let od = out.data_mut();
    for (i, o) in od.chunks_mut(m * p).enumerate() {
        gemm(m, k, p, &a.data()[i * asz..(i + 1) * asz], astr, &b.data()[i * bsz..(i + 1) * bsz], bstr, beta, o);
    }
}

/// `op(a) . op(b)` per `(n, c)` batch element, where `op` optionally transposes
/// the last two axes.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.n() != sb.n() || sa.c() != sb.c() {
        return Err(TensorError::dim("batched_matmul", sa, sb));
    }
    let (ka, m) = if ta { (sa.h(), sa.w()) } else { (sa.w(), sa.h()) };
    let (kb, p) = if tb { (sb.w(), sb.h()) } else { (sb.h(), sb.w()) };
    if ka != kb {
        return Err(TensorError::dim("batched_matmul", sa, sb));
    }
    let mut out = Tensor::zeros(Shape::new(sa.n(), sa.c(), m, p));
    batched_gemm(a, ta, b, tb, &mut out, 0.0);
    Ok(out)
}

/// Returns `(da, db)` in the stored (untransposed) layouts of `a` and `b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, ta: bool, tb: bool, dy: &Tensor) -> (Tensor, Tensor) {
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    // With Y = op(A) op(B): dA = dY op(B)^T, or op(B) dY^T when A is stored
    // transposed; symmetrically for B.
    if ta {
        batched_gemm(b, tb, dy, true, &mut da, 0.0);
    } else {
        batched_gemm(dy, false, b, !tb, &mut da, 0.0);
    }
    if tb {
        batched_gemm(dy, true, a, ta, &mut db, 0.0);
    } else {
        batched_gemm(a, !ta, dy, false, &mut db, 0.0);
    }
    (da, db)
}

// ---------------------------------------------------------------------------
// Pure rearrangements

/// `(n, c, h, w) -> (n, c*r*r, h/r, w/r)`; output channel `c*r*r + dy*r + dx`
/// holds the sub-pixel at offset `(dy, dx)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || s.h() % r != 0 || s.w() % r != 0 {
        return Err(TensorError::shape(
            "pixel_unshuffle",
            format!("spatial dims of {s} not divisible by {r}"),
        ));
    }
    let (oh, ow) = (s.h() / r, s.w() / r);
    let os = Shape::new(s.n(), s.c() * r * r, oh, ow);
    let mut out = Tensor::zeros(os);
    let od = out.data_mut();
    for n in 0..s.n() {
        for c in 0..s.c() {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = c * r * r + dy * r + dx;
                    for y in 0..oh {
                        for xx in 0..ow {
                            od[os.index(n, oc, y, xx)] = x.at(n, c, y * r + dy, xx * r + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || s.c() % (r * r) != 0 {
        return Err(TensorError::shape(
            "pixel_shuffle",
            format!("channels of {s} not divisible by {}", r * r),
        ));
    }
    let c_out = s.c() / (r * r);
    let os = Shape::new(s.n(), c_out, s.h() * r, s.w() * r);
    let mut out = Tensor::zeros(os);
    let od = out.data_mut();
    for n in 0..s.n() {
        for c in 0..c_out {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = c * r * r + dy * r + dx;
                    for y in 0..s.h() {
                        for xx in 0..s.w() {
                            od[os.index(n, c, y * r + dy, xx * r + dx)] = x.at(n, ic, y, xx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
        return Err(TensorError::dim("concat_channels", sa, sb));
    }
    let os = Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
    let (la, lb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..sa.n() {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor::from_vec(os, data)
}

/// Inverse of [`concat_channels`]: splits `dy` into the two channel groups.
pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let s = dy.shape();
    let cb = s.c() - ca;
    let p = s.plane();
    let mut da = Vec::with_capacity(s.n() * ca * p);
    let mut db = Vec::with_capacity(s.n() * cb * p);
    for n in 0..s.n() {
        let base = n * s.c() * p;
        da.extend_from_slice(&dy.data()[base..base + ca * p]);
        db.extend_from_slice(&dy.data()[base + ca * p..base + s.c() * p]);
    }
    (
        Tensor::from_vec(Shape::new(s.n(), ca, s.h(), s.w()), da).expect("split a"),
        Tensor::from_vec(Shape::new(s.n(), cb, s.h(), s.w()), db).expect("split b"),
    )
}

/// `out[n, c, p] = x[n, c, index[p]]` with the output plane reshaped to `(h, w)`.
pub fn gather_plane(x: &Tensor, index: &[usize], h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    let p = s.plane();
    if index.len() != h * w || index.iter().any(|&i| i >= p) {
        return Err(TensorError::shape(
            "gather_plane",
            format!("index of length {} invalid for {s} -> {h}x{w}", index.len()),
        ));
    }
    let os = Shape::new(s.n(), s.c(), h, w);
    let mut out = Tensor::zeros(os);
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(x.data().chunks(p)) {
        for (d, &i) in dst.iter_mut().zip(index) {
            *d = src[i];
        }
    }
    Ok(out)
}

pub fn gather_plane_backward(x_shape: Shape, index: &[usize], dy: &Tensor) -> Tensor {
    let p = x_shape.plane();
    let mut dx = Tensor::zeros(x_shape);
    for (dst, g) in dx.data_mut().chunks_mut(p).zip(dy.data().chunks(index.len())) {
        for (&i, gv) in index.iter().zip(g) {
            dst[i] += gv;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Broadcast helpers

pub fn mean_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let p = s.plane() as f64;
    let data = x.data().chunks(s.plane()).map(|c| c.iter().sum::<f64>() / p).collect();
    Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), data).expect("pool shape")
}

fn check_broadcast(x: Shape, s: Shape) -> Result<()> {
    let ok = s.h() == 1
        && s.w() == 1
        && (s.n() == 1 || s.n() == x.n())
        && (s.c() == 1 || s.c() == x.c());
    if ok {
        Ok(())
    } else {
        Err(TensorError::dim("broadcast_mul", x, s))
    }
}

#[inline]
fn bidx(s: Shape, n: usize, c: usize) -> usize {
    let nn = if s.n() == 1 { 0 } else { n };
    let cc = if s.c() == 1 { 0 } else { c };
    nn * s.c() + cc
}

/// Multiplies `x` by a per-(batch, channel) factor `s` of shape
/// `(1|n, 1|c, 1, 1)`.
pub fn broadcast_mul(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    check_broadcast(xs, s.shape())?;
    let p = xs.plane();
    let mut out = x.clone();
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let f = s.data()[bidx(s.shape(), n, c)];
            let base = (n * xs.c() + c) * p;
            out.data_mut()[base..base + p].iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(out)
}

pub fn broadcast_mul_backward(x: &Tensor, s: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let p = xs.plane();
    let mut dx = dy.clone();
    let mut ds = Tensor::zeros(s.shape());
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let k = bidx(s.shape(), n, c);
            let f = s.data()[k];
            let base = (n * xs.c() + c) * p;
            ds.data_mut()[k] += dot(&dy.data()[base..base + p], &x.data()[base..base + p]);
            dx.data_mut()[base..base + p].iter_mut().for_each(|v| *v *= f);
        }
    }
    (dx, ds)
}

// ---------------------------------------------------------------------------
// Selective scan

/// Shapes: `u, delta: (n, d, 1, L)`, `a: (1, 1, d, N)`, `b, c: (n, N, 1, L)`.
#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub batch: usize,
    pub channels: usize,
    pub state: usize,
    pub len: usize,
}

pub fn scan_dims(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<ScanDims> {
    let su = u.shape();
    if su.h() != 1 {
        return Err(TensorError::shape("selective_scan", format!("sequence must be (n, d, 1, L), got {su}")));
    }
    let dims = ScanDims {
        batch: su.n(),
        channels: su.c(),
        state: a.shape().w(),
        len: su.w(),
    };
    if delta.shape() != su {
        return Err(TensorError::dim("selective_scan", su, delta.shape()));
    }
    let sa = a.shape();
    if sa != Shape::new(1, 1, dims.channels, dims.state) {
        return Err(TensorError::dim("selective_scan", su, sa));
    }
    let expect = Shape::new(dims.batch, dims.state, 1, dims.len);
    for t in [b, c] {
        if t.shape() != expect {
            return Err(TensorError::dim("selective_scan", expect, t.shape()));
        }
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > 0.0)) {
        return Err(TensorError::Contract(format!(
            "selective_scan step sizes must be positive, found {bad}"
        )));
    }
    Ok(dims)
}

/// Zero-order-hold selective scan. Returns `y` and every hidden state,
/// laid out as `[n][t][d][s]`.
/// Forward intermediates of [`selective_scan`], laid out `(n, L, d, N)`.
#[derive(Clone, Debug)]
pub struct ScanCache {
    pub states: Vec<f64>,
    /// `exp(delta * A)` at every step.
    pub decay: Vec<f64>,
}

pub fn selective_scan(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<(Tensor, ScanCache)> {
    let ScanDims { batch, channels: d, state: ns, len } = scan_dims(u, delta, a, b, c)?;
    let mut y = Tensor::zeros(u.shape());
    let mut states = vec![0.0; batch * len * d * ns];
    let mut decay = vec![0.0; batch * len * d * ns];
    let (ud, dd, ad, bd, cd) = (u.data(), delta.data(), a.data(), b.data(), c.data());
    let mut h = vec![0.0; d * ns];
    for n in 0..batch {
        h.fill(0.0);
        for t in 0..len {
            let off = (n * len + t) * d * ns;
            for ch in 0..d {
                let dt = dd[(n * d + ch) * len + t];
                let xu = ud[(n * d + ch) * len + t];
                let mut acc = 0.0;
                for s in 0..ns {
                    let abar = (dt * ad[ch * ns + s]).exp();
                    decay[off + ch * ns + s] = abar;
                    let bt = bd[(n * ns + s) * len + t];
                    let hv = abar * h[ch * ns + s] + dt * bt * xu;
                    h[ch * ns + s] = hv;
                    acc += cd[(n * ns + s) * len + t] * hv;
                }
                y.data_mut()[(n * d + ch) * len + t] = acc;
            }
            states[off..off + d * ns].copy_from_slice(&h);
        }
    }
    Ok((y, ScanCache { states, decay }))
}

pub struct ScanGrads {
    pub du: Tensor,
    pub ddelta: Tensor,
    pub da: Tensor,
    pub db: Tensor,
    pub dc: Tensor,
}

pub fn selective_scan_backward(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    cache: &ScanCache,
    dy: &Tensor,
) -> ScanGrads {
    let states = &cache.states;
    let batch = u.shape().n();
    let d = u.shape().c();
    let len = u.shape().w();
    let ns = a.shape().w();
    let mut g = ScanGrads {
        du: Tensor::zeros(u.shape()),
        ddelta: Tensor::zeros(delta.shape()),
        da: Tensor::zeros(a.shape()),
        db: Tensor::zeros(b.shape()),
        dc: Tensor::zeros(c.shape()),
    };
    let (ud, dd, ad, bd, cd, gd) = (u.data(), delta.data(), a.data(), b.data(), c.data(), dy.data());
    let mut gh = vec![0.0; d * ns];
    for n in 0..batch {
        gh.fill(0.0);
        for t in (0..len).rev() {
            let off = (n * len + t) * d * ns;
            let h_t = &states[off..off + d * ns];
            let h_prev = if t > 0 {
                Some(&states[off - d * ns..off])
            } else {
                None
            };
            for ch in 0..d {
                let yi = (n * d + ch) * len + t;
                let gy = gd[yi];
                let dt = dd[yi];
                let xu = ud[yi];
                let mut g_dt = 0.0;
                let mut g_x = 0.0;
                for s in 0..ns {
                    let si = (n * ns + s) * len + t;
                    let k = ch * ns + s;
                    // y_t = sum_s C_t[s] h_t[s]
                    g.dc.data_mut()[si] += gy * h_t[k];
                    let ghv = gh[k] + gy * cd[si];
                    let av = ad[k];
                    let abar = cache.decay[off + k];
                    // h_t = abar * h_{t-1} + dt * B_t * x_t
                    if let Some(hp) = h_prev {
                        let ga = ghv * hp[k] * abar;
                        g_dt += ga * av;
                        g.da.data_mut()[k] += ga * dt;
                    }
                    let bt = bd[si];
                    g_dt += ghv * bt * xu;
                    g.db.data_mut()[si] += ghv * dt * xu;
                    g_x += ghv * dt * bt;
                    gh[k] = ghv * abar;
                }
                g.ddelta.data_mut()[yi] += g_dt;
                g.du.data_mut()[yi] += g_x;
            }
        }
    }
    g
}
