use std::fmt;

use crate::error::{Result, TensorError};
use crate::rng::Rng;

/// Extent of a rank-4 tensor as `(n, c, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Number of spatial positions `h * w`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + y) * self.0[3] + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

/// Dense row-major rank-4 array of `f64` (n outermost, w innermost).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, ... {} values]", &self.data[..8], self.data.len())
        }
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.0.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("from_vec", format!("zero extent in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(TensorError::shape(
                "from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.numel() > 0, "zero extent in {shape}");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Vector of length `c` stored as shape `(1, c, 1, 1)`.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: Shape, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Tensor { shape, data }
    }

    pub fn randn(shape: Shape, std: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel()).map(|_| std * rng.normal()).collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The single value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::shape("item", format!("not a scalar: {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(TensorError::dim("reshape", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::dim(op, self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::dim("axpy", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch element `i` as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape.0;
        if i >= n {
            return Err(TensorError::shape("batch_item", format!("index {i} of batch {n}")));
        }
        let len = c * h * w;
        Ok(Tensor {
            shape: Shape::new(1, c, h, w),
            data: self.data[i * len..(i + 1) * len].to_vec(),
        })
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::shape("stack", "no tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if s.0[1..] != first.0[1..] {
                return Err(TensorError::dim("stack", first, s));
            }
            n += s.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c(), first.h(), first.w()),
            data,
        })
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if y0 + h > s.h() || x0 + w > s.w() || h == 0 || w == 0 {
            return Err(TensorError::shape(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) outside {s}"),
            ));
        }
        let mut out = Vec::with_capacity(s.n() * s.c() * h * w);
        for n in 0..s.n() {
            for c in 0..s.c() {
                for y in y0..y0 + h {
                    let row = s.index(n, c, y, x0);
                    out.extend_from_slice(&self.data[row..row + w]);
                }
            }
        }
        Ok(Tensor {
            shape: Shape::new(s.n(), s.c(), h, w),
            data: out,
        })
    }
}
