//! Dense NCHW tensor. Data is row-major within (c, h, w), immutable after
//! construction, and cheap to clone (shared buffer).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a 4-d tensor: batch, channels, rows, cols.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::invalid("tensor", format!("zero dimension in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!("data length {} does not match {shape}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(Shape::new(n, c, h, w), data)
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::filled(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::filled(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar(), "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Tensor {
            shape: self.shape,
            data: Arc::new(data),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data: Arc::new(data),
        })
    }

    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.map(|x| x.max(lo).min(hi))
    }

    /// Cast elementwise into another scalar width.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .data
            .iter()
            .map(|&x| U::from_f64(x.to_f64().unwrap()).unwrap())
            .collect();
        Tensor {
            shape: self.shape,
            data: Arc::new(data),
        }
    }

    /// Stack per-sample tensors (each n == 1, identical c/h/w) along batch.
    pub fn stack_batch(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no parts"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut n_total = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(Error::shape("stack_batch", first.shape, p.shape));
            }
            n_total += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(
            Shape::new(n_total, first.shape.c, first.shape.h, first.shape.w),
            data,
        )
    }

    /// One sample of a batched tensor, as an n == 1 tensor.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let per = self.shape.c * self.shape.h * self.shape.w;
        let data = self.data[n * per..(n + 1) * per].to_vec();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: Arc::new(data),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Bit-level equality (exact, including shape).
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
    }
}

/// FNV-1a 64-bit hash of a tensor's bit pattern; used for frozen-parameter checks.
pub fn content_hash<T: Scalar>(t: &Tensor<T>) -> u64 {
    let mut h = crate::io::fnv1a64_init();
    for &x in t.data() {
        let bits = x.to_f64().unwrap().to_bits();
        h = crate::io::fnv1a64_update(h, &bits.to_le_bytes());
    }
    h
}
