//! Dense 5-D tensors in (N, C, T, H, W) layout with W fastest.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a 5-D tensor: batch, channel, time, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape5 { n, c, t, h, w };
        if shape.dims().contains(&0) {
            return Err(Error::InvalidShape {
                shape: shape.dims().to_vec(),
                reason: "all dimensions must be at least 1".into(),
            });
        }
        Ok(shape)
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one (T, H, W) volume.
    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Elements in one (H, W) frame.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && t < self.t && h < self.h && w < self.w);
        (((n * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }

    pub fn unravel(&self, mut idx: usize) -> [usize; 5] {
        let w = idx % self.w;
        idx /= self.w;
        let h = idx % self.h;
        idx /= self.h;
        let t = idx % self.t;
        idx /= self.t;
        let c = idx % self.c;
        [idx / self.c, c, t, h, w]
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.t, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor5<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor5<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor5")
            .field("shape", &self.shape)
            .field("dtype", &std::any::type_name::<T>())
            .finish()
    }
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape5, value: T) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor5::from_vec",
                "data length",
                shape.len(),
                data.len(),
            ));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let data = (0..shape.len()).map(|i| f(shape.unravel(i))).collect();
        Tensor5 { shape, data }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform(shape: Shape5, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Tensor5 { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, t, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, t: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, t, h, w);
        self.data[i] = v;
    }

    /// The (H, W) frame at `(n, c, t)`.
    pub fn frame(&self, n: usize, c: usize, t: usize) -> &[T] {
        let start = self.shape.index(n, c, t, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    /// The (T, H, W) volume at `(n, c)`.
    pub fn volume(&self, n: usize, c: usize) -> &[T] {
        let start = self.shape.index(n, c, 0, 0, 0);
        &self.data[start..start + self.shape.volume()]
    }

    pub fn volume_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let start = self.shape.index(n, c, 0, 0, 0);
        let len = self.shape.volume();
        &mut self.data[start..start + len]
    }

    /// All channels of batch item `n`, as a (C, T*H*W) row-major block.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.volume();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.volume();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        let names = ["N", "C", "T", "H", "W"];
        for ((&a, &b), name) in self.shape.dims().iter().zip(other.shape.dims().iter()).zip(names) {
            if a != b {
                return Err(Error::shape(context, name, a, b));
            }
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, context: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, context)?;
        Ok(Tensor5 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Passes `grad` through where the forward input was strictly positive.
    pub fn relu_backward(input: &Self, grad: &Self) -> Result<Self> {
        input.zip_with(grad, "relu_backward", |x, g| if x > T::zero() { g } else { T::zero() })
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<[usize; 5]> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| self.shape.unravel(i))
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(at) => Err(Error::non_finite(context, format!("{at:?}"))),
            None => Ok(()),
        }
    }

    /// Copies frames `[t0, t0 + len)` along the time axis.
    pub fn slice_time(&self, t0: usize, len: usize) -> Result<Self> {
        if len == 0 || t0 + len > self.shape.t {
            return Err(Error::OutOfRange {
                what: "time slice",
                detail: format!("[{t0}, {}) of T = {}", t0 + len, self.shape.t),
            });
        }
        let shape = Shape5 { t: len, ..self.shape };
        let plane = self.shape.plane();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                let start = self.shape.index(n, c, t0, 0, 0);
                data.extend_from_slice(&self.data[start..start + len * plane]);
            }
        }
        Ok(Tensor5 { shape, data })
    }

    /// Concatenates along the time axis.
    pub fn concat_time(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = first.shape;
        let mut t = 0;
        for p in parts {
            let s = p.shape;
            if (s.n, s.c, s.h, s.w) != (base.n, base.c, base.h, base.w) {
                return Err(Error::InvalidShape {
                    shape: s.dims().to_vec(),
                    reason: format!("cannot concatenate with {base} along time"),
                });
            }
            t += s.t;
        }
        let shape = Shape5 { t, ..base };
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..base.n {
            for c in 0..base.c {
                for p in parts {
                    data.extend_from_slice(p.volume(n, c));
                }
            }
        }
        Ok(Tensor5 { shape, data })
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape;
            if (s.c, s.t, s.h, s.w) != (base.c, base.t, base.h, base.w) {
                return Err(Error::InvalidShape {
                    shape: s.dims().to_vec(),
                    reason: format!("cannot concatenate with {base} along batch"),
                });
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor5 {
            shape: Shape5 { n, ..base },
            data,
        })
    }
}
