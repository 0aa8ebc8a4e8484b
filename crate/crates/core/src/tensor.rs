use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::element::{DType, Float};
use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 5;

/// Extents of a tensor, outermost first. Every extent is at least 1.
#[derive(Clone, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() > MAX_RANK {
            return Err(shape_err!("rank {} exceeds the maximum of {MAX_RANK}", dims.len()));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(shape_err!("extent {i} of {dims:?} is zero"));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }

    pub fn last(&self) -> usize {
        self.0.last().copied().unwrap_or(1)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Shape::new(v)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl std::ops::Index<usize> for Shape {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("scalar");
        }
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("×"))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// How [`Tensor::create`] fills a new tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

/// Dense row-major tensor. Data is shared and never mutated in place once
/// the tensor is constructed, so clones are cheap and safe to hand across
/// threads.
#[derive(Clone)]
pub struct Tensor<T: Float = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(shape_err!(
                "shape {shape} holds {} values, got {}",
                shape.numel(),
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn from_f64(dims: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::from_vec(dims, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Shape::scalar(), vec![v])
    }

    pub fn create(dims: impl Into<Vec<usize>>, fill: Fill) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match fill {
            Fill::Zeros => vec![T::zero(); n],
            Fill::Ones => vec![T::one(); n],
            Fill::Constant(c) => vec![T::of(c); n],
            Fill::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Config(format!("uniform fill needs lo < hi, got [{lo}, {hi})")));
                }
                let dist = Uniform::new(lo, hi).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
            Fill::Normal { mean, std, seed } => {
                let dist = Normal::new(mean, std).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::create(dims, Fill::Zeros)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!("item() on tensor of shape {}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Takes the buffer, copying only if it is shared.
    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("elementwise op on {} and {}", self.shape, other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| U::of(v.f64())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice `[start, start + len)` along the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let b = *self.dims().first().ok_or_else(|| shape_err!("narrow on a scalar"))?;
        if len == 0 || start + len > b {
            return Err(shape_err!("rows {start}..{} out of range for {}", start + len, self.shape));
        }
        let row = self.numel() / b;
        let mut dims = self.dims().to_vec();
        dims[0] = len;
        Ok(Self::from_parts(
            Shape(dims),
            self.data[start * row..(start + len) * row].to_vec(),
        ))
    }

    /// Concatenates tensors of identical trailing shape along a new or
    /// existing leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Usage("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err!("stack of {} and {}", first.shape, t.shape));
            }
            data.extend_from_slice(t.data());
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        Self::from_vec(dims, data)
    }

    /// Little-endian byte image of the data.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * T::DTYPE.size());
        for &v in self.data.iter() {
            v.write_le(&mut out);
        }
        out
    }

    /// Exact bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.to_le_bytes() == other.to_le_bytes()
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("compare {} with {}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor<{:?}>({}) [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > SHOW {
            f.write_str(", ...")?;
        }
        f.write_str("]")
    }
}
