//! Dense row-major `f32` tensors, the handful of kernels attention needs, the
//! TFT1 on-disk format and the engine's seeded random generator.

mod io;
mod rng;

pub use io::{decode_tensor, encode_tensor, load_tensor, save_tensor, DTYPE_F32, MAGIC};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32` in row-major order.
///
/// Tensors are never mutated after construction by the public API; every
/// operation allocates its result.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} describe {} elements but {} were given",
                dims,
                count,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let count = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; count],
        }
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let count = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let count: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..count).map(f).collect(),
        }
    }

    /// Builds a 2-D tensor from nested rows, mostly for tests and fixtures.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![n, m], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Row `i` of a 2-D tensor. Panics when out of range.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.dims[self.dims.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn into_reshaped(self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        softmax_rows(self)
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{op}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f32, other: &Tensor, b: f32) -> Result<Tensor> {
        self.zip_with(other, "lincomb", |x, y| a * x + b * y)
    }

    /// Adds `bias` (length = last dim) to every row.
    pub fn add_row_vector(&self, bias: &[f32]) -> Result<Tensor> {
        let cols = *self.dims.last().unwrap_or(&0);
        if bias.len() != cols {
            return Err(Error::shape(format!(
                "row bias of length {} for rows of length {cols}",
                bias.len()
            )));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat_rows of zero tensors"))?;
        let (_, cols) = first.shape2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.shape2()?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Picks rows of a 2-D tensor by index.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape2()?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::arg(format!("row index {i} out of range {r}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), c], data)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "max_abs_diff: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// True when both tensors have equal dims and bit-identical elements.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::shape(format!("dims {dims:?} overflow")))
    })
}

/// Matrix product of `a` (m×k) and `b` (k×n), accumulated in `f64`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = a.row(i);
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let b_row = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(b_row) {
                *s += av * bv as f64;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction; sums are taken in `f64`.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.shape2()?;
    let mut out = vec![0.0f32; m * n];
    let mut exps = vec![0.0f64; n];
    for i in 0..m {
        let row = a.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |x, &y| x.max(y)) as f64;
        let mut sum = 0.0f64;
        for (e, &v) in exps.iter_mut().zip(row) {
            *e = (v as f64 - max).exp();
            sum += *e;
        }
        for (o, &e) in out[i * n..(i + 1) * n].iter_mut().zip(&exps) {
            *o = (e / sum) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}
