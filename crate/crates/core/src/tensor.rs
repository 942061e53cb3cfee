//! Dense row-major `f64` arrays of rank 1 to 3.

use std::fmt;

use crate::error::{KgcmError, Result};

/// Dense real array. `dims` holds between one and three positive extents and
/// `data` holds exactly `dims.iter().product()` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(KgcmError::shape(
                "Tensor::new",
                format!("rank must be 1..=3, got dims {dims:?}"),
            ));
        }
        if dims.contains(&0) {
            return Err(KgcmError::shape(
                "Tensor::new",
                format!("zero-length axis in dims {dims:?}"),
            ));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(KgcmError::shape(
                "Tensor::new",
                format!("dims {dims:?} need {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Internal constructor for callers that already guarantee the invariants.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![0.0; n])
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(&[n], values)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(KgcmError::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    /// Number of rows when viewed as `(len / last_dim) x last_dim`.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            n => self.dims[n - 2],
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let c = self.last_dim();
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.last_dim())
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 3 || dims.contains(&0) {
            return Err(KgcmError::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KgcmError::NonFinite { op: op.to_string() })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Transpose of the last two axes (rank 2 or 3).
    pub fn transposed(&self) -> Result<Self> {
        let (batch, r, c) = self.as_batched("transpose")?;
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let src = &self.data[b * r * c..(b + 1) * r * c];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut dims = self.dims.clone();
        let n = dims.len();
        dims.swap(n - 2, n - 1);
        Ok(Self::from_parts(dims, out))
    }

    /// `(batch, rows, cols)` view for rank-2 (batch 1) and rank-3 arrays.
    pub(crate) fn as_batched(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((1, *r, *c)),
            [b, r, c] => Ok((*b, *r, *c)),
            d => Err(KgcmError::shape(op, format!("expected rank 2 or 3, got {d:?}"))),
        }
    }

    /// Matrix product for rank-2 operands, used outside the tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.as_matrix("matmul")?;
        let (k2, c) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(KgcmError::shape(
                "matmul",
                format!("inner dims disagree: {:?} x {:?}", self.dims, other.dims),
            ));
        }
        let mut out = vec![0.0; r * c];
        kernels::mm(&self.data, &other.data, &mut out, r, k, c);
        Ok(Tensor::from_parts(vec![r, c], out))
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            d => Err(KgcmError::shape(op, format!("expected rank 2, got {d:?}"))),
        }
    }
}

/// Inner loops shared by the tape and the plain tensor API.
pub(crate) mod kernels {
    /// `out += a (r x k) * b (k x c)`.
    pub fn mm(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * c..(p + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out += a (r x k) * b^T` where `b` is `c x k`.
    pub fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
        for i in 0..r {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..c {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * c + j] += acc;
            }
        }
    }

    /// `out += a^T * b` where `a` is `k x r` and `b` is `k x c`.
    pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
        for p in 0..k {
            let arow = &a[p * r..(p + 1) * r];
            let brow = &b[p * c..(p + 1) * c];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}
