//! Dense row-major `f64` tensors.
//!
//! Every reduction accumulates left to right in index order, so results are
//! bitwise reproducible for a given layout. There are no views or strides;
//! reshaping and transposing copy.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("numeric domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

/// Batch, channel, height and width extents of an image-like tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    /// Number of positions pooled per channel: batch x height x width.
    pub fn effective_count(&self) -> usize {
        self.batch * self.spatial()
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.spatial()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Interprets a rank-4 tensor as `[m, C, a, b]`.
    pub fn shape4(&self) -> Result<Shape4> {
        match self.shape.as_slice() {
            &[m, c, h, w] => Ok(Shape4::new(m, c, h, w)),
            other => Err(TensorError::Dimension {
                op: "shape4",
                lhs: other.to_vec(),
                rhs: vec![0, 0, 0, 0],
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| f64::max(acc, (a - b).abs())))
    }

    fn check_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape.as_slice() {
            &[m, k] => (m, k),
            _ => return Err(self.dim_err("matmul", rhs)),
        };
        let n = match rhs.shape.as_slice() {
            &[k2, n] if k2 == k => n,
            _ => return Err(self.dim_err("matmul", rhs)),
        };
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = match self.shape.as_slice() {
            &[r, c] => (r, c),
            other => {
                return Err(TensorError::Dimension {
                    op: "transpose",
                    lhs: other.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    fn dim_err(&self, op: &'static str, rhs: &Tensor) -> TensorError {
        TensorError::Dimension {
            op,
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        }
    }

    /// Arithmetic mean over `axes`; reduced axes are dropped from the shape.
    pub fn reduce_mean_over(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduced[a])
            .map(|a| self.shape[a])
            .collect();
        let count: usize = (0..rank)
            .filter(|&a| reduced[a])
            .map(|a| self.shape[a])
            .product();
        if count == 0 {
            return Err(TensorError::Domain {
                op: "reduce_mean_over",
                detail: "mean over an empty axis".into(),
            });
        }
        let out_len: usize = out_shape.iter().product();
        let mut sums = vec![0.0; out_len];
        let strides = row_major_strides(&self.shape);
        let out_strides = row_major_strides(&out_shape);
        let mut index = vec![0usize; rank];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            for a in 0..rank {
                index[a] = rem / strides[a];
                rem %= strides[a];
            }
            let mut o = 0;
            let mut oa = 0;
            for a in 0..rank {
                if !reduced[a] {
                    o += index[a] * out_strides[oa];
                    oa += 1;
                }
            }
            sums[o] += v;
        }
        let inv = count as f64;
        for s in &mut sums {
            *s /= inv;
        }
        Ok(Tensor {
            shape: out_shape,
            data: sums,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("add", rhs, |a, b| Ok(a + b))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("sub", rhs, |a, b| Ok(a - b))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("mul", rhs, |a, b| Ok(a * b))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("div", rhs, |a, b| {
            if b == 0.0 {
                Err(TensorError::Domain {
                    op: "div",
                    detail: format!("{a} / 0"),
                })
            } else {
                Ok(a / b)
            }
        })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|v| **v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op under trailing-axis broadcasting: shapes are
    /// aligned from the last axis, missing leading axes count as 1 and a
    /// size-1 axis stretches to match the other operand.
    fn zip_broadcast(
        &self,
        op: &'static str,
        rhs: &Tensor,
        f: impl Fn(f64, f64) -> Result<f64>,
    ) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let data = self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shape(&self.shape, &rhs.shape).ok_or_else(|| self.dim_err(op, rhs))?;
        let rank = out_shape.len();
        let lhs_strides = broadcast_strides(&self.shape, rank);
        let rhs_strides = broadcast_strides(&rhs.shape, rank);
        let out_strides = row_major_strides(&out_shape);
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for flat in 0..n {
            let mut rem = flat;
            let (mut li, mut ri) = (0, 0);
            for a in 0..rank {
                let idx = rem / out_strides[a];
                rem %= out_strides[a];
                li += idx * lhs_strides[a];
                ri += idx * rhs_strides[a];
            }
            data.push(f(self.data[li], rhs.data[ri])?);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

fn broadcast_shape(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let l = if i < lhs.len() { lhs[lhs.len() - 1 - i] } else { 1 };
        let r = if i < rhs.len() { rhs[rhs.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = match (l, r) {
            (l, r) if l == r => l,
            (1, r) => r,
            (l, 1) => l,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid into an output of `rank` axes; stretched axes get 0.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let own = row_major_strides(shape);
    let offset = rank - shape.len();
    (0..rank)
        .map(|a| {
            if a < offset || shape[a - offset] == 1 {
                0
            } else {
                own[a - offset]
            }
        })
        .collect()
}

/// `out += lhs[m x k] * rhs[k x n]`, accumulating over `k` in increasing order
/// for every output entry.
pub fn gemm(lhs: &[f64], rhs: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(lhs.len(), m * k);
    debug_assert_eq!(rhs.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a = lhs[i * k + p];
            let r = &rhs[p * n..(p + 1) * n];
            for (o, &b) in row.iter_mut().zip(r) {
                *o += a * b;
            }
        }
    }
}

/// `out += lhs[m x k] * rhs[n x k]^T`.
pub fn gemm_nt(lhs: &[f64], rhs: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(lhs.len(), m * k);
    debug_assert_eq!(rhs.len(), n * k);
    for i in 0..m {
        let a = &lhs[i * k..(i + 1) * k];
        for j in 0..n {
            let b = &rhs[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a.iter().zip(b) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += lhs[k x m]^T * rhs[k x n]`.
pub fn gemm_tn(lhs: &[f64], rhs: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(lhs.len(), k * m);
    debug_assert_eq!(rhs.len(), k * n);
    for p in 0..k {
        let a = &lhs[p * m..(p + 1) * m];
        let r = &rhs[p * n..(p + 1) * n];
        for (i, &av) in a.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &b) in row.iter_mut().zip(r) {
                *o += av * b;
            }
        }
    }
}
