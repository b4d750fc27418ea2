//! Dense fp32 tensors with deterministic fp64-accumulated reductions.
//!
//! Values are stored row-major in a flat `Vec<f32>`. Inner products, normalization
//! statistics, and other reductions accumulate in f64 in a fixed order, so results
//! are bit-identical run to run and across thread counts. Every public operation
//! checks its output for NaN/Inf and reports a numeric error instead of letting
//! poison propagate.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Minimum number of output elements before a matmul fans out across threads.
/// Each output element is an independent sequential dot product, so the split
/// never changes results.
const MATMUL_PAR_THRESHOLD: usize = 4096;

/// Row-major dense tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

// ─── scalar kernels ───────────────────────────────────────────────────────────

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + e^x), with the overflow guard softplus(x) = x for x > 20.
pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// silu(x) = x * sigmoid(x).
pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

impl Tensor {
    // ─── construction and access ──────────────────────────────────────────────

    /// Builds a tensor from a shape and flat row-major data.
    ///
    /// Errors if the data length does not match the shape product or any value is
    /// non-finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dim(
                "tensor.new",
                format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor.new")?;
        Ok(t)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, format!("expected rank 2, got {other:?}"))),
        }
    }

    /// Element of a rank-2 tensor.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Element of a rank-3 tensor.
    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                op,
                detail: Some(format!("flat index {i}")),
            }),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "tensor.max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    // ─── shape manipulation ───────────────────────────────────────────────────

    /// Reinterprets the flat data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(
                "tensor.reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("tensor.transpose2")?;
        let mut out = vec![0.0f32; r * c];
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

    /// Contiguous column slice `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("tensor.slice_cols")?;
        if start + len > c {
            return Err(Error::dim(
                "tensor.slice_cols",
                format!("columns {start}..{} out of width {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            let row = &self.data[i * c..i * c + c];
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(Tensor {
            shape: vec![r, len],
            data: out,
        })
    }

    /// Contiguous row slice `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("tensor.slice_rows")?;
        if start + len > r {
            return Err(Error::dim(
                "tensor.slice_rows",
                format!("rows {start}..{} out of height {r}", start + len),
            ));
        }
        Ok(Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    /// Gathers the given columns of a rank-2 tensor, in index-list order.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("tensor.select_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::dim(
                "tensor.select_cols",
                format!("column {bad} out of width {c}"),
            ));
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            out.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(Tensor {
            shape: vec![r, idx.len()],
            data: out,
        })
    }

    /// Gathers the given rows of a rank-2 tensor, in index-list order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("tensor.select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim(
                "tensor.select_rows",
                format!("row {bad} out of height {r}"),
            ));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Tensor {
            shape: vec![idx.len(), c],
            data: out,
        })
    }

    /// Gathers the given entries of a rank-1 tensor, in index-list order.
    pub fn select_1d(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::dim(
                "tensor.select_1d",
                format!("expected rank-1 tensor, got {:?}", self.shape),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.data.len()) {
            return Err(Error::dim(
                "tensor.select_1d",
                format!("index {bad} out of length {}", self.data.len()),
            ));
        }
        Ok(Tensor {
            shape: vec![idx.len()],
            data: idx.iter().map(|&i| self.data[i]).collect(),
        })
    }

    // ─── linear algebra ───────────────────────────────────────────────────────

    /// Matrix product of `[m,k] x [k,n]`, inner products accumulated in f64.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("tensor.matmul")?;
        let (k2, n) = rhs.dims2("tensor.matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "tensor.matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        let lhs = &self.data;
        let rhsd = &rhs.data;
        let row_kernel = |i: usize, row_out: &mut [f32]| {
            let a_row = &lhs[i * k..(i + 1) * k];
            for (j, slot) in row_out.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for (kk, &a) in a_row.iter().enumerate() {
                    acc += f64::from(a) * f64::from(rhsd[kk * n + j]);
                }
                *slot = acc as f32;
            }
        };
        if m * n >= MATMUL_PAR_THRESHOLD && m > 1 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| row_kernel(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                row_kernel(i, row);
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.check_finite("tensor.matmul")?;
        Ok(t)
    }

    /// Depthwise causal 1-D convolution.
    ///
    /// `self` is `[channels, time]`, `weight` is `[channels, k]`, `bias` is
    /// `[channels]`. Each channel is convolved independently against its own k-tap
    /// filter with zero left-padding, so output `[c, t]` depends only on inputs at
    /// times `<= t`.
    pub fn conv1d_depthwise_causal(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (ch, time) = self.dims2("tensor.conv1d")?;
        let (ch_w, k) = weight.dims2("tensor.conv1d")?;
        if ch != ch_w || bias.shape() != [ch] {
            return Err(Error::ShapeMismatch {
                op: "tensor.conv1d",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        if k == 0 {
            return Err(Error::dim("tensor.conv1d", "kernel width 0"));
        }
        let mut out = vec![0.0f32; ch * time];
        for c in 0..ch {
            let x = &self.data[c * time..(c + 1) * time];
            let w = &weight.data[c * k..(c + 1) * k];
            let b = f64::from(bias.data[c]);
            for t in 0..time {
                let mut acc = b;
                for (kk, &wv) in w.iter().enumerate() {
                    // Tap kk reads input time t - (k - 1) + kk; earlier times are zero.
                    let src = t as isize - (k as isize - 1) + kk as isize;
                    if src >= 0 {
                        acc += f64::from(wv) * f64::from(x[src as usize]);
                    }
                }
                out[c * time + t] = acc as f32;
            }
        }
        let t = Tensor {
            shape: vec![ch, time],
            data: out,
        };
        t.check_finite("tensor.conv1d")?;
        Ok(t)
    }

    // ─── elementwise ──────────────────────────────────────────────────────────

    fn unary(&self, op: &'static str, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        t.check_finite(op)?;
        Ok(t)
    }

    fn binary(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.unary("tensor.silu", silu)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary("tensor.softplus", softplus)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("tensor.exp", f32::exp)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        self.unary("tensor.scale", |v| v * factor)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "tensor.mul", |a, b| a * b)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "tensor.add", |a, b| a + b)
    }

    /// Adds a `[cols]` bias vector to every row of a `[rows, cols]` tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.dims2("tensor.add_row_broadcast")?;
        if bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "tensor.add_row_broadcast",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bias.data.iter()) {
                *o += b;
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        t.check_finite("tensor.add_row_broadcast")?;
        Ok(t)
    }

    // ─── reductions and normalization ─────────────────────────────────────────

    /// Sum of all elements, accumulated in f64 in flat order.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    /// Root-mean-square normalization over the last dimension.
    ///
    /// For each row, `y_i = weight_i * x_i / sqrt(mean_j(x_j^2) + eps)`.
    pub fn rmsnorm(&self, weight: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *self
            .shape
            .last()
            .ok_or_else(|| Error::dim("tensor.rmsnorm", "rank-0 input"))?;
        self.rmsnorm_scaled(weight, d, eps)
    }

    /// rmsnorm with an explicit mean divisor.
    ///
    /// Identical to [`Tensor::rmsnorm`] when `norm_len` equals the last-dimension
    /// width. Pruning keeps the divisor of the original width so that removing
    /// zeroed channels does not rescale the survivors.
    pub fn rmsnorm_scaled(&self, weight: &Tensor, norm_len: usize, eps: f32) -> Result<Tensor> {
        let d = *self
            .shape
            .last()
            .ok_or_else(|| Error::dim("tensor.rmsnorm", "rank-0 input"))?;
        if weight.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "tensor.rmsnorm",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        if norm_len == 0 {
            return Err(Error::dim("tensor.rmsnorm", "norm_len 0"));
        }
        let mut out = vec![0.0f32; self.data.len()];
        for (row_in, row_out) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let mut acc = 0.0f64;
            for &v in row_in {
                acc += f64::from(v) * f64::from(v);
            }
            let inv = 1.0 / (acc / norm_len as f64 + f64::from(eps)).sqrt();
            for ((o, &x), &w) in row_out.iter_mut().zip(row_in).zip(weight.data.iter()) {
                *o = (f64::from(w) * f64::from(x) * inv) as f32;
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        t.check_finite("tensor.rmsnorm")?;
        Ok(t)
    }
}

// ─── tests ────────────────────────────────────────────────────────────────────
