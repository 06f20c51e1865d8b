//! Dense 64-bit tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computations are
//! recorded on a [`Tape`], rebuilt per example, and differentiated with
//! [`Tape::backward`]. The free functions in this module are the
//! unrecorded forms of the same kernels the tape uses, so a value computed
//! either way is bit-identical.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, relative_error, RELATIVE_FLOOR};
pub use tape::{GradBuf, Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Usage(format!(
                "tensor shape must be non-empty and positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    /// One-dimensional tensor of shape `[len]`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", &[cols], &[bad.len()]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = as_matrix("transpose", &self.shape)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

pub(crate) fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, shape, &[0, 0])),
    }
}

/// Standard matrix product of `a` [m×k] and `b` [k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix("matmul", &a.shape)?;
    let (k2, n) = as_matrix("matmul", &b.shape)?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    Tensor::new(vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n))
}

/// Softmax restricted to positions where `mask` is true.
///
/// Masked entries of the result are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::dim("masked_softmax", &[logits.len()], &[mask.len()]));
    }
    let mut out = vec![0.0; logits.len()];
    kernels::masked_softmax_row(logits, mask, &mut out)?;
    Ok(out)
}

/// Pointwise operations available both here and on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Max,
    Sigmoid,
    Tanh,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Max
        )
    }
}

/// Applies `op` pointwise. Binary operations take two operands of equal
/// shape, unary ones take exactly one.
pub fn elementwise(op: Elementwise, operands: &[&Tensor]) -> Result<Tensor> {
    let arity = if op.is_binary() { 2 } else { 1 };
    if operands.len() != arity {
        return Err(Error::Usage(format!(
            "{op:?} takes {arity} operand(s), got {}",
            operands.len()
        )));
    }
    let a = operands[0];
    let data = if op.is_binary() {
        let b = operands[1];
        if a.shape != b.shape {
            return Err(Error::dim("elementwise", &a.shape, &b.shape));
        }
        kernels::binary(op, &a.data, &b.data)
    } else {
        kernels::unary(op, &a.data)
    };
    Tensor::new(a.shape.clone(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) mod kernels {
    use super::Elementwise;
    use crate::error::{Error, Result};

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
        c
    }

    /// `a` [m×k] times the transpose of `b` [n×k].
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        c
    }

    /// Transpose of `a` [m×k] times `b` [m×n], giving [k×n].
    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; k * n];
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let crow = &mut c[p * n..(p + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
        c
    }

    pub fn masked_softmax_row(logits: &[f64], mask: &[bool], out: &mut [f64]) -> Result<()> {
        let max = logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptySupport);
        }
        let mut total = 0.0;
        for ((o, &x), &m) in out.iter_mut().zip(logits).zip(mask) {
            *o = if m { (x - max).exp() } else { 0.0 };
            total += *o;
        }
        for (o, &m) in out.iter_mut().zip(mask) {
            if m {
                *o /= total;
            }
        }
        Ok(())
    }

    pub fn binary(op: Elementwise, a: &[f64], b: &[f64]) -> Vec<f64> {
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            // ties keep the first operand
            Elementwise::Max => |x, y| if x >= y { x } else { y },
            _ => unreachable!("unary op in binary kernel"),
        };
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn unary(op: Elementwise, a: &[f64]) -> Vec<f64> {
        match op {
            Elementwise::Sigmoid => a.iter().map(|&x| super::sigmoid(x)).collect(),
            Elementwise::Tanh => a.iter().map(|x| x.tanh()).collect(),
            _ => unreachable!("binary op in unary kernel"),
        }
    }
}
