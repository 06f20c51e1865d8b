use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bound of the uniform initialiser used for embeddings and GRU input
/// weights.
pub const EMBEDDING_INIT_BOUND: f64 = 0.1;

/// Matrix with entries drawn uniformly from `[-bound, bound]`.
pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Result<Tensor> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::Config(format!("uniform bound must be positive, got {bound}")));
    }
    let dist = Uniform::new_inclusive(-bound, bound)
        .map_err(|e| Error::Config(format!("invalid uniform bound: {e}")))?;
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Random (semi-)orthogonal matrix from the QR decomposition of a
/// standard-normal matrix.
///
/// Columns are orthonormal when `rows >= cols`, rows otherwise. Signs are
/// fixed by the diagonal of R so the result is uniformly distributed.
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config("orthogonal_init needs positive dimensions".into()));
    }
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let samples: Vec<f64> = (0..tall * short).map(|_| StandardNormal.sample(rng)).collect();
    let a = DMatrix::from_row_slice(tall, short, &samples);
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(q[(i, j)]);
        }
    }
    Tensor::new(vec![rows, cols], data)
}
