use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reader::AttentionMap;
use crate::tensor::Tensor;

/// Mean negative log-likelihood of the answers.
pub fn nll_loss(maps: &[AttentionMap], answers: &[u32]) -> Result<f64> {
    if maps.is_empty() || maps.len() != answers.len() {
        return Err(Error::Usage(format!(
            "nll_loss needs one answer per sample ({} maps, {} answers)",
            maps.len(),
            answers.len()
        )));
    }
    let mut total = 0.0;
    for (i, (m, a)) in maps.iter().zip(answers).enumerate() {
        let p = m.word_probs.get(a).ok_or_else(|| {
            Error::Usage(format!("answer id {a} of sample {i} is not a document word"))
        })?;
        total -= p.ln();
    }
    Ok(total / maps.len() as f64)
}

/// L2 norm over all gradient blocks concatenated.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all blocks jointly so their global norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], names: &[String], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("clip threshold must be positive, got {threshold}")));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            let name = names.get(i).map_or_else(|| format!("#{i}"), Clone::clone);
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    let norm = global_norm(grads);
    if norm > threshold {
        let scale = threshold / norm;
        for x in grads.iter_mut().flatten() {
            *x *= scale;
        }
    }
    Ok(norm)
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments for parameters with the given element counts.
    pub fn new(sizes: &[usize], lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn with_defaults(sizes: &[usize], lr: f64) -> Self {
        Self::new(sizes, lr, 0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            &[params.len(), state.m.len()],
            &[grads.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() || state.v[i].len() != g.len() {
            return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
