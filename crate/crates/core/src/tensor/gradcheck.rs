use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]. Central differences with
/// `epsilon = 1e-5` on an O(1) loss carry about 1e-11 of round-off, so
/// gradients much smaller than this floor cannot be resolved relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Relative error used by [`grad_check`]:
/// `|a - b| / max(RELATIVE_FLOOR, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients against central finite differences.
///
/// `loss` must be a deterministic function of `params` returning the scalar
/// loss together with its analytic gradient for every parameter (same
/// order, same lengths). Returns the maximum relative error over all
/// parameter entries.
pub fn grad_check<F>(loss: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (value, analytic) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {value}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("grad_check", &[params.len()], &[analytic.len()]));
    }

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        if grad.len() != params[p].numel() {
            return Err(Error::dim("grad_check", params[p].shape(), &[grad.len()]));
        }
        for (i, &g) in grad.iter().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + epsilon;
            let plus = loss(&work)?.0;
            work[p].data_mut()[i] = orig - epsilon;
            let minus = loss(&work)?.0;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "perturbed loss is not finite at parameter {p}, entry {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(g, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quadratic_loss_is_matched() {
        let theta = Tensor::vector(vec![0.3, -1.5, 2.0, 0.0, 7.25]).unwrap();
        let loss = |p: &[Tensor]| {
            let mut tape = Tape::new();
            let x = tape.param(&p[0], true);
            let sq = tape.mul(x, x)?;
            let s = tape.sum(sq)?;
            let half = tape.scale(s, 0.5)?;
            let g = tape.backward(half, &Tensor::scalar(1.0))?;
            Ok((tape.scalar(half), vec![g.get(x).unwrap()]))
        };
        let err = grad_check(loss, &[theta], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let theta = Tensor::vector(vec![0.0]).unwrap();
        let loss = |_: &[Tensor]| Ok((f64::NAN, vec![vec![0.0]]));
        assert!(matches!(grad_check(loss, &[theta], 1e-5), Err(Error::Numeric(_))));
    }
}
