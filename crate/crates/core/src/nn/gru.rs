use rand::Rng;

use super::init::{orthogonal_init, uniform_init, EMBEDDING_INIT_BOUND};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Names of the nine GRU tensors, in [`GruParams::tensors`] order.
pub const GRU_TENSOR_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

/// Parameters of one directional GRU.
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    /// Input weights uniform in `[-0.1, 0.1]`, recurrent weights random
    /// orthogonal, biases zero.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let w_z = uniform_init(hidden, input, EMBEDDING_INIT_BOUND, rng)?;
        let w_r = uniform_init(hidden, input, EMBEDDING_INIT_BOUND, rng)?;
        let w_h = uniform_init(hidden, input, EMBEDDING_INIT_BOUND, rng)?;
        let u_z = orthogonal_init(hidden, hidden, rng)?;
        let u_r = orthogonal_init(hidden, hidden, rng)?;
        let u_h = orthogonal_init(hidden, hidden, rng)?;
        let zeros = Tensor::zeros(vec![hidden])?;
        Self::from_tensors([w_z, w_r, w_h, u_z, u_r, u_h, zeros.clone(), zeros.clone(), zeros])
    }

    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        let w = Tensor::zeros(vec![hidden, input])?;
        let u = Tensor::zeros(vec![hidden, hidden])?;
        let b = Tensor::zeros(vec![hidden])?;
        Self::from_tensors([w.clone(), w.clone(), w, u.clone(), u.clone(), u, b.clone(), b.clone(), b])
    }

    /// Builds parameters from tensors in [`GRU_TENSOR_NAMES`] order,
    /// checking that all dimensions agree.
    pub fn from_tensors(t: [Tensor; 9]) -> Result<Self> {
        let [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h] = t;
        let hidden = w_z.shape()[0];
        let input = w_z.cols();
        for w in [&w_z, &w_r, &w_h] {
            if w.shape() != [hidden, input] {
                return Err(Error::dim("gru input weights", &[hidden, input], w.shape()));
            }
        }
        for u in [&u_z, &u_r, &u_h] {
            if u.shape() != [hidden, hidden] {
                return Err(Error::dim("gru recurrent weights", &[hidden, hidden], u.shape()));
            }
        }
        for b in [&b_z, &b_r, &b_h] {
            if b.shape() != [hidden] {
                return Err(Error::dim("gru bias", &[hidden], b.shape()));
            }
        }
        Ok(GruParams {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    /// Registers the parameters on `tape` by reference.
    pub fn record<'p>(&'p self, tape: &mut Tape<'p>, requires_grad: bool) -> GruVars {
        let [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h] =
            self.tensors().map(|t| tape.param(t, requires_grad));
        GruVars {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            hidden: self.hidden_dim(),
        }
    }
}

/// Tape handles of one GRU's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
    pub hidden: usize,
}

impl GruVars {
    pub fn all(&self) -> [Var; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h,
        ]
    }
}

/// Input-side pre-activations `x W_gᵀ + b_g` for all rows of `x` at once.
fn input_projections(tape: &mut Tape<'_>, x: Var, p: &GruVars) -> Result<[Var; 3]> {
    let mut out = [x; 3];
    for (slot, (w, b)) in out
        .iter_mut()
        .zip([(p.w_z, p.b_z), (p.w_r, p.b_r), (p.w_h, p.b_h)])
    {
        let xw = tape.matmul_nt(x, w)?;
        *slot = tape.add_row(xw, b)?;
    }
    Ok(out)
}

/// One recurrence step from precomputed input projections `[1×hidden]`.
fn step(tape: &mut Tape<'_>, proj: [Var; 3], h_prev: Var, p: &GruVars) -> Result<Var> {
    let uz = tape.matmul_nt(h_prev, p.u_z)?;
    let z_pre = tape.add(proj[0], uz)?;
    let z = tape.sigmoid(z_pre)?;
    let ur = tape.matmul_nt(h_prev, p.u_r)?;
    let r_pre = tape.add(proj[1], ur)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h_prev)?;
    let uh = tape.matmul_nt(rh, p.u_h)?;
    let c_pre = tape.add(proj[2], uh)?;
    let candidate = tape.tanh(c_pre)?;
    // (1 - z) ⊙ h + z ⊙ h̃  ==  h + z ⊙ (h̃ - h)
    let delta = tape.sub(candidate, h_prev)?;
    let gated = tape.mul(z, delta)?;
    tape.add(h_prev, gated)
}

/// Records one GRU step for `x_t` `[1×input]` and `h_prev` `[1×hidden]`.
pub fn record_gru_cell(tape: &mut Tape<'_>, x_t: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    if tape.shape(h_prev) != [1, p.hidden] {
        return Err(Error::dim("gru_cell", &[1, p.hidden], tape.shape(h_prev)));
    }
    let proj = input_projections(tape, x_t, p)?;
    step(tape, proj, h_prev, p)
}

/// One GRU step on plain vectors.
pub fn gru_cell(x_t: &[f64], h_prev: &[f64], p: &GruParams) -> Result<Vec<f64>> {
    if x_t.len() != p.input_dim() {
        return Err(Error::dim("gru_cell input", &[p.input_dim()], &[x_t.len()]));
    }
    let mut tape = Tape::new();
    let vars = p.record(&mut tape, false);
    let x = tape.constant(Tensor::new(vec![1, x_t.len()], x_t.to_vec())?);
    let h = tape.constant(Tensor::new(vec![1, h_prev.len().max(1)], h_prev.to_vec())?);
    let out = record_gru_cell(&mut tape, x, h, &vars)?;
    Ok(tape.data(out).to_vec())
}

/// Output of the bi-directional encoder: `[len × 2·hidden]`, forward state
/// in the first half of each row and backward state in the second.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub states: Tensor,
    pub mask: Vec<bool>,
}

/// Records the bi-directional GRU over `embedded` `[len × input]`.
///
/// Masked positions leave the running state unchanged and emit zero rows,
/// so padding anywhere in the sequence does not affect unmasked rows.
pub fn record_bigru(
    tape: &mut Tape<'_>,
    embedded: Var,
    fwd: &GruVars,
    bwd: &GruVars,
    mask: &[bool],
) -> Result<Var> {
    let len = tape.shape(embedded)[0];
    if len == 0 || mask.len() != len {
        return Err(Error::Usage(format!(
            "bigru_encode needs a non-empty sequence with a matching mask (len {len}, mask {})",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Usage("bigru_encode: every position is masked".into()));
    }
    if fwd.hidden != bwd.hidden {
        return Err(Error::dim("bigru_encode", &[fwd.hidden], &[bwd.hidden]));
    }
    let hidden = fwd.hidden;
    let zero = tape.constant(Tensor::zeros(vec![1, hidden])?);

    let run = |tape: &mut Tape<'_>, p: &GruVars, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
        let proj = input_projections(tape, embedded, p)?;
        let mut rows = vec![zero; len];
        let mut h = zero;
        for t in order {
            if !mask[t] {
                continue;
            }
            let step_proj = [
                tape.row(proj[0], t)?,
                tape.row(proj[1], t)?,
                tape.row(proj[2], t)?,
            ];
            h = step(tape, step_proj, h, p)?;
            rows[t] = h;
        }
        Ok(rows)
    };

    let forward_rows = run(tape, fwd, &mut (0..len))?;
    let backward_rows = run(tape, bwd, &mut (0..len).rev())?;
    let forward = tape.stack_rows(&forward_rows)?;
    let backward = tape.stack_rows(&backward_rows)?;
    tape.concat_cols(forward, backward)
}

/// Bi-directional GRU encoding of an embedded sequence.
pub fn bigru_encode(embedded: &Tensor, fwd: &GruParams, bwd: &GruParams, mask: &[bool]) -> Result<EncodedSequence> {
    if embedded.shape().len() != 2 || embedded.cols() != fwd.input_dim() || embedded.cols() != bwd.input_dim() {
        return Err(Error::dim("bigru_encode", embedded.shape(), &[fwd.input_dim()]));
    }
    let mut tape = Tape::new();
    let f = fwd.record(&mut tape, false);
    let b = bwd.record(&mut tape, false);
    let x = tape.param(embedded, false);
    let states = record_bigru(&mut tape, x, &f, &b, mask)?;
    Ok(EncodedSequence {
        states: tape.value(states),
        mask: mask.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GruParams {
        let mut t = |r: usize, c: usize| {
            let shape = if c == 0 { vec![r] } else { vec![r, c] };
            let n = r * c.max(1);
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        GruParams::from_tensors([
            t(hidden, input),
            t(hidden, input),
            t(hidden, input),
            t(hidden, hidden),
            t(hidden, hidden),
            t(hidden, hidden),
            t(hidden, 0),
            t(hidden, 0),
            t(hidden, 0),
        ])
        .unwrap()
    }

    /// Scalar-loop GRU step written independently of the tape.
    fn scalar_gru(x: &[f64], h: &[f64], p: &GruParams) -> Vec<f64> {
        let hd = p.hidden_dim();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let affine = |w: &Tensor, u: &Tensor, b: &Tensor, hv: &[f64], i: usize| {
            let mut acc = b.data()[i];
            for (j, xj) in x.iter().enumerate() {
                acc += w.at(i, j) * xj;
            }
            for (j, hj) in hv.iter().enumerate() {
                acc += u.at(i, j) * hj;
            }
            acc
        };
        let z: Vec<f64> = (0..hd).map(|i| sig(affine(&p.w_z, &p.u_z, &p.b_z, h, i))).collect();
        let r: Vec<f64> = (0..hd).map(|i| sig(affine(&p.w_r, &p.u_r, &p.b_r, h, i))).collect();
        let rh: Vec<f64> = (0..hd).map(|i| r[i] * h[i]).collect();
        let c: Vec<f64> = (0..hd).map(|i| affine(&p.w_h, &p.u_h, &p.b_h, &rh, i).tanh()).collect();
        (0..hd).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect()
    }

    #[test]
    fn zero_weights_halve_previous_state() {
        let p = GruParams::zeros(3, 4).unwrap();
        let v = [0.4, -0.8, 1.0, 0.0];
        let h = gru_cell(&[1.0, 2.0, 3.0], &v, &p).unwrap();
        assert_eq!(h, vec![0.2, -0.4, 0.5, 0.0]);
        let h0 = gru_cell(&[1.0, 2.0, 3.0], &[0.0; 4], &p).unwrap();
        assert_eq!(h0, vec![0.0; 4]);
    }

    #[test]
    fn zero_input_weights_and_state_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(3, 4, &mut rng);
        for t in [&mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.b_z, &mut p.b_r, &mut p.b_h] {
            t.data_mut().fill(0.0);
        }
        let h = gru_cell(&[0.3, -0.2, 0.9], &[0.0; 4], &p).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = random_params(4, 4, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = gru_cell(&x, &h, &p).unwrap();
        let want = scalar_gru(&x, &h, &p);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            assert!(g.abs() < 1.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = GruParams::zeros(3, 4).unwrap();
        assert!(matches!(gru_cell(&[1.0, 2.0], &[0.0; 4], &p), Err(Error::Dimension { .. })));
        assert!(matches!(gru_cell(&[1.0, 2.0, 3.0], &[0.0; 3], &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_step_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_params(3, 2, &mut rng);
        let b = random_params(3, 2, &mut rng);
        let x = Tensor::from_rows(&[vec![0.1, 0.5, -0.3]]).unwrap();
        let enc = bigru_encode(&x, &f, &b, &[true]).unwrap();
        let hf = gru_cell(x.row(0), &[0.0; 2], &f).unwrap();
        let hb = gru_cell(x.row(0), &[0.0; 2], &b).unwrap();
        assert_eq!(enc.states.row(0), [hf, hb].concat().as_slice());
    }

    #[test]
    fn palindrome_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(3, 5, &mut rng);
        let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_rows(&[a.clone(), b.clone(), c, b, a]).unwrap();
        let enc = bigru_encode(&x, &p, &p, &[true; 5]).unwrap();
        for i in 0..5 {
            let fwd = &enc.states.row(i)[..5];
            let bwd = &enc.states.row(4 - i)[5..];
            for (u, v) in fwd.iter().zip(bwd) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_leaves_unmasked_rows_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_params(2, 3, &mut rng);
        let b = random_params(2, 3, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let plain = bigru_encode(&Tensor::from_rows(&rows).unwrap(), &f, &b, &[true; 4]).unwrap();

        let mut right = rows.clone();
        right.push(vec![9.0, -9.0]);
        let padded = bigru_encode(&Tensor::from_rows(&right).unwrap(), &f, &b, &[true, true, true, true, false]).unwrap();
        assert_eq!(padded.states.shape(), &[5, 6]);
        for i in 0..4 {
            assert_eq!(plain.states.row(i), padded.states.row(i));
        }
        assert!(padded.states.row(4).iter().all(|x| *x == 0.0));

        let mut left = vec![vec![7.0, 7.0]];
        left.extend(rows);
        let lpad = bigru_encode(&Tensor::from_rows(&left).unwrap(), &f, &b, &[false, true, true, true, true]).unwrap();
        for i in 0..4 {
            assert_eq!(plain.states.row(i), lpad.states.row(i + 1));
        }
    }

    #[test]
    fn empty_or_fully_masked_is_usage_error() {
        let p = GruParams::zeros(2, 2).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(bigru_encode(&x, &p, &p, &[false]), Err(Error::Usage(_))));
    }

    #[test]
    fn three_step_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let f = random_params(3, 4, &mut rng);
        let b = random_params(3, 4, &mut rng);
        let x = Tensor::new(vec![3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let weights: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params: Vec<Tensor> = vec![x];
        params.extend(f.tensors().into_iter().cloned());
        params.extend(b.tensors().into_iter().cloned());

        let loss = |p: &[Tensor]| {
            let fwd = GruParams::from_tensors(std::array::from_fn(|i| p[1 + i].clone()))?;
            let bwd = GruParams::from_tensors(std::array::from_fn(|i| p[10 + i].clone()))?;
            let mut tape = Tape::new();
            let x = tape.param(&p[0], true);
            let fv = fwd.record(&mut tape, true);
            let bv = bwd.record(&mut tape, true);
            let h = record_bigru(&mut tape, x, &fv, &bv, &[true; 3])?;
            let w = tape.constant(Tensor::new(vec![3, 8], weights.clone())?);
            let prod = tape.mul(h, w)?;
            let out = tape.sum(prod)?;
            let g = tape.backward(out, &Tensor::scalar(1.0))?;
            let mut vars = vec![x];
            vars.extend(fv.all());
            vars.extend(bv.all());
            Ok((tape.scalar(out), vars.iter().map(|&v| g.get(v).unwrap()).collect()))
        };
        let err = grad_check(loss, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_step_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let p = random_params(3, 3, &mut rng);
        let x = Tensor::new(vec![1, 3], vec![0.2, -0.5, 0.7]).unwrap();
        let h = Tensor::new(vec![1, 3], vec![0.1, 0.3, -0.6]).unwrap();
        let mut params = vec![x, h];
        params.extend(p.tensors().into_iter().cloned());
        let loss = |t: &[Tensor]| {
            let gp = GruParams::from_tensors(std::array::from_fn(|i| t[2 + i].clone()))?;
            let mut tape = Tape::new();
            let x = tape.param(&t[0], true);
            let h = tape.param(&t[1], true);
            let v = gp.record(&mut tape, true);
            let out = record_gru_cell(&mut tape, x, h, &v)?;
            let sq = tape.mul(out, out)?;
            let s = tape.sum(sq)?;
            let g = tape.backward(s, &Tensor::scalar(1.0))?;
            let mut vars = vec![x, h];
            vars.extend(v.all());
            Ok((tape.scalar(s), vars.iter().map(|&v| g.get(v).unwrap()).collect()))
        };
        let err = grad_check(loss, &params, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn init_has_orthogonal_recurrent_weights_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GruParams::init(5, 6, &mut rng).unwrap();
        for u in [&p.u_z, &p.u_r, &p.u_h] {
            let g = crate::tensor::matmul(&u.transpose().unwrap(), u).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g.at(i, j) - want).abs() < 1e-10);
                }
            }
        }
        assert!(p.w_h.data().iter().all(|x| x.abs() <= 0.1));
        assert!(p.b_z.data().iter().all(|x| *x == 0.0));
    }
}
