use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Number of input coordinates compared.
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `f` against central differences with step
/// `h` at every coordinate of every input.
///
/// `f` receives the inputs as parameters. A non-scalar output is reduced
/// to a scalar by a dot product with fixed pseudo-random weights.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let coords: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
    check_coords(&f, inputs, h, &coords)
}

/// Like [`grad_check`] but compares only `samples` coordinates drawn
/// uniformly (without replacement) across all inputs.
pub fn grad_check_sampled<F, E>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let all: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, all.len(), samples.min(all.len()));
    let coords: Vec<(usize, usize)> = picks.into_iter().map(|k| all[k]).collect();
    check_coords(&f, inputs, h, &coords)
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var), E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn projection(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x05ee_d9ad);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn check_coords<F, E>(f: &F, inputs: &[Tensor<f64>], h: f64, coords: &[(usize, usize)]) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let (mut tape, vars, out) = evaluate(f, inputs)?;
    let weights = projection(tape.value(out).len());
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), weights.clone()).map_err(E::from)?);
        let prod = tape.mul(out, w).map_err(E::from)?;
        tape.sum(prod)
    };
    tape.backward(loss).map_err(E::from)?;

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, max_abs_error: 0.0, worst: None };
    let mut shifted = inputs.to_vec();
    for &(i, j) in coords {
        let analytic = tape.grad(vars[i]).map_or(0.0, |g| g[j]);
        let orig = inputs[i].data()[j];
        shifted[i].data_mut()[j] = orig + h;
        let (tp, _, op) = evaluate(f, &shifted)?;
        shifted[i].data_mut()[j] = orig - h;
        let (tm, _, om) = evaluate(f, &shifted)?;
        shifted[i].data_mut()[j] = orig;
        let (plus, minus) = (tp.value(op).data(), tm.value(om).data());
        let numeric = if plus.len() == 1 {
            (plus[0] - minus[0]) / (2.0 * h)
        } else {
            plus.iter().zip(minus).zip(&weights).map(|((p, m), w)| (p - m) / (2.0 * h) * w).sum()
        };
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
