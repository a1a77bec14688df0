//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coords {
    All,
    /// At most `per_input` coordinates of every input, chosen without replacement.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    pub checked: usize,
    /// Coordinates whose difference stencil crossed a kink or a discrete
    /// choice (see [`Tape::branch_signature`]) and so were not compared.
    pub skipped: usize,
}

/// Largest fraction of skipped coordinates a passing check may have.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks a scalar function of a single tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, tol, Coords::All)
}

/// Checks a scalar function of several tensors against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps`. A coordinate is only compared when both
/// perturbed evaluations take the same piecewise branches as the unperturbed
/// one; the check fails if more than [`MAX_SKIPPED_FRACTION`] are skipped.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return contract_err("grad_check needs at least one input");
    }
    let (analytic, signature) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return contract_err(format!("grad_check needs a scalar function, got {:?}", tape.shape(loss)));
        }
        ensure_finite(tape.value(loss).item(), "unperturbed evaluation")?;
        let signature = tape.branch_signature();
        tape.backward(loss)?;
        (vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect::<Vec<_>>(), signature)
    };

    let eval = |values: &[Tensor]| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.branch_signature() == signature))
    };

    let mut rng = match coords {
        Coords::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coords::All => None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report =
        GradCheckReport { max_rel_error: 0.0, pass: true, worst: None, per_input: vec![0.0; inputs.len()], checked: 0, skipped: 0 };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picked: Vec<usize> = match (coords, rng.as_mut()) {
            (Coords::Sample { per_input, .. }, Some(r)) if per_input < n => {
                let mut v = sample(r, n, per_input).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in picked {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (plus, same_plus) = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let (minus, same_minus) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let loc = format!("input {i} element {j}");
            ensure_finite(plus, &loc)?;
            ensure_finite(minus, &loc)?;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            ensure_finite(a, &loc)?;
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.per_input[i] = report.per_input[i].max(err);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    let total = report.checked + report.skipped;
    report.pass = report.max_rel_error <= tol && report.skipped as f64 <= MAX_SKIPPED_FRACTION * total as f64;
    Ok(report)
}

fn ensure_finite(v: f64, loc: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value {v} at {loc}")))
    }
}
