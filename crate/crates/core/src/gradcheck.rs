//! Central finite-difference checks of tape gradients.
//!
//! A check builds a fresh `f64` tape for every evaluation, so the function
//! under test is a pure closure from input values to a scalar.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely: `|a - n| / max(|a|, |n|, FLOOR)`.
/// Central differences at `h = 1e-5` carry ~1e-9 of round-off, so exact
/// zeros would otherwise look like large relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Which coordinates of the inputs to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// `count` coordinates drawn without replacement across all inputs.
    Sample { count: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!("gradcheck target must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()).expect("input shape"))
        })
        .collect())
}

/// Central-difference estimate of one partial derivative.
pub fn numeric_partial<F>(f: &F, inputs: &[Tensor<f64>], input: usize, index: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut shifted = inputs.to_vec();
    let base = inputs[input].data()[index];
    shifted[input].data_mut()[index] = base + h;
    let plus = eval(f, &shifted)?;
    shifted[input].data_mut()[index] = base - h;
    let minus = eval(f, &shifted)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares analytic and central-difference gradients of `f` at `inputs`.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], coords: Coords, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic_gradients(&f, inputs)?;
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let picks: Vec<usize> = match coords {
        Coords::All => (0..total).collect(),
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, total, count.min(total)).into_vec();
            v.sort_unstable();
            v
        }
    };
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for flat in picks {
        let input = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[input];
        let numeric = numeric_partial(&f, inputs, input, index, h)?;
        let analytic = grads[input].data()[index];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((input, index, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_closed_form() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        };
        let g = analytic_gradients(&f, std::slice::from_ref(&x)).unwrap();
        assert_eq!(g[0].data(), &[1.0, -2.0, 4.0]);
        let r = check(f, &[x], Coords::All, STEP).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-8), "{r:?}");
    }

    #[test]
    fn sampled_coordinates_span_inputs() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![3.0, 4.0, 5.0]).unwrap();
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let sa = tape.sum(v[0]);
            let sb = tape.sum(v[1]);
            let p = tape.mul(sa, sb)?;
            Ok(p)
        };
        let r = check(f, &[a, b], Coords::Sample { count: 5, seed: 1 }, STEP).unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.passes(1e-6));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at an exact kink: analytic uses the zero branch, numeric sees 1/2
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        };
        let r = check(f, &[x], Coords::All, STEP).unwrap();
        assert!(!r.passes(1e-4));
    }
}
