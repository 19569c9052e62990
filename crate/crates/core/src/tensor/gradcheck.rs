//! Central finite-difference gradient checking in 64-bit.
//!
//! Relative error for one coordinate is `|a - n| / max(|a|, |n|, floor)` where
//! `a` is the analytical and `n` the numerical derivative. The floor is
//! `max(1e-6, 1e-3 * max|a|)` over the tensor being checked, so coordinates whose
//! gradient is three orders of magnitude below the tensor's largest entry are
//! compared against that scale instead of their own near-zero value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Tape, Tensor4, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coords {
    All,
    /// Up to this many randomly chosen coordinates per input tensor.
    Sample(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `build`'s scalar output against central differences for every input.
///
/// `build` receives a fresh tape and one leaf per input tensor, and returns the
/// scalar loss variable.
pub fn check_gradients<F>(inputs: &[Tensor4<f64>], coords: Coords, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor4<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor4<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(inputs[i].shape()));
        let len = inputs[i].len();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..len).collect(),
            Coords::Sample(k) if k >= len => (0..len).collect(),
            Coords::Sample(k) => (0..k).map(|_| rng.random_range(0..len)).collect(),
        };
        let floor = (1e-3 * analytic.max_abs()).max(1e-6);
        let mut max_err = 0.0f64;
        for &j in &picks {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_error(analytic.data()[j], numeric, floor));
        }
        reports.push(InputReport {
            max_rel_err: max_err,
            checked: picks.len(),
        });
    }
    Ok(GradCheckReport { inputs: reports })
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces `out` to a scalar through a fixed random projection `sum(r * out)`.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = random_tensor(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum_all(prod))
}
