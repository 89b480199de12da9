//! Central finite-difference gradient checks.
//!
//! The objective is evaluated on an `f64` tape for both the analytic
//! gradient and the perturbed evaluations, so 32-bit rounding does not leak
//! into the comparison.

use crate::error::{Error, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::{Scalar, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;

/// A scalar function of one parameter tensor, buildable at any precision.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn evaluate<F: Objective>(f: &F, params: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(params.clone());
    let out = f.eval(&mut tape, p)?;
    tape.value(out).item()
}

pub fn finite_diff_report<F: Objective>(
    f: &F,
    params: &Tensor<f64>,
    step: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::contract(
            "finite_diff_check",
            "step must be positive",
        ));
    }
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(params.clone());
    let out = f.eval(&mut tape, p)?;
    let analytic = tape.backward(out)?.get(p).into_data();

    let mut numeric = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / (a.abs() + n.abs() + 1e-8);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}

/// Max over coordinates of `|analytic - central| / (|analytic| + |central| + 1e-8)`.
pub fn finite_diff_check<F: Objective>(f: &F, params: &Tensor<f64>, step: f64) -> Result<f64> {
    Ok(finite_diff_report(f, params, step)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    struct Linear(Tensor<f64>);

    impl Objective for Linear {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
            let w = tape.constant(self.0.cast());
            let prod = tape.mul(p, w)?;
            Ok(tape.sum(prod))
        }
    }

    struct LeakySum;

    impl Objective for LeakySum {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
            let sq = tape.mul(p, p)?;
            let y = tape.leaky_relu(p, 0.2);
            let z = tape.add(y, sq)?;
            Ok(tape.sum(z))
        }
    }

    #[test]
    fn linear_objective_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = Tensor::randn(&[10], 1.0, &mut rng);
        let p = Tensor::randn(&[10], 1.0, &mut rng);
        assert!(finite_diff_check(&Linear(w), &p, DEFAULT_STEP).unwrap() < 1e-6);
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = Tensor::<f64>::randn(&[16], 1.0, &mut rng).map(|v| {
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        });
        assert!(finite_diff_check(&LeakySum, &p, DEFAULT_STEP).unwrap() < 1e-4);
    }

    #[test]
    fn oversized_step_shows_up_as_error() {
        // the kink at zero sits inside a +-2 stencil
        let p = Tensor::<f64>::vector(&[0.3, -0.7]);
        let err = finite_diff_check(&LeakySum, &p, 2.0).unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::<f64>::vector(&[1.0]);
        assert!(finite_diff_check(&LeakySum, &p, 0.0).is_err());
    }
}
