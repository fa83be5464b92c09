//! Finite-difference verification of backward rules.
//!
//! Central differences in f64: `(f(x+h) - f(x-h)) / 2h` per input element,
//! compared against the tape's analytic gradient. The comparison is
//! `|a - n| / max(|a|, |n|, 1e-3)`: relative where gradients are of normal
//! size, absolute-with-floor where both are near zero so that truncation
//! noise in the difference quotient cannot fail a correct zero gradient.
//!
//! This module is product code, not test scaffolding: the `gradcheck` CLI
//! command runs [`run_layer_suite`] and [`run_end_to_end`] as the numerical
//! verification gate of a build.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64, h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of scalar gradient entries compared.
    pub checked: usize,
    /// Entries skipped because a top-k selection flipped under perturbation.
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare tape gradients of a scalar-valued function of several tensors
/// against central differences, element by element over every input.
pub fn check_tape_fn(
    name: &str,
    inputs: &[Tensor<f64>],
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
) -> Result<CheckOutcome> {
    // Analytic gradients from one recorded forward.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss, None)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |xs: &[Vec<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<ValueId> = xs
            .iter()
            .zip(inputs)
            .map(|(data, orig)| {
                t.leaf(Tensor::new(orig.shape().clone(), data.clone()).expect("same length"))
            })
            .collect();
        let loss = build(&mut t, &ids)?;
        Ok(t.data(loss)[0])
    };

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for i in 0..values.len() {
        if analytic[i].is_empty() {
            continue;
        }
        for j in 0..values[i].len() {
            let orig = values[i][j];
            values[i][j] = orig + FD_STEP;
            let fp = eval(&values)?;
            values[i][j] = orig - FD_STEP;
            let fm = eval(&values)?;
            values[i][j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(analytic[i][j], numeric);
            if err > max_err {
                max_err = err;
            }
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: max_err,
        tolerance: tol,
        checked,
        skipped: 0,
    })
}

/// Seeded random tensor with entries in [lo, hi).
pub fn random_tensor<S: Scalar>(
    rng: &mut crate::rng::Rng,
    dims: &[usize],
    lo: f64,
    hi: f64,
) -> Tensor<S> {
    let mut t = Tensor::zeros(crate::shape::Shape::new(dims.to_vec()));
    rng.fill_uniform(lo, hi, t.data_mut());
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_grad_of_square() {
        let x = [3.0, -2.0];
        let g = numeric_grad(&x, |v| v.iter().map(|a| a * a).sum(), 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!((g[1] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(0.0, 1e-9) < 1e-4);
        assert!(rel_err(1.0, 1.5) > 0.3);
    }
}
