//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative discrepancy used by the checker: `|a - c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, central: f64) -> f64 {
    (analytic - central).abs() / (analytic.abs() + central.abs() + 1e-12)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the maximum [`relative_error`] over all coordinates of `point`.
/// The step is `eps` rounded down to a power of two, so `x ± h` is exact
/// for ordinary magnitudes of `x`.
pub fn check_gradients<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

/// Multi-input form of [`check_gradients`]: every tensor in `points` is a
/// trainable leaf and every coordinate of each is perturbed.
pub fn check_gradients_multi<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::contract(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let h = 2f64.powi(eps.log2().floor() as i32);
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::numeric("check_gradients", "non-finite function value near point"));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf registered with requires_grad");
        for i in 0..points[which].len() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let hi = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let lo = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let central = (hi - lo) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], central));
        }
    }
    Ok(worst)
}
