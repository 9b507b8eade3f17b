//! Central-difference gradient checking in 64-bit precision.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Absolute floor on the denominator of the relative error.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

/// Elements whose gradient is this many times smaller than the largest
/// gradient in their block are compared against that fraction of the block
/// maximum instead of their own magnitude, so values that are zero up to
/// rounding do not read as 100% error.
pub const BLOCK_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor).max(ABSOLUTE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Denominator floor for a block whose numeric gradients are `numeric`.
pub fn block_floor(numeric: &[f64]) -> f64 {
    BLOCK_FLOOR * numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&tape, &vars).expect("objective evaluates").value().item()
}

/// Analytic gradients of `f` at `inputs`.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Vec<Tensor<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).expect("objective evaluates");
    let grads = tape.backward(loss).expect("backward");
    vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
}

/// Step sizes tried, as successive divisions of the initial step by 10.
const MAX_STEPS: usize = 4;

/// Central difference of `f` at `x`.
///
/// Each step `h` is paired with `h / 2`; pairs that disagree straddle a
/// non-smooth point (a ReLU or clamp boundary) near, but not at, `x`. The
/// steps shrink by 10 until a pair agrees, and the best-agreeing pair wins.
pub fn central_difference<F>(mut f: F, x: f64, eps: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut diff = |h: f64| -> Result<f64> { Ok((f(x + h)? - f(x - h)?) / (2.0 * h)) };
    let mut best = (f64::INFINITY, 0.0);
    let mut h = eps;
    for _ in 0..MAX_STEPS {
        let coarse = diff(h)?;
        let fine = diff(h / 2.0)?;
        let gap = (coarse - fine).abs();
        if gap < best.0 {
            best = (gap, fine);
        }
        if gap <= 1e-6 * fine.abs() + 1e-10 {
            break;
        }
        h /= 10.0;
    }
    Ok(best.1)
}

/// Central difference of `f` with respect to element `index` of input `which`.
pub fn numeric_partial<F>(inputs: &[Tensor<f64>], which: usize, index: usize, eps: f64, f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut shifted = inputs.to_vec();
    let x = inputs[which].data()[index];
    let eval = |v: f64| {
        shifted[which].data_mut()[index] = v;
        Ok(evaluate(&shifted, f))
    };
    central_difference(eval, x, eps).expect("objective evaluates")
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
pub fn check_gradient_eps<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic = analytic_gradients(inputs, &f);
    let mut worst: f64 = 0.0;
    for (which, grad) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..grad.len())
            .map(|index| numeric_partial(inputs, which, index, eps, &f))
            .collect();
        let floor = block_floor(&numeric);
        for (&a, &n) in grad.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(a, n, floor));
        }
    }
    worst
}

/// [`check_gradient_eps`] with a step of `1e-5`.
pub fn check_gradient<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_gradient_eps(inputs, 1e-5, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_matches_derivative() {
        let d = central_difference(|x| Ok(x.sin()), 0.3, 1e-4).unwrap();
        assert!((d - 0.3f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn nearby_kink_is_stepped_over() {
        let relu = |x: f64| Ok((x - 3e-5).max(0.0));
        let plain = (relu(1e-4).unwrap() - relu(-1e-4).unwrap()) / 2e-4;
        assert!(plain > 0.3);
        assert_eq!(central_difference(relu, 0.0, 1e-4).unwrap(), 0.0);
        let d = central_difference(relu, 6e-5, 1e-4).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "{d}");
    }
}
