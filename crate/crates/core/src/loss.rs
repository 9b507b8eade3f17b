//! Segmentation losses and evaluation metrics.
//!
//! Losses take capsule lengths as a tape variable and targets as constant
//! tensors, so they compose with the rest of the graph.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;
const WEIGHT_RANGE: (f64, f64) = (0.1, 10.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub positive: f64,
    pub negative: f64,
    /// Scale of the masked reconstruction term; 0 disables it.
    pub reconstruction: f64,
}

impl LossWeights {
    pub fn new(positive: f64, negative: f64, reconstruction: f64) -> Result<Self> {
        let w = LossWeights {
            positive,
            negative,
            reconstruction,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.positive) || !ok(self.negative) {
            return Err(Error::invalid(
                "loss weights",
                format!("class weights must be finite and positive, got {} / {}", self.positive, self.negative),
            ));
        }
        if !(self.reconstruction.is_finite() && self.reconstruction >= 0.0) {
            return Err(Error::invalid(
                "loss weights",
                format!("reconstruction scale must be finite and >= 0, got {}", self.reconstruction),
            ));
        }
        Ok(())
    }

    /// `N / (2 N+)` and `N / (2 N-)` over a binary target, clamped to
    /// `[0.1, 10]`.
    pub fn inverse_frequency<T: Scalar>(target: &Tensor<T>, reconstruction: f64) -> Self {
        let n = target.len() as f64;
        let pos = target.data().iter().filter(|&&t| t > T::zero()).count() as f64;
        let clamp = |v: f64| v.clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1);
        let weight = |count: f64| if count == 0.0 { WEIGHT_RANGE.1 } else { clamp(n / (2.0 * count)) };
        LossWeights {
            positive: weight(pos),
            negative: weight(n - pos),
            reconstruction,
        }
    }
}

/// Reconstruction scale used when none is configured: `0.0005` per pixel.
pub fn default_reconstruction_scale(pixels: usize) -> f64 {
    0.0005 * pixels as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginParams {
    pub upper: f64,
    pub lower: f64,
    /// Down-weighting of the negative-class hinge.
    pub negative_scale: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams {
            upper: 0.9,
            lower: 0.1,
            negative_scale: 0.5,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.upper > self.lower) {
            return Err(Error::invalid(
                "weighted_margin",
                format!("upper margin {} must exceed lower margin {}", self.upper, self.lower),
            ));
        }
        Ok(())
    }
}

/// Which loss drives the segmentation capsule lengths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SegmentationLoss {
    Bce,
    Margin(MarginParams),
}

impl SegmentationLoss {
    pub fn apply<'t, T: Scalar>(&self, lengths: Var<'t, T>, target: &Tensor<T>, weights: &LossWeights) -> Result<Var<'t, T>> {
        match self {
            SegmentationLoss::Bce => weighted_bce(lengths, target, weights),
            SegmentationLoss::Margin(m) => weighted_margin(lengths, target, weights, m),
        }
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shapes(op, a, b))
    }
}

/// Per-pixel class coefficients `(w+ t, w- (1 - t))`.
fn class_coefficients<T: Scalar>(target: &Tensor<T>, positive: f64, negative: f64) -> (Tensor<T>, Tensor<T>) {
    let (wp, wn): (T, T) = (lit(positive), lit(negative));
    (target.map(|t| wp * t), target.map(|t| wn * (T::one() - t)))
}

/// `-mean[w+ t ln p + w- (1 - t) ln(1 - p)]` with `p` clamped to `[EPS, 1 - EPS]`.
pub fn weighted_bce<'t, T: Scalar>(lengths: Var<'t, T>, target: &Tensor<T>, weights: &LossWeights) -> Result<Var<'t, T>> {
    check_same("weighted_bce", &lengths.shape(), target.shape())?;
    let tape = lengths.tape();
    let (pos, neg) = class_coefficients(target, weights.positive, weights.negative);
    let p = lengths.clamp(EPS, 1.0 - EPS)?;
    let log_p = p.ln()?;
    let log_q = p.neg()?.add_scalar(1.0)?.ln()?;
    let terms = log_p.mul(tape.constant(pos))?.add(log_q.mul(tape.constant(neg))?)?;
    terms.mean()?.neg()
}

/// `mean[w+ t max(0, m+ - p)^2 + lambda w- (1 - t) max(0, p - m-)^2]`.
pub fn weighted_margin<'t, T: Scalar>(
    lengths: Var<'t, T>,
    target: &Tensor<T>,
    weights: &LossWeights,
    margin: &MarginParams,
) -> Result<Var<'t, T>> {
    margin.validate()?;
    check_same("weighted_margin", &lengths.shape(), target.shape())?;
    let tape = lengths.tape();
    let (pos, neg) = class_coefficients(target, weights.positive, weights.negative * margin.negative_scale);
    let below = lengths.neg()?.add_scalar(margin.upper)?.relu()?.square()?;
    let above = lengths.add_scalar(-margin.lower)?.relu()?.square()?;
    below
        .mul(tape.constant(pos))?
        .add(above.mul(tape.constant(neg))?)?
        .mean()
}

/// `sum mask (rec - img)^2 / max(1, sum mask)`.
pub fn masked_mse<'t, T: Scalar>(reconstruction: Var<'t, T>, image: &Tensor<T>, mask: &Tensor<T>) -> Result<Var<'t, T>> {
    check_same("masked_mse", &reconstruction.shape(), image.shape())?;
    check_same("masked_mse", image.shape(), mask.shape())?;
    let tape = reconstruction.tape();
    let denom = mask.sum().max(T::one());
    let err = reconstruction.sub(tape.constant(image.clone()))?.square()?;
    let total = err.mul(tape.constant(mask.clone()))?.sum()?;
    total.mul_scalar(1.0 / denom.as_f64())
}

/// `2 |A n B| / (|A| + |B|)` over binary masks; 1 when both are empty.
pub fn dice<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same("dice", pred.shape(), target.shape())?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p > T::zero(), t > T::zero());
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Median; the mean of the two middle values for even counts.
pub fn median(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("median", "no scores to aggregate"));
    }
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let mid = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[mid] } else { (s[mid - 1] + s[mid]) / 2.0 })
}
