//! Segmentation readout and masked reconstruction.

use rand::Rng;

use super::{fan_in_bound, init_uniform, CapsuleGrid};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Readout<T> {
    /// 1 where the capsule length exceeds the threshold, else 0.
    pub mask: Tensor<T>,
    pub lengths: Tensor<T>,
}

/// Threshold the lengths of a single-type capsule grid.
pub fn segmentation_readout<T: Scalar>(grid: &CapsuleGrid<T>, threshold: f64) -> Result<Readout<T>> {
    if grid.num_types() != 1 {
        return Err(Error::invalid(
            "segmentation_readout",
            format!("final grid must have exactly one capsule type, got {}", grid.num_types()),
        ));
    }
    let lengths = grid.lengths().into_reshape(&[grid.height(), grid.width()])?;
    Ok(Readout {
        mask: threshold_mask(&lengths, threshold),
        lengths,
    })
}

pub(crate) fn threshold_mask<T: Scalar>(lengths: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t: T = lit(threshold);
    lengths.map(|l| if l > t { T::one() } else { T::zero() })
}

/// One 1x1 convolution: `weight` is `[in, out]`, `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Three (or more) stacked 1x1 convolutions: rectified-linear between
/// layers, logistic on the single output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionDecoder<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> ReconstructionDecoder<T> {
    /// `widths` lists every layer's output width; the last must be 1.
    pub fn init(in_dim: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.last() != Some(&1) {
            return Err(Error::Config(format!("decoder widths {widths:?} must end in 1")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan = in_dim;
        for &w in widths {
            layers.push(DenseLayer {
                weight: init_uniform(&[fan, w], fan_in_bound(fan), rng),
                bias: Tensor::zeros(&[w]),
            });
            fan = w;
        }
        Ok(ReconstructionDecoder { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }
}

/// Zero the capsules outside `mask`, then decode each position through the
/// 1x1 stack. `poses` is `[h, w, t, z]`, `mask` is `[h, w]`; output `[h, w]`.
pub fn decoder_forward<'t, T: Scalar>(poses: Var<'t, T>, mask: Var<'t, T>, layers: &[(Var<'t, T>, Var<'t, T>)]) -> Result<Var<'t, T>> {
    let ps = poses.shape();
    let ms = mask.shape();
    if ps.len() != 4 || ms != [ps[0], ps[1]] {
        return Err(Error::shapes("masked_reconstruct", &ps, &ms));
    }
    let (h, w, t, z) = (ps[0], ps[1], ps[2], ps[3]);
    let masked = poses.mul(mask.reshape(&[h, w, 1, 1])?)?;
    let mut x = masked.reshape(&[h * w, t * z])?;
    for (i, (weight, bias)) in layers.iter().enumerate() {
        x = x.matmul(*weight)?.add(*bias)?;
        x = if i + 1 == layers.len() { x.sigmoid()? } else { x.relu()? };
    }
    x.reshape(&[h, w])
}

/// Masked reconstruction of a concrete grid.
pub fn masked_reconstruct<T: Scalar>(
    grid: &CapsuleGrid<T>,
    positive_mask: &Tensor<T>,
    decoder: &ReconstructionDecoder<T>,
) -> Result<Tensor<T>> {
    if positive_mask.shape() != [grid.height(), grid.width()] {
        return Err(Error::shapes(
            "masked_reconstruct",
            &[grid.height(), grid.width()],
            positive_mask.shape(),
        ));
    }
    if decoder.in_dim() != grid.num_types() * grid.pose_dim() {
        return Err(Error::invalid(
            "masked_reconstruct",
            format!(
                "decoder expects {} inputs, grid has {} x {}",
                decoder.in_dim(),
                grid.num_types(),
                grid.pose_dim()
            ),
        ));
    }
    let tape = Tape::new();
    let poses = tape.constant(grid.poses().clone());
    let mask = tape.constant(positive_mask.clone());
    let layers: Vec<_> = decoder
        .layers
        .iter()
        .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
        .collect();
    let out = decoder_forward(poses, mask, &layers)?;
    let value = (*out.value()).clone();
    Ok(value)
}

/// Shift pose component `dim` by each delta at every positive position and
/// reconstruct; one image per delta.
pub fn perturb_capsule<T: Scalar>(
    grid: &CapsuleGrid<T>,
    positive_mask: &Tensor<T>,
    decoder: &ReconstructionDecoder<T>,
    dim: usize,
    deltas: &[f64],
) -> Result<Vec<Tensor<T>>> {
    if dim >= grid.pose_dim() {
        return Err(Error::invalid(
            "perturb_capsule",
            format!("dimension {dim} outside pose dimension {}", grid.pose_dim()),
        ));
    }
    let (h, w, t, z) = (grid.height(), grid.width(), grid.num_types(), grid.pose_dim());
    deltas
        .iter()
        .map(|&delta| {
            let d: T = lit(delta);
            let mut poses = grid.poses().clone();
            let data = poses.data_mut();
            for pos in 0..h * w {
                if positive_mask.data()[pos] == T::zero() {
                    continue;
                }
                for ti in 0..t {
                    data[(pos * t + ti) * z + dim] += d;
                }
            }
            masked_reconstruct(&CapsuleGrid::new(poses)?, positive_mask, decoder)
        })
        .collect()
}
