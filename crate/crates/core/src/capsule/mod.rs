//! Capsule grids, routing, capsule layers and the segmentation head.

mod layer;
mod ops;
mod readout;
mod routing;

pub use layer::{
    capsule_forward_traced, capsule_init_bound, capsule_layer, capsule_layer_traced, conv_capsule, deconv_capsule, predict, predict_var,
    weight_shape, KernelGeometry, KernelMode, PredictionVectors, TransformKernel,
};
pub(crate) use layer::{fan_in_bound, init_uniform};
pub use ops::{agreement, norm_last, softmax_last, squash, vote_sum};
pub use readout::{
    decoder_forward, masked_reconstruct, perturb_capsule, segmentation_readout, DenseLayer, Readout,
    ReconstructionDecoder, DEFAULT_THRESHOLD,
};
pub(crate) use readout::threshold_mask;
pub use routing::{route, route_traced, routing_softmax, RoutingConfig, RoutingSnapshot, RoutingState};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An `h x w` grid of capsules: `num_types` capsule types, each a
/// `pose_dim`-vector at every position. Poses are `[h, w, types, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleGrid<T> {
    poses: Tensor<T>,
}

impl<T: Scalar> CapsuleGrid<T> {
    pub fn new(poses: Tensor<T>) -> Result<Self> {
        if poses.rank() != 4 {
            return Err(Error::invalid(
                "capsule grid",
                format!("poses must be [h, w, types, dim], got {:?}", poses.shape()),
            ));
        }
        Ok(CapsuleGrid { poses })
    }

    pub fn zeros(height: usize, width: usize, num_types: usize, pose_dim: usize) -> Self {
        CapsuleGrid {
            poses: Tensor::zeros(&[height, width, num_types, pose_dim]),
        }
    }

    pub fn height(&self) -> usize {
        self.poses.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.poses.shape()[1]
    }
    pub fn num_types(&self) -> usize {
        self.poses.shape()[2]
    }
    pub fn pose_dim(&self) -> usize {
        self.poses.shape()[3]
    }

    pub fn poses(&self) -> &Tensor<T> {
        &self.poses
    }

    pub fn into_poses(self) -> Tensor<T> {
        self.poses
    }

    pub fn pose(&self, x: usize, y: usize, t: usize) -> &[T] {
        let z = self.pose_dim();
        let off = ((x * self.width() + y) * self.num_types() + t) * z;
        &self.poses.data()[off..off + z]
    }

    /// Capsule lengths `[h, w, types]`.
    pub fn lengths(&self) -> Tensor<T> {
        norm_last(&self.poses).expect("rank-4 poses")
    }

    /// Squash every pose in place of the raw inputs.
    pub fn squashed(&self) -> Self {
        CapsuleGrid {
            poses: squash(&self.poses).expect("rank-4 poses"),
        }
    }
}
