//! Capsule-network image segmentation with locally-constrained dynamic
//! routing, convolutional and deconvolutional capsule layers, and masked
//! reconstruction.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`). Training uses the
//! `f32` aliases below; gradient checking rebuilds the same model in `f64`.

pub mod autodiff;
pub mod capsule;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testing;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type CapsuleGrid32 = capsule::CapsuleGrid<f32>;
pub type CapsuleGrid64 = capsule::CapsuleGrid<f64>;

/// Cap the worker threads of the parallel kernels. Must run before any
/// parallel work; a second call fails.
pub fn set_thread_count(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
