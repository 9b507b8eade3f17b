//! Image/mask samples: file I/O, augmentation, fold splitting and a
//! synthetic shape set.

mod augment;
mod dataset;
mod folds;
mod image_io;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use dataset::{load_dataset, read_exclusions, save_dataset, MASK_SUFFIX};
pub use folds::{kfold_split, FoldSplit};
pub use image_io::{decode_pfg, decode_pgm, encode_pfg, encode_pgm, quantize, read_gray, write_gray};
pub use synth::{synth_generate, MAX_FOREGROUND, MIN_FOREGROUND};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A grayscale image in `[0, 1]` with its binary mask, both `[height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if image.rank() != 2 || image.shape() != mask.shape() {
            return Err(Error::Dataset(format!(
                "`{id}`: image extents {:?} differ from mask extents {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        if !image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!("`{id}`: image values must lie in [0, 1]")));
        }
        if !mask.data().iter().all(|&m| m == 0.0 || m == 1.0) {
            return Err(Error::Dataset(format!("`{id}`: mask values must be 0 or 1")));
        }
        Ok(Sample { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&m| m as f64).sum::<f64>() / self.mask.len() as f64
    }
}
