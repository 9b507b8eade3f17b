//! Whole-model gradient checking against central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ForwardOptions, Model};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::gradcheck::{block_floor, central_difference, relative_error};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Entries sampled per parameter tensor; `None` checks every entry.
    pub entries_per_block: Option<usize>,
    pub seed: u64,
    pub forward: ForwardOptions,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-4,
            entries_per_block: Some(24),
            seed: 0,
            forward: ForwardOptions::default(),
        }
    }
}

/// Worst relative error over the checked entries of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub layer: String,
    pub param: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

fn total_loss(model: &Model<f64>, image: &Tensor<f64>, target: &Tensor<f64>, options: &ForwardOptions) -> Result<f64> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let loss = model.loss(&tape, &params, image, target, options)?;
    let value = loss.total.value().item();
    Ok(value)
}

/// Compare the backward pass of the full training loss with central
/// differences, one report per parameter tensor.
pub fn gradcheck_model(
    model: &Model<f64>,
    image: &Tensor<f64>,
    target: &Tensor<f64>,
    options: &GradcheckOptions,
) -> Result<Vec<BlockReport>> {
    let analytic = {
        let tape = Tape::new();
        let params = model.bind(&tape);
        let loss = model.loss(&tape, &params, image, target, &options.forward)?;
        let grads = tape.backward(loss.total)?;
        params.iter().map(|&p| grads.get_or_zeros(p)).collect::<Vec<_>>()
    };
    // the perturbed passes must not carry the injected fault's own effect
    let plain = ForwardOptions {
        grad_fault: None,
        ..options.forward.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = model.clone();
    let mut reports = Vec::with_capacity(analytic.len());
    for (i, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let indices: Vec<usize> = match options.entries_per_block {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(indices.len());
        for &j in &indices {
            let x = probe.params()[i].value.data()[j];
            let eval = |v: f64| {
                probe.params_mut()[i].value.data_mut()[j] = v;
                total_loss(&probe, image, target, &plain)
            };
            let n = central_difference(eval, x, options.eps);
            probe.params_mut()[i].value.data_mut()[j] = x;
            numeric.push(n?);
        }
        let floor = block_floor(&numeric);
        let worst = indices
            .iter()
            .zip(&numeric)
            .map(|(&j, &num)| relative_error(grad.data()[j], num, floor))
            .fold(0.0f64, f64::max);
        reports.push(BlockReport {
            layer: model.layer_of_param(i).to_string(),
            param: model.params()[i].name.clone(),
            checked: indices.len(),
            max_rel_error: worst,
        });
    }
    Ok(reports)
}
