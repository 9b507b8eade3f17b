//! Model construction, forward passes, presets and parameter counting.

mod counting;
mod gradcheck;
mod presets;
mod spec;
mod text;

pub use counting::{
    count_capsule_params, count_unet_params, reduction_percent, sabour_layer_params, LayerCount, UnetConfig,
};
pub use gradcheck::{gradcheck_model, BlockReport, GradcheckOptions};
pub use presets::{preset, PRESETS};
pub use spec::{GridShape, LayerKind, LayerSpec, LossConfig, ModelConfig, ResolvedLayer};
pub use text::{parse_model_config, write_model_config, KeyValues};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::capsule::{
    capsule_init_bound, capsule_layer, decoder_forward, fan_in_bound, init_uniform, weight_shape, RoutingConfig,
};
use crate::error::{Error, Result};
use crate::loss::masked_mse;
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Per-pass adjustments used by gradient checking and ablations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replace the iteration count of every routed layer.
    pub iterations: Option<usize>,
    pub stop_gradient: bool,
    /// Scale the backward signal into one layer's weights by a factor,
    /// leaving the forward pass untouched.
    pub grad_fault: Option<(String, f64)>,
}

/// Length map `[h, w]` and segmentation poses `[h, w, 1, z]`.
pub struct ForwardPass<'t, T: Scalar> {
    pub lengths: Var<'t, T>,
    pub poses: Var<'t, T>,
    /// Every layer's output grid, after skip concatenation.
    pub layers: Vec<Var<'t, T>>,
}

pub struct LossParts<'t, T: Scalar> {
    pub total: Var<'t, T>,
    /// Capsule lengths of the segmentation layer.
    pub lengths: Var<'t, T>,
    pub segmentation: Var<'t, T>,
    pub reconstruction: Option<Var<'t, T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub lengths: Tensor<T>,
    pub mask: Tensor<T>,
    pub reconstruction: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layers: Vec<ResolvedLayer>,
    params: Vec<NamedTensor<T>>,
    /// Index of the first parameter of each layer, then of the decoder.
    offsets: Vec<usize>,
}

fn param_layout(config: &ModelConfig, layers: &[ResolvedLayer]) -> Vec<(String, Vec<usize>, f64)> {
    let mut out = Vec::new();
    for (spec, shapes) in config.layers.iter().zip(layers) {
        let k = spec.kernel;
        match spec.kind {
            LayerKind::Conv2d => {
                out.push((format!("{}.weight", spec.name), vec![k * k, spec.out_dim], fan_in_bound(k * k)));
                out.push((format!("{}.bias", spec.name), vec![spec.out_dim], 0.0));
            }
            _ => {
                let g = spec.geometry();
                let shape = weight_shape(&g, shapes.input.types, shapes.input.dim, spec.out_types, spec.out_dim);
                let bound = capsule_init_bound(&g, shapes.input.types, spec.out_types, spec.out_dim);
                out.push((format!("{}.weight", spec.name), shape.to_vec(), bound));
            }
        }
    }
    let last = layers.last().expect("validated").output;
    let mut fan = last.types * last.dim;
    for (i, &w) in config.decoder_widths.iter().enumerate() {
        out.push((format!("decoder.{i}.weight"), vec![fan, w], fan_in_bound(fan)));
        out.push((format!("decoder.{i}.bias"), vec![w], 0.0));
        fan = w;
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Validate `config` and initialize parameters from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let layers = config.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_layout(&config, &layers)
            .into_iter()
            .map(|(name, shape, bound)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    init_uniform(&shape, bound, &mut rng)
                };
                NamedTensor { name, value }
            })
            .collect();
        Self::assemble(config, layers, params)
    }

    /// Wrap existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: Vec<NamedTensor<T>>) -> Result<Self> {
        let layers = config.resolve()?;
        let layout = param_layout(&config, &layers);
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if *name != p.name || shape[..] != *p.value.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        Self::assemble(config, layers, params)
    }

    fn assemble(config: ModelConfig, layers: Vec<ResolvedLayer>, params: Vec<NamedTensor<T>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(config.layers.len() + 1);
        let mut at = 0;
        for spec in &config.layers {
            offsets.push(at);
            at += if spec.kind == LayerKind::Conv2d { 2 } else { 1 };
        }
        offsets.push(at);
        Ok(Model {
            config,
            layers,
            params,
            offsets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn resolved_layers(&self) -> &[ResolvedLayer] {
        &self.layers
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable scalars per layer, the decoder reported as one entry.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let layer = p.name.split('.').next().unwrap_or_default();
            match out.last_mut() {
                Some((name, n)) if name == layer => *n += p.value.len(),
                _ => out.push((layer.to_string(), p.value.len())),
            }
        }
        out
    }

    /// The layer owning parameter `index`.
    pub fn layer_of_param(&self, index: usize) -> &str {
        match self.offsets.iter().rposition(|&o| o <= index) {
            Some(l) if l < self.config.layers.len() => &self.config.layers[l].name,
            _ => "decoder",
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            offsets: self.offsets.clone(),
        }
    }

    /// Register every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Register every parameter on `tape` as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let want = [self.config.input_height, self.config.input_width];
        if image.shape() != want {
            return Err(Error::shapes("model input", &want, image.shape()));
        }
        Ok(())
    }

    /// Run the network on an `[h, w]` image.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        image: &Tensor<T>,
        options: &ForwardOptions,
    ) -> Result<ForwardPass<'t, T>> {
        self.check_image(image)?;
        if params.len() != self.params.len() {
            return Err(Error::invalid("forward", "parameter count does not match the model"));
        }
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut outputs: Vec<Var<'t, T>> = Vec::with_capacity(self.layers.len());
        let mut x = tape.constant(image.clone()).reshape(&[h, w, 1])?;
        for (l, (spec, shapes)) in self.config.layers.iter().zip(&self.layers).enumerate() {
            let mut weight = params[self.offsets[l]];
            if let Some((name, factor)) = &options.grad_fault {
                if *name == spec.name {
                    weight = weight.scale_grad(*factor)?;
                }
            }
            let produced = match spec.kind {
                LayerKind::Conv2d => {
                    let bias = params[self.offsets[l] + 1];
                    let cols = x.conv2d_lower(spec.kernel, spec.kernel, 1, Padding::Same)?;
                    let cols = cols.reshape(&[h * w, spec.kernel * spec.kernel])?;
                    let features = cols.matmul(weight)?.add(bias)?.relu()?;
                    features.reshape(&[h, w, 1, spec.out_dim])?
                }
                _ => {
                    let mut routing: RoutingConfig = spec.routing;
                    if let Some(d) = options.iterations {
                        routing.iterations = d;
                    }
                    routing.stop_gradient |= options.stop_gradient;
                    capsule_layer(x, weight, &spec.geometry(), &routing)?
                }
            };
            let out = match shapes.skip {
                Some(j) => Var::concat(&[produced, outputs[j]], 2)?,
                None => produced,
            };
            outputs.push(out);
            x = out;
        }
        let lengths = x.norm_last()?.reshape(&[h, w])?;
        Ok(ForwardPass {
            lengths,
            poses: x,
            layers: outputs,
        })
    }

    fn decoder_vars<'t>(&self, params: &[Var<'t, T>]) -> Vec<(Var<'t, T>, Var<'t, T>)> {
        params[self.offsets[self.config.layers.len()]..]
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect()
    }

    /// Masked reconstruction `[h, w]` from segmentation poses.
    pub fn reconstruct<'t>(&self, params: &[Var<'t, T>], poses: Var<'t, T>, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        decoder_forward(poses, mask, &self.decoder_vars(params))
    }

    /// Segmentation loss plus the weighted masked reconstruction loss; the
    /// reconstruction sees poses masked by the ground truth.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        image: &Tensor<T>,
        target: &Tensor<T>,
        options: &ForwardOptions,
    ) -> Result<LossParts<'t, T>> {
        self.check_image(target)?;
        let pass = self.forward(tape, params, image, options)?;
        let weights = self.config.loss.weights_for(target)?;
        let segmentation = self.config.loss.kind.apply(pass.lengths, target, &weights)?;
        if weights.reconstruction == 0.0 {
            return Ok(LossParts {
                total: segmentation,
                lengths: pass.lengths,
                segmentation,
                reconstruction: None,
            });
        }
        let rec = self.reconstruct(params, pass.poses, tape.constant(target.clone()))?;
        let rec_loss = masked_mse(rec, image, target)?;
        let total = segmentation.add(rec_loss.mul_scalar(weights.reconstruction)?)?;
        Ok(LossParts {
            total,
            lengths: pass.lengths,
            segmentation,
            reconstruction: Some(rec_loss),
        })
    }

    /// Length map, thresholded mask and the reconstruction masked by the
    /// predicted mask.
    pub fn predict(&self, image: &Tensor<T>, threshold: f64) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let params = self.bind_constant(&tape);
        let pass = self.forward(&tape, &params, image, &ForwardOptions::default())?;
        let lengths = (*pass.lengths.value()).clone();
        let mask = crate::capsule::threshold_mask(&lengths, threshold);
        let rec = self.reconstruct(&params, pass.poses, tape.constant(mask.clone()))?;
        let reconstruction = (*rec.value()).clone();
        Ok(Prediction {
            lengths,
            mask,
            reconstruction,
        })
    }

    /// Final segmentation poses `[h, w, 1, z]` for an image.
    pub fn segmentation_poses(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let params = self.bind_constant(&tape);
        let pass = self.forward(&tape, &params, image, &ForwardOptions::default())?;
        let poses = (*pass.poses.value()).clone();
        Ok(poses)
    }

    /// The reconstruction decoder as a standalone value.
    pub fn decoder(&self) -> crate::capsule::ReconstructionDecoder<T> {
        let start = self.offsets[self.config.layers.len()];
        crate::capsule::ReconstructionDecoder {
            layers: self.params[start..]
                .chunks(2)
                .map(|c| crate::capsule::DenseLayer {
                    weight: c[0].value.clone(),
                    bias: c[1].value.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests;
