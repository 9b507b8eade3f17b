//! Named architectures.

use super::spec::{LayerSpec, LossConfig, ModelConfig};
use crate::error::{Error, Result};

pub const PRESETS: &[&str] = &[
    "segcaps",
    "segcaps-r1",
    "segcaps-small",
    "segcaps-r1-small",
    "segcaps-tiny",
    "segcaps-r1-tiny",
    "baseline-caps",
    "baseline-caps-small",
];

/// Encoder-decoder layout shared by every SegCaps size. `stages` lists
/// `(types, dim)` per encoder stage; every stage is a stride-1 layer
/// followed by a stride-2 layer, and the decoder mirrors it with stride-2
/// deconvolutions and skip concatenation.
fn segcaps(name: &str, input: usize, stem: (usize, usize), kernel: usize, stages: &[(usize, usize)], seg_dim: usize) -> ModelConfig {
    let d = 3;
    let mut layers = vec![LayerSpec::conv2d("conv1", stem.0, stem.1)];
    for (i, &(types, dim)) in stages.iter().enumerate() {
        let s = i + 1;
        layers.push(LayerSpec::conv_capsule(&format!("enc{s}a"), kernel, 1, types, dim, d));
        layers.push(LayerSpec::conv_capsule(&format!("enc{s}b"), kernel, 2, types, dim, d));
    }
    for i in (0..stages.len()).rev() {
        let s = i + 1;
        let (types, dim) = if i == 0 { (1, stages[0].1) } else { (stages[i - 1].0, stages[i - 1].1) };
        layers.push(
            LayerSpec::deconv_capsule(&format!("dec{s}"), kernel, 2, types, dim, d).with_skip(&format!("enc{s}a")),
        );
        if i > 0 {
            layers.push(LayerSpec::conv_capsule(&format!("dec{s}c"), kernel, 1, types, dim, d));
        }
    }
    layers.push(LayerSpec::readout("seg", 1, seg_dim, d));
    ModelConfig::new(name, input, layers, LossConfig::bce())
}

/// Equal-weight coupling on every layer that keeps the spatial extents.
fn routing_on_resampling_only(mut config: ModelConfig, name: &str) -> ModelConfig {
    config.name = name.to_string();
    for layer in config.layers.iter_mut().filter(|l| l.is_capsule()) {
        layer.routing.enabled = layer.stride != 1;
    }
    config
}

fn baseline(name: &str, input: usize, features: usize, kernel: usize, primary: (usize, usize)) -> ModelConfig {
    let layers = vec![
        LayerSpec::conv2d("conv1", 5, features),
        LayerSpec::conv_capsule("primary", kernel, 1, primary.0, primary.1, 3),
        LayerSpec::readout("seg", kernel, 16, 3),
    ];
    ModelConfig::new(name, input, layers, LossConfig::margin())
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    let full_stages = [(2, 16), (4, 16), (8, 16)];
    let small_stages = [(2, 8), (4, 8)];
    let tiny_stages = [(2, 4), (4, 4)];
    let mut config = match name {
        "segcaps" => segcaps(name, 512, (5, 16), 5, &full_stages, 16),
        "segcaps-r1" => routing_on_resampling_only(preset("segcaps")?, name),
        "segcaps-small" => {
            let mut c = segcaps(name, 64, (5, 16), 3, &small_stages, 16);
            c.decoder_widths = vec![16, 32, 1];
            c
        }
        "segcaps-r1-small" => routing_on_resampling_only(preset("segcaps-small")?, name),
        "segcaps-tiny" => {
            let mut c = segcaps(name, 16, (3, 16), 3, &tiny_stages, 4);
            c.decoder_widths = vec![8, 8, 1];
            c
        }
        "segcaps-r1-tiny" => routing_on_resampling_only(preset("segcaps-tiny")?, name),
        "baseline-caps" => baseline(name, 512, 256, 5, (32, 8)),
        "baseline-caps-small" => {
            let mut c = baseline(name, 64, 16, 5, (2, 8));
            c.decoder_widths = vec![16, 32, 1];
            c
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    config.name = name.to_string();
    Ok(config)
}
