//! Closed-form parameter counts.

use super::spec::GridShape;
use crate::error::{Error, Result};

/// One row of a parameter table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub count: u64,
}

/// Transformation weights between a child grid and `parent_types` parents
/// of dimension `parent_dim`.
///
/// Fully connected: every child capsule at every position owns one matrix
/// per parent. Shared: one `kernel x kernel` stack per child type, reused
/// across positions.
pub fn count_capsule_params(
    child: GridShape,
    parent_types: usize,
    parent_dim: usize,
    kernel: (usize, usize),
    fully_connected: bool,
) -> u64 {
    let u = |v: usize| v as u64;
    if fully_connected {
        u(parent_types) * u(child.height * child.width * child.types) * u(parent_dim) * u(child.dim)
    } else {
        u(child.types) * u(kernel.0) * u(kernel.1) * u(child.dim) * u(parent_types) * u(parent_dim)
    }
}

/// 32 types of 6x6 8-dimensional capsules routed to 10 16-dimensional
/// capsules, fully connected.
pub fn sabour_layer_params() -> u64 {
    let child = GridShape {
        height: 6,
        width: 6,
        types: 32,
        dim: 8,
    };
    count_capsule_params(child, 10, 16, (1, 1), true)
}

/// Encoder-decoder reference network: two 3x3 convolutions per level,
/// 2x2 transposed-convolution upsampling, concatenated skips and a 1x1 head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Channel widths from the top level down to the bottleneck.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: 1,
            classes: 1,
            widths: vec![64, 128, 256, 512, 1024],
            kernel: 3,
        }
    }
}

fn conv(k: usize, cin: usize, cout: usize) -> u64 {
    (k * k * cin * cout + cout) as u64
}

/// Per-layer weights and biases of the reference network.
pub fn count_unet_params(config: &UnetConfig) -> Vec<LayerCount> {
    let k = config.kernel;
    let mut rows = Vec::new();
    let mut push = |name: String, count| rows.push(LayerCount { name, count });
    let mut cin = config.in_channels;
    for (level, &c) in config.widths.iter().enumerate() {
        push(format!("down{level}.conv1"), conv(k, cin, c));
        push(format!("down{level}.conv2"), conv(k, c, c));
        cin = c;
    }
    for level in (0..config.widths.len().saturating_sub(1)).rev() {
        let c = config.widths[level];
        push(format!("up{level}.upconv"), conv(2, cin, c));
        push(format!("up{level}.conv1"), conv(k, 2 * c, c));
        push(format!("up{level}.conv2"), conv(k, c, c));
        cin = c;
    }
    push("head".to_string(), conv(1, cin, config.classes));
    rows
}

/// `100 (1 - model / reference)`.
pub fn reduction_percent(model: u64, reference: u64) -> Result<f64> {
    if reference == 0 {
        return Err(Error::invalid("reduction", "reference count is zero"));
    }
    Ok(100.0 * (1.0 - model as f64 / reference as f64))
}
