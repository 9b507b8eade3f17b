//! Declarative architecture description and its geometry resolution.

use crate::capsule::{KernelGeometry, RoutingConfig, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::loss::{default_reconstruction_scale, LossWeights, MarginParams, SegmentationLoss};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Plain convolution turning the image into one capsule type.
    Conv2d,
    ConvCapsule,
    DeconvCapsule,
    /// Final single-type capsule layer whose lengths form the segmentation.
    Readout,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::ConvCapsule => "conv_capsule",
            LayerKind::DeconvCapsule => "deconv_capsule",
            LayerKind::Readout => "readout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv2d" => Ok(LayerKind::Conv2d),
            "conv_capsule" => Ok(LayerKind::ConvCapsule),
            "deconv_capsule" => Ok(LayerKind::DeconvCapsule),
            "readout" => Ok(LayerKind::Readout),
            other => Err(Error::Config(format!("unknown layer kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Square kernel extent.
    pub kernel: usize,
    pub stride: usize,
    /// Output capsule types; 1 for `Conv2d`.
    pub out_types: usize,
    /// Output pose dimension, or the feature count of `Conv2d`.
    pub out_dim: usize,
    pub routing: RoutingConfig,
    /// Earlier layer whose output is concatenated (along capsule types)
    /// onto this layer's output.
    pub skip: Option<String>,
}

impl LayerSpec {
    pub fn conv2d(name: &str, kernel: usize, features: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv2d,
            kernel,
            stride: 1,
            out_types: 1,
            out_dim: features,
            routing: RoutingConfig::uniform(),
            skip: None,
        }
    }

    pub fn conv_capsule(name: &str, kernel: usize, stride: usize, types: usize, dim: usize, iterations: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::ConvCapsule,
            kernel,
            stride,
            out_types: types,
            out_dim: dim,
            routing: RoutingConfig::dynamic(iterations),
            skip: None,
        }
    }

    pub fn deconv_capsule(name: &str, kernel: usize, stride: usize, types: usize, dim: usize, iterations: usize) -> Self {
        LayerSpec {
            kind: LayerKind::DeconvCapsule,
            ..Self::conv_capsule(name, kernel, stride, types, dim, iterations)
        }
    }

    pub fn readout(name: &str, kernel: usize, dim: usize, iterations: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Readout,
            ..Self::conv_capsule(name, kernel, 1, 1, dim, iterations)
        }
    }

    pub fn with_skip(mut self, source: &str) -> Self {
        self.skip = Some(source.to_string());
        self
    }

    pub fn with_routing(mut self, enabled: bool) -> Self {
        self.routing.enabled = enabled;
        self
    }

    pub fn is_capsule(&self) -> bool {
        self.kind != LayerKind::Conv2d
    }

    pub fn geometry(&self) -> KernelGeometry {
        match self.kind {
            LayerKind::DeconvCapsule => KernelGeometry::deconv(self.kernel, self.stride),
            _ => KernelGeometry::conv(self.kernel, self.stride),
        }
    }
}

/// Spatial extents, capsule types and pose dimension of a layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub types: usize,
    pub dim: usize,
}

/// A layer together with the grids it consumes and produces.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub input: GridShape,
    /// Output before any skip concatenation.
    pub produced: GridShape,
    /// Output after skip concatenation.
    pub output: GridShape,
    /// Index of the skip source layer.
    pub skip: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: SegmentationLoss,
    /// Fixed `(positive, negative)` class weights; `None` derives them per
    /// sample from inverse class frequencies.
    pub class_weights: Option<(f64, f64)>,
    /// Reconstruction scale; `None` uses `0.0005` per pixel.
    pub reconstruction: Option<f64>,
}

impl LossConfig {
    pub fn bce() -> Self {
        LossConfig {
            kind: SegmentationLoss::Bce,
            class_weights: None,
            reconstruction: None,
        }
    }

    pub fn margin() -> Self {
        LossConfig {
            kind: SegmentationLoss::Margin(MarginParams::default()),
            ..Self::bce()
        }
    }

    pub fn weights_for<T: Scalar>(&self, target: &Tensor<T>) -> Result<LossWeights> {
        let rec = self
            .reconstruction
            .unwrap_or_else(|| default_reconstruction_scale(target.len()));
        let w = match self.class_weights {
            Some((p, n)) => LossWeights::new(p, n, rec)?,
            None => LossWeights::inverse_frequency(target, rec),
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: LossConfig,
    pub threshold: f64,
    /// Widths of the reconstruction decoder's 1x1 layers; the last is 1.
    pub decoder_widths: Vec<usize>,
}

fn layer_error(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("layer `{name}`: {msg}"))
}

impl ModelConfig {
    pub fn new(name: &str, input: usize, layers: Vec<LayerSpec>, loss: LossConfig) -> Self {
        ModelConfig {
            name: name.to_string(),
            input_height: input,
            input_width: input,
            layers,
            loss,
            threshold: DEFAULT_THRESHOLD,
            decoder_widths: vec![64, 128, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Check every invariant and compute each layer's grid shapes.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input extents must be positive".into()));
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold {} must be finite and >= 0", self.threshold)));
        }
        if self.decoder_widths.is_empty() || self.decoder_widths.last() != Some(&1) || self.decoder_widths.contains(&0)
        {
            return Err(Error::Config(format!(
                "decoder widths {:?} must be positive and end in 1",
                self.decoder_widths
            )));
        }
        if let SegmentationLoss::Margin(m) = self.loss.kind {
            m.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some((p, n)) = self.loss.class_weights {
            LossWeights::new(p, n, 0.0).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(r) = self.loss.reconstruction {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Config(format!("reconstruction scale {r} must be finite and >= 0")));
            }
        }
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::Config("a model needs a conv2d layer and a readout layer".into()));
        }
        let mut out: Vec<ResolvedLayer> = Vec::with_capacity(n);
        let mut current = GridShape {
            height: self.input_height,
            width: self.input_width,
            types: 1,
            dim: 1,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let name = &layer.name;
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(layer_error(name, "names use letters, digits, `_` and `-` only"));
            }
            if self.layers[..i].iter().any(|l| &l.name == name) || name == "decoder" {
                return Err(layer_error(name, "duplicate or reserved name"));
            }
            match (i, layer.kind) {
                (0, LayerKind::Conv2d) => {}
                (0, _) => return Err(layer_error(name, "the first layer must be conv2d")),
                (_, LayerKind::Conv2d) => return Err(layer_error(name, "conv2d is only allowed first")),
                (i, LayerKind::Readout) if i + 1 != n => {
                    return Err(layer_error(name, "readout must be the last layer"))
                }
                (i, kind) if i + 1 == n && kind != LayerKind::Readout => {
                    return Err(layer_error(name, "the last layer must be a readout"))
                }
                _ => {}
            }
            if layer.kernel == 0 || layer.out_types == 0 || layer.out_dim == 0 {
                return Err(layer_error(name, "kernel, types and dimension must be positive"));
            }
            layer.routing.validate().map_err(|e| layer_error(name, e))?;
            let produced = match layer.kind {
                LayerKind::Conv2d => {
                    if layer.stride != 1 || layer.kernel % 2 == 0 {
                        return Err(layer_error(name, "conv2d needs stride 1 and an odd kernel"));
                    }
                    GridShape {
                        types: 1,
                        dim: layer.out_dim,
                        ..current
                    }
                }
                _ => {
                    if layer.kind == LayerKind::Readout && layer.out_types != 1 {
                        return Err(layer_error(name, "readout needs exactly one capsule type"));
                    }
                    let (h, w) = layer
                        .geometry()
                        .output_extent(current.height, current.width)
                        .map_err(|e| layer_error(name, e))?;
                    GridShape {
                        height: h,
                        width: w,
                        types: layer.out_types,
                        dim: layer.out_dim,
                    }
                }
            };
            let mut output = produced;
            let skip = match &layer.skip {
                None => None,
                Some(src) => {
                    if layer.kind == LayerKind::Readout {
                        return Err(layer_error(name, "readout cannot take a skip connection"));
                    }
                    let j = self.layers[..i]
                        .iter()
                        .position(|l| &l.name == src)
                        .ok_or_else(|| layer_error(name, format!("skip source `{src}` is not an earlier layer")))?;
                    let s = out[j].output;
                    if (s.height, s.width) != (produced.height, produced.width) {
                        return Err(layer_error(
                            name,
                            format!(
                                "output {}x{} does not match skip source `{src}` at {}x{}",
                                produced.height, produced.width, s.height, s.width
                            ),
                        ));
                    }
                    if s.dim != produced.dim {
                        return Err(layer_error(
                            name,
                            format!("pose dimension {} differs from skip source `{src}` ({})", produced.dim, s.dim),
                        ));
                    }
                    output.types += s.types;
                    Some(j)
                }
            };
            out.push(ResolvedLayer {
                input: current,
                produced,
                output,
                skip,
            });
            current = output;
        }
        if (current.height, current.width) != (self.input_height, self.input_width) {
            return Err(Error::Config(format!(
                "final extents {}x{} differ from the input {}x{}",
                current.height, current.width, self.input_height, self.input_width
            )));
        }
        Ok(out)
    }
}
