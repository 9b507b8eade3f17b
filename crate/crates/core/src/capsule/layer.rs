//! Convolutional and deconvolutional capsule layers.
//!
//! A layer maps a child grid `[H, W, T_in, Z_in]` to a parent grid
//! `[H', W', T_out, Z_out]`. Every child type owns one transformation per
//! kernel offset, shared by all spatial positions:
//! weights are `[kh, kw, T_in, Z_in, T_out, Z_out]`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::routing::{route_traced, RoutingConfig, RoutingState};
use super::CapsuleGrid;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelMode {
    /// Strided convolution geometry: parents are `ceil(H/s) x ceil(W/s)`.
    Conv,
    /// Transposed-convolution geometry: parents are `sH x sW`.
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub mode: KernelMode,
    pub padding: Padding,
}

impl KernelGeometry {
    pub fn conv(k: usize, stride: usize) -> Self {
        KernelGeometry {
            kh: k,
            kw: k,
            stride,
            mode: KernelMode::Conv,
            padding: Padding::Same,
        }
    }

    pub fn deconv(k: usize, stride: usize) -> Self {
        KernelGeometry {
            kh: k,
            kw: k,
            stride,
            mode: KernelMode::Deconv,
            padding: Padding::Same,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid("capsule layer", "stride must be positive"));
        }
        if self.mode == KernelMode::Deconv {
            if !(1..=2).contains(&self.stride) {
                return Err(Error::invalid(
                    "deconv_capsule",
                    format!("unsupported stride {}", self.stride),
                ));
            }
            if self.padding != Padding::Same {
                return Err(Error::invalid("deconv_capsule", "needs same padding"));
            }
        }
        if self.padding == Padding::Same && (self.kh % 2 == 0 || self.kw % 2 == 0) {
            return Err(Error::invalid(
                "capsule layer",
                format!("same padding needs odd kernel extents, got {}x{}", self.kh, self.kw),
            ));
        }
        Ok(())
    }

    /// Parent grid extents for a child grid of `h x w`.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match (self.mode, self.padding) {
            (KernelMode::Deconv, _) => Ok((h * self.stride, w * self.stride)),
            (KernelMode::Conv, Padding::Same) => Ok((h.div_ceil(self.stride), w.div_ceil(self.stride))),
            (KernelMode::Conv, Padding::Valid) => {
                if self.kh > h || self.kw > w {
                    return Err(Error::invalid(
                        "conv_capsule",
                        format!("kernel {}x{} larger than grid {h}x{w}", self.kh, self.kw),
                    ));
                }
                Ok(((h - self.kh) / self.stride + 1, (w - self.kw) / self.stride + 1))
            }
        }
    }

    pub fn slots(&self) -> usize {
        self.kh * self.kw
    }
}

/// Transformation weights for one capsule layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformKernel<T> {
    pub weights: Tensor<T>,
    pub geometry: KernelGeometry,
}

impl<T: Scalar> TransformKernel<T> {
    pub fn new(weights: Tensor<T>, geometry: KernelGeometry) -> Result<Self> {
        geometry.validate()?;
        match *weights.shape() {
            [kh, kw, _, _, _, _] if kh == geometry.kh && kw == geometry.kw => Ok(TransformKernel { weights, geometry }),
            _ => Err(Error::invalid(
                "transform kernel",
                format!(
                    "weights {:?} do not match a {}x{} kernel",
                    weights.shape(),
                    geometry.kh,
                    geometry.kw
                ),
            )),
        }
    }

    /// Uniform initialization scaled by [`capsule_init_bound`].
    pub fn init(
        geometry: KernelGeometry,
        in_types: usize,
        in_dim: usize,
        out_types: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = weight_shape(&geometry, in_types, in_dim, out_types, out_dim);
        let bound = capsule_init_bound(&geometry, in_types, out_types, out_dim);
        Self::new(init_uniform(&shape, bound, rng), geometry)
    }

    pub fn in_types(&self) -> usize {
        self.weights.shape()[2]
    }
    pub fn in_dim(&self) -> usize {
        self.weights.shape()[3]
    }
    pub fn out_types(&self) -> usize {
        self.weights.shape()[4]
    }
    pub fn out_dim(&self) -> usize {
        self.weights.shape()[5]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

pub fn weight_shape(g: &KernelGeometry, in_types: usize, in_dim: usize, out_types: usize, out_dim: usize) -> [usize; 6] {
    [g.kh, g.kw, in_types, in_dim, out_types, out_dim]
}

/// Gain on the capsule weight scale. With uniform coupling `1/T_out` and
/// independent votes, a child of length `|u|` yields a parent input of
/// length about `CAPSULE_GAIN * |u|`, which keeps squashed lengths away from
/// the quadratic collapse of `squash` near zero.
pub const CAPSULE_GAIN: f64 = 2.0;

/// Half-width of the uniform capsule weight distribution.
///
/// The fan-in counts the children that actually vote for one parent: kernel
/// slots times child types, divided by `stride^2` for a deconvolution since
/// the dilated input is mostly zeros.
pub fn capsule_init_bound(g: &KernelGeometry, in_types: usize, out_types: usize, out_dim: usize) -> f64 {
    let mut fan = (g.slots() * in_types) as f64;
    if g.mode == KernelMode::Deconv {
        fan /= (g.stride * g.stride) as f64;
    }
    let variance = CAPSULE_GAIN * CAPSULE_GAIN * (out_types * out_types) as f64 / (out_dim as f64 * fan.max(1.0));
    (3.0 * variance).sqrt()
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Uniform in `[-bound, bound]`.
pub(crate) fn init_uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| lit(dist.sample(rng)))
}

/// Prediction vectors for one layer invocation.
///
/// Stored `[C, P, T_out, Z_out]` with `C = (kernel row, kernel column, child
/// type)` and `P` the row-major parent position.
#[derive(Clone, Debug)]
pub struct PredictionVectors<T> {
    pub votes: Tensor<T>,
    pub out_h: usize,
    pub out_w: usize,
    pub geometry: KernelGeometry,
    pub in_types: usize,
}

impl<T: Scalar> PredictionVectors<T> {
    /// The vote of `child_type` at kernel offset `(ki, kj)` for parent
    /// `parent_type` at parent position `(x, y)`.
    pub fn vote(&self, x: usize, y: usize, child_type: usize, ki: usize, kj: usize, parent_type: usize) -> &[T] {
        let s = self.votes.shape();
        let (p, j, z) = (s[1], s[2], s[3]);
        let c = (ki * self.geometry.kw + kj) * self.in_types + child_type;
        let pos = x * self.out_w + y;
        let off = ((c * p + pos) * j + parent_type) * z;
        &self.votes.data()[off..off + z]
    }
}

fn check_children(children_shape: &[usize], weights_shape: &[usize], g: &KernelGeometry) -> Result<()> {
    let ok = children_shape.len() == 4
        && weights_shape.len() == 6
        && weights_shape[0] == g.kh
        && weights_shape[1] == g.kw
        && children_shape[2] == weights_shape[2]
        && children_shape[3] == weights_shape[3];
    if ok {
        Ok(())
    } else {
        Err(Error::shapes("capsule layer", children_shape, weights_shape))
    }
}

/// Votes `[C, P, T_out, Z_out]` from children `[H, W, T_in, Z_in]`.
pub fn predict_var<'t, T: Scalar>(
    children: Var<'t, T>,
    weights: Var<'t, T>,
    geometry: &KernelGeometry,
) -> Result<(Var<'t, T>, usize, usize)> {
    geometry.validate()?;
    let cs = children.shape();
    let ws = weights.shape();
    check_children(&cs, &ws, geometry)?;
    let (h, w, tin, zin) = (cs[0], cs[1], cs[2], cs[3]);
    let (tout, zout) = (ws[4], ws[5]);
    let (oh, ow) = geometry.output_extent(h, w)?;
    let flat = children.reshape(&[h, w, tin * zin])?;
    let cols = match geometry.mode {
        KernelMode::Conv => flat.conv2d_lower(geometry.kh, geometry.kw, geometry.stride, geometry.padding)?,
        KernelMode::Deconv => flat
            .dilate(geometry.stride)?
            .conv2d_lower(geometry.kh, geometry.kw, 1, Padding::Same)?,
    };
    let c = geometry.slots() * tin;
    let p = oh * ow;
    let cols = cols.reshape(&[p, c, zin])?.permute(&[1, 0, 2])?;
    let kernel = weights.reshape(&[c, zin, tout * zout])?;
    let votes = cols.bmm(kernel)?.reshape(&[c, p, tout, zout])?;
    Ok((votes, oh, ow))
}

/// One capsule layer on a tape: predict, then route.
pub fn capsule_layer<'t, T: Scalar>(
    children: Var<'t, T>,
    weights: Var<'t, T>,
    geometry: &KernelGeometry,
    routing: &RoutingConfig,
) -> Result<Var<'t, T>> {
    capsule_layer_traced(children, weights, geometry, routing, false).map(|(v, _)| v)
}

pub fn capsule_layer_traced<'t, T: Scalar>(
    children: Var<'t, T>,
    weights: Var<'t, T>,
    geometry: &KernelGeometry,
    routing: &RoutingConfig,
    trace: bool,
) -> Result<(Var<'t, T>, RoutingState<T>)> {
    let (votes, oh, ow) = predict_var(children, weights, geometry)?;
    let vs = votes.shape();
    let (parents, state) = route_traced(votes, routing, trace)?;
    Ok((parents.reshape(&[oh, ow, vs[2], vs[3]])?, state))
}

/// Prediction vectors for a concrete grid and kernel.
pub fn predict<T: Scalar>(children: &CapsuleGrid<T>, kernel: &TransformKernel<T>) -> Result<PredictionVectors<T>> {
    let tape = Tape::new();
    let c = tape.constant(children.poses().clone());
    let w = tape.constant(kernel.weights.clone());
    let (votes, out_h, out_w) = predict_var(c, w, &kernel.geometry)?;
    let votes = (*votes.value()).clone();
    Ok(PredictionVectors {
        votes,
        out_h,
        out_w,
        geometry: kernel.geometry,
        in_types: children.num_types(),
    })
}

fn run_layer<T: Scalar>(
    children: &CapsuleGrid<T>,
    kernel: &TransformKernel<T>,
    routing: &RoutingConfig,
) -> Result<(CapsuleGrid<T>, RoutingState<T>)> {
    let tape = Tape::new();
    let c = tape.constant(children.poses().clone());
    let w = tape.constant(kernel.weights.clone());
    let (v, state) = capsule_layer_traced(c, w, &kernel.geometry, routing, true)?;
    Ok((CapsuleGrid::new((*v.value()).clone())?, state))
}

/// Convolutional capsule layer. With `routing_enabled` false the coupling
/// coefficients are uniform and no routing iteration runs.
pub fn conv_capsule<T: Scalar>(
    children: &CapsuleGrid<T>,
    kernel: &TransformKernel<T>,
    iterations: usize,
    routing_enabled: bool,
) -> Result<CapsuleGrid<T>> {
    if kernel.geometry.mode != KernelMode::Conv {
        return Err(Error::invalid("conv_capsule", "kernel is not in conv mode"));
    }
    let routing = RoutingConfig {
        iterations,
        enabled: routing_enabled,
        stop_gradient: false,
    };
    run_layer(children, kernel, &routing).map(|(g, _)| g)
}

/// Deconvolutional capsule layer (transposed-convolution geometry).
pub fn deconv_capsule<T: Scalar>(
    children: &CapsuleGrid<T>,
    kernel: &TransformKernel<T>,
    iterations: usize,
    routing_enabled: bool,
) -> Result<CapsuleGrid<T>> {
    if kernel.geometry.mode != KernelMode::Deconv {
        return Err(Error::invalid("deconv_capsule", "kernel is not in deconv mode"));
    }
    let routing = RoutingConfig {
        iterations,
        enabled: routing_enabled,
        stop_gradient: false,
    };
    run_layer(children, kernel, &routing).map(|(g, _)| g)
}

/// Either layer kind, also returning the routing trace.
pub fn capsule_forward_traced<T: Scalar>(
    children: &CapsuleGrid<T>,
    kernel: &TransformKernel<T>,
    routing: &RoutingConfig,
) -> Result<(CapsuleGrid<T>, RoutingState<T>)> {
    run_layer(children, kernel, routing)
}
