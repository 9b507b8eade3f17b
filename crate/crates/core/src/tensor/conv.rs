//! Patch lowering (im2col) and its adjoint for `(h, w, c)` grids.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output position `(x, y)` reads the patch centered at `(x*s, y*s)`;
    /// positions outside the input read as zero. Needs odd kernel extents.
    Same,
    /// Output position `(x, y)` reads the patch whose top-left corner is
    /// `(x*s, y*s)`; no padding.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Geometry {
    pub fn new(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid("conv2d_lower", "kernel extents and stride must be positive"));
        }
        match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::invalid(
                        "conv2d_lower",
                        format!("same padding needs odd kernel extents, got {kh}x{kw}"),
                    ));
                }
                let (pad_h, pad_w) = ((kh - 1) / 2, (kw - 1) / 2);
                if kh > in_h + 2 * pad_h || kw > in_w + 2 * pad_w {
                    return Err(Error::invalid(
                        "conv2d_lower",
                        format!("kernel {kh}x{kw} larger than padded input {in_h}x{in_w}"),
                    ));
                }
                Ok(Geometry {
                    in_h,
                    in_w,
                    out_h: in_h.div_ceil(stride),
                    out_w: in_w.div_ceil(stride),
                    kh,
                    kw,
                    stride,
                    pad_h,
                    pad_w,
                })
            }
            Padding::Valid => {
                if kh > in_h || kw > in_w {
                    return Err(Error::invalid(
                        "conv2d_lower",
                        format!("kernel {kh}x{kw} larger than input {in_h}x{in_w}"),
                    ));
                }
                Ok(Geometry {
                    in_h,
                    in_w,
                    out_h: (in_h - kh) / stride + 1,
                    out_w: (in_w - kw) / stride + 1,
                    kh,
                    kw,
                    stride,
                    pad_h: 0,
                    pad_w: 0,
                })
            }
        }
    }

    /// Input coordinate read by output `o` at kernel offset `k`, if in bounds.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn grid_dims<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::invalid(op, format!("expected an h x w x c tensor, got {:?}", x.shape()))),
    }
}

/// Lower `input` (`h x w x c`) to `h' x w' x (kh*kw*c)` patches; each row
/// is the flattened `kh x kw x c` patch in row-major order.
pub fn conv2d_lower<T: Scalar>(
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (h, w, c) = grid_dims("conv2d_lower", input)?;
    let g = Geometry::new(h, w, kh, kw, stride, padding)?;
    Ok(lower(input, &g, c))
}

pub(crate) fn lower<T: Scalar>(input: &Tensor<T>, g: &Geometry, c: usize) -> Tensor<T> {
    let row = g.kh * g.kw * c;
    let mut out = vec![T::zero(); g.out_h * g.out_w * row];
    let src = input.data();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let dst = &mut out[(oy * g.out_w + ox) * row..][..row];
            for ki in 0..g.kh {
                let Some(iy) = Geometry::source(oy, ki, g.stride, g.pad_h, g.in_h) else {
                    continue;
                };
                for kj in 0..g.kw {
                    let Some(ix) = Geometry::source(ox, kj, g.stride, g.pad_w, g.in_w) else {
                        continue;
                    };
                    let s = (iy * g.in_w + ix) * c;
                    let d = (ki * g.kw + kj) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    Tensor::new(&[g.out_h, g.out_w, row], out).expect("lowered extents are positive")
}

/// Adjoint of [`lower`]: scatter-add patches back onto the input grid.
pub(crate) fn lower_adjoint<T: Scalar>(cols: &Tensor<T>, g: &Geometry, c: usize) -> Tensor<T> {
    let row = g.kh * g.kw * c;
    debug_assert_eq!(cols.shape(), &[g.out_h, g.out_w, row]);
    let mut out = Tensor::zeros(&[g.in_h, g.in_w, c]);
    let dst = out.data_mut();
    let src = cols.data();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let patch = &src[(oy * g.out_w + ox) * row..][..row];
            for ki in 0..g.kh {
                let Some(iy) = Geometry::source(oy, ki, g.stride, g.pad_h, g.in_h) else {
                    continue;
                };
                for kj in 0..g.kw {
                    let Some(ix) = Geometry::source(ox, kj, g.stride, g.pad_w, g.in_w) else {
                        continue;
                    };
                    let d = (iy * g.in_w + ix) * c;
                    let s = (ki * g.kw + kj) * c;
                    for (o, &v) in dst[d..d + c].iter_mut().zip(&patch[s..s + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Transposed-convolution scatter: the exact adjoint of [`conv2d_lower`].
///
/// `cols` is `h x w x (kh*kw*channels)`. With same padding the output is
/// `(s*h) x (s*w) x channels`; with valid padding it is
/// `((h-1)*s + kh) x ((w-1)*s + kw) x channels`. Overlapping contributions sum.
pub fn deconv2d_scatter<T: Scalar>(
    cols: &Tensor<T>,
    channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    if !(1..=2).contains(&stride) {
        return Err(Error::invalid("deconv2d_scatter", format!("unsupported stride {stride}")));
    }
    let (h, w, row) = grid_dims("deconv2d_scatter", cols)?;
    if channels == 0 || row != kh * kw * channels {
        return Err(Error::invalid(
            "deconv2d_scatter",
            format!("patch length {row} does not match {kh}x{kw}x{channels}"),
        ));
    }
    let (in_h, in_w) = match padding {
        Padding::Same => (stride * h, stride * w),
        Padding::Valid => ((h - 1) * stride + kh, (w - 1) * stride + kw),
    };
    let g = Geometry::new(in_h, in_w, kh, kw, stride, padding)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok(lower_adjoint(cols, &g, channels))
}

/// Zero-insertion upsampling: `x[i, j]` lands at `(s*i, s*j)` of an
/// `(s*h) x (s*w)` grid.
pub fn dilate<T: Scalar>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (h, w, c) = grid_dims("dilate", x)?;
    if stride == 0 {
        return Err(Error::invalid("dilate", "stride must be positive"));
    }
    let (oh, ow) = (h * stride, w * stride);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let dst = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let d = ((i * stride) * ow + j * stride) * c;
            dst[d..d + c].copy_from_slice(&x.data()[(i * w + j) * c..][..c]);
        }
    }
    Ok(out)
}

/// Adjoint of [`dilate`]: keep every `stride`-th row and column.
pub fn subsample<T: Scalar>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (oh, ow, c) = grid_dims("subsample", x)?;
    if stride == 0 || oh % stride != 0 || ow % stride != 0 {
        return Err(Error::invalid("subsample", format!("stride {stride} does not divide {oh}x{ow}")));
    }
    let (h, w) = (oh / stride, ow / stride);
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let s = ((i * stride) * ow + j * stride) * c;
            out.extend_from_slice(&x.data()[s..s + c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn same_padding_center_patch_is_input() {
        let x = Tensor::from_fn(&[3, 3, 1], |i| 1.0 + i as f64);
        let cols = conv2d_lower(&x, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!(cols.shape(), &[3, 3, 9]);
        let center: Vec<f64> = (0..9).map(|k| cols.get(&[1, 1, k])).collect();
        assert_eq!(center, x.data());
        // corner patch sees zero fill above and left
        assert_eq!(cols.get(&[0, 0, 0]), 0.0);
        assert_eq!(cols.get(&[0, 0, 4]), 1.0);
    }

    #[test]
    fn valid_stride_two_shape() {
        let x = Tensor::<f64>::zeros(&[4, 4, 1]);
        let cols = conv2d_lower(&x, 2, 2, 2, Padding::Valid).unwrap();
        assert_eq!(cols.shape(), &[2, 2, 4]);
    }

    #[test]
    fn rejects_oversized_or_even_same_kernel() {
        let x = Tensor::<f64>::zeros(&[3, 3, 1]);
        assert!(conv2d_lower(&x, 5, 5, 1, Padding::Valid).is_err());
        assert!(conv2d_lower(&x, 2, 2, 1, Padding::Same).is_err());
    }

    #[test]
    fn scatter_shapes_and_zero() {
        let cols = Tensor::<f64>::zeros(&[2, 2, 9]);
        let out = deconv2d_scatter(&cols, 1, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[4, 4, 1]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(deconv2d_scatter(&cols, 1, 3, 3, 3, Padding::Same).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = rng.gen_range(1..=2);
            let (h, w) = (s * rng.gen_range(2..6), s * rng.gen_range(2..6));
            let c = rng.gen_range(1..4);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let x = random(&[h, w, c], &mut rng);
            let cols = conv2d_lower(&x, k, k, s, Padding::Same).unwrap();
            let y = random(cols.shape(), &mut rng);
            let back = deconv2d_scatter(&y, c, k, k, s, Padding::Same).unwrap();
            let lhs = cols.dot(&y).unwrap();
            let rhs = x.dot(&back).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn dilate_subsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 4, 2], &mut rng);
        let y = random(&[6, 8, 2], &mut rng);
        let d = dilate(&x, 2).unwrap();
        assert_eq!(d.shape(), &[6, 8, 2]);
        let lhs = d.dot(&y).unwrap();
        let rhs = x.dot(&subsample(&y, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(subsample(&d, 2).unwrap(), x);
    }
}
