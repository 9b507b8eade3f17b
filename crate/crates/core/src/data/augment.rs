//! Random label-preserving transforms applied identically to image and mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which transforms may fire, how often, and how strongly.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Independent chance that each enabled transform is applied.
    pub probability: f64,
    pub scale: bool,
    pub flip: bool,
    pub shift: bool,
    pub rotate: bool,
    pub elastic: bool,
    pub noise: bool,
    /// Zoom factor drawn from `[1 - r, 1 + r]`.
    pub scale_range: f64,
    /// Shift drawn from `±fraction` of each extent.
    pub shift_fraction: f64,
    pub max_rotation_degrees: f64,
    /// Largest elastic displacement as a fraction of the larger extent.
    pub elastic_alpha: f64,
    /// Gaussian smoothing of the displacement field, in pixels.
    pub elastic_sigma: f64,
    /// Standard deviation of the additive image noise.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.5,
            scale: true,
            flip: true,
            shift: true,
            rotate: true,
            elastic: true,
            noise: true,
            scale_range: 0.1,
            shift_fraction: 0.1,
            max_rotation_degrees: 15.0,
            elastic_alpha: 0.015,
            elastic_sigma: 8.0,
            noise_std: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off; `augment` returns its input unchanged.
    pub fn disabled() -> Self {
        AugmentConfig {
            scale: false,
            flip: false,
            shift: false,
            rotate: false,
            elastic: false,
            noise: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.probability == 0.0 || !(self.scale || self.flip || self.shift || self.rotate || self.elastic || self.noise)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("probability", (0.0..=1.0).contains(&self.probability)),
            ("scale_range", (0.0..1.0).contains(&self.scale_range)),
            ("shift_fraction", (0.0..=1.0).contains(&self.shift_fraction)),
            ("max_rotation_degrees", (0.0..=180.0).contains(&self.max_rotation_degrees)),
            ("elastic_alpha", self.elastic_alpha >= 0.0 && self.elastic_alpha.is_finite()),
            ("elastic_sigma", self.elastic_sigma > 0.0 && self.elastic_sigma.is_finite()),
            ("noise_std", self.noise_std >= 0.0 && self.noise_std.is_finite()),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::invalid("augment", format!("`{name}` out of range"))),
            None => Ok(()),
        }
    }
}

/// Composite inverse map from output pixel to source coordinates.
struct Warp {
    scale: Option<f64>,
    flip: bool,
    shift: Option<(f64, f64)>,
    /// `(cos, sin)` of the rotation angle.
    rotation: Option<(f64, f64)>,
    /// Per-pixel `(dx, dy)`.
    displacement: Option<Vec<(f64, f64)>>,
}

impl Warp {
    fn is_identity(&self) -> bool {
        self.scale.is_none()
            && !self.flip
            && self.shift.is_none()
            && self.rotation.is_none()
            && self.displacement.is_none()
    }

    /// Source `(x, y)` of output pixel `(x, y)`, undoing the transforms in
    /// reverse order of application.
    fn source(&self, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (mut sx, mut sy) = (x as f64, y as f64);
        if let Some(d) = &self.displacement {
            let (dx, dy) = d[y * w + x];
            sx += dx;
            sy += dy;
        }
        if let Some((c, s)) = self.rotation {
            let (px, py) = (sx - cx, sy - cy);
            sx = cx + c * px + s * py;
            sy = cy - s * px + c * py;
        }
        if let Some((dx, dy)) = self.shift {
            sx -= dx;
            sy -= dy;
        }
        if self.flip {
            sx = w as f64 - 1.0 - sx;
        }
        if let Some(s) = self.scale {
            sx = cx + (sx - cx) / s;
            sy = cy + (sy - cy) / s;
        }
        (sx, sy)
    }
}

/// Bilinear sample with zeros outside the grid.
fn bilinear(data: &[f32], h: usize, w: usize, sx: f64, sy: f64) -> f32 {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
            let weight = wx * wy;
            if weight != 0.0 && (0..w as i64).contains(&xi) && (0..h as i64).contains(&yi) {
                acc += weight * data[yi as usize * w + xi as usize] as f64;
            }
        }
    }
    acc.clamp(0.0, 1.0) as f32
}

/// Nearest-neighbour sample with zeros outside the grid.
fn nearest(data: &[f32], h: usize, w: usize, sx: f64, sy: f64) -> f32 {
    let (xi, yi) = (sx.round() as i64, sy.round() as i64);
    if (0..w as i64).contains(&xi) && (0..h as i64).contains(&yi) {
        data[yi as usize * w + xi as usize]
    } else {
        0.0
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let o = i as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + o).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + o).clamp(0, h as i64 - 1) as usize)
                    };
                    acc += kv * src[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Smoothed random displacement field whose largest component is `magnitude`.
fn displacement_field(h: usize, w: usize, magnitude: f64, sigma: f64, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let mut raw = || -> Vec<f64> { (0..h * w).map(|_| rng.gen_range(-1.0..=1.0)).collect() };
    let (fx, fy) = (raw(), raw());
    let (fx, fy) = (blur(&fx, h, w, sigma), blur(&fy, h, w, sigma));
    let peak = fx.iter().chain(&fy).fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { magnitude / peak } else { 0.0 };
    fx.into_iter().zip(fy).map(|(dx, dy)| (dx * gain, dy * gain)).collect()
}

/// Randomly transform `sample` with transforms drawn from `seed`.
///
/// Geometric transforms are composed into a single resampling: bilinear
/// for the image, nearest-neighbour for the mask, zeros outside the grid.
/// Coin flips and parameters are drawn for every transform in a fixed
/// order, so disabling one transform does not change the others' draws.
pub fn augment(sample: &Sample, seed: u64, config: &AugmentConfig) -> Sample {
    if config.is_identity() {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (sample.height(), sample.width());
    let p = config.probability;
    let coin = |rng: &mut ChaCha8Rng| rng.gen::<f64>() < p;

    let fire = coin(&mut rng);
    let factor = rng.gen_range(1.0 - config.scale_range..=1.0 + config.scale_range);
    let scale = (config.scale && fire).then_some(factor);

    let flip = coin(&mut rng) && config.flip;

    let fire = coin(&mut rng);
    let dx = rng.gen_range(-1.0..=1.0) * config.shift_fraction * w as f64;
    let dy = rng.gen_range(-1.0..=1.0) * config.shift_fraction * h as f64;
    let shift = (config.shift && fire).then_some((dx, dy));

    let fire = coin(&mut rng);
    let angle = rng.gen_range(-1.0..=1.0) * config.max_rotation_degrees.to_radians();
    let rotation = (config.rotate && fire).then_some((angle.cos(), angle.sin()));

    let displacement = (coin(&mut rng) && config.elastic).then(|| {
        let magnitude = config.elastic_alpha * h.max(w) as f64;
        displacement_field(h, w, magnitude, config.elastic_sigma, &mut rng)
    });

    let warp = Warp {
        scale,
        flip,
        shift,
        rotation,
        displacement,
    };
    let (mut image, mask) = if warp.is_identity() {
        (sample.image.clone(), sample.mask.clone())
    } else {
        let mut image = vec![0.0f32; h * w];
        let mut mask = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = warp.source(x, y, h, w);
                image[y * w + x] = bilinear(sample.image.data(), h, w, sx, sy);
                mask[y * w + x] = nearest(sample.mask.data(), h, w, sx, sy);
            }
        }
        (
            Tensor::new(&[h, w], image).expect("extents unchanged"),
            Tensor::new(&[h, w], mask).expect("extents unchanged"),
        )
    };

    if coin(&mut rng) && config.noise && config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).expect("validated noise std");
        for v in image.data_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use proptest::prelude::*;

    fn blocks(h: usize, w: usize) -> Sample {
        let mask = Tensor::from_fn(&[h, w], |i| {
            let (y, x) = (i / w, i % w);
            if (y / 5 + x / 7) % 2 == 0 && y > 2 {
                1.0
            } else {
                0.0
            }
        });
        Sample::new("b", mask.clone(), mask).unwrap()
    }

    fn only(f: impl FnOnce(&mut AugmentConfig)) -> AugmentConfig {
        let mut c = AugmentConfig {
            probability: 1.0,
            ..AugmentConfig::disabled()
        };
        f(&mut c);
        c
    }

    #[test]
    fn disabled_is_identity() {
        let s = blocks(20, 24);
        for seed in 0..5 {
            assert_eq!(augment(&s, seed, &AugmentConfig::disabled()), s);
        }
        let never = AugmentConfig {
            probability: 0.0,
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&s, 1, &never), s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = synth_generate(1, 32, 40, 3).unwrap().remove(0);
        let c = only(|c| c.flip = true);
        let once = augment(&s, 8, &c);
        assert_ne!(once, s);
        assert_eq!(once.image.data()[0], s.image.data()[39]);
        assert_eq!(augment(&once, 8, &c), s);
    }

    #[test]
    fn identical_draws_for_identical_seeds() {
        let s = blocks(24, 24);
        let c = AugmentConfig::default();
        assert_eq!(augment(&s, 42, &c), augment(&s, 42, &c));
    }

    #[test]
    fn disabling_one_transform_keeps_the_others() {
        let s = blocks(24, 24);
        let flip = only(|c| c.flip = true);
        let flip_and_noise = only(|c| {
            c.flip = true;
            c.noise = true;
            c.noise_std = 0.0;
        });
        assert_eq!(augment(&s, 5, &flip), augment(&s, 5, &flip_and_noise));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn extents_and_binary_mask_are_preserved(seed: u64, h in 8usize..28, w in 8usize..28) {
            let s = blocks(h, w);
            let out = augment(&s, seed, &AugmentConfig { probability: 0.8, ..AugmentConfig::default() });
            prop_assert_eq!(out.image.shape(), &[h, w]);
            prop_assert!(out.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn geometry_keeps_image_and_mask_paired(seed: u64) {
            // piecewise-constant image equal to its mask: wherever bilinear
            // interpolation is not mixing levels the two must agree
            let s = blocks(30, 34);
            let c = AugmentConfig { probability: 0.8, noise: false, ..AugmentConfig::default() };
            let out = augment(&s, seed, &c);
            for (&v, &m) in out.image.data().iter().zip(out.mask.data()) {
                if v == 0.0 || v == 1.0 {
                    prop_assert_eq!(v, m);
                }
            }
        }
    }

    #[test]
    fn elastic_changes_few_mask_pixels() {
        let samples = synth_generate(100, 64, 64, 11).unwrap();
        let c = only(|c| c.elastic = true);
        for (i, s) in samples.iter().enumerate() {
            let out = augment(s, i as u64, &c);
            assert!(out.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            let changed = s.mask.data().iter().zip(out.mask.data()).filter(|(a, b)| a != b).count();
            let area = s.mask.data().iter().filter(|&&m| m == 1.0).count();
            assert!(changed as f64 <= 0.2 * area as f64, "{i}: {changed} of {area}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            probability: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
