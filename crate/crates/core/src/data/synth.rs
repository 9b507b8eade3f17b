//! Synthetic blob segmentation set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image_io::quantize;
use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.60;
const MIN_EXTENT: usize = 16;
/// Coarse grid resolution of the background's low-frequency field.
const BACKGROUND_CELLS: usize = 4;

struct Blob {
    cx: f64,
    cy: f64,
    /// Semi-axes in pixels.
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Blob {
    fn random(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let extent = h.min(w) as f64;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        Blob {
            cx: rng.gen_range(0.15..0.85) * w as f64,
            cy: rng.gen_range(0.15..0.85) * h as f64,
            a: rng.gen_range(0.08..0.28) * extent,
            b: rng.gen_range(0.08..0.28) * extent,
            cos: angle.cos(),
            sin: angle.sin(),
            intensity: rng.gen_range(0.6..0.9),
        }
    }

    /// Normalized elliptic radius; the support is `radius < 1`.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (self.cos * dx + self.sin * dy) / self.a;
        let v = (-self.sin * dx + self.cos * dy) / self.b;
        (u * u + v * v).sqrt()
    }
}

/// Bilinear upsampling of a random coarse grid.
fn low_frequency(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = BACKGROUND_CELLS + 1;
    let grid: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.1..0.4)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y as f64 / (h - 1) as f64 * BACKGROUND_CELLS as f64;
        let y0 = (gy as usize).min(BACKGROUND_CELLS - 1);
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / (w - 1) as f64 * BACKGROUND_CELLS as f64;
            let x0 = (gx as usize).min(BACKGROUND_CELLS - 1);
            let fx = gx - x0 as f64;
            let at = |i: usize, j: usize| grid[i * n + j];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn generate_one(id: String, h: usize, w: usize, rng: &mut impl Rng) -> Sample {
    let texture = Normal::new(0.0, 0.03).expect("positive std");
    loop {
        let background = low_frequency(h, w, rng);
        let blobs: Vec<Blob> = (0..rng.gen_range(1..=3)).map(|_| Blob::random(h, w, rng)).collect();
        // soft edge: opacity falls from 1 to 0 across this band of radius
        let edge = 0.15;
        let mut image = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let mut value = background[y * w + x];
                let mut inside = false;
                for blob in &blobs {
                    let r = blob.radius(px, py);
                    inside |= r < 1.0;
                    let alpha = ((1.0 + edge - r) / (2.0 * edge)).clamp(0.0, 1.0);
                    value = value * (1.0 - alpha) + blob.intensity * alpha;
                }
                value += texture.sample(rng);
                image.push(quantize(value as f32) as f32 / 255.0);
                mask.push(if inside { 1.0 } else { 0.0 });
            }
        }
        let fraction = mask.iter().sum::<f32>() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) {
            let image = Tensor::new(&[h, w], image).expect("extents");
            let mask = Tensor::new(&[h, w], mask).expect("extents");
            return Sample::new(id, image, mask).expect("generated sample is valid");
        }
    }
}

/// `n` samples of 1 to 3 soft-edged bright ellipses on a smooth textured
/// background. Images are quantized to 8-bit levels so they survive a PGM
/// round trip exactly. Sample `i` depends only on `(seed, i)`.
pub fn synth_generate(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Sample>> {
    if height < MIN_EXTENT || width < MIN_EXTENT {
        return Err(Error::Dataset(format!(
            "synthetic extents {height}x{width} must be at least {MIN_EXTENT}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(format!("synth_{i:04}"), height, width, &mut rng)
        })
        .collect())
}
