//! Grayscale image files: binary PGM (P5) and PNG.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Nearest 8-bit level of a value in `[0, 1]` (clamped).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header<'a> {
    rest: &'a [u8],
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        loop {
            match self.rest.first() {
                Some(b) if b.is_ascii_whitespace() => self.rest = &self.rest[1..],
                Some(b'#') => {
                    let end = self.rest.iter().position(|&b| b == b'\n').unwrap_or(self.rest.len());
                    self.rest = &self.rest[end..];
                }
                _ => return,
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space();
        let end = self.rest.iter().position(|b| b.is_ascii_whitespace() || *b == b'#').unwrap_or(self.rest.len());
        if end == 0 {
            return None;
        }
        let (tok, rest) = self.rest.split_at(end);
        self.rest = rest;
        Some(tok)
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

/// Decode a binary PGM into a `[height, width]` tensor scaled to `[0, 1]`.
/// Both 8-bit and 16-bit (big-endian) samples are accepted.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut h = Header { rest: bytes };
    if h.token() != Some(b"P5") {
        return Err("not a binary PGM (missing `P5`)".into());
    }
    let width = h.number().ok_or("bad width")?;
    let height = h.number().ok_or("bad height")?;
    let maxval = h.number().ok_or("bad maximum value")?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(format!("unsupported header {width}x{height} max {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = match h.rest.split_first() {
        Some((b, data)) if b.is_ascii_whitespace() => data,
        _ => return Err("missing raster".into()),
    };
    let n = width * height;
    let scale = maxval as f32;
    let values: Vec<f32> = if maxval < 256 {
        if data.len() < n {
            return Err(format!("raster has {} bytes, expected {n}", data.len()));
        }
        data[..n].iter().map(|&b| (b as f32 / scale).min(1.0)).collect()
    } else {
        if data.len() < 2 * n {
            return Err(format!("raster has {} bytes, expected {}", data.len(), 2 * n));
        }
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / scale).min(1.0))
            .collect()
    };
    Tensor::new(&[height, width], values).map_err(|e| e.to_string())
}

/// 8-bit binary PGM bytes of a `[height, width]` tensor.
pub fn encode_pgm(image: &Tensor<f32>) -> Vec<u8> {
    let (height, width) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

/// `PFG <height> <width>\n` followed by little-endian `f32` values.
pub fn encode_pfg(grid: &Tensor<f32>) -> Vec<u8> {
    let (height, width) = (grid.shape()[0], grid.shape()[1]);
    let mut out = format!("PFG {height} {width}\n").into_bytes();
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pfg(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    let end = bytes.iter().position(|&b| b == b'\n').ok_or("missing PFG header")?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "PFG header is not text")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (height, width) = match fields.as_slice() {
        ["PFG", h, w] => (
            h.parse::<usize>().map_err(|_| "bad PFG height")?,
            w.parse::<usize>().map_err(|_| "bad PFG width")?,
        ),
        _ => return Err(format!("bad PFG header `{header}`")),
    };
    let body = &bytes[end + 1..];
    if body.len() != height * width * 4 {
        return Err(format!("PFG body has {} bytes, expected {}", body.len(), height * width * 4));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&[height, width], values).map_err(|e| e.to_string())
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

/// Read a `.pgm` or `.png` file as grayscale in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    match extension(path).as_str() {
        "pgm" => {
            let bytes = fs::read(path).map_err(|e| image_error(path, e.to_string()))?;
            decode_pgm(&bytes).map_err(|msg| image_error(path, msg))
        }
        "png" => {
            let img = image::open(path).map_err(|e| image_error(path, e.to_string()))?;
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            let values = gray.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
            Tensor::new(&[h as usize, w as usize], values).map_err(|e| image_error(path, e.to_string()))
        }
        other => Err(image_error(path, format!("unsupported extension `{other}`"))),
    }
}

/// Write a `[height, width]` tensor as 8-bit `.pgm` or `.png`.
pub fn write_gray(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.rank() != 2 {
        return Err(image_error(path, format!("expected a 2-d image, got shape {:?}", image.shape())));
    }
    match extension(path).as_str() {
        "pgm" => fs::write(path, encode_pgm(image)).map_err(|e| image_error(path, e.to_string())),
        "png" => {
            let (h, w) = (image.shape()[0] as u32, image.shape()[1] as u32);
            let raw: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
            let buf = image::GrayImage::from_raw(w, h, raw).expect("raster matches extents");
            buf.save(path).map_err(|e| image_error(path, e.to_string()))
        }
        other => Err(image_error(path, format!("unsupported extension `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_on_8_bit_levels() {
        let img = Tensor::from_fn(&[3, 5], |i| (i * 17 % 256) as f32 / 255.0);
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfg_round_trip_is_bitwise() {
        let grid = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.05);
        let bytes = encode_pfg(&grid);
        assert!(bytes.starts_with(b"PFG 2 3\n"));
        assert_eq!(decode_pfg(&bytes).unwrap(), grid);
        assert!(decode_pfg(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pfg(b"PFG 2\n").is_err());
    }

    #[test]
    fn header_comments_and_16_bit() {
        let mut bytes = b"P5 # comment\n2 1\n# more\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn malformed_pgm() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[4, 6], |i| (i * 11) as f32 / 255.0);
        write_gray(&path, &img).unwrap();
        assert_eq!(read_gray(&path).unwrap(), img);
        assert!(read_gray(&dir.path().join("x.bmp")).is_err());
    }
}
