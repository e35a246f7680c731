//! Bulk artifact formats: PPM/PGM images, the ray-sample label dump, and
//! flat little-endian f32 buffers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::io::Read;
use std::path::Path;

/// RGB image with channels in [0, 1], row-major by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.rgb.iter().map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    /// `[3, V, U]` tensor in [-1, 1] (the diffusion latent layout).
    pub fn to_latent<S: Scalar>(&self) -> Tensor<S> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![S::zero(); 3 * h * w];
        for v in 0..h {
            for u in 0..w {
                for c in 0..3 {
                    data[(c * h + v) * w + u] = S::from_f64(self.rgb[(v * w + u) * 3 + c] * 2.0 - 1.0);
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("shape")
    }

    pub fn from_latent<S: Scalar>(t: &Tensor<S>) -> Result<Image> {
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::InvalidTensor(format!("latent shape {:?} is not [3,V,U]", t.shape())));
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let mut rgb = vec![0.0f64; h * w * 3];
        for v in 0..h {
            for u in 0..w {
                for c in 0..3 {
                    let val = t.data()[(c * h + v) * w + u].to_f64();
                    rgb[(v * w + u) * 3 + c] = ((val + 1.0) * 0.5).clamp(0.0, 1.0);
                }
            }
        }
        Ok(Image { width: w, height: h, rgb })
    }

    /// Mean absolute per-channel difference; images must match in size.
    pub fn mae(&self, other: &Image) -> f64 {
        debug_assert_eq!((self.width, self.height), (other.width, other.height));
        let n = self.rgb.len() as f64;
        self.rgb.iter().zip(&other.rgb).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }
}

/// Binary PGM (P5, maxval 255) from per-pixel bytes, row-major.
pub fn write_pgm_binary(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    std::fs::write(path, out)?;
    Ok(())
}

/// ASCII PGM (P2) of mask weights scaled by 10000 (weights live in [1, 2)).
pub fn write_mask_pgm(path: &Path, width: usize, height: usize, weights: &[f64]) -> Result<()> {
    debug_assert_eq!(weights.len(), width * height);
    let mut out = format!("P2\n{width} {height}\n20000\n");
    for row in weights.chunks(width) {
        let line: Vec<String> =
            row.iter().map(|&w| format!("{}", (w * 10000.0).round() as u32)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Flat little-endian f32 buffer.
pub fn write_f32_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

const DORS_MAGIC: &[u8; 4] = b"DORS";

/// Ray-sample label volume: magic "DORS", U, V, N as u32 LE, then the u8
/// labels in `(v·U + u)·N + k` order.
pub fn write_dors(path: &Path, u: usize, v: usize, n: usize, labels: &[u8]) -> Result<()> {
    debug_assert_eq!(labels.len(), u * v * n);
    let mut out = Vec::with_capacity(12 + labels.len());
    out.extend_from_slice(DORS_MAGIC);
    out.extend_from_slice(&(u as u32).to_le_bytes());
    out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dors(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != DORS_MAGIC {
        return Err(Error::MalformedInput {
            path: path.display().to_string(),
            detail: "bad ray-sample dump header".into(),
        });
    }
    let u = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let v = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let labels = bytes[16..].to_vec();
    if labels.len() != u * v * n {
        return Err(Error::MalformedInput {
            path: path.display().to_string(),
            detail: format!("payload {} != {u}x{v}x{n}", labels.len()),
        });
    }
    Ok((u, v, n, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let img = Image { width: 2, height: 1, rgb: vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25] };
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&ppm[ppm.len() - 6..], &[0u8, 128, 255, 255, 0, 64]);
    }

    #[test]
    fn latent_round_trip() {
        let img = Image { width: 2, height: 2, rgb: (0..12).map(|i| i as f64 / 11.0).collect() };
        let t: Tensor<f64> = img.to_latent();
        assert_eq!(t.shape(), &[3, 2, 2]);
        let back = Image::from_latent(&t).unwrap();
        for (a, b) in img.rgb.iter().zip(&back.rgb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dors_round_trip() {
        let dir = std::env::temp_dir().join("dors_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.dors");
        let labels: Vec<u8> = (0..24).map(|i| (i % 7) as u8).collect();
        write_dors(&path, 2, 3, 4, &labels).unwrap();
        let (u, v, n, back) = read_dors(&path).unwrap();
        assert_eq!((u, v, n), (2, 3, 4));
        assert_eq!(back, labels);
    }
}
