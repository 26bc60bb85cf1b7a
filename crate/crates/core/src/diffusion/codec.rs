//! Fixed stand-in for a learned autoencoder: average pooling followed by an
//! orthonormal lift of the three colour channels into the latent channels.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::LatentTensor;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentCodec {
    pub factor: usize,
    pub channels: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self {
            factor: 2,
            channels: 4,
        }
    }
}

/// Latents are `2·(p − 0.5)` lifted by this matrix, so pixel data in `[0,1]`
/// lands roughly in `[−1, 1]`.
const LATENT_SCALE: f64 = 2.0;

impl LatentCodec {
    pub fn new(factor: usize, channels: usize) -> Result<Self> {
        if factor == 0 || channels < 3 {
            return Err(Error::input(format!(
                "codec needs factor >= 1 and at least 3 latent channels, got {factor}/{channels}"
            )));
        }
        Ok(Self { factor, channels })
    }

    /// `[3 × channels]` matrix with orthonormal rows (the first three DCT-II
    /// basis vectors of length `channels`).
    fn lift(&self) -> Array2<f64> {
        let c = self.channels as f64;
        Array2::from_shape_fn((3, self.channels), |(i, j)| {
            let norm = if i == 0 { (1.0 / c).sqrt() } else { (2.0 / c).sqrt() };
            norm * (PI * (j as f64 + 0.5) * i as f64 / c).cos()
        })
    }

    /// Average-pools by `factor` without lifting; the grid `decode` reproduces.
    pub fn pool(&self, img: &Image) -> Result<Array3<f64>> {
        let (h, w) = (img.height(), img.width());
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::input(format!("image {h}x{w} not divisible by codec factor {f}")));
        }
        let p = img.pixels();
        let area = (f * f) as f64;
        Ok(Array3::from_shape_fn((h / f, w / f, 3), |(y, x, c)| {
            let mut acc = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    acc += p[[y * f + dy, x * f + dx, c]];
                }
            }
            acc / area
        }))
    }

    pub fn encode(&self, img: &Image) -> Result<LatentTensor> {
        self.lift_pooled(self.pool(img)?)
    }

    fn lift_pooled(&self, pooled: Array3<f64>) -> Result<LatentTensor> {
        let (h, w, _) = pooled.dim();
        let flat = pooled
            .into_shape_with_order((h * w, 3))
            .map_err(|e| Error::shape(e.to_string()))?;
        let z = (flat - 0.5).dot(&self.lift()) * LATENT_SCALE;
        LatentTensor::new(
            z.into_shape_with_order((h, w, self.channels))
                .map_err(|e| Error::shape(e.to_string()))?,
        )
    }

    /// Pooled-resolution pixels of a latent, before clamping.
    pub fn decode_pooled(&self, z: &LatentTensor) -> Result<Array3<f64>> {
        let (h, w, c) = z.dim();
        if c != self.channels {
            return Err(Error::shape(format!("latent has {c} channels, codec expects {}", self.channels)));
        }
        let flat = z
            .data()
            .to_owned()
            .into_shape_with_order((h * w, c))
            .map_err(|e| Error::shape(e.to_string()))?;
        let p = flat.dot(&self.lift().t()) / LATENT_SCALE + 0.5;
        p.into_shape_with_order((h, w, 3))
            .map_err(|e| Error::shape(e.to_string()))
    }

    /// Nearest latent that decodes to in-range pixels: decode, clamp to
    /// `[0, 1]`, re-encode. Also drops any component outside the colour
    /// subspace.
    pub fn project(&self, z: &LatentTensor) -> Result<LatentTensor> {
        self.lift_pooled(self.decode_pooled(z)?.mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// Decodes to a full-resolution image: nearest-neighbour upsampling of the
    /// pooled grid, clamped to `[0, 1]`.
    pub fn decode(&self, z: &LatentTensor) -> Result<Image> {
        let pooled = self.decode_pooled(z)?;
        let (h, w, _) = pooled.dim();
        let f = self.factor;
        let full = Array3::from_shape_fn((h * f, w * f, 3), |(y, x, c)| pooled[[y / f, x / f, c]]);
        Image::from_unclamped(full)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn lift_rows_are_orthonormal() {
        for c in 3..8 {
            let l = LatentCodec::new(2, c).unwrap().lift();
            let g = l.dot(&l.t());
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g[[i, j]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_on_pooled_grid() {
        let codec = LatentCodec::default();
        let mut r = rng::stream(3, "codec-test");
        let px = rng::uniform(&mut r, (32, 32, 3), 0.5) + 0.5;
        let img = Image::new(px).unwrap();
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.dim(), (16, 16, 4));
        let back = codec.decode_pooled(&z).unwrap();
        let pooled = codec.pool(&img).unwrap();
        let err = (&back - &pooled).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-12, "{err}");
        let full = codec.decode(&z).unwrap();
        assert_eq!((full.height(), full.width()), (32, 32));
    }

    #[test]
    fn constant_image_gives_constant_latent() {
        let codec = LatentCodec::default();
        let img = Image::filled(16, 16, [0.2, 0.7, 0.4]).unwrap();
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.dim(), (8, 8, 4));
        let first = z.data().slice(ndarray::s![0, 0, ..]).to_owned();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(z.data().slice(ndarray::s![y, x, ..]), first);
            }
        }
    }

    #[test]
    fn projection_is_idempotent_and_fixes_encoded_images() {
        let codec = LatentCodec::default();
        let mut r = rng::stream(4, "codec-test");
        let img = Image::new(rng::uniform(&mut r, (16, 16, 3), 0.5) + 0.5).unwrap();
        let z = codec.encode(&img).unwrap();
        let err = (codec.project(&z).unwrap().data() - z.data()).mapv(f64::abs).sum();
        assert!(err < 1e-12);
        let wild = LatentTensor::new(rng::normal(&mut r, (8, 8, 4), 3.0)).unwrap();
        let once = codec.project(&wild).unwrap();
        let twice = codec.project(&once).unwrap();
        assert!((once.data() - twice.data()).mapv(f64::abs).sum() < 1e-12);
        let px = codec.decode_pooled(&once).unwrap();
        assert!(px.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn indivisible_image_rejected() {
        let codec = LatentCodec::new(3, 4).unwrap();
        let img = Image::filled(16, 16, [0.5; 3]).unwrap();
        assert!(matches!(codec.encode(&img), Err(Error::Input(_))));
    }
}
