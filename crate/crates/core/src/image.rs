//! RGB images with values in `[0, 1]`, plus resampling and PNG I/O.

use std::path::Path;

use ndarray::{s, Array3};

use crate::error::{Error, Result};

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 8;

/// An `[height × width × 3]` RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::input(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::input("image has zero area"));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::input(format!(
                "image {h}x{w} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::input("pixel values must be finite and within [0, 1]"));
        }
        Ok(Self { pixels })
    }

    /// Clamps into `[0, 1]` and replaces non-finite values by 0.
    pub fn from_unclamped(mut pixels: Array3<f64>) -> Result<Self> {
        pixels.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]))
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Rounds every value onto the 8-bit grid, so that a PNG round trip is
    /// exact.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| (v * 255.0).round() / 255.0),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::new(Array3::from_shape_fn(
            (h as usize, w as usize, 3),
            |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
        ))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    /// Encodes as 8-bit PNG.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.png_bytes()?)
    }

    /// Bilinear resampling (half-pixel centers, edge clamping).
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        let (h, w, _) = self.pixels.dim();
        if (h, w) == (height, width) {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 {
            return Err(Error::input("resize target has zero area"));
        }
        let sy = h as f64 / height as f64;
        let sx = w as f64 / width as f64;
        let coord = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let p = &self.pixels;
        let out = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            let (y0, y1, fy) = coord(y, sy, h);
            let (x0, x1, fx) = coord(x, sx, w);
            let top = p[[y0, x0, c]] * (1.0 - fx) + p[[y0, x1, c]] * fx;
            let bot = p[[y1, x0, c]] * (1.0 - fx) + p[[y1, x1, c]] * fx;
            top * (1.0 - fy) + bot * fy
        });
        Self::new(out)
    }

    /// Central `side × side` crop.
    pub fn center_crop(&self, side: usize) -> Result<Self> {
        let (h, w, _) = self.pixels.dim();
        if side > h || side > w || side == 0 {
            return Err(Error::input(format!("cannot crop {side} from {h}x{w}")));
        }
        let y0 = (h - side) / 2;
        let x0 = (w - side) / 2;
        Self::new(
            self.pixels
                .slice(s![y0..y0 + side, x0..x0 + side, ..])
                .to_owned(),
        )
    }
}

/// Face alignment stand-in: center-crop to the shorter side, then bilinear
/// resize to `target_size × target_size`.
///
/// Synthetic faces are rendered centered, so this is exact for them; real
/// photos would need a landmark-based aligner behind the same signature.
pub fn align_face(img: &Image, target_size: usize) -> Result<Image> {
    if target_size < MIN_SIDE {
        return Err(Error::input(format!(
            "alignment target {target_size} is below the {MIN_SIDE}px minimum"
        )));
    }
    let side = img.height().min(img.width());
    let cropped = if img.height() == img.width() {
        img.clone()
    } else {
        img.center_crop(side)?
    };
    cropped.resize(target_size, target_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 17) as f64 / 16.0
        }))
        .unwrap()
    }

    #[test]
    fn align_noop_at_target_size() {
        let img = gradient(32, 32);
        assert_eq!(align_face(&img, 32).unwrap(), img);
    }

    #[test]
    fn align_takes_central_crop() {
        let tall = gradient(64, 32);
        let out = align_face(&tall, 32).unwrap();
        assert_eq!(out.pixels(), &tall.pixels().slice(s![16..48, .., ..]).to_owned());
        let wide = gradient(32, 64);
        let out = align_face(&wide, 32).unwrap();
        assert_eq!(out.pixels(), &wide.pixels().slice(s![.., 16..48, ..]).to_owned());
    }

    #[test]
    fn align_keeps_constant_color() {
        let img = Image::filled(40, 24, [0.2, 0.6, 0.9]).unwrap();
        let out = align_face(&img, 16).unwrap();
        assert_eq!(out.height(), 16);
        for px in out.pixels().outer_iter().flat_map(|r| r.outer_iter().map(|p| p.to_vec()).collect::<Vec<_>>()) {
            for (a, b) in px.iter().zip([0.2, 0.6, 0.9]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_degenerate_images() {
        assert!(Image::new(Array3::zeros((0, 16, 3))).is_err());
        assert!(Image::new(Array3::zeros((4, 16, 3))).is_err());
        assert!(align_face(&gradient(16, 16), 0).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_grid() {
        let img = gradient(12, 9).quantized();
        let bytes = img.png_bytes().unwrap();
        let back = Image::from_rgb8(&image::load_from_memory(&bytes).unwrap().to_rgb8()).unwrap();
        assert_eq!(back, img);
    }
}
