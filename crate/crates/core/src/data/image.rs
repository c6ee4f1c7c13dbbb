use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMapStack;
use std::path::Path;

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::contract(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f32] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Copies the `h x w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::contract("crop window exceeds image"));
        }
        let mut out = Vec::with_capacity(h * w);
        for r in y..y + h {
            out.extend_from_slice(&self.row(r)[x..x + w]);
        }
        Self::new(h, w, out)
    }

    /// Single-map network input: each pixel minus the image's mean intensity.
    pub fn to_maps<T: Scalar>(&self) -> FeatureMapStack<T> {
        let mean = self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64;
        FeatureMapStack::from_vec(
            1,
            self.height,
            self.width,
            self.pixels.iter().map(|&p| T::lit(p as f64 - mean)).collect(),
        )
        .expect("image dimensions are positive")
    }

    /// Rounds every pixel to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = to_u8(*p) as f32 / 255.0;
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.iter().map(|&p| to_u8(p)).collect(),
        )
        .expect("buffer matches dimensions")
    }

    pub fn from_luma8(img: &image::GrayImage) -> Result<Self> {
        Self::new(
            img.height() as usize,
            img.width() as usize,
            img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Decodes a PNG or 8-bit PGM file, converting colour to luma.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_luma8(&img.to_luma8())
    }

    /// Writes an 8-bit PNG (or PGM when the extension is `.pgm`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_luma8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn to_u8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(img: &GrayImage, new_h: usize, new_w: usize) -> Result<GrayImage> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::contract("resize target must be non-empty"));
    }
    if new_h == img.height && new_w == img.width {
        return Ok(img.clone());
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..new_w).map(|x| axis(x, img.width, new_w)).collect();
    let mut out = Vec::with_capacity(new_h * new_w);
    for y in 0..new_h {
        let (y0, y1, fy) = axis(y, img.height, new_h);
        let (r0, r1) = (img.row(y0), img.row(y1));
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    GrayImage::new(new_h, new_w, out)
}

/// Width after scaling to `target_h` with the aspect ratio kept:
/// `round(w * target_h / h)`, at least 1.
pub fn scaled_width(h: usize, w: usize, target_h: usize) -> usize {
    ((w as f64 * target_h as f64 / h as f64).round() as usize).max(1)
}

pub fn resize_to_height(img: &GrayImage, target_h: usize) -> Result<GrayImage> {
    resize_bilinear(img, target_h, scaled_width(img.height, img.width, target_h))
}

/// Right-pads narrow images by repeating their last column.
pub fn pad_to_min_width(img: &GrayImage, min_w: usize) -> GrayImage {
    if img.width >= min_w {
        return img.clone();
    }
    let mut out = Vec::with_capacity(img.height * min_w);
    for y in 0..img.height {
        let row = img.row(y);
        out.extend_from_slice(row);
        let last = row[row.len() - 1];
        out.extend(std::iter::repeat(last).take(min_w - img.width));
    }
    GrayImage {
        height: img.height,
        width: min_w,
        pixels: out,
    }
}
