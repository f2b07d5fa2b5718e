//! RGB images with values in `[0, 1]`, stored channel-last and row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Smallest side length accepted for dataset images.
pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from channel-last row-major data. Values are checked to lie in `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, InvalidArgument, "empty image {height}x{width}");
        ensure!(
            data.len() == height * width * 3,
            DimensionMismatch,
            "expected {} values for {height}x{width}x3, got {}",
            height * width * 3,
            data.len()
        );
        ensure!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            InvalidArgument,
            "pixel values must lie in [0, 1]"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Writes a pixel, clamping each channel into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let o = (row * self.width + col) * 3;
        for c in 0..3 {
            self.data[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.height * self.width) as f64;
        acc.map(|v| v / n)
    }

    /// Copies the `size`x`size` window with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        ensure!(
            row + height <= self.height && col + width <= self.width && height > 0 && width > 0,
            InvalidArgument,
            "crop {height}x{width}@({row},{col}) outside {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width * 3);
        for r in row..row + height {
            let o = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[o..o + width * 3]);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Stacks `other` to the right of `self`; both must share the same height.
    pub fn hconcat(&self, other: &Image) -> Result<Image> {
        ensure!(
            self.height == other.height,
            DimensionMismatch,
            "heights differ: {} vs {}",
            self.height,
            other.height
        );
        let width = self.width + other.width;
        let mut data = Vec::with_capacity(self.height * width * 3);
        for r in 0..self.height {
            data.extend_from_slice(&self.data[r * self.width * 3..(r + 1) * self.width * 3]);
            data.extend_from_slice(&other.data[r * other.width * 3..(r + 1) * other.width * 3]);
        }
        Ok(Image {
            height: self.height,
            width,
            data,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    /// Loads a PNG or binary PPM file.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Saves as PNG, or as binary PPM (P6) when the extension is `ppm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_ppm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        if is_ppm {
            let rgb = self.to_rgb8();
            let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
            bytes.extend_from_slice(rgb.as_raw());
            return std::fs::write(path, bytes).map_err(|e| Error::io(path, e));
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Bilinear interpolation onto an `out_h`x`out_w` grid with corner-aligned sampling.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let scale = |out: usize, inp: usize| {
        if out > 1 {
            (inp as f64 - 1.0) / (out as f64 - 1.0)
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(out_h, img.height), scale(out_w, img.width));
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for r in 0..out_h {
        let y = r as f64 * sy;
        let y0 = (y.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = y - y0 as f64;
        for c in 0..out_w {
            let x = c as f64 * sx;
            let x0 = (x.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = x - x0 as f64;
            let (p00, p01, p10, p11) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
            for ch in 0..3 {
                let top = f64::from(p00[ch]) * (1.0 - wx) + f64::from(p01[ch]) * wx;
                let bot = f64::from(p10[ch]) * (1.0 - wx) + f64::from(p11[ch]) * wx;
                data.push(((top * (1.0 - wy) + bot * wy) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Resizes to a square `target`x`target` image.
pub fn resize(img: &Image, target: usize) -> Result<Image> {
    ensure!(
        target >= MIN_IMAGE_SIDE,
        InvalidArgument,
        "resize target {target} below minimum {MIN_IMAGE_SIDE}"
    );
    Ok(bilinear_resize(img, target, target))
}

/// Boolean grid at image resolution marking modified pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PatchMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize) {
        self.bits[row * self.width + col] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_image(&self) -> Image {
        let mut img = Image::filled(self.height, self.width, [0.0; 3]);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    img.set(r, c, [1.0; 3]);
                }
            }
        }
        img
    }
}
