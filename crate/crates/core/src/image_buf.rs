//! Floating-point RGB images and PNG I/O.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("unsupported image format in {path}: expected 8-bit RGB or RGBA")]
    Format { path: String },
}

/// Row-major RGB image with real-valued channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, c: [f64; 3]) -> Self {
        Self { width, height, data: vec![c; width * height] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.data[y * self.width + x] = c;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Single channel as a dense plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    /// Decodes an 8-bit PNG. RGBA inputs are composited over `background`.
    pub fn load_png(path: &Path, background: [f64; 3]) -> Result<Self, ImageError> {
        let p = path.display().to_string();
        let img = image::open(path).map_err(|source| ImageError::Read { path: p.clone(), source })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img {
            image::DynamicImage::ImageRgb8(rgb) => rgb
                .pixels()
                .map(|px| std::array::from_fn(|c| px.0[c] as f64 / 255.0))
                .collect(),
            image::DynamicImage::ImageRgba8(rgba) => rgba
                .pixels()
                .map(|px| {
                    let a = px.0[3] as f64 / 255.0;
                    std::array::from_fn(|c| a * (px.0[c] as f64 / 255.0) + (1.0 - a) * background[c])
                })
                .collect(),
            _ => return Err(ImageError::Format { path: p }),
        };
        Ok(Self { width: w, height: h, data })
    }

    /// 8-bit quantization by `round(v * 255)` after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|p| p.iter().map(|&v| quantize_u8(v)))
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|source| ImageError::Write { path: path.display().to_string(), source })
    }
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
