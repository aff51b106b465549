//! RGB images and resampling helpers.

use std::hash::{Hash, Hasher};
use std::path::Path;

use crate::maskcore::BinaryMask;
use crate::{Error, Result};

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.height, self.width)
    }
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Config(format!(
                "image data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Decodes PNG/TIFF/JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(out.into_inner())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Stable 64-bit digest of dimensions and quantized content.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.height.hash(&mut h);
        self.width.hash(&mut h);
        self.to_rgb8().hash(&mut h);
        h.finish()
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        let data = resize_bilinear(&self.data, self.height, self.width, 3, height, width);
        RgbImage { height, width, data }
    }

    /// Sub-rectangle `[row0, row0+height) × [col0, col0+width)`.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> RgbImage {
        let mut out = RgbImage::new(height, width);
        for r in 0..height {
            let src = ((row0 + r) * self.width + col0) * 3;
            out.data[r * width * 3..(r + 1) * width * 3].copy_from_slice(&self.data[src..src + width * 3]);
        }
        out
    }
}

/// Sampling positions and weights for one output axis.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of an interleaved `channels`-channel grid.
pub fn resize_bilinear(
    data: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    out_height: usize,
    out_width: usize,
) -> Vec<f32> {
    let ry = axis_weights(height, out_height);
    let rx = axis_weights(width, out_width);
    let mut out = vec![0f32; out_height * out_width * channels];
    for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
            for ch in 0..channels {
                let at = |y: usize, x: usize| data[(y * width + x) * channels + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_width + ox) * channels + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a mask with half-pixel centres.
pub fn resize_mask_nearest(m: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = m.dims();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    BinaryMask::from_fn(height, width, |r, c| {
        let y = (((r as f64 + 0.5) * sy) as usize).min(h - 1);
        let x = (((c as f64 + 0.5) * sx) as usize).min(w - 1);
        m.get(y, x)
    })
}
