//! Raster carrier, side-by-side concatenation and PNG transport encoding.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("failed to encode raster: {0}")]
    Encode(String),
    #[error("failed to decode image: {0}")]
    Decode(String),
}

/// An 8-bit RGB image stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidRaster(format!(
                "zero-area raster {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImagingError::InvalidRaster(format!(
                "buffer holds {} bytes, {width}x{height} RGB needs {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// A raster filled with a single colour.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        let n = width as usize * height as usize;
        let pixels = rgb.iter().copied().cycle().take(n * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decodes PNG or JPEG bytes; any colour model is normalized to RGB8,
    /// grayscale by channel replication.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImagingError> {
        let img = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode(e.to_string()))?;
        let rgb = img.into_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw()).map_err(|e| ImagingError::Decode(e.to_string()))
    }

    /// Lossless PNG encoding.
    pub fn to_png(&self) -> Result<Vec<u8>, ImagingError> {
        let img = RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| ImagingError::Encode("buffer does not match dimensions".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Geometry of a side-by-side composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcatLayout {
    pub left_width: u32,
    pub right_width: u32,
    pub height: u32,
    pub fill_rgb: [u8; 3],
}

impl ConcatLayout {
    pub fn for_pair(left: &Raster, right: &Raster, fill_rgb: [u8; 3]) -> Self {
        Self {
            left_width: left.width,
            right_width: right.width,
            height: left.height.max(right.height),
            fill_rgb,
        }
    }

    pub fn total_width(&self) -> u32 {
        self.left_width + self.right_width
    }
}

pub const DEFAULT_FILL: [u8; 3] = [0, 0, 0];

/// Places `before` at the left and `after` at the right, both anchored at
/// the top. Rows below the shorter image are painted with `fill_rgb`.
pub fn concat_side_by_side(before: &Raster, after: &Raster, fill_rgb: [u8; 3]) -> Raster {
    let layout = ConcatLayout::for_pair(before, after, fill_rgb);
    let out_w = layout.total_width() as usize;
    let out_h = layout.height as usize;
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for y in 0..out_h {
        for src in [before, after] {
            if y < src.height as usize {
                let row = y * src.width as usize * 3;
                pixels.extend_from_slice(&src.pixels[row..row + src.width as usize * 3]);
            } else {
                for _ in 0..src.width {
                    pixels.extend_from_slice(&fill_rgb);
                }
            }
        }
    }
    Raster {
        width: layout.total_width(),
        height: layout.height,
        pixels,
    }
}

/// Base64 (standard alphabet, no line breaks) of the PNG encoding.
pub fn encode_for_transport(raster: &Raster) -> Result<String, ImagingError> {
    Ok(STANDARD.encode(raster.to_png()?))
}

/// Inverse of [`encode_for_transport`]; also accepts a `data:` URI.
pub fn decode_transport(payload: &str) -> Result<Raster, ImagingError> {
    let b64 = payload
        .strip_prefix("data:image/png;base64,")
        .unwrap_or(payload);
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| ImagingError::Decode(e.to_string()))?;
    Raster::decode(&bytes)
}

pub fn data_uri(payload: &str) -> String {
    format!("data:image/png;base64,{payload}")
}
