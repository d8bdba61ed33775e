//! Pixel-array augmentation: bilinear resize, horizontal flip, random crop.
//!
//! Images are `height × width × channels` arrays of reals in `[0, 1]`,
//! stored row-major with channels innermost. No codecs live here.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageArray {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Single-channel image from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(height, width, 1, rows.concat())
    }

    /// Builds an image from 8-bit samples, normalizing to `[0, 1]`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    /// Writes the text fixture format: a `height width channels` header line
    /// followed by whitespace-separated pixel values, one image row per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.height, self.width, self.channels);
        let row_len = self.width * self.channels;
        for row in self.pixels.chunks(row_len) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                // `{:?}` prints the shortest representation that parses back
                // to the identical f64.
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut header = |what: &str| -> Result<usize> {
            let tok = tokens.next().ok_or_else(|| parse_err(1, format!("missing {what}")))?;
            tok.parse()
                .map_err(|_| parse_err(1, format!("bad {what} `{tok}`")))
        };
        let h = header("height")?;
        let w = header("width")?;
        let c = header("channels")?;
        let mut pixels = Vec::with_capacity(h * w * c);
        for (line_no, line) in text.lines().enumerate().skip(1) {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(line_no + 1, format!("bad pixel value `{tok}`")))?;
                pixels.push(v);
            }
        }
        Self::new(h, w, c, pixels)
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse {
        source_name: "image array".into(),
        line,
        message,
    }
}

/// Source coordinate and the two grid neighbours used for interpolation
/// along one axis, with half-pixel centers and clamping at the borders.
#[inline]
fn source_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize. Each output pixel interpolates the four source pixels
/// surrounding its mapped coordinate, linearly in rows then columns; with unit
/// grid spacing the normalizing factor `(x2 − x1)(y2 − y1)` is 1.
pub fn bilinear_resize(img: &ImageArray, out_h: usize, out_w: usize) -> Result<ImageArray> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    let c = img.channels;
    let cols: Vec<_> = (0..out_w).map(|x| source_axis(x, img.width, out_w)).collect();
    let mut pixels = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y1, y2, fy) = source_axis(y, img.height, out_h);
        for &(x1, x2, fx) in &cols {
            for ch in 0..c {
                let q11 = img.at(y1, x1, ch);
                let q12 = img.at(y1, x2, ch);
                let q21 = img.at(y2, x1, ch);
                let q22 = img.at(y2, x2, ch);
                let top = (1.0 - fx) * q11 + fx * q12;
                let bottom = (1.0 - fx) * q21 + fx * q22;
                pixels.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    ImageArray::new(out_h, out_w, c, pixels)
}

/// Mirrors columns: column `j` of the output is column `width − 1 − j` of the
/// input, for every row and channel.
pub fn horizontal_flip(img: &ImageArray) -> ImageArray {
    let c = img.channels;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks(img.width * c) {
        for px in row.chunks(c).rev() {
            pixels.extend_from_slice(px);
        }
    }
    ImageArray { pixels, ..*img }
}

/// Copies the `crop_h × crop_w` window whose top-left corner is `(top, left)`.
pub fn crop_at(img: &ImageArray, top: usize, left: usize, crop_h: usize, crop_w: usize) -> Result<ImageArray> {
    if crop_h == 0 || crop_w == 0 || top + crop_h > img.height || left + crop_w > img.width {
        return Err(Error::InvalidInput(format!(
            "crop {crop_h}x{crop_w} at ({top},{left}) does not fit a {}x{} image",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let mut pixels = Vec::with_capacity(crop_h * crop_w * c);
    for r in top..top + crop_h {
        let start = (r * img.width + left) * c;
        pixels.extend_from_slice(&img.pixels[start..start + crop_w * c]);
    }
    ImageArray::new(crop_h, crop_w, c, pixels)
}

/// Crops a window at a uniformly random valid offset. The row offset is drawn
/// first, then the column offset.
pub fn random_crop(img: &ImageArray, crop_h: usize, crop_w: usize, rng: &mut RngState) -> Result<ImageArray> {
    if crop_h == 0 || crop_w == 0 || crop_h > img.height || crop_w > img.width {
        return Err(Error::InvalidInput(format!(
            "crop {crop_h}x{crop_w} larger than image {}x{}",
            img.height, img.width
        )));
    }
    let top = rng.below(img.height - crop_h + 1);
    let left = rng.below(img.width - crop_w + 1);
    crop_at(img, top, left, crop_h, crop_w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub resize_h: usize,
    pub resize_w: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize_h: 256,
            resize_w: 256,
            crop_h: 224,
            crop_w: 224,
            flip_probability: 0.5,
        }
    }
}

/// Resize, then flip with the configured probability, then random crop.
///
/// The flip coin is always drawn so the crop offsets depend only on the seed,
/// not on the flip probability.
pub fn augment_pipeline(img: &ImageArray, cfg: &AugmentConfig, rng: &mut RngState) -> Result<ImageArray> {
    if !(0.0..=1.0).contains(&cfg.flip_probability) {
        return Err(Error::InvalidInput(format!(
            "flip probability {} outside [0, 1]",
            cfg.flip_probability
        )));
    }
    let resized = bilinear_resize(img, cfg.resize_h, cfg.resize_w)?;
    let flip = rng.bernoulli(cfg.flip_probability);
    let oriented = if flip { horizontal_flip(&resized) } else { resized };
    random_crop(&oriented, cfg.crop_h, cfg.crop_w, rng)
}
