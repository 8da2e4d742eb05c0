//! RGB image container and the pixel-level operations the rest of the
//! pipeline is built on: bilinear resizing, gamma degradation, lightness
//! statistics and channel histograms.
//!
//! An [`Image`] is a 3×H×W grid of f64 intensities in `[0, 1]`, channel
//! order R, G, B. Values are validated on construction and every operation
//! here preserves the range invariant.

use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// Target ingestion height in pixels.
pub const TARGET_HEIGHT: usize = 256;
/// Target ingestion width in pixels.
pub const TARGET_WIDTH: usize = 128;

/// An RGB raster with intensities in `[0, 1]`, stored as `[3, H, W]`.
///
/// Immutable after construction; cloning is a deep copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps a `[3, H, W]` array, validating the channel count and range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Dimension(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("empty image ({h}x{w})")));
        }
        for &v in &data {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!(
                    "intensity {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Constant-intensity image.
    pub fn splat(value: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Mean intensity over all channels and pixels, in `[0, 1]`.
    pub fn mean_intensity(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }
}

/// Decodes an image file and resizes it to the ingestion shape 3×256×128.
///
/// Only 8-bit RGB rasters are accepted; anything else is a format error.
/// Intensities are mapped to `[0, 1]` before bilinear resampling, so an
/// input already at the target size round-trips exactly.
pub fn load_and_resize(path: &Path) -> Result<Image> {
    let img = load_rgb(path)?;
    resize_bilinear(&img, TARGET_HEIGHT, TARGET_WIDTH)
}

/// Decodes an image file at its native size without resizing.
pub fn load_rgb(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Array3::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = f64::from(px.0[c]) / 255.0;
        }
    }
    Image::new(data)
}

/// Bilinear resampling to `new_h` × `new_w`.
///
/// Uses the half-pixel-center mapping `src = (dst + 0.5) * scale - 0.5`
/// with edge clamping, so a same-size resize is the identity and constant
/// images stay constant.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Parameter("resize target must be non-empty".into()));
    }
    let (h, w) = (img.height(), img.width());
    let axis_weights = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|d| {
                let src = (d as f64 + 0.5) * scale - 0.5;
                let src = src.clamp(0.0, (n_src - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_src - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let wy = axis_weights(h, new_h);
    let wx = axis_weights(w, new_w);
    let src = img.data();
    let mut out = Array3::zeros((3, new_h, new_w));
    for c in 0..3 {
        for (yi, &(y0, y1, fy)) in wy.iter().enumerate() {
            for (xi, &(x0, x1, fx)) in wx.iter().enumerate() {
                let top = src[[c, y0, x0]] * (1.0 - fx) + src[[c, y0, x1]] * fx;
                let bot = src[[c, y1, x0]] * (1.0 - fx) + src[[c, y1, x1]] * fx;
                out[[c, yi, xi]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out)
}

/// Elementwise power-law degradation `I^gamma`, used to synthesize
/// low-illumination images from brighter ones.
pub fn gamma_degrade(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Image::new(img.data().mapv(|v| v.powf(gamma).clamp(0.0, 1.0)))
}

/// Mean lightness on the 0–255 scale: `255 ×` mean over all channels
/// and pixels.
pub fn mean_lightness(img: &Image) -> f64 {
    255.0 * img.mean_intensity()
}

/// Per-channel histogram over `bins` equal-width bins spanning `[0, 1]`.
///
/// Intensity 1.0 lands in the last bin; per channel the counts sum to H×W.
pub fn channel_histogram(img: &Image, bins: usize) -> Result<[Vec<u64>; 3]> {
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let mut hist = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
    for c in 0..3 {
        for &v in img.data().index_axis(ndarray::Axis(0), c) {
            let idx = ((v * bins as f64) as usize).min(bins - 1);
            hist[c][idx] += 1;
        }
    }
    Ok(hist)
}

/// Quantizes to 8-bit with round-half-away-from-zero and writes a PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize_u8(img.data()[[0, y, x]]),
                quantize_u8(img.data()[[1, y, x]]),
                quantize_u8(img.data()[[2, y, x]]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// 8-bit quantization with round-half-away-from-zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
