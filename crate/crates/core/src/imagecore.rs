//! Grayscale image and mask I/O, resizing, and conversion to model input.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use thiserror::Error;

use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;
/// Smallest accepted mask area in pixels.
pub const MIN_MASK_PIXELS: usize = 16;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: Box<image::ImageError>,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: Box<image::ImageError>,
    },
    #[error("unsupported pixel format in {path}: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("image is {height}x{width}; both sides must be at least {MIN_SIDE}")]
    TooSmall { height: usize, width: usize },
    #[error("intensity {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error("mask has {0} foreground pixels; at least {MIN_MASK_PIXELS} required")]
    DegenerateMask(usize),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    Dimensions((usize, usize), (usize, usize)),
    #[error("pixel data length {got} does not match {height}x{width}")]
    Length { height: usize, width: usize, got: usize },
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(ImageError::TooSmall { height, width });
        }
        if data.len() != height * width {
            return Err(ImageError::Length {
                height,
                width,
                got: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(v));
        }
        Ok(Self { height, width, data })
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

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self.data.iter().map(|&v| (v * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("sized buffer");
        buf.save(path).map_err(|e| ImageError::Write {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        save_luma8(path, self.width, self.height, raw)
    }
}

pub(crate) fn save_luma8(path: &Path, width: usize, height: usize, raw: Vec<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("sized buffer");
    buf.save(path).map_err(|e| ImageError::Write {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// Binary single-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl CellMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ImageError::Length {
                height,
                width,
                got: data.len(),
            });
        }
        let n = data.iter().filter(|&&b| b).count();
        if n < MIN_MASK_PIXELS {
            return Err(ImageError::DegenerateMask(n));
        }
        Ok(Self { height, width, data })
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

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn ensure_matches(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(ImageError::Dimensions(self.dims(), dims));
        }
        Ok(())
    }

    /// Nearest-neighbour resampling with pixel-centre alignment.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut data = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let iy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            for x in 0..out_w {
                let ix = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
                data.push(self.contains(iy, ix));
            }
        }
        Self::new(out_h, out_w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        save_luma8(path, self.width, self.height, raw)
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| ImageError::Read {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// Reads one channel of an 8- or 16-bit PNG/TIFF, mapped linearly to `[0, 1]`.
pub fn load_image(path: &Path, channel: usize) -> Result<GrayImage> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let unsupported = |detail: String| ImageError::Unsupported {
        path: path.to_path_buf(),
        detail,
    };
    let pick = |channels: usize| -> Result<()> {
        if channel < channels {
            Ok(())
        } else {
            Err(unsupported(format!(
                "channel {channel} requested, image has {channels}"
            )))
        }
    };
    let data: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(b) => {
            pick(1)?;
            b.as_raw().iter().map(|&v| v as f32 / 255.0).collect()
        }
        DynamicImage::ImageLuma16(b) => {
            pick(1)?;
            b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect()
        }
        DynamicImage::ImageLumaA8(b) => {
            pick(2)?;
            b.as_raw().chunks(2).map(|p| p[channel] as f32 / 255.0).collect()
        }
        DynamicImage::ImageLumaA16(b) => {
            pick(2)?;
            b.as_raw().chunks(2).map(|p| p[channel] as f32 / 65535.0).collect()
        }
        DynamicImage::ImageRgb8(b) => {
            pick(3)?;
            b.as_raw().chunks(3).map(|p| p[channel] as f32 / 255.0).collect()
        }
        DynamicImage::ImageRgba8(b) => {
            pick(4)?;
            b.as_raw().chunks(4).map(|p| p[channel] as f32 / 255.0).collect()
        }
        DynamicImage::ImageRgb16(b) => {
            pick(3)?;
            b.as_raw().chunks(3).map(|p| p[channel] as f32 / 65535.0).collect()
        }
        DynamicImage::ImageRgba16(b) => {
            pick(4)?;
            b.as_raw().chunks(4).map(|p| p[channel] as f32 / 65535.0).collect()
        }
        other => return Err(unsupported(format!("{:?}", other.color()))),
    };
    GrayImage::new(h, w, data)
}

/// Reads a mask; any non-zero pixel is foreground.
pub fn load_mask(path: &Path) -> Result<CellMask> {
    let img = open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    CellMask::new(h, w, img.as_raw().iter().map(|&v| v > 0).collect())
}

/// Reads an 8-bit label image as raw labels.
pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw()))
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`),
/// edge-clamped.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h < MIN_SIDE || out_w < MIN_SIDE {
        return Err(ImageError::TooSmall {
            height: out_h,
            width: out_w,
        });
    }
    let data = resample(img.pixels(), img.height, img.width, out_h, out_w);
    // convex combinations of [0,1] values can round a hair outside the range
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    GrayImage::new(out_h, out_w, data)
}

/// Bilinear kernel shared with heatmap upsampling; no size limits.
pub(crate) fn resample(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Pads the shorter side with zeros (centred) to make the image square.
pub fn pad_to_square(img: &GrayImage) -> GrayImage {
    let side = img.height.max(img.width);
    let oy = (side - img.height) / 2;
    let ox = (side - img.width) / 2;
    let mut data = vec![0.0; side * side];
    for y in 0..img.height {
        data[(y + oy) * side + ox..(y + oy) * side + ox + img.width]
            .copy_from_slice(&img.data[y * img.width..(y + 1) * img.width]);
    }
    GrayImage::new(side, side, data).expect("padding preserves validity")
}

/// Resizes to `size`×`size` (optionally padding to square first) and applies
/// [`to_model_input`].
pub fn prepare_input(img: &GrayImage, size: usize, pad_square: bool) -> Result<Tensor<f32>> {
    let resized = if pad_square {
        resize_bilinear(&pad_to_square(img), size, size)?
    } else {
        resize_bilinear(img, size, size)?
    };
    Ok(to_model_input(&resized))
}

/// Per-image z-score (std floored at 1e-6) replicated to three channels:
/// shape `[3, H, W]`.
pub fn to_model_input(img: &GrayImage) -> Tensor<f32> {
    let n = img.data.len() as f64;
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let plane: Vec<f32> = if var.sqrt() < STD_FLOOR {
        vec![0.0; img.data.len()]
    } else {
        img.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    };
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![3, img.height, img.width], data).expect("consistent shape")
}
