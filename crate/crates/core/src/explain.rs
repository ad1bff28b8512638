//! Grad-CAM saliency for the regression score, overlays and raw dumps.
//!
//! The explained activation is the output of the final residual stage. Channel
//! weights are the spatial mean of the score gradient; the map is the ReLU of
//! the weighted channel sum, bilinearly upsampled to the input size and
//! min-max normalized.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::imagecore::{resample, CellMask, GrayImage};
use crate::model::{Forward, ModelError, SarcNetParams};
use crate::tensor::{Graph, NormMode, Tensor};

pub const HMAP_MAGIC: &[u8; 4] = b"HMAP";
/// Overlay opacity of the colormap.
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Dimension(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

/// Saliency in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

/// Min-max normalization. A constant map becomes all zeros when it is zero
/// and all ones otherwise.
pub fn normalize(raw: &[f32]) -> Vec<f32> {
    let (lo, hi) = raw.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if raw.is_empty() || hi == lo {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        return vec![fill; raw.len()];
    }
    let span = hi - lo;
    raw.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(ExplainError::Dimension(format!(
                "{} values for a {height}x{width} heatmap",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ExplainError::Dimension("heatmap values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Bilinear resize, renormalized to keep the `[0, 1]` range.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let up = resample(&self.values, self.height, self.width, height, width);
        let values = up.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self { height, width, values }
    }

    /// Mean saliency inside the mask divided by the mean outside: infinite
    /// when all saliency is inside, `None` for an all-zero map or when either
    /// region is empty.
    pub fn mask_ratio(&self, mask: &CellMask) -> Option<f64> {
        let mask = mask.resize_nearest(self.height, self.width).ok()?;
        let (mut sin, mut nin, mut sout, mut nout) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (&v, &m) in self.values.iter().zip(mask.bits()) {
            if m {
                sin += v as f64;
                nin += 1;
            } else {
                sout += v as f64;
                nout += 1;
            }
        }
        if nin == 0 || nout == 0 || sin + sout == 0.0 {
            return None;
        }
        if sout == 0.0 {
            return Some(f64::INFINITY);
        }
        Some((sin / nin as f64) / (sout / nout as f64))
    }

    /// `HMAP | u32 height | u32 width | u32 0` then little-endian f32 values.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 4 * self.values.len());
        bytes.extend_from_slice(HMAP_MAGIC);
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|source| ExplainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| ExplainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |msg: &str| ExplainError::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != HMAP_MAGIC {
            return Err(bad("not a heatmap dump"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (h, w) = (word(4), word(8));
        if bytes.len() != 16 + 4 * h * w {
            return Err(bad("size does not match header"));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(h, w, values).map_err(|e| bad(&e.to_string()))
    }
}

/// Blue (0) to red (1).
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

/// Grayscale base (stretched to its own range) blended with the colormap.
pub fn overlay(base: &GrayImage, heat: &Heatmap) -> Result<RgbImage> {
    if base.dims() != (heat.height, heat.width) {
        return Err(ExplainError::Dimension(format!(
            "image is {:?}, heatmap is {:?}",
            base.dims(),
            (heat.height, heat.width)
        )));
    }
    let (lo, hi) = base.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::new(heat.width as u32, heat.height as u32);
    for (i, (p, &h)) in base.pixels().iter().zip(&heat.values).enumerate() {
        let g = 255.0 * ((p - lo) / span);
        let c = colormap(h);
        let mix = |k: usize| ((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * c[k] as f32).round() as u8;
        out.put_pixel(
            (i % heat.width) as u32,
            (i / heat.width) as u32,
            Rgb([mix(0), mix(1), mix(2)]),
        );
    }
    Ok(out)
}

pub fn save_overlay(base: &GrayImage, heat: &Heatmap, path: &Path) -> Result<()> {
    overlay(base, heat)?.save(path).map_err(|e| ExplainError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Un-normalized, non-negative map at the final stage resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCam {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub score: f32,
}

/// Residual stage explained by default (the last one).
pub const FINAL_STAGE: usize = 4;

/// Grad-CAM before upsampling, taken at residual `stage` (1-based). `image`
/// is `[3, S, S]` or `[1, 3, S, S]`, `features` the scaled vector.
pub fn raw_cam(params: &SarcNetParams<f32>, image: &Tensor<f32>, features: &[f32], stage: usize) -> Result<RawCam> {
    if !(1..=FINAL_STAGE).contains(&stage) {
        return Err(ExplainError::Dimension(format!(
            "stage {stage} outside 1..={FINAL_STAGE}"
        )));
    }
    let s = params.config.input_size;
    let f = params.config.feature_dim();
    if image.len() != 3 * s * s || features.len() != f {
        return Err(ExplainError::Dimension(format!(
            "expected a 3x{s}x{s} image and {f} features, got {:?} and {}",
            image.shape(),
            features.len()
        )));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.param(Tensor::new(vec![1, 3, s, s], image.data().to_vec()).map_err(ModelError::from)?);
    let feats = g.constant(Tensor::new(vec![1, f], features.to_vec()).map_err(ModelError::from)?);
    let mut fwd = Forward::new(params, &bound, NormMode::Eval);
    let out = fwd.sarcnet(&mut g, x, feats)?;
    let target = fwd.stage_maps[stage - 1];
    let score = g.value(out.score).data()[0];
    let total = g.sum(out.score);
    g.backward(total).map_err(ModelError::from)?;
    let act = g.value(target);
    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let grad = g.grad(target).expect("stage maps depend on the input");
    let plane = h * w;
    let mut values = vec![0.0f32; plane];
    for k in 0..c {
        let gk = &grad.data()[k * plane..(k + 1) * plane];
        let weight = gk.iter().sum::<f32>() / plane as f32;
        let ak = &act.data()[k * plane..(k + 1) * plane];
        for (v, &a) in values.iter_mut().zip(ak) {
            *v += weight * a;
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    Ok(RawCam {
        height: h,
        width: w,
        values,
        score,
    })
}

/// Normalized Grad-CAM of the final stage at the model input size.
pub fn gradcam(params: &SarcNetParams<f32>, image: &Tensor<f32>, features: &[f32]) -> Result<Heatmap> {
    gradcam_at(params, image, features, FINAL_STAGE)
}

/// [`gradcam`] at an earlier residual stage.
pub fn gradcam_at(params: &SarcNetParams<f32>, image: &Tensor<f32>, features: &[f32], stage: usize) -> Result<Heatmap> {
    let raw = raw_cam(params, image, features, stage)?;
    let s = params.config.input_size;
    let up = resample(&raw.values, raw.height, raw.width, s, s);
    Heatmap::new(s, s, normalize(&up))
}
