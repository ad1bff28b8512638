//! Classical single-cell features.
//!
//! * morphology: cell area and moment-based aspect ratio;
//! * texture: three alignment metrics from the GLCM correlation profile;
//! * class fractions: in-mask share of each organization class.
//!
//! Protocol 1 uses the first five values, Protocol 2 all eleven.

pub mod classmap;
pub mod glcm;
pub mod morphology;
pub mod scaler;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{CellMask, GrayImage, ImageError};

pub use classmap::{class_fractions, ClassMap, OrgClass, CLASS_COUNT};
pub use glcm::{
    alignment_metrics, correlation_profile, glcm, glcm_correlation, AlignmentMetrics, CorrelationProfile, Glcm,
    GlcmConfig,
};
pub use morphology::{aspect_ratio, cell_area};
pub use scaler::ScalerParams;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("mask pixels are collinear; aspect ratio undefined")]
    Collinear,
    #[error("GLCM needs at least 2 quantization levels, got {0}")]
    InvalidLevels(usize),
    #[error("GLCM displacement must be non-zero")]
    ZeroDisplacement,
    #[error("no in-mask pixel pair at this displacement")]
    NoPairs,
    #[error("masked region is constant; correlation undefined")]
    ConstantRegion,
    #[error("invalid co-occurrence matrix")]
    InvalidGlcm,
    #[error("insufficient texture: {0} valid distances (need at least 4)")]
    InsufficientTexture(usize),
    #[error("class label {0} outside 0..6")]
    UnknownLabel(u8),
    #[error("protocol mismatch: expected {expected}, got {got}")]
    ProtocolMismatch { expected: Protocol, got: Protocol },
    #[error("protocol p2 requires class fractions")]
    MissingFractions,
    #[error("feature vector already scaled")]
    AlreadyScaled,
    #[error("cannot fit a scaler on zero vectors")]
    EmptyFit,
    #[error("invalid feature `{name}` = {value}")]
    InvalidValue { name: &'static str, value: f64 },
    #[error("expected {expected} values, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

pub const FEATURE_NAMES: [&str; 11] = [
    "cell_area_px",
    "aspect_ratio",
    "max_cv",
    "peak_height",
    "peak_distance_px",
    "frac_background",
    "frac_diffuse_other",
    "frac_fibers",
    "frac_disorganized_puncta",
    "frac_organized_puncta",
    "frac_organized_zdiscs",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    P1,
    P2,
}

impl Protocol {
    pub fn dim(self) -> usize {
        match self {
            Protocol::P1 => 5,
            Protocol::P2 => 11,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        &FEATURE_NAMES[..self.dim()]
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::P1 => "p1",
            Protocol::P2 => "p2",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Protocol::P1),
            "p2" => Ok(Protocol::P2),
            other => Err(format!("unknown protocol `{other}` (expected p1 or p2)")),
        }
    }
}

/// All eleven raw measurements of one cell. Fractions are absent when no
/// class map is available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellFeatures {
    pub cell_area_px: f64,
    pub aspect_ratio: f64,
    pub alignment: AlignmentMetrics,
    pub fractions: Option<[f64; CLASS_COUNT]>,
}

impl CellFeatures {
    /// Parses the 5 or 11 values in [`FEATURE_NAMES`] order.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() != 5 && values.len() != 11 {
            return Err(FeatureError::Arity {
                expected: 11,
                got: values.len(),
            });
        }
        let fractions = (values.len() == 11).then(|| {
            let mut f = [0.0; CLASS_COUNT];
            f.copy_from_slice(&values[5..]);
            f
        });
        Ok(Self {
            cell_area_px: values[0],
            aspect_ratio: values[1],
            alignment: AlignmentMetrics {
                max_cv: values[2],
                peak_height: values[3],
                peak_distance_px: values[4],
            },
            fractions,
        })
    }
}

/// Measures every feature of one cell.
pub fn extract(
    img: &GrayImage,
    mask: &CellMask,
    classmap: Option<&ClassMap>,
    cfg: &GlcmConfig,
) -> Result<CellFeatures> {
    mask.ensure_matches(img.dims())?;
    let profile = correlation_profile(img, mask, cfg)?;
    Ok(CellFeatures {
        cell_area_px: cell_area(mask) as f64,
        aspect_ratio: aspect_ratio(mask)?,
        alignment: alignment_metrics(&profile),
        fractions: classmap.map(|m| class_fractions(m, mask)).transpose()?,
    })
}

/// Ordered, protocol-tagged feature values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub protocol: Protocol,
    pub values: Vec<f64>,
    pub scaled: bool,
}

impl FeatureVector {
    /// Builds an unscaled vector and checks its invariants.
    pub fn assemble(cell: &CellFeatures, protocol: Protocol) -> Result<Self> {
        let mut values = vec![
            cell.cell_area_px,
            cell.aspect_ratio,
            cell.alignment.max_cv,
            cell.alignment.peak_height,
            cell.alignment.peak_distance_px,
        ];
        if protocol == Protocol::P2 {
            values.extend(cell.fractions.ok_or(FeatureError::MissingFractions)?);
        }
        let v = Self {
            protocol,
            values,
            scaled: false,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.protocol.dim() {
            return Err(FeatureError::Arity {
                expected: self.protocol.dim(),
                got: self.values.len(),
            });
        }
        let bad = |i: usize| FeatureError::InvalidValue {
            name: FEATURE_NAMES[i],
            value: self.values[i],
        };
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(bad(i));
        }
        if self.scaled {
            return Ok(());
        }
        let v = &self.values;
        if v[0] <= 0.0 {
            return Err(bad(0));
        }
        if v[1] < 1.0 {
            return Err(bad(1));
        }
        if v[4] < 1.0 {
            return Err(bad(4));
        }
        if self.protocol == Protocol::P2 {
            if let Some(i) = (5..11).find(|&i| !(0.0..=1.0).contains(&v[i])) {
                return Err(bad(i));
            }
            let s: f64 = v[5..].iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(FeatureError::InvalidValue {
                    name: "fraction sum",
                    value: s,
                });
            }
        }
        Ok(())
    }
}

/// Writes the per-cell feature table with a header row.
pub fn write_feature_csv<W: Write>(out: W, rows: &[(String, FeatureVector)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let protocol = rows.first().map_or(Protocol::P2, |r| r.1.protocol);
    let mut header = vec!["cell_id", "protocol"];
    header.extend(protocol.names());
    w.write_record(&header)?;
    for (id, v) in rows {
        if v.protocol != protocol {
            return Err(FeatureError::ProtocolMismatch {
                expected: protocol,
                got: v.protocol,
            });
        }
        let mut rec = vec![id.clone(), v.protocol.to_string()];
        rec.extend(v.values.iter().map(|x| format!("{x}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
