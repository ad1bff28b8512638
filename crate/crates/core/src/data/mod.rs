//! Dataset ingestion: manifests, label semantics, splits, batching and the
//! synthetic single-cell generator.

mod batch;
mod manifest;
mod split;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

use crate::features::{CellFeatures, FeatureError};
use crate::imagecore::ImageError;

pub use batch::{batch_order, Batch, Dihedral, LazyBatches, PrepConfig, PreparedCell, PreparedSet};
pub use manifest::{load_manifest, write_manifest, Manifest, MANIFEST_COLUMNS};
pub use split::{split, split_indices, SplitAssignment, SplitSpec};
pub use synthetic::{generate_synthetic, CohortSpec, SyntheticCell, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest is missing column `{0}`")]
    MissingColumn(String),
    #[error("manifest row {row}, column `{column}`: {msg}")]
    Parse { row: usize, column: String, msg: String },
    #[error("need at least {need} records, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("cell `{cell_id}`: {source}")]
    Image {
        cell_id: String,
        #[source]
        source: ImageError,
    },
    #[error("cell `{cell_id}`: {source}")]
    Feature {
        cell_id: String,
        #[source]
        source: FeatureError,
    },
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// One single-cell sample. Paths are resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub classmap_path: Option<PathBuf>,
    pub day: i64,
    pub expert1: u8,
    pub expert2: u8,
    /// Mean of the two expert scores.
    pub ground_truth: f64,
    /// Precomputed features from the manifest, used verbatim when present.
    pub features: Option<CellFeatures>,
}

impl CellRecord {
    /// Builds a record from valid (1..=5) expert scores.
    pub fn new(
        cell_id: impl Into<String>,
        image_path: PathBuf,
        mask_path: PathBuf,
        classmap_path: Option<PathBuf>,
        day: i64,
        experts: (u8, u8),
    ) -> Self {
        Self {
            cell_id: cell_id.into(),
            image_path,
            mask_path,
            classmap_path,
            day,
            expert1: experts.0,
            expert2: experts.1,
            ground_truth: (experts.0 as f64 + experts.1 as f64) / 2.0,
            features: None,
        }
    }
}
