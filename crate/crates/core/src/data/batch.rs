use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CellRecord, DataError, Result};
use crate::features::{extract, ClassMap, FeatureVector, GlcmConfig, Protocol, ScalerParams};
use crate::imagecore::{load_image, load_mask, prepare_input};
use crate::parallel;
use crate::tensor::Tensor;

/// Preprocessing applied to every cell before it reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub input_size: usize,
    /// Zero-pad non-square images before resizing instead of stretching.
    pub pad_square: bool,
    pub glcm: GlcmConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            pad_square: false,
            glcm: GlcmConfig::default(),
        }
    }
}

/// Minibatch index lists. Without a seed the input order is kept; with one,
/// each epoch gets its own permutation derived from `(seed, epoch)`. The
/// final partial batch is retained.
pub fn batch_order(n: usize, batch_size: usize, shuffle: Option<u64>, epoch: u64) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        ids.shuffle(&mut rng);
    }
    ids.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One of the eight symmetries of the square: optional transpose, then
/// optional horizontal and vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Self = Self(0);

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8).map(Self)
    }

    /// Draws one transform per sample from `(seed, epoch)`.
    pub fn draw(n: usize, seed: u64, epoch: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11_D1E3);
        rng.set_stream(epoch);
        (0..n).map(|_| Self(rng.random_range(0..8))).collect()
    }

    /// Transforms a row-major `size × size` plane.
    pub fn apply(self, plane: &[f32], size: usize) -> Vec<f32> {
        if self == Self::IDENTITY {
            return plane.to_vec();
        }
        let (flip_x, flip_y, transpose) = (self.0 & 1 != 0, self.0 & 2 != 0, self.0 & 4 != 0);
        let last = size - 1;
        let mut out = vec![0.0; plane.len()];
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = if transpose { (x, y) } else { (y, x) };
                let sy = if flip_y { last - sy } else { sy };
                let sx = if flip_x { last - sx } else { sx };
                out[y * size + x] = plane[sy * size + sx];
            }
        }
        out
    }
}

/// Model-ready tensors for one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, 3, S, S]`
    pub images: Tensor<f32>,
    /// `[B, F]`, scaled.
    pub features: Tensor<f32>,
    /// `[B, 1]`
    pub targets: Tensor<f32>,
}

/// A cell after image normalization and feature assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCell {
    pub cell_id: String,
    pub day: i64,
    pub target: f64,
    /// One normalized `S × S` plane; replicated to three channels on batching.
    pub plane: Vec<f32>,
    /// Unscaled feature values.
    pub features: FeatureVector,
}

impl PreparedCell {
    pub fn from_record(rec: &CellRecord, protocol: Protocol, cfg: &PrepConfig) -> Result<Self> {
        let image_err = |source| DataError::Image {
            cell_id: rec.cell_id.clone(),
            source,
        };
        let feature_err = |source| DataError::Feature {
            cell_id: rec.cell_id.clone(),
            source,
        };
        let img = load_image(&rec.image_path, 0).map_err(image_err)?;
        let cached = rec
            .features
            .filter(|f| protocol == Protocol::P1 || f.fractions.is_some());
        let cell = match cached {
            Some(f) => f,
            None => {
                let mask = load_mask(&rec.mask_path).map_err(image_err)?;
                let classmap = match &rec.classmap_path {
                    Some(p) if protocol == Protocol::P2 => Some(ClassMap::load(p).map_err(feature_err)?),
                    _ => None,
                };
                extract(&img, &mask, classmap.as_ref(), &cfg.glcm).map_err(feature_err)?
            }
        };
        let features = FeatureVector::assemble(&cell, protocol).map_err(feature_err)?;
        let input = prepare_input(&img, cfg.input_size, cfg.pad_square).map_err(image_err)?;
        let plane = input.data()[..cfg.input_size * cfg.input_size].to_vec();
        Ok(Self {
            cell_id: rec.cell_id.clone(),
            day: rec.day,
            target: rec.ground_truth,
            plane,
            features,
        })
    }
}

fn assemble_batch(
    indices: Vec<usize>,
    cells: &[&PreparedCell],
    size: usize,
    scaler: &ScalerParams,
    transforms: Option<&[Dihedral]>,
) -> Result<Batch> {
    let b = cells.len();
    let plane = size * size;
    let f = scaler.protocol.dim();
    let mut images = Vec::with_capacity(b * 3 * plane);
    let mut features = Vec::with_capacity(b * f);
    let mut targets = Vec::with_capacity(b);
    for (i, c) in cells.iter().enumerate() {
        let t = transforms.map_or(Dihedral::IDENTITY, |t| t[i]);
        let plane = t.apply(&c.plane, size);
        for _ in 0..3 {
            images.extend_from_slice(&plane);
        }
        let scaled = scaler.apply(&c.features).map_err(|source| DataError::Feature {
            cell_id: c.cell_id.clone(),
            source,
        })?;
        features.extend(scaled.values.iter().map(|&v| v as f32));
        targets.push(c.target as f32);
    }
    let shape_err = |e: crate::tensor::TensorError| DataError::Config(e.to_string());
    Ok(Batch {
        indices,
        images: Tensor::new(vec![b, 3, size, size], images).map_err(shape_err)?,
        features: Tensor::new(vec![b, f], features).map_err(shape_err)?,
        targets: Tensor::new(vec![b, 1], targets).map_err(shape_err)?,
    })
}

/// Fully loaded dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub input_size: usize,
    pub protocol: Protocol,
    pub cells: Vec<PreparedCell>,
}

impl PreparedSet {
    /// Loads and preprocesses every record, in parallel when enabled.
    pub fn prepare(records: &[CellRecord], protocol: Protocol, cfg: &PrepConfig) -> Result<Self> {
        let cells = parallel::map_slice(records, |r| PreparedCell::from_record(r, protocol, cfg))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_size: cfg.input_size,
            protocol,
            cells,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            input_size: self.input_size,
            protocol: self.protocol,
            cells: indices.iter().map(|&i| self.cells[i].clone()).collect(),
        }
    }

    pub fn feature_vectors(&self) -> Vec<FeatureVector> {
        self.cells.iter().map(|c| c.features.clone()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.target).collect()
    }

    pub fn batch(&self, indices: &[usize], scaler: &ScalerParams) -> Result<Batch> {
        self.batch_with(indices, scaler, None)
    }

    /// Like [`batch`](Self::batch) with one image transform per index.
    pub fn batch_with(
        &self,
        indices: &[usize],
        scaler: &ScalerParams,
        transforms: Option<&[Dihedral]>,
    ) -> Result<Batch> {
        if transforms.is_some_and(|t| t.len() != indices.len()) {
            return Err(DataError::Config("one transform per batch index is required".into()));
        }
        let cells: Vec<&PreparedCell> = indices.iter().map(|&i| &self.cells[i]).collect();
        assemble_batch(indices.to_vec(), &cells, self.input_size, scaler, transforms)
    }
}

/// Streams batches straight from disk, loading each batch on demand.
pub struct LazyBatches<'a> {
    records: &'a [CellRecord],
    protocol: Protocol,
    cfg: PrepConfig,
    scaler: &'a ScalerParams,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> LazyBatches<'a> {
    pub fn new(
        records: &'a [CellRecord],
        scaler: &'a ScalerParams,
        cfg: PrepConfig,
        batch_size: usize,
        shuffle: Option<u64>,
        epoch: u64,
    ) -> Self {
        Self {
            records,
            protocol: scaler.protocol,
            cfg,
            scaler,
            order: batch_order(records.len(), batch_size, shuffle, epoch).into_iter(),
        }
    }
}

impl Iterator for LazyBatches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.order.next()?;
        let loaded: Result<Vec<PreparedCell>> = parallel::map_slice(&indices, |&i| {
            PreparedCell::from_record(&self.records[i], self.protocol, &self.cfg)
        })
        .into_iter()
        .collect();
        Some(loaded.and_then(|cells| {
            let refs: Vec<&PreparedCell> = cells.iter().collect();
            assemble_batch(indices, &refs, self.cfg.input_size, self.scaler, None)
        }))
    }
}
