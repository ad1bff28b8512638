//! Training loop with validation-Spearman model selection, evaluation reports
//! and the linear baseline.

mod baseline;
pub mod metrics;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_order, Batch, DataError, Dihedral, PrepConfig, PreparedSet, SplitSpec};
use crate::features::{FeatureError, ScalerParams};
use crate::imagecore::ImageError;
use crate::model::{
    predict, save_checkpoint, Checkpoint, CheckpointMeta, Forward, ModelError, SarcNetConfig, SarcNetParams,
};
use crate::tensor::{Adam, AdamConfig, Graph, NormMode, TensorError};

pub use baseline::{LinearBaseline, RIDGE_FALLBACK};
pub use report::{
    evaluate, histogram_bin, read_predictions, CellPrediction, DayHistogram, EvalReport, HIST_BINS, HIST_LOW,
    HIST_WIDTH,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("metric: {0}")]
    Metric(String),
    #[error("non-finite value at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Evaluation batch size; affects speed only.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Network shape, feature protocol and initialization seed.
    pub model: SarcNetConfig,
    pub shuffle_seed: u64,
    /// Random flips and transposes of training images, drawn from
    /// `(shuffle_seed, epoch)`.
    pub augment: bool,
    pub split: SplitSpec,
    pub prep: PrepConfig,
    /// Where `best.ckpt` and `train_log.csv` are written during training.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 40,
            epochs: 100,
            model: SarcNetConfig::default(),
            shuffle_seed: 0,
            augment: true,
            split: SplitSpec::default(),
            prep: PrepConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Small network on 64×64 inputs.
    pub fn scaled() -> Self {
        let model = SarcNetConfig::scaled();
        Self {
            prep: PrepConfig {
                input_size: model.input_size,
                ..PrepConfig::default()
            },
            model,
            ..Self::default()
        }
    }

    /// Derives every seed (init, split, shuffle) from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.split.seed = seed;
        self.shuffle_seed = seed;
        self
    }

    /// `lr = 0` is accepted and turns training into a no-op.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        self.model.validate()?;
        if self.prep.input_size != self.model.input_size {
            return Err(TrainError::Config(format!(
                "prep.input_size {} differs from model.input_size {}",
                self.prep.input_size, self.model.input_size
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// Spearman, MAE, MSE and R². Undefined correlations are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub spearman: Option<f64>,
    pub mae: f64,
    pub mse: f64,
    pub r2: Option<f64>,
}

impl Metrics {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            spearman: metrics::spearman(pred, target).ok(),
            mae: metrics::mae(pred, target)?,
            mse: metrics::mse(pred, target)?,
            r2: metrics::r2(pred, target).ok(),
        })
    }

    /// Names of metrics that could not be computed.
    pub fn degenerate(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.spearman.is_none() {
            out.push("spearman");
        }
        if self.r2.is_none() {
            out.push("r2");
        }
        out
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_spearman,val_mae,val_mse,val_r2";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            opt(self.val.spearman),
            self.val.mae,
            self.val.mse,
            opt(self.val.r2)
        )
    }
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for e in log {
        text += &e.csv_line();
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation Spearman.
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> Option<usize> {
        self.best.meta.epoch
    }
}

/// Eval-mode predictions for every cell of `set`, in order.
pub fn predict_set(params: &SarcNetParams<f32>, set: &PreparedSet, scaler: &ScalerParams) -> Result<Vec<f64>> {
    let ids: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let b = set.batch(chunk, scaler)?;
        out.extend(predict(params, b.images, b.features)?.into_iter().map(f64::from));
    }
    Ok(out)
}

enum StepError {
    NonFinite(String),
    Other(TrainError),
}

impl<E: Into<TrainError>> From<E> for StepError {
    fn from(e: E) -> Self {
        let e: TrainError = e.into();
        match e {
            TrainError::Model(ModelError::Tensor(
                t @ (TensorError::NonFinite(_) | TensorError::NonFiniteGradient(_)),
            )) => StepError::NonFinite(t.to_string()),
            other => StepError::Other(other),
        }
    }
}

/// Forward, backward and one optimizer update. Returns the batch loss.
fn train_step(
    params: &mut SarcNetParams<f32>,
    adam: &mut Adam<f32>,
    batch: &Batch,
    update: bool,
) -> Result<f64, StepError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let f = g.constant(batch.features.clone());
    let t = g.constant(batch.targets.clone());
    let (loss, stats) = {
        let mut fwd = Forward::new(params, &bound, NormMode::Train);
        let out = fwd.sarcnet(&mut g, x, f).map_err(TrainError::from)?;
        let loss = g.mse_loss(out.score, t).map_err(ModelError::from)?;
        (loss, std::mem::take(&mut fwd.stats))
    };
    let value = f64::from(g.value(loss).data()[0]);
    if !update {
        return Ok(value);
    }
    g.backward(loss).map_err(ModelError::from)?;
    for (name, var) in bound.iter() {
        let w = params
            .weights
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
        w.zero_grad();
        if let Some(grad) = g.grad(*var) {
            w.accumulate_grad(grad.data()).map_err(ModelError::from)?;
        }
    }
    drop(g);
    adam.step(params.weights.iter_mut().map(|(k, t)| (k.as_str(), t)))
        .map_err(ModelError::from)?;
    for w in params.weights.values_mut() {
        w.zero_grad();
    }
    params.update_running_stats(&stats)?;
    Ok(value)
}

/// Trains from scratch and keeps the epoch with the highest validation
/// Spearman. Ties keep the earlier epoch; an undefined Spearman never
/// replaces a defined one. With `lr = 0` neither weights nor batchnorm
/// statistics change.
pub fn train(train_set: &PreparedSet, val_set: &PreparedSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("train and validation sets must be nonempty".into()));
    }
    for set in [train_set, val_set] {
        if set.protocol != cfg.model.protocol || set.input_size != cfg.model.input_size {
            return Err(TrainError::Config(format!(
                "dataset prepared for {:?} at {}px, model expects {:?} at {}px",
                set.protocol, set.input_size, cfg.model.protocol, cfg.model.input_size
            )));
        }
    }
    let scaler = ScalerParams::fit(&train_set.feature_vectors(), "train")?;
    let mut params = SarcNetParams::<f32>::init(&cfg.model)?;
    let mut adam = Adam::new(cfg.adam());
    let update = cfg.lr > 0.0;
    let val_targets = val_set.targets();
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let meta = |epoch: usize, val_spearman: Option<f64>| CheckpointMeta {
        epoch: Some(epoch),
        val_spearman,
        adam: Some(cfg.adam()),
        normalization: Some("per-image z-score".into()),
        pad_square: cfg.prep.pad_square,
        scaler: Some(scaler.clone()),
        glcm: Some(cfg.prep.glcm),
    };
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = batch_order(train_set.len(), cfg.batch_size, Some(cfg.shuffle_seed), epoch as u64);
        let mut loss_sum = 0.0;
        let transforms = cfg
            .augment
            .then(|| Dihedral::draw(train_set.len(), cfg.shuffle_seed, epoch as u64));
        for (bi, idx) in order.iter().enumerate() {
            let picked: Option<Vec<Dihedral>> = transforms.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect());
            let batch = train_set.batch_with(idx, &scaler, picked.as_deref())?;
            let loss = match train_step(&mut params, &mut adam, &batch, update) {
                Ok(v) => v,
                Err(StepError::NonFinite(detail)) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: bi + 1,
                        detail,
                    })
                }
                Err(StepError::Other(e)) => return Err(e),
            };
            loss_sum += loss * idx.len() as f64;
        }
        let pred = predict_set(&params, val_set, &scaler)?;
        if pred.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite {
                epoch,
                batch: order.len(),
                detail: "validation prediction".into(),
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val: Metrics::compute(&pred, &val_targets)?,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, val spearman {}, mae {:.4} ({:.1}s)",
            cfg.epochs,
            entry.train_loss,
            opt(entry.val.spearman.map(|s| (s * 1e4).round() / 1e4)),
            entry.val.mae,
            started.elapsed().as_secs_f64()
        );
        let improved = match (&best, entry.val.spearman) {
            (None, _) => true,
            (Some(b), Some(s)) => b.meta.val_spearman.is_none_or(|bs| s > bs),
            (Some(_), None) => false,
        };
        log.push(entry);
        if improved {
            let ckpt = Checkpoint {
                params: params.clone(),
                meta: meta(epoch, entry.val.spearman),
            };
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(&ckpt, &dir.join("best.ckpt"))?;
            }
            best = Some(ckpt);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            write_training_log(&dir.join("train_log.csv"), &log)?;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        log,
    })
}

/// Fits the linear baseline on scaled features of `train_set`.
pub fn fit_baseline(train_set: &PreparedSet, scaler: &ScalerParams) -> Result<LinearBaseline> {
    let rows = scaled_rows(train_set, scaler)?;
    LinearBaseline::fit(&rows, &train_set.targets())
}

/// Scaled feature rows of every cell.
pub fn scaled_rows(set: &PreparedSet, scaler: &ScalerParams) -> Result<Vec<Vec<f64>>> {
    set.cells
        .iter()
        .map(|c| Ok(scaler.apply(&c.features)?.values))
        .collect()
}
