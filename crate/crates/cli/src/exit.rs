//! Process exit codes derived from error values.

use sarcnet_core::data::DataError;
use sarcnet_core::explain::ExplainError;
use sarcnet_core::features::FeatureError;
use sarcnet_core::imagecore::ImageError;
use sarcnet_core::model::ModelError;
use sarcnet_core::tensor::TensorError;
use sarcnet_core::train::TrainError;
use thiserror::Error;

pub const OK: u8 = 0;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERIC: u8 = 4;

/// Errors raised by the CLI itself.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

pub fn code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(classify).unwrap_or(USAGE)
}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<u8> {
    if let Some(e) = e.downcast_ref::<CliError>() {
        return Some(match e {
            CliError::Usage(_) => USAGE,
            CliError::Io(_) => IO,
        });
    }
    if e.is::<std::io::Error>() {
        return Some(IO);
    }
    if let Some(e) = e.downcast_ref::<TrainError>() {
        return Some(train(e));
    }
    if let Some(e) = e.downcast_ref::<ExplainError>() {
        return Some(match e {
            ExplainError::Model(m) => model(m),
            ExplainError::Io { .. } | ExplainError::Format { .. } => IO,
            _ => USAGE,
        });
    }
    if let Some(e) = e.downcast_ref::<ModelError>() {
        return Some(model(e));
    }
    if let Some(e) = e.downcast_ref::<DataError>() {
        return Some(data(e));
    }
    if let Some(e) = e.downcast_ref::<FeatureError>() {
        return Some(feature(e));
    }
    if let Some(e) = e.downcast_ref::<ImageError>() {
        return Some(image(e));
    }
    e.downcast_ref::<TensorError>().map(tensor)
}

fn train(e: &TrainError) -> u8 {
    match e {
        TrainError::Model(m) => model(m),
        TrainError::Data(d) => data(d),
        TrainError::Feature(f) => feature(f),
        TrainError::Image(i) => image(i),
        TrainError::NonFinite { .. } => NUMERIC,
        TrainError::Io { .. } => IO,
        _ => USAGE,
    }
}

fn model(e: &ModelError) -> u8 {
    match e {
        ModelError::Tensor(t) => tensor(t),
        ModelError::Io(_) | ModelError::Checkpoint(_) => IO,
        _ => USAGE,
    }
}

fn tensor(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite(_) | TensorError::NonFiniteGradient(_) => NUMERIC,
        _ => USAGE,
    }
}

fn data(e: &DataError) -> u8 {
    match e {
        DataError::Io { .. } => IO,
        DataError::Csv(c) if c.is_io_error() => IO,
        DataError::Image { source, .. } => image(source),
        DataError::Feature { source, .. } => feature(source),
        _ => USAGE,
    }
}

fn feature(e: &FeatureError) -> u8 {
    match e {
        FeatureError::Image(i) => image(i),
        FeatureError::Io(_) => IO,
        FeatureError::Csv(c) if c.is_io_error() => IO,
        _ => USAGE,
    }
}

fn image(e: &ImageError) -> u8 {
    match e {
        ImageError::Read { .. } | ImageError::Write { .. } => IO,
        _ => USAGE,
    }
}
