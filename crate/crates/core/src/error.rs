use std::path::PathBuf;

use thiserror::Error;

/// Diagnostic payload attached to a diverged training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DivergenceReport {
    pub fold: Option<usize>,
    pub epoch: usize,
    pub batch: usize,
    pub stage: String,
    /// Loss terms at the failing step. Non-finite values are written as the
    /// strings "NaN", "inf" and "-inf" so the report survives JSON.
    #[serde(with = "loose_floats")]
    pub values: Vec<(String, f64)>,
}

mod loose_floats {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Loose {
        Num(f64),
        Text(String),
    }

    fn wrap(v: f64) -> Loose {
        if v.is_finite() {
            Loose::Num(v)
        } else {
            Loose::Text(v.to_string())
        }
    }

    pub fn serialize<S: Serializer>(values: &[(String, f64)], s: S) -> Result<S::Ok, S::Error> {
        values
            .iter()
            .map(|(k, v)| (k, wrap(*v)))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, f64)>, D::Error> {
        Vec::<(String, Loose)>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| match v {
                Loose::Num(x) => Ok((k, x)),
                Loose::Text(t) => t.parse().map(|x| (k, x)).map_err(serde::de::Error::custom),
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input spatial size {got_h}x{got_w} is below the minimum of {min}x{min}")]
    SpatialTooSmall { min: usize, got_h: usize, got_w: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCount { expected: usize, found: usize },

    #[error("checkpoint config digest mismatch: expected {expected}, found {found}")]
    ConfigDrift { expected: String, found: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("dataset: {0}")]
    Data(String),

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {} batch {} ({})", .0.epoch, .0.batch, .0.stage)]
    Divergence(Box<DivergenceReport>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this error: 1 usage/config, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Data(_)
            | Error::Decode { .. }
            | Error::MissingFile(_)
            | Error::Image(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Empty(_)
            | Error::ClassCount { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Checkpoint { .. }
            | Error::ConfigDrift { .. }
            | Error::Safetensors(_) => 2,
            _ => 1,
        }
    }
}
