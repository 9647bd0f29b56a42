use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("shape: {0}")]
    Shape(String),

    #[error("value: {0}")]
    Value(String),

    #[error("losses: empty batch")]
    EmptyBatch,

    #[error("data: {0}")]
    Data(String),

    #[error("data: cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trainer: non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        term: &'static str,
    },

    #[error("plot: {0}")]
    Plot(String),

    #[error("io: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }
}
