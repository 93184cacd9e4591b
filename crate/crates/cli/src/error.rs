use std::path::PathBuf;

use finesent::numerics::NumericsError;
use finesent::{
    CheckpointError, ClassifyError, EncoderError, ObjectivesError, TokenizerError, TreebankError,
};

use crate::config::ConfigError;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{} already exists (pass --force to overwrite)", .0.display())]
    Exists(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Treebank(#[from] TreebankError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objectives(#[from] ObjectivesError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

fn encoder_code(e: &EncoderError) -> i32 {
    match e {
        EncoderError::NonFinite(_) | EncoderError::Numerics(NumericsError::NonFinite(_)) => {
            exit::NUMERIC
        }
        EncoderError::UnknownPreset(_) | EncoderError::InvalidConfig(_) => exit::USAGE,
        _ => exit::DATA,
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) | Self::Exists(_) => exit::USAGE,
            Self::Io { .. } | Self::Mismatch(_) | Self::Treebank(_) | Self::Tokenizer(_) => {
                exit::DATA
            }
            Self::Checkpoint(CheckpointError::Encoder(e)) | Self::Encoder(e) => encoder_code(e),
            Self::Checkpoint(_) => exit::DATA,
            Self::Objectives(e) => match e {
                ObjectivesError::NonFiniteLoss(_) => exit::NUMERIC,
                ObjectivesError::InvalidHyper(_) => exit::USAGE,
                ObjectivesError::Encoder(inner) => encoder_code(inner),
                _ => exit::DATA,
            },
            Self::Classify(e) => match e {
                ClassifyError::NonFiniteLoss(_) => exit::NUMERIC,
                ClassifyError::InvalidHyper(_) => exit::USAGE,
                ClassifyError::Encoder(inner) => encoder_code(inner),
                _ => exit::DATA,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
