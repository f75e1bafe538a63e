//! Library half of the `diarize` command: configuration, the synthetic
//! corpus generator, the comparison-plot renderer, and the glue that turns
//! WAV/CSV pairs into model-ready datasets.

pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod plot;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or arguments; exits with code 1.
    #[error("{0}")]
    Usage(String),
    /// Anything wrong with the data or files; exits with code 2.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn data(e: impl std::fmt::Display) -> CliError {
        CliError::Data(e.to_string())
    }
}

macro_rules! from_data {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

from_data!(
    diarize_core::audio::AudioError,
    diarize_core::labels::LabelError,
    diarize_core::segment::SegmentError,
    diarize_core::features::FeatureError,
    diarize_core::nn::NnError,
    diarize_core::train::TrainError,
    std::io::Error
);
