//! Two-speaker diarization toolkit.
//!
//! The pipeline mirrors the stages of a per-channel voice-activity system:
//! decode and normalize stereo WAV recordings ([`audio`]), slice each channel
//! into fixed 0.1 s segments ([`segment`]), convert interval annotations into
//! per-segment labels ([`labels`]), optionally precompute spectrogram features
//! ([`features`]), and train from-scratch neural classifiers ([`nn`]) with the
//! mini-batch Adam harness in [`train`].

pub mod audio;
pub mod features;
pub mod labels;
pub mod linalg;
pub mod nn;
pub mod segment;
pub mod train;
