//! Fixed-duration segmentation of a channel and alignment with labels.
//!
//! A channel is cut into rows of `floor(rate * duration)` samples; the
//! trailing partial segment is discarded so every row has the same width.
//! Downsampling happens per row, after segmentation, which is what makes a
//! 4410-sample segment shrink to exactly 1102 samples at rate 4.

use thiserror::Error;

use crate::audio::{downsample, AudioError};
use crate::labels::LabelVector;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("segment window is shorter than one sample")]
    EmptyWindow,
    #[error("segment duration and rate must be positive")]
    BadParams,
    #[error("cannot align an empty segment matrix or label vector")]
    EmptyInput,
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Row-major matrix of fixed-width segments from one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMatrix {
    data: Vec<f64>,
    n_segments: usize,
    samples_per_segment: usize,
    pub segment_duration: f64,
    pub effective_rate: f64,
}

impl SegmentMatrix {
    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn samples_per_segment(&self) -> usize {
        self.samples_per_segment
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.samples_per_segment;
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.samples_per_segment.max(1))
    }

    /// The concatenation of all rows, i.e. a prefix of the source channel.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// Decimate every row in place, keeping the first of every `rate`
    /// samples. The effective rate drops by the same factor.
    pub fn downsample_rows(&self, rate: usize) -> Result<SegmentMatrix, SegmentError> {
        let mut data = Vec::with_capacity(self.n_segments * (self.samples_per_segment / rate));
        for row in self.rows().take(self.n_segments) {
            data.extend_from_slice(&downsample(row, rate)?);
        }
        Ok(SegmentMatrix {
            samples_per_segment: self.samples_per_segment / rate,
            n_segments: self.n_segments,
            data,
            segment_duration: self.segment_duration,
            effective_rate: self.effective_rate / rate as f64,
        })
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.n_segments {
            self.n_segments = n;
            self.data.truncate(n * self.samples_per_segment);
        }
    }
}

/// Segments and labels for one channel of one file, equal in length.
#[derive(Debug, Clone)]
pub struct AlignedDataset {
    pub segments: SegmentMatrix,
    pub labels: LabelVector,
    pub source_id: String,
}

fn window_width(rate: f64, duration: f64) -> usize {
    // The same tiny guard used for label indices, so 44100 * 0.1 cannot land
    // just below 4410 in floating point.
    ((rate * duration) + 1e-9).floor() as usize
}

/// Slice a channel into rows of `floor(rate * duration)` samples.
pub fn segment_channel(
    channel: &[f64],
    rate: f64,
    segment_duration: f64,
) -> Result<SegmentMatrix, SegmentError> {
    if rate <= 0.0 || segment_duration <= 0.0 {
        return Err(SegmentError::BadParams);
    }
    let w = window_width(rate, segment_duration);
    if w == 0 {
        return Err(SegmentError::EmptyWindow);
    }
    let n = channel.len() / w;
    Ok(SegmentMatrix {
        data: channel[..n * w].to_vec(),
        n_segments: n,
        samples_per_segment: w,
        segment_duration,
        effective_rate: rate,
    })
}

/// Truncate segments and labels to their common length.
pub fn align(
    segments: &SegmentMatrix,
    labels: &LabelVector,
    source_id: &str,
) -> Result<AlignedDataset, SegmentError> {
    if segments.n_segments() == 0 || labels.is_empty() {
        return Err(SegmentError::EmptyInput);
    }
    let n = segments.n_segments().min(labels.len());
    let mut segments = segments.clone();
    segments.truncate(n);
    let mut labels = labels.clone();
    labels.classes.truncate(n);
    Ok(AlignedDataset {
        segments,
        labels,
        source_id: source_id.to_string(),
    })
}
