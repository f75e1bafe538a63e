//! WAV decoding/encoding, RMS loudness, and naive decimation.
//!
//! Only 16-bit PCM RIFF/WAVE files with one or two interleaved channels are
//! supported. Integer sample `s` decodes to the amplitude `s / 32768`, and an
//! amplitude encodes back as `round(a * 32768)` clamped to the i16 range, so
//! decode -> encode -> decode is lossless for every 16-bit value.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Full-scale divisor for 16-bit PCM.
const PCM16_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}: not a RIFF/WAVE file")]
    NotRiff(String),
    #[error("{path}: unsupported audio format code {format} (only PCM is supported)")]
    NotPcm { path: String, format: u16 },
    #[error("{path}: unsupported bit depth {bits} (only 16-bit is supported)")]
    UnsupportedBits { path: String, bits: u16 },
    #[error("{path}: unsupported channel count {channels} (expected 1 or 2)")]
    UnsupportedChannels { path: String, channels: u16 },
    #[error("{0}: data chunk is truncated")]
    TruncatedData(String),
    #[error("{0}: missing fmt or data chunk")]
    MissingChunk(String),
    #[error("silent channel: loudness of an all-zero or empty signal is undefined")]
    SilentChannel,
    #[error("downsample rate must be at least 1")]
    ZeroRate,
    #[error("clip has no channels or channels of unequal length")]
    MalformedClip,
}

/// A decoded waveform: one or two channels of amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self, AudioError> {
        let clip = AudioClip {
            sample_rate,
            channels,
        };
        if clip.channels.is_empty()
            || clip.channels.len() > 2
            || clip
                .channels
                .iter()
                .any(|c| c.len() != clip.channels[0].len())
        {
            return Err(AudioError::MalformedClip);
        }
        Ok(clip)
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loudness in decibels relative to full scale, from RMS amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loudness {
    pub dbfs: f64,
}

fn read_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Decode a 16-bit PCM WAV file. Unknown chunks before "data" are skipped.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| AudioError::Open {
            path: display.clone(),
            source,
        })?;

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotRiff(display));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, declared size

    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if body + 16 > bytes.len() {
                    return Err(AudioError::MissingChunk(display));
                }
                fmt = Some((
                    read_u16(&bytes, body),
                    read_u16(&bytes, body + 2),
                    read_u32(&bytes, body + 4),
                    read_u16(&bytes, body + 14),
                ));
            }
            b"data" => {
                data = Some((body, size));
                break;
            }
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| AudioError::MissingChunk(display.clone()))?;
    let (data_off, data_size) = data.ok_or_else(|| AudioError::MissingChunk(display.clone()))?;
    if format != 1 {
        return Err(AudioError::NotPcm {
            path: display,
            format,
        });
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedBits {
            path: display,
            bits,
        });
    }
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedChannels {
            path: display,
            channels,
        });
    }
    if data_off + data_size > bytes.len() {
        return Err(AudioError::TruncatedData(display));
    }

    let n_ch = channels as usize;
    let frames = data_size / (2 * n_ch);
    let mut out = vec![Vec::with_capacity(frames); n_ch];
    let payload = &bytes[data_off..data_off + frames * 2 * n_ch];
    for (i, pair) in payload.chunks_exact(2).enumerate() {
        let s = i16::from_le_bytes([pair[0], pair[1]]);
        out[i % n_ch].push(f64::from(s) / PCM16_SCALE);
    }
    AudioClip::new(rate, out)
}

fn encode_sample(a: f64) -> i16 {
    (a * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Encode a clip as 16-bit PCM RIFF/WAVE.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<(), AudioError> {
    let display = path.display().to_string();
    let n_ch = clip.channels.len() as u16;
    let frames = clip.len();
    let data_size = (frames * 2 * n_ch as usize) as u32;
    let byte_rate = clip.sample_rate * u32::from(n_ch) * 2;

    let mut buf = Vec::with_capacity(44 + data_size as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_size).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&n_ch.to_le_bytes());
    buf.extend_from_slice(&clip.sample_rate.to_le_bytes());
    buf.extend_from_slice(&byte_rate.to_le_bytes());
    buf.extend_from_slice(&(n_ch * 2).to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_size.to_le_bytes());
    for i in 0..frames {
        for ch in &clip.channels {
            buf.extend_from_slice(&encode_sample(ch[i]).to_le_bytes());
        }
    }

    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|source| AudioError::Write {
            path: display,
            source,
        })
}

/// RMS loudness of one channel in dBFS. All-zero or empty input is an error.
pub fn measure_dbfs(channel: &[f64]) -> Result<Loudness, AudioError> {
    if channel.is_empty() {
        return Err(AudioError::SilentChannel);
    }
    let sum_sq: f64 = channel.iter().map(|s| s * s).sum();
    if sum_sq == 0.0 {
        return Err(AudioError::SilentChannel);
    }
    let rms = (sum_sq / channel.len() as f64).sqrt();
    Ok(Loudness {
        dbfs: 20.0 * rms.log10(),
    })
}

/// Scale each channel independently so its RMS loudness hits `target`.
///
/// Samples pushed outside [-1, 1] by the gain are clamped; that only happens
/// when raising a quiet file whose peaks already sit near full scale.
pub fn normalize_to_dbfs(clip: &AudioClip, target: Loudness) -> Result<AudioClip, AudioError> {
    let mut channels = Vec::with_capacity(clip.channels.len());
    for ch in &clip.channels {
        let current = measure_dbfs(ch)?;
        let gain = 10f64.powf((target.dbfs - current.dbfs) / 20.0);
        let mut clipped = 0usize;
        let scaled = ch
            .iter()
            .map(|&s| {
                let v = s * gain;
                if v.abs() > 1.0 {
                    clipped += 1;
                    v.clamp(-1.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        if clipped > 0 {
            log::warn!(
                "normalization to {:.1} dBFS clipped {clipped} samples",
                target.dbfs
            );
        }
        channels.push(scaled);
    }
    Ok(AudioClip {
        sample_rate: clip.sample_rate,
        channels,
    })
}

/// Keep the first sample of every `rate` samples; an incomplete trailing
/// group contributes nothing.
pub fn downsample(channel: &[f64], rate: usize) -> Result<Vec<f64>, AudioError> {
    if rate == 0 {
        return Err(AudioError::ZeroRate);
    }
    Ok((0..channel.len() / rate).map(|i| channel[i * rate]).collect())
}
