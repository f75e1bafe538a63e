//! Synthetic two-speaker corpus: WAV/CSV pairs with known ground truth.
//!
//! Each channel alternates background noise with voiced bursts (three
//! harmonics of a per-speaker fundamental under a slow amplitude
//! modulation), and burst placement is redrawn until the speech fraction
//! lands within the acceptance window around the target. The emitted CSV
//! uses the same interval format the label parser consumes, with rows
//! merged across channels in time order so cleaning is a no-op.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diarize_core::audio::{write_wav, AudioClip};

use crate::CliError;

/// Burst plans are accepted when the speech fraction is inside this window;
/// a little tighter than the documented +/- 0.05 so label truncation noise
/// cannot push a file outside it.
const FRACTION_WINDOW: f64 = 0.04;

/// Parameters of one generated corpus.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_files: usize,
    /// Seconds per file.
    pub duration: f64,
    /// Target fraction of speech per channel.
    pub speech_fraction: f64,
    /// RMS level of the always-present background noise.
    pub noise_dbfs: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_files: 6,
            duration: 30.0,
            speech_fraction: 0.4,
            noise_dbfs: -45.0,
            sample_rate: 44100,
            seed: 0,
        }
    }
}

/// A speech interval in seconds.
type Burst = (f64, f64);

/// Draw alternating gap/burst spans until the duration is covered.
fn draw_plan(rng: &mut ChaCha8Rng, duration: f64, fraction: f64) -> Vec<Burst> {
    let burst_mean = 1.6;
    let gap_mean = burst_mean * (1.0 - fraction) / fraction;
    let mut bursts = Vec::new();
    let mut t = rng.gen_range(0.0..gap_mean);
    while t < duration {
        let len = rng.gen_range(0.7 * burst_mean..1.3 * burst_mean);
        let end = (t + len).min(duration);
        if end - t >= 0.3 {
            bursts.push((t, end));
        }
        t = end + rng.gen_range(0.6 * gap_mean..1.4 * gap_mean);
    }
    bursts
}

fn plan_fraction(bursts: &[Burst], duration: f64) -> f64 {
    bursts.iter().map(|(s, e)| e - s).sum::<f64>() / duration
}

/// Redraw until the fraction acceptance window is hit; falls back to the
/// closest attempt if 200 draws all miss.
fn plan_channel(rng: &mut ChaCha8Rng, duration: f64, fraction: f64) -> Vec<Burst> {
    let mut best: Option<(f64, Vec<Burst>)> = None;
    for _ in 0..200 {
        let plan = draw_plan(rng, duration, fraction);
        let err = (plan_fraction(&plan, duration) - fraction).abs();
        if err <= FRACTION_WINDOW {
            return plan;
        }
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, plan));
        }
    }
    log::warn!("burst plan never hit the speech-fraction window; using closest draw");
    best.expect("at least one attempt").1
}

struct Voice {
    fundamental: f64,
    harmonic_amps: [f64; 3],
}

/// Render one channel: noise everywhere, modulated harmonics inside bursts.
fn render_channel(
    rng: &mut ChaCha8Rng,
    voice: &Voice,
    bursts: &[Burst],
    n_samples: usize,
    rate: f64,
    noise_rms: f64,
) -> Vec<f64> {
    // Uniform noise with the requested RMS.
    let noise_amp = noise_rms * 3f64.sqrt();
    let mut samples: Vec<f64> = (0..n_samples)
        .map(|_| rng.gen_range(-noise_amp..noise_amp))
        .collect();

    let amp_sum: f64 = voice.harmonic_amps.iter().sum();
    for &(start, end) in bursts {
        let peak = rng.gen_range(0.28..0.42);
        let phases: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
        let mod_freq = rng.gen_range(2.5..5.5);
        let mod_phase = rng.gen_range(0.0..2.0 * PI);
        let (i0, i1) = (
            (start * rate).ceil() as usize,
            ((end * rate).floor() as usize).min(n_samples),
        );
        let ramp = (0.01 * rate) as usize; // 10 ms fade against clicks
        for (offset, sample) in samples[i0..i1].iter_mut().enumerate() {
            let i = i0 + offset;
            let t = i as f64 / rate;
            let mut v = 0.0;
            for (h, (&a, &ph)) in voice.harmonic_amps.iter().zip(&phases).enumerate() {
                v += a * (2.0 * PI * voice.fundamental * (h + 1) as f64 * t + ph).sin();
            }
            v /= amp_sum;
            let modulation = 0.65 + 0.35 * (2.0 * PI * mod_freq * t + mod_phase).sin();
            let edge = (i - i0).min(i1 - 1 - i);
            let fade = if edge < ramp {
                edge as f64 / ramp as f64
            } else {
                1.0
            };
            *sample += peak * modulation * fade * v;
        }
    }
    samples
}

/// CSV rows for one channel: alternating N/S intervals covering the file.
fn channel_rows(bursts: &[Burst], duration: f64, tier: &str) -> Vec<(f64, String, String, f64)> {
    let mut rows = Vec::new();
    let mut cursor = 0.0;
    for &(start, end) in bursts {
        if start > cursor {
            rows.push((cursor, tier.to_string(), "N".to_string(), start));
        }
        rows.push((start, tier.to_string(), "S".to_string(), end));
        cursor = end;
    }
    if cursor < duration {
        rows.push((cursor, tier.to_string(), "N".to_string(), duration));
    }
    rows
}

fn write_csv(path: &Path, rows: &[(f64, String, String, f64)]) -> Result<(), CliError> {
    let mut text = String::from("tmin,tier,text,tmax\n");
    for (tmin, tier, tag, tmax) in rows {
        text.push_str(&format!("{tmin:.6},{tier},{tag},{tmax:.6}\n"));
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Generate `spec.n_files` WAV/CSV pairs; returns the written paths.
///
/// Deterministic: a fixed spec (seed included) produces byte-identical
/// output files.
pub fn synth_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    if !(0.0 < spec.speech_fraction && spec.speech_fraction < 1.0) {
        return Err(CliError::Usage(format!(
            "speech_fraction must be in (0, 1), got {}",
            spec.speech_fraction
        )));
    }
    if spec.duration < 1.0 {
        return Err(CliError::Usage("duration must be at least 1 second".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;

    let rate = f64::from(spec.sample_rate);
    let n_samples = (spec.duration * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.n_files);
    for file_idx in 0..spec.n_files {
        let voices = [
            Voice {
                fundamental: rng.gen_range(100.0..160.0),
                harmonic_amps: [1.0, 0.5, 0.3],
            },
            Voice {
                fundamental: rng.gen_range(180.0..250.0),
                harmonic_amps: [1.0, 0.45, 0.25],
            },
        ];
        let mut channels = Vec::with_capacity(2);
        let mut all_rows = Vec::new();
        for (ch, voice) in voices.iter().enumerate() {
            let bursts = plan_channel(&mut rng, spec.duration, spec.speech_fraction);
            let noise_rms = 10f64.powf(spec.noise_dbfs / 20.0);
            channels.push(render_channel(
                &mut rng, voice, &bursts, n_samples, rate, noise_rms,
            ));
            all_rows.push(channel_rows(
                &bursts,
                spec.duration,
                if ch == 0 { "CH1" } else { "CH2" },
            ));
        }
        // Merge the two channels' rows by start time, CH1 first on ties,
        // so the file is already in cleaned order.
        let [rows1, rows2] = <[_; 2]>::try_from(all_rows).expect("two channels");
        let mut merged = Vec::with_capacity(rows1.len() + rows2.len());
        let (mut i, mut j) = (0, 0);
        while i < rows1.len() || j < rows2.len() {
            let take_first = j >= rows2.len() || (i < rows1.len() && rows1[i].0 <= rows2[j].0);
            if take_first {
                merged.push(rows1[i].clone());
                i += 1;
            } else {
                merged.push(rows2[j].clone());
                j += 1;
            }
        }

        let clip = AudioClip::new(spec.sample_rate, channels)?;
        let wav = out_dir.join(format!("file_{file_idx:02}.wav"));
        let csv = out_dir.join(format!("file_{file_idx:02}.csv"));
        write_wav(&clip, &wav)?;
        write_csv(&csv, &merged)?;
        pairs.push((wav, csv));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diarize_core::labels::{clean_intervals, parse_label_csv, Tier};

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            n_files: 2,
            duration: 20.0,
            sample_rate: 8000,
            seed,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn corpus_is_byte_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = synth_corpus(&small_spec(5), dir_a.path()).unwrap();
        let b = synth_corpus(&small_spec(5), dir_b.path()).unwrap();
        for ((wa, ca), (wb, cb)) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(wa).unwrap(), std::fs::read(wb).unwrap());
            assert_eq!(std::fs::read(ca).unwrap(), std::fs::read(cb).unwrap());
        }
        let c = synth_corpus(&small_spec(6), dir_b.path()).unwrap();
        assert_ne!(
            std::fs::read(&a[0].0).unwrap(),
            std::fs::read(&c[0].0).unwrap()
        );
    }

    #[test]
    fn labeled_speech_lands_in_the_acceptance_window() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            n_files: 2,
            duration: 60.0,
            sample_rate: 8000,
            seed: 11,
            ..CorpusSpec::default()
        };
        for (_, csv) in synth_corpus(&spec, dir.path()).unwrap() {
            let table = parse_label_csv(&std::fs::read_to_string(csv).unwrap()).unwrap();
            for tier in ["CH1", "CH2"] {
                let speech: f64 = table
                    .rows
                    .iter()
                    .filter(|r| r.tier == tier && r.text == "S")
                    .map(|r| r.tmax - r.tmin)
                    .sum();
                assert!(
                    (21.0..=27.0).contains(&speech),
                    "{tier}: {speech} s of speech"
                );
            }
        }
    }

    #[test]
    fn generated_csv_is_already_clean() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synth_corpus(&small_spec(3), dir.path()).unwrap();
        for (_, csv) in pairs {
            let table = parse_label_csv(&std::fs::read_to_string(csv).unwrap()).unwrap();
            let outcome = clean_intervals(&table).unwrap();
            assert_eq!(outcome.table, table);
            assert_eq!((outcome.dropped, outcome.clamped), (0, 0));
        }
    }

    #[test]
    fn pair_round_trips_through_the_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(7);
        let pairs = synth_corpus(&spec, dir.path()).unwrap();
        let (wav, csv) = &pairs[0];
        let clip = diarize_core::audio::read_wav(wav).unwrap();
        assert_eq!(clip.channels.len(), 2);
        assert_eq!(clip.len(), 160_000);
        let table = clean_intervals(
            &parse_label_csv(&std::fs::read_to_string(csv).unwrap()).unwrap(),
        )
        .unwrap()
        .table;
        for (ch, tier) in [(0, Tier::Ch1), (1, Tier::Ch2)] {
            let m = diarize_core::segment::segment_channel(&clip.channels[ch], 8000.0, 0.1)
                .unwrap();
            let labels =
                diarize_core::labels::intervals_to_labels(&table, tier, m.n_segments(), 0.1)
                    .unwrap();
            let aligned = diarize_core::segment::align(&m, &labels, "x").unwrap();
            assert_eq!(aligned.segments.n_segments(), aligned.labels.len());
            assert_eq!(aligned.labels.len(), 200);
            // Both classes must be present for training to mean anything.
            assert!(aligned.labels.classes.contains(&1));
            assert!(aligned.labels.classes.contains(&0));
        }
    }
}
