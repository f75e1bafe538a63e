//! From WAV/CSV pairs on disk to model-ready split datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diarize_core::audio::read_wav;
use diarize_core::features::{FeatureCache, FeatureEntry, StftParams};
use diarize_core::labels::{
    clean_intervals, intervals_to_labels, merge_four_class, parse_label_csv, LabelScheme, Tier,
};
use diarize_core::nn::{ModelSpec, Tensor};
use diarize_core::segment::{align, segment_channel, AlignedDataset};
use diarize_core::train::{catalog, DatasetItem, SplitData, SplitPlan};

use crate::config::{ModelChoice, Settings};
use crate::CliError;

/// One stem.wav / stem.csv pair found in a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub stem: String,
    pub wav: PathBuf,
    pub csv: PathBuf,
}

/// Find all WAV files with a CSV sibling, sorted by stem.
pub fn scan_corpus(dir: &Path) -> Result<Vec<CorpusFile>, CliError> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|x| x == "wav") {
            let csv = path.with_extension("csv");
            if csv.is_file() {
                files.push(CorpusFile {
                    stem: path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    wav: path,
                    csv,
                });
            }
        }
    }
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no wav/csv pairs found",
            dir.display()
        )));
    }
    files.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(files)
}

/// Segmented, downsampled, and label-aligned channels of one file.
pub struct PreparedFile {
    pub stem: String,
    /// Index 0 is CH1.
    pub channels: Vec<AlignedDataset>,
}

/// Decode, segment at the clip rate, decimate rows, and align labels.
pub fn prepare_file(file: &CorpusFile, settings: &Settings) -> Result<PreparedFile, CliError> {
    let clip = read_wav(&file.wav)?;
    let text = std::fs::read_to_string(&file.csv)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", file.csv.display())))?;
    let table = clean_intervals(&parse_label_csv(&text)?)?.table;
    let mut channels = Vec::with_capacity(clip.channels.len());
    for (idx, samples) in clip.channels.iter().enumerate() {
        let tier = if idx == 0 { Tier::Ch1 } else { Tier::Ch2 };
        let matrix = segment_channel(samples, f64::from(clip.sample_rate), settings.segment_sec)?
            .downsample_rows(settings.downsample)?;
        let labels = intervals_to_labels(
            &table,
            tier,
            matrix.n_segments(),
            settings.segment_sec,
        )?;
        let id = format!("{}:ch{}", file.stem, idx + 1);
        channels.push(align(&matrix, &labels, &id)?);
    }
    Ok(PreparedFile {
        stem: file.stem.clone(),
        channels,
    })
}

/// Interleave per-channel tensors into one channels-last tensor.
fn stack_channels(parts: &[&Tensor]) -> Tensor {
    let n = parts[0].rows();
    let width = parts[0].row_width();
    let chs = parts.len();
    let mut data = vec![0.0; n * width * chs];
    for (c, part) in parts.iter().enumerate() {
        for (i, &v) in part.data().iter().enumerate() {
            data[i * chs + c] = v;
        }
    }
    let mut dims = parts[0].dims().to_vec();
    dims.push(chs);
    Tensor::from_vec(&dims, data)
}

/// Raw-waveform items: one per channel for the binary scheme, one per file
/// (channels concatenated side by side) for the four-class scheme.
pub fn raw_items(prepared: &PreparedFile, scheme: LabelScheme) -> Result<Vec<DatasetItem>, CliError> {
    match scheme {
        LabelScheme::Binary => Ok(prepared
            .channels
            .iter()
            .map(DatasetItem::from_aligned)
            .collect()),
        LabelScheme::FourClass => {
            let [a, b] = &prepared.channels[..] else {
                return Err(CliError::Data(format!(
                    "{}: four-class labels need exactly two channels",
                    prepared.stem
                )));
            };
            let n = a.segments.n_segments().min(b.segments.n_segments());
            let w = a.segments.samples_per_segment();
            let mut data = Vec::with_capacity(n * w * 2);
            for i in 0..n {
                data.extend_from_slice(a.segments.row(i));
                data.extend_from_slice(b.segments.row(i));
            }
            let mut la = a.labels.clone();
            la.classes.truncate(n);
            let mut lb = b.labels.clone();
            lb.classes.truncate(n);
            Ok(vec![DatasetItem {
                id: prepared.stem.clone(),
                features: Tensor::from_vec(&[n, 2 * w], data),
                labels: merge_four_class(&la, &lb)?,
            }])
        }
    }
}

/// Spectrogram items, computing features or pulling them from a cache.
pub fn spectro_items(
    prepared: &PreparedFile,
    scheme: LabelScheme,
    cache: Option<&FeatureCache>,
    params: &StftParams,
    log_power: bool,
) -> Result<Vec<DatasetItem>, CliError> {
    let mut per_channel = Vec::with_capacity(prepared.channels.len());
    for aligned in &prepared.channels {
        let entry = match cache.and_then(|c| c.get(&aligned.source_id)) {
            Some(e) => e.clone(),
            None => FeatureCache::entry_from_segments(&aligned.segments, params)?,
        };
        per_channel.push(DatasetItem::from_spectrograms(
            &aligned.source_id,
            &entry,
            &aligned.labels,
            log_power,
        ));
    }
    match scheme {
        LabelScheme::Binary => Ok(per_channel),
        LabelScheme::FourClass => {
            let [a, b] = &per_channel[..] else {
                return Err(CliError::Data(format!(
                    "{}: four-class labels need exactly two channels",
                    prepared.stem
                )));
            };
            let n = a.n_segments().min(b.n_segments());
            let slice = |item: &DatasetItem| {
                let width = item.features.row_width();
                Tensor::from_vec(
                    &[n, item.features.dims()[1], item.features.dims()[2]],
                    item.features.data()[..n * width].to_vec(),
                )
            };
            let (fa, fb) = (slice(a), slice(b));
            let mut la = a.labels.clone();
            la.classes.truncate(n);
            let mut lb = b.labels.clone();
            lb.classes.truncate(n);
            Ok(vec![DatasetItem {
                id: prepared.stem.clone(),
                features: stack_channels(&[&fa, &fb]),
                labels: merge_four_class(&la, &lb)?,
            }])
        }
    }
}

/// Spectrogram cache covering every channel of every prepared file.
pub fn build_cache(
    prepared: &[PreparedFile],
    params: &StftParams,
) -> Result<FeatureCache, CliError> {
    let mut cache = FeatureCache::new(*params);
    for file in prepared {
        for aligned in &file.channels {
            let entry: FeatureEntry =
                FeatureCache::entry_from_segments(&aligned.segments, params)?;
            cache.insert(&aligned.source_id, entry)?;
        }
    }
    Ok(cache)
}

/// Items for all stems of one split, in plan order.
fn items_for(
    stems: &[String],
    by_stem: &BTreeMap<String, Vec<DatasetItem>>,
) -> Vec<DatasetItem> {
    stems
        .iter()
        .flat_map(|s| by_stem.get(s).cloned().unwrap_or_default())
        .collect()
}

/// Distribute per-stem items into the three splits of a plan.
pub fn assemble_split(
    plan: &SplitPlan,
    by_stem: BTreeMap<String, Vec<DatasetItem>>,
) -> SplitData {
    SplitData {
        train: items_for(&plan.train, &by_stem),
        validation: items_for(&plan.validation, &by_stem),
        test: items_for(&plan.test, &by_stem),
    }
}

/// The model spec the settings describe for the given feature geometry.
pub fn model_spec(settings: &Settings, sample_item: &DatasetItem) -> Result<ModelSpec, CliError> {
    let scheme = if settings.classes == 2 {
        LabelScheme::Binary
    } else {
        LabelScheme::FourClass
    };
    let dims = sample_item.features.dims();
    let spec = match settings.model {
        ModelChoice::Slp => catalog::slp(sample_item.features.row_width(), settings.slp_hidden, scheme),
        ModelChoice::Mlp => catalog::mlp(
            sample_item.features.row_width(),
            settings.mlp_hidden.0,
            settings.mlp_hidden.1,
            scheme,
        ),
        ModelChoice::Rnn => {
            let mut spec = catalog::rnn(sample_item.features.row_width(), scheme);
            if let diarize_core::nn::Arch::Lstm { steps, .. } = &mut spec.arch {
                *steps = settings.steps;
            }
            spec
        }
        ModelChoice::Cnn => {
            let (shape, in_channels) = match *dims {
                [_, h, w] => ((h, w), 1),
                [_, h, w, c] => ((h, w), c),
                _ => {
                    return Err(CliError::Data(format!(
                        "item {} is not a spectrogram batch",
                        sample_item.id
                    )))
                }
            };
            catalog::cnn(shape, in_channels, scheme)
        }
    };
    let mut spec = spec;
    spec.dropout = settings.dropout;
    spec.validate().map_err(CliError::from)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, CorpusSpec};
    use diarize_core::train::split_files;

    fn settings_8k() -> Settings {
        Settings::default()
    }

    #[test]
    fn scan_prepare_and_assemble() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            n_files: 3,
            duration: 10.0,
            sample_rate: 8000,
            seed: 2,
            ..CorpusSpec::default()
        };
        synth_corpus(&spec, dir.path()).unwrap();
        let files = scan_corpus(dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(files[0].stem, "file_00");

        let settings = settings_8k();
        let mut by_stem = BTreeMap::new();
        for f in &files {
            let prepared = prepare_file(f, &settings).unwrap();
            // 8000 Hz, 0.1 s, downsample 4 -> 200 samples per segment.
            assert_eq!(prepared.channels[0].segments.samples_per_segment(), 200);
            assert_eq!(prepared.channels[0].segments.n_segments(), 100);
            by_stem.insert(
                f.stem.clone(),
                raw_items(&prepared, LabelScheme::Binary).unwrap(),
            );
        }
        let stems: Vec<String> = files.iter().map(|f| f.stem.clone()).collect();
        let plan = split_files(&stems, 1).unwrap();
        let data = assemble_split(&plan, by_stem);
        assert_eq!(data.train.len(), 6, "three files, two channels, no val/test");
        assert!(data.validation.is_empty());
    }

    #[test]
    fn four_class_items_concatenate_channels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            n_files: 1,
            duration: 5.0,
            sample_rate: 8000,
            seed: 4,
            ..CorpusSpec::default()
        };
        synth_corpus(&spec, dir.path()).unwrap();
        let files = scan_corpus(dir.path()).unwrap();
        let prepared = prepare_file(&files[0], &settings_8k()).unwrap();
        let items = raw_items(&prepared, LabelScheme::FourClass).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].features.dims(), &[50, 400]);
        assert_eq!(items[0].labels.scheme, LabelScheme::FourClass);
        // First half of each row is CH1, second half CH2.
        let ch1_row = prepared.channels[0].segments.row(0);
        assert_eq!(&items[0].features.data()[..200], ch1_row);
    }

    #[test]
    fn spectro_items_have_expected_dims() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            n_files: 1,
            duration: 5.0,
            seed: 9,
            ..CorpusSpec::default()
        };
        synth_corpus(&spec, dir.path()).unwrap();
        let files = scan_corpus(dir.path()).unwrap();
        let prepared = prepare_file(&files[0], &settings_8k()).unwrap();
        let params = StftParams::default();
        let items =
            spectro_items(&prepared, LabelScheme::Binary, None, &params, false).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].features.dims(), &[50, 129, 4]);

        // Cached entries are used verbatim.
        let cache = build_cache(&[prepared], &params).unwrap();
        assert_eq!(cache.len(), 2);
        let files = scan_corpus(dir.path()).unwrap();
        let prepared = prepare_file(&files[0], &settings_8k()).unwrap();
        let cached =
            spectro_items(&prepared, LabelScheme::Binary, Some(&cache), &params, false).unwrap();
        assert_eq!(cached[0].features.dims(), &[50, 129, 4]);
        let four =
            spectro_items(&prepared, LabelScheme::FourClass, Some(&cache), &params, false)
                .unwrap();
        assert_eq!(four[0].features.dims(), &[50, 129, 4, 2]);
    }

    #[test]
    fn model_specs_from_settings() {
        let item = DatasetItem {
            id: "x".into(),
            features: Tensor::from_vec(&[3, 1102], vec![0.0; 3 * 1102]),
            labels: diarize_core::labels::LabelVector {
                classes: vec![0; 3],
                scheme: LabelScheme::Binary,
                segment_duration: 0.1,
            },
        };
        let mut settings = Settings::default();
        let spec = model_spec(&settings, &item).unwrap();
        assert_eq!(spec.input_len(), 1102);
        settings.model = ModelChoice::Rnn;
        let spec = model_spec(&settings, &item).unwrap();
        assert_eq!(spec.step_width(), Some(50));
    }
}
