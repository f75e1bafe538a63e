//! Dataset splitting, the model catalog, mini-batch training, and
//! per-file evaluation.
//!
//! Files split 70/15/15 (validation and test sizes floor, the remainder
//! trains). In the binary scheme each channel of a file is an independent
//! dataset item; accuracy is reported per item and averaged arithmetically.
//! Training is deterministic for a fixed seed: initialization, shuffling,
//! and dropout all draw from seeded generators.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureEntry;
use crate::labels::{LabelScheme, LabelVector};
use crate::nn::{
    adam_step, classify_logits, forward, init_params, loss_and_grad_dropout, AdamState, Arch,
    ConvLayerSpec, ModelSpec, NnError, ParamSet, Tensor,
};
use crate::segment::AlignedDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 3 files to split, got {0}")]
    NotEnoughFiles(usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("accuracy of an empty list is undefined")]
    EmptyAccuracyList,
    #[error("prediction and truth differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("item {id}: expected {expected} features per segment, got {got}")]
    ItemShape {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("reshape into {steps} steps needs at least {steps} samples, got {len}")]
    BadReshape { steps: usize, len: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Deterministic 70/15/15 partition of file identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Shuffle by seed, then take floor(0.15 n) for validation and test each;
/// the remainder trains.
pub fn split_files(file_ids: &[String], seed: u64) -> Result<SplitPlan, TrainError> {
    let n = file_ids.len();
    if n < 3 {
        return Err(TrainError::NotEnoughFiles(n));
    }
    let mut ids = file_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = (0.15 * n as f64).floor() as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    let validation = ids.split_off(n_train + n_val);
    let mut train = ids;
    let val_or_test = train.split_off(n_train);
    Ok(SplitPlan {
        train,
        validation: val_or_test,
        test: validation,
        seed,
    })
}

/// Mini-batch training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Validation accuracy is recorded every this many batches.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            batch_size: 128,
            epochs: 10,
            learning_rate: 0.001,
            dropout: 0.0,
            eval_every: 50,
            seed: 0,
        }
    }
}

/// One channel's worth of model-ready features and labels.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    /// [n_segments, ...] feature tensor matching the model input.
    pub features: Tensor,
    pub labels: LabelVector,
}

impl DatasetItem {
    /// Raw waveform rows for the dense and recurrent models.
    pub fn from_aligned(a: &AlignedDataset) -> DatasetItem {
        let n = a.segments.n_segments();
        let w = a.segments.samples_per_segment();
        DatasetItem {
            id: a.source_id.clone(),
            features: Tensor::from_vec(&[n, w], a.segments.flat().to_vec()),
            labels: a.labels.clone(),
        }
    }

    /// Spectrogram features from a cache entry, promoted to f64. The
    /// optional log transform maps power p to ln(1 + p / eps) with a fixed
    /// eps, keeping zeros at zero.
    pub fn from_spectrograms(
        id: &str,
        entry: &FeatureEntry,
        labels: &LabelVector,
        log_power: bool,
    ) -> DatasetItem {
        let expand = |v: f32| {
            let p = f64::from(v);
            if log_power {
                (p / 1e-12).ln_1p()
            } else {
                p
            }
        };
        let dims = [
            entry.n_segments as usize,
            entry.height as usize,
            entry.width as usize,
        ];
        DatasetItem {
            id: id.to_string(),
            features: Tensor::from_vec(&dims, entry.data.iter().map(|&v| expand(v)).collect()),
            labels: labels.clone(),
        }
    }

    pub fn n_segments(&self) -> usize {
        self.features.rows()
    }
}

/// Items per split, ready for [`train`].
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub train: Vec<DatasetItem>,
    pub validation: Vec<DatasetItem>,
    pub test: Vec<DatasetItem>,
}

/// Everything a training run produces besides the parameters.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_train_accuracy: Vec<f64>,
    /// Mean loss of every mini-batch in order; the determinism witness.
    pub batch_losses: Vec<f64>,
    /// (global batch index, mean validation accuracy).
    pub validation_trace: Vec<(usize, f64)>,
    pub test_per_file: Vec<(String, f64)>,
    pub mean_test_accuracy: f64,
    /// Mean majority baseline over the test items.
    pub mean_test_baseline: f64,
    pub wall_seconds: f64,
}

fn gather_rows(items: &[DatasetItem]) -> (Tensor, Vec<u8>, f64) {
    let width = items[0].features.row_width();
    let total: usize = items.iter().map(DatasetItem::n_segments).sum();
    let mut data = Vec::with_capacity(total * width);
    let mut classes = Vec::with_capacity(total);
    for item in items {
        data.extend_from_slice(item.features.data());
        classes.extend_from_slice(&item.labels.classes);
    }
    (
        Tensor::from_vec(&[total, width], data),
        classes,
        items[0].labels.segment_duration,
    )
}

fn check_items(spec: &ModelSpec, items: &[DatasetItem]) -> Result<(), TrainError> {
    for item in items {
        if item.features.row_width() != spec.input_len() {
            return Err(TrainError::ItemShape {
                id: item.id.clone(),
                expected: spec.input_len(),
                got: item.features.row_width(),
            });
        }
        if item.labels.len() != item.n_segments() {
            return Err(TrainError::LengthMismatch(
                item.labels.len(),
                item.n_segments(),
            ));
        }
    }
    Ok(())
}

/// Classify every segment of a feature tensor.
pub fn predict_segments(
    spec: &ModelSpec,
    params: &ParamSet,
    features: &Tensor,
    segment_duration: f64,
) -> Result<LabelVector, TrainError> {
    let logits = forward(spec, params, features)?;
    Ok(LabelVector {
        classes: classify_logits(&logits, spec.n_outputs),
        scheme: spec.label_scheme(),
        segment_duration,
    })
}

/// Fraction of segments classified correctly.
pub fn file_accuracy(pred: &LabelVector, truth: &LabelVector) -> Result<f64, TrainError> {
    if pred.len() != truth.len() {
        return Err(TrainError::LengthMismatch(pred.len(), truth.len()));
    }
    let matches = pred
        .classes
        .iter()
        .zip(&truth.classes)
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64 / pred.len() as f64)
}

/// Arithmetic mean of per-file accuracies.
pub fn average_accuracy(per_file: &[f64]) -> Result<f64, TrainError> {
    if per_file.is_empty() {
        return Err(TrainError::EmptyAccuracyList);
    }
    Ok(per_file.iter().sum::<f64>() / per_file.len() as f64)
}

/// Accuracy of always guessing the most frequent class.
pub fn majority_baseline(labels: &LabelVector) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyAccuracyList);
    }
    let mut counts = [0usize; 4];
    for &c in &labels.classes {
        counts[c as usize] += 1;
    }
    Ok(counts.iter().max().copied().unwrap_or(0) as f64 / labels.len() as f64)
}

/// Reshape a segment into (steps, floor(len / steps)) row-major, discarding
/// the residue samples at the end.
pub fn prepare_rnn_input(segment: &[f64], steps: usize) -> Result<Tensor, TrainError> {
    if steps == 0 || steps > segment.len() {
        return Err(TrainError::BadReshape {
            steps,
            len: segment.len(),
        });
    }
    let width = segment.len() / steps;
    Ok(Tensor::from_vec(
        &[steps, width],
        segment[..steps * width].to_vec(),
    ))
}

fn mean_item_accuracy(
    spec: &ModelSpec,
    params: &ParamSet,
    items: &[DatasetItem],
) -> Result<f64, TrainError> {
    let accs = per_item_accuracy(spec, params, items)?;
    average_accuracy(&accs.iter().map(|(_, a)| *a).collect::<Vec<_>>())
}

/// (item id, accuracy) for every item.
pub fn per_item_accuracy(
    spec: &ModelSpec,
    params: &ParamSet,
    items: &[DatasetItem],
) -> Result<Vec<(String, f64)>, TrainError> {
    items
        .iter()
        .map(|item| {
            let pred = predict_segments(
                spec,
                params,
                &item.features,
                item.labels.segment_duration,
            )?;
            Ok((item.id.clone(), file_accuracy(&pred, &item.labels)?))
        })
        .collect()
}

/// Mini-batch Adam training over shuffled segments of the training items.
pub fn train(
    spec: &ModelSpec,
    data: &SplitData,
    hp: &Hyperparams,
) -> Result<(ParamSet, TrainReport), TrainError> {
    let start = Instant::now();
    let mut spec = spec.clone();
    spec.dropout = hp.dropout;
    spec.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    check_items(&spec, &data.train)?;
    check_items(&spec, &data.validation)?;
    check_items(&spec, &data.test)?;

    let (x, y, seg_dur) = gather_rows(&data.train);
    let n = x.rows();
    let width = x.row_width();
    let scheme = spec.label_scheme();
    if let Some(&bad) = y.iter().find(|&&c| c >= scheme.n_classes() as u8) {
        return Err(TrainError::Nn(NnError::LabelOutOfRange {
            label: bad,
            scheme,
        }));
    }

    let mut params = init_params(&spec, hp.seed)?;
    let mut adam = AdamState::new(&params, hp.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x1405_7b7e_f767_814f);

    let mut report = TrainReport {
        epoch_train_loss: Vec::with_capacity(hp.epochs),
        epoch_train_accuracy: Vec::with_capacity(hp.epochs),
        batch_losses: Vec::new(),
        validation_trace: Vec::new(),
        test_per_file: Vec::new(),
        mean_test_accuracy: 0.0,
        mean_test_baseline: 0.0,
        wall_seconds: 0.0,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let batch_size = hp.batch_size.max(1);
    let mut global_batch = 0usize;
    for _epoch in 0..hp.epochs.max(1) {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut bdata = Vec::with_capacity(chunk.len() * width);
            let mut bclasses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                bdata.extend_from_slice(&x.data()[idx * width..(idx + 1) * width]);
                bclasses.push(y[idx]);
            }
            let batch = Tensor::from_vec(&[chunk.len(), width], bdata);
            let blabels = LabelVector {
                classes: bclasses,
                scheme,
                segment_duration: seg_dur,
            };
            let out = loss_and_grad_dropout(&spec, &params, &batch, &blabels, &mut dropout_rng)?;
            adam_step(&mut params, &out.grads, &mut adam)?;

            report.batch_losses.push(out.loss);
            epoch_loss += out.loss * chunk.len() as f64;
            epoch_correct += classify_logits(&out.logits, spec.n_outputs)
                .iter()
                .zip(&blabels.classes)
                .filter(|(a, b)| a == b)
                .count();

            global_batch += 1;
            if !data.validation.is_empty() && global_batch.is_multiple_of(hp.eval_every.max(1)) {
                let acc = mean_item_accuracy(&spec, &params, &data.validation)?;
                report.validation_trace.push((global_batch, acc));
            }
        }
        report.epoch_train_loss.push(epoch_loss / n as f64);
        report
            .epoch_train_accuracy
            .push(epoch_correct as f64 / n as f64);
    }

    if !data.validation.is_empty() {
        let acc = mean_item_accuracy(&spec, &params, &data.validation)?;
        report.validation_trace.push((global_batch, acc));
    }
    if !data.test.is_empty() {
        report.test_per_file = per_item_accuracy(&spec, &params, &data.test)?;
        report.mean_test_accuracy = average_accuracy(
            &report
                .test_per_file
                .iter()
                .map(|(_, a)| *a)
                .collect::<Vec<_>>(),
        )?;
        let baselines: Vec<f64> = data
            .test
            .iter()
            .map(|item| majority_baseline(&item.labels))
            .collect::<Result<_, _>>()?;
        report.mean_test_baseline = average_accuracy(&baselines)?;
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, report))
}

impl TrainReport {
    /// Line-oriented human-readable log.
    pub fn write_log(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::new();
        for (i, (loss, acc)) in self
            .epoch_train_loss
            .iter()
            .zip(&self.epoch_train_accuracy)
            .enumerate()
        {
            out.push_str(&format!(
                "epoch {i}\ttrain_loss {loss:.6}\ttrain_accuracy {acc:.4}\n"
            ));
        }
        for (batch, acc) in &self.validation_trace {
            out.push_str(&format!("batch {batch}\tvalidation_accuracy {acc:.4}\n"));
        }
        for (id, acc) in &self.test_per_file {
            out.push_str(&format!("test\t{id}\t{acc:.4}\n"));
        }
        out.push_str(&format!("mean_test_accuracy\t{:.4}\n", self.mean_test_accuracy));
        std::fs::write(path, out).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Machine-readable key=value summary.
    pub fn write_summary(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::new();
        out.push_str(&format!("epochs={}\n", self.epoch_train_loss.len()));
        out.push_str(&format!("batches={}\n", self.batch_losses.len()));
        if let Some(loss) = self.epoch_train_loss.last() {
            out.push_str(&format!("final_train_loss={loss}\n"));
        }
        if let Some(acc) = self.epoch_train_accuracy.last() {
            out.push_str(&format!("final_train_accuracy={acc}\n"));
        }
        if let Some((_, acc)) = self.validation_trace.last() {
            out.push_str(&format!("final_validation_accuracy={acc}\n"));
        }
        out.push_str(&format!("mean_test_accuracy={}\n", self.mean_test_accuracy));
        out.push_str(&format!("mean_test_baseline={}\n", self.mean_test_baseline));
        out.push_str(&format!("wall_seconds={}\n", self.wall_seconds));
        std::fs::write(path, out).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Stock model configurations, keyed by input geometry.
pub mod catalog {
    use super::*;

    fn outputs(scheme: LabelScheme) -> usize {
        match scheme {
            LabelScheme::Binary => 1,
            LabelScheme::FourClass => 4,
        }
    }

    /// Single hidden layer of 100, 200, or 500 ReLU units.
    pub fn slp(input_width: usize, hidden: usize, scheme: LabelScheme) -> ModelSpec {
        ModelSpec {
            arch: Arch::Dense {
                input_width,
                hidden: vec![hidden],
            },
            n_outputs: outputs(scheme),
            dropout: 0.0,
        }
    }

    /// Two hidden layers; stock sizes are (100, 50), (200, 100)
    /// and (300, 50).
    pub fn mlp(input_width: usize, first: usize, second: usize, scheme: LabelScheme) -> ModelSpec {
        ModelSpec {
            arch: Arch::Dense {
                input_width,
                hidden: vec![first, second],
            },
            n_outputs: outputs(scheme),
            dropout: 0.0,
        }
    }

    /// Three LSTM layers of 150 cells over 22 steps.
    pub fn rnn(input_width: usize, scheme: LabelScheme) -> ModelSpec {
        ModelSpec {
            arch: Arch::Lstm {
                input_width,
                steps: 22,
                layers: 3,
                cells: 150,
            },
            n_outputs: outputs(scheme),
            dropout: 0.0,
        }
    }

    /// Convolutional net over spectrogram inputs: 16 3x3 kernels, 2x2
    /// max-pool, 32 3x1 kernels, then a 64-unit dense layer. The second
    /// kernel is 3x1 because a pooled 4-frame spectrogram is one column
    /// wide.
    pub fn cnn(input_shape: (usize, usize), in_channels: usize, scheme: LabelScheme) -> ModelSpec {
        ModelSpec {
            arch: Arch::Conv {
                input_shape,
                in_channels,
                conv: vec![
                    ConvLayerSpec::new(16, (3, 3), (2, 2)),
                    ConvLayerSpec::new(32, (3, 1), (1, 1)),
                ],
                dense: vec![64],
            },
            n_outputs: outputs(scheme),
            dropout: 0.0,
        }
    }
}
