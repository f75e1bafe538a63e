//! From-scratch neural network engine.
//!
//! A one-hidden-layer perceptron, deeper MLPs, stacked LSTM networks, and
//! a small convolutional net share one parameter store,
//! exact analytic backpropagation, sigmoid/softmax cross-entropy losses, and
//! an Adam optimizer. Everything runs in f64; determinism is part of the
//! contract: identical (spec, seed, batch sequence) gives identical results.

mod adam;
mod checkpoint;
mod conv;
mod dense;
mod gradcheck;
mod loss;
mod lstm;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_on, GradCheckReport};
pub use loss::{loss_and_grad, loss_and_grad_dropout, softmax, LossGrad};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::labels::LabelScheme;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("label {label} outside the {scheme:?} scheme")]
    LabelOutOfRange { label: u8, scheme: LabelScheme },
    #[error("label scheme {scheme:?} does not match {n_outputs} model outputs")]
    SchemeMismatch {
        scheme: LabelScheme,
        n_outputs: usize,
    },
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
    #[error("{0}: not a checkpoint file (bad magic)")]
    BadMagic(String),
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{0}: checkpoint file is truncated")]
    Truncated(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Shape-tagged row-major f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor {
            data: vec![0.0; dims.iter().product()],
            dims: dims.to_vec(),
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data does not fill its dims"
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First dimension; the batch axis for inputs.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Everything after the first dimension, flattened.
    pub fn row_width(&self) -> usize {
        self.dims.iter().skip(1).product()
    }
}

/// One convolution stage: kernel shape, then a max-pool (1 x 1 = none).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub pool: (usize, usize),
}

/// Architecture of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    /// Affine + ReLU hidden layers on a flat input row.
    Dense { input_width: usize, hidden: Vec<usize> },
    /// Input row reshaped to (steps, input_width / steps); stacked LSTM
    /// layers; the last step's top state feeds the output head.
    Lstm {
        input_width: usize,
        steps: usize,
        layers: usize,
        cells: usize,
    },
    /// Valid-padding convolutions with ReLU and max-pooling over a
    /// (height, width, channels) input, then dense layers.
    Conv {
        input_shape: (usize, usize),
        in_channels: usize,
        conv: Vec<ConvLayerSpec>,
        dense: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Slp,
    Mlp,
    Rnn,
    Cnn,
}

/// A classifier description: architecture, output count, dropout rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// 1 = binary head (sigmoid), 4 = four-class head (softmax).
    pub n_outputs: usize,
    /// Train-time inverted dropout on hidden activations; 0 disables it.
    pub dropout: f64,
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match &self.arch {
            Arch::Dense { hidden, .. } if hidden.len() <= 1 => ModelKind::Slp,
            Arch::Dense { .. } => ModelKind::Mlp,
            Arch::Lstm { .. } => ModelKind::Rnn,
            Arch::Conv { .. } => ModelKind::Cnn,
        }
    }

    /// Flat values expected per batch row.
    pub fn input_len(&self) -> usize {
        match &self.arch {
            Arch::Dense { input_width, .. } | Arch::Lstm { input_width, .. } => *input_width,
            Arch::Conv {
                input_shape,
                in_channels,
                ..
            } => input_shape.0 * input_shape.1 * in_channels,
        }
    }

    /// Samples fed per LSTM step; None for other architectures.
    pub fn step_width(&self) -> Option<usize> {
        match &self.arch {
            Arch::Lstm {
                input_width, steps, ..
            } => Some(input_width / steps),
            _ => None,
        }
    }

    pub fn label_scheme(&self) -> LabelScheme {
        if self.n_outputs == 1 {
            LabelScheme::Binary
        } else {
            LabelScheme::FourClass
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_outputs != 1 && self.n_outputs != 4 {
            return Err(NnError::BadSpec(format!(
                "n_outputs must be 1 or 4, got {}",
                self.n_outputs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::BadSpec(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        match &self.arch {
            Arch::Dense { input_width, .. } => {
                if *input_width == 0 {
                    return Err(NnError::BadSpec("zero input width".into()));
                }
            }
            Arch::Lstm {
                input_width,
                steps,
                layers,
                cells,
            } => {
                if *steps == 0 || *layers == 0 || *cells == 0 {
                    return Err(NnError::BadSpec("zero lstm dimension".into()));
                }
                if input_width / steps == 0 {
                    return Err(NnError::BadSpec(format!(
                        "{steps} steps leave no samples per step of a {input_width} wide input"
                    )));
                }
            }
            Arch::Conv { .. } => {
                conv::flatten_width(self)?;
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order shared by initialization,
/// gradients, the optimizer, and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    fn new() -> ParamSet {
        ParamSet {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn n_tensors(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and shapes, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.dims)))
                .collect(),
        }
    }
}

pub(crate) const LSTM_GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Parameter names and shapes for a spec, in construction order.
fn param_layout(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>)>, NnError> {
    spec.validate()?;
    let mut layout = Vec::new();
    match &spec.arch {
        Arch::Dense {
            input_width,
            hidden,
        } => {
            let mut prev = *input_width;
            for (i, &h) in hidden.iter().enumerate() {
                layout.push((format!("dense{i}.w"), vec![prev, h]));
                layout.push((format!("dense{i}.b"), vec![h]));
                prev = h;
            }
            layout.push(("out.w".into(), vec![prev, spec.n_outputs]));
            layout.push(("out.b".into(), vec![spec.n_outputs]));
        }
        Arch::Lstm {
            input_width,
            steps,
            layers,
            cells,
        } => {
            let mut prev = input_width / steps;
            for l in 0..*layers {
                for gate in LSTM_GATES {
                    layout.push((format!("lstm{l}.wx_{gate}"), vec![prev, *cells]));
                    layout.push((format!("lstm{l}.wh_{gate}"), vec![*cells, *cells]));
                    layout.push((format!("lstm{l}.b_{gate}"), vec![*cells]));
                }
                prev = *cells;
            }
            layout.push(("out.w".into(), vec![*cells, spec.n_outputs]));
            layout.push(("out.b".into(), vec![spec.n_outputs]));
        }
        Arch::Conv {
            in_channels,
            conv,
            dense,
            ..
        } => {
            let mut prev_ch = *in_channels;
            for (i, c) in conv.iter().enumerate() {
                layout.push((
                    format!("conv{i}.k"),
                    vec![c.out_channels, prev_ch, c.kernel.0, c.kernel.1],
                ));
                layout.push((format!("conv{i}.b"), vec![c.out_channels]));
                prev_ch = c.out_channels;
            }
            let mut prev = conv::flatten_width(spec)?;
            for (i, &h) in dense.iter().enumerate() {
                layout.push((format!("dense{i}.w"), vec![prev, h]));
                layout.push((format!("dense{i}.b"), vec![h]));
                prev = h;
            }
            layout.push(("out.w".into(), vec![prev, spec.n_outputs]));
            layout.push(("out.b".into(), vec![spec.n_outputs]));
        }
    }
    Ok(layout)
}

/// Glorot-uniform weights, zero biases, forget-gate biases at 1.
///
/// Deterministic: a fixed (spec, seed) always produces the same values.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet, NnError> {
    let layout = param_layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, dims) in layout {
        let is_bias = dims.len() == 1;
        let mut t = Tensor::zeros(&dims);
        if is_bias {
            if name.ends_with(".b_f") {
                t.data.fill(1.0);
            }
        } else {
            let (fan_in, fan_out) = match dims.len() {
                2 => (dims[0], dims[1]),
                4 => (dims[1] * dims[2] * dims[3], dims[0] * dims[2] * dims[3]),
                _ => unreachable!("weights are rank 2 or 4"),
            };
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.gen_range(-r..r);
            }
        }
        params.push(name, t);
    }
    Ok(params)
}

fn check_input(spec: &ModelSpec, batch: &Tensor) -> Result<(), NnError> {
    if batch.rows() == 0 || batch.row_width() != spec.input_len() {
        return Err(NnError::ShapeMismatch {
            expected: format!("[n >= 1, {}]", spec.input_len()),
            got: format!("{:?}", batch.dims()),
        });
    }
    Ok(())
}

/// Per-element inverted-dropout masks: 0 with probability p, else 1/(1-p).
pub(crate) struct DropoutPlan<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl DropoutPlan<'_> {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect()
    }
}

pub(crate) enum Cache {
    Dense(dense::DenseCache),
    Lstm(lstm::LstmCache),
    Conv(conv::ConvCache),
}

pub(crate) fn forward_cached(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    mut dropout: Option<DropoutPlan<'_>>,
) -> Result<(Tensor, Cache), NnError> {
    check_input(spec, batch)?;
    if spec.dropout == 0.0 {
        dropout = None;
    }
    match &spec.arch {
        Arch::Dense { .. } => {
            let (logits, cache) = dense::forward(spec, params, batch, dropout)?;
            Ok((logits, Cache::Dense(cache)))
        }
        Arch::Lstm { .. } => {
            let (logits, cache) = lstm::forward(spec, params, batch, dropout)?;
            Ok((logits, Cache::Lstm(cache)))
        }
        Arch::Conv { .. } => {
            let (logits, cache) = conv::forward(spec, params, batch, dropout)?;
            Ok((logits, Cache::Conv(cache)))
        }
    }
}

pub(crate) fn backward_cached(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    cache: &Cache,
    dlogits: &Tensor,
) -> Result<ParamSet, NnError> {
    let mut grads = params.zeros_like();
    match (&spec.arch, cache) {
        (Arch::Dense { .. }, Cache::Dense(c)) => {
            dense::backward(spec, params, batch, c, dlogits, &mut grads)?
        }
        (Arch::Lstm { .. }, Cache::Lstm(c)) => {
            lstm::backward(spec, params, batch, c, dlogits, &mut grads)?
        }
        (Arch::Conv { .. }, Cache::Conv(c)) => {
            conv::backward(spec, params, c, dlogits, &mut grads)?
        }
        _ => unreachable!("cache kind always matches arch"),
    }
    Ok(grads)
}

/// Evaluation-mode forward pass: returns logits, no dropout applied.
pub fn forward(spec: &ModelSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor, NnError> {
    forward_cached(spec, params, batch, None).map(|(logits, _)| logits)
}

/// Class decisions from logits: positive logit for the binary head (an exact
/// 0 ties to class 0), first-wins argmax for the four-class head.
pub fn classify_logits(logits: &Tensor, n_outputs: usize) -> Vec<u8> {
    logits
        .data()
        .chunks(n_outputs)
        .map(|row| {
            if n_outputs == 1 {
                u8::from(row[0] > 0.0)
            } else {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u8
            }
        })
        .collect()
}

/// Forward pass plus thresholding.
pub fn predict(spec: &ModelSpec, params: &ParamSet, batch: &Tensor) -> Result<Vec<u8>, NnError> {
    Ok(classify_logits(&forward(spec, params, batch)?, spec.n_outputs))
}
