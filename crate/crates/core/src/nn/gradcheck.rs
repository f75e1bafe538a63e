//! Central finite-difference verification of the analytic gradients.
//!
//! The numerical side only ever calls the loss forward path, so it stays
//! independent of the backpropagation code it is checking.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::labels::LabelVector;

use super::loss::{loss_and_grad, scheme_of};
use super::{init_params, forward_cached, loss::loss_from_logits, ModelSpec, NnError, ParamSet, Tensor};

/// Step for central differences; with f64 loss values this balances
/// truncation against cancellation for O(1) losses.
const FD_STEP: f64 = 1e-5;

/// Gradients whose analytic and numeric magnitude both fall below this floor
/// count as matching; relative error is meaningless against noise.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name holding the worst element.
    pub worst_param: String,
    pub n_params: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max relative error {:.3e} over {} parameters (worst: {}, tolerance {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.n_params,
            self.worst_param,
            self.tolerance
        )
    }
}

fn loss_only(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &LabelVector,
) -> Result<f64, NnError> {
    let (logits, _) = forward_cached(spec, params, batch, None)?;
    Ok(loss_from_logits(&logits, labels, spec.n_outputs).0)
}

/// Compare analytic gradients against central differences on the given
/// batch and labels.
pub fn grad_check_on(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &LabelVector,
    tolerance: f64,
) -> Result<GradCheckReport, NnError> {
    let analytic = loss_and_grad(spec, params, batch, labels)?.grads;
    let mut probe = params.clone();
    let mut max_rel_error = 0.0f64;
    let mut worst_param = String::new();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let len = params.get(name)?.len();
        for i in 0..len {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + FD_STEP;
            let up = loss_only(spec, &probe, batch, labels)?;
            probe.get_mut(name)?.data_mut()[i] = orig - FD_STEP;
            let down = loss_only(spec, &probe, batch, labels)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(name)?.data()[i];
            let mag = a.abs().max(numeric.abs());
            let rel = if mag <= ABS_FLOOR {
                0.0
            } else {
                (a - numeric).abs() / mag
            };
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        n_params: params.n_params(),
        tolerance,
        pass: max_rel_error <= tolerance,
    })
}

/// Initialize a model from `seed`, draw a small random batch and labels,
/// and verify every parameter's gradient.
pub fn grad_check(spec: &ModelSpec, seed: u64, tolerance: f64) -> Result<GradCheckReport, NnError> {
    let params = init_params(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = 4usize;
    let width = spec.input_len();
    let data: Vec<f64> = (0..n * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Tensor::from_vec(&[n, width], data);
    let scheme = scheme_of(spec.n_outputs);
    let classes = (0..n)
        .map(|_| rng.gen_range(0..scheme.n_classes()) as u8)
        .collect();
    let labels = LabelVector {
        classes,
        scheme,
        segment_duration: 0.1,
    };
    grad_check_on(spec, &params, &batch, &labels, tolerance)
}

#[cfg(test)]
mod tests {
    use super::super::{Arch, ConvLayerSpec, ModelSpec};
    use super::*;

    const TOL: f64 = 1e-4;

    fn check(spec: ModelSpec) -> GradCheckReport {
        let report = grad_check(&spec, 42, TOL).unwrap();
        assert!(report.pass, "{report}");
        report
    }

    #[test]
    fn dense_single_hidden_layer() {
        check(ModelSpec {
            arch: Arch::Dense {
                input_width: 10,
                hidden: vec![7],
            },
            n_outputs: 1,
            dropout: 0.0,
        });
    }

    #[test]
    fn dense_two_hidden_layers_four_class() {
        check(ModelSpec {
            arch: Arch::Dense {
                input_width: 8,
                hidden: vec![6, 5],
            },
            n_outputs: 4,
            dropout: 0.0,
        });
    }

    #[test]
    fn lstm_two_layers() {
        check(ModelSpec {
            arch: Arch::Lstm {
                input_width: 20,
                steps: 4,
                layers: 2,
                cells: 3,
            },
            n_outputs: 1,
            dropout: 0.0,
        });
    }

    #[test]
    fn lstm_discards_residue_samples() {
        // 22 inputs over 4 steps uses only the first 20.
        check(ModelSpec {
            arch: Arch::Lstm {
                input_width: 22,
                steps: 4,
                layers: 1,
                cells: 4,
            },
            n_outputs: 1,
            dropout: 0.0,
        });
    }

    #[test]
    fn conv_with_pool_and_dense_tail() {
        check(ModelSpec {
            arch: Arch::Conv {
                input_shape: (8, 6),
                in_channels: 1,
                conv: vec![ConvLayerSpec::new(2, (3, 3), (2, 2))],
                dense: vec![5],
            },
            n_outputs: 1,
            dropout: 0.0,
        });
    }

    #[test]
    fn conv_two_stages_rectangular_four_class() {
        check(ModelSpec {
            arch: Arch::Conv {
                input_shape: (11, 4),
                in_channels: 2,
                conv: vec![
                    ConvLayerSpec::new(3, (3, 3), (2, 2)),
                    ConvLayerSpec::new(4, (3, 1), (1, 1)),
                ],
                dense: vec![6],
            },
            n_outputs: 4,
            dropout: 0.0,
        });
    }
}
