//! Cross-entropy losses with exact analytic gradients.
//!
//! The binary head trains on logits through the numerically stable
//! `softplus(z) - y*z` form, so nothing overflows for any finite logit.
//! The four-class head uses max-shifted softmax cross-entropy.

use rand_chacha::ChaCha8Rng;

use crate::labels::{LabelScheme, LabelVector};

use super::{backward_cached, forward_cached, DropoutPlan, ModelSpec, NnError, ParamSet, Tensor};

/// Loss value, parameter gradients, and the logits they came from.
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamSet,
    pub logits: Tensor,
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn check_labels(spec: &ModelSpec, batch: &Tensor, labels: &LabelVector) -> Result<(), NnError> {
    if labels.scheme != spec.label_scheme() {
        return Err(NnError::SchemeMismatch {
            scheme: labels.scheme,
            n_outputs: spec.n_outputs,
        });
    }
    if labels.len() != batch.rows() {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} labels", batch.rows()),
            got: format!("{}", labels.len()),
        });
    }
    let limit = labels.scheme.n_classes() as u8;
    if let Some(&bad) = labels.classes.iter().find(|&&c| c >= limit) {
        return Err(NnError::LabelOutOfRange {
            label: bad,
            scheme: labels.scheme,
        });
    }
    Ok(())
}

/// Mean cross-entropy of logits against labels, plus d(loss)/d(logits).
pub(crate) fn loss_from_logits(
    logits: &Tensor,
    labels: &LabelVector,
    n_outputs: usize,
) -> (f64, Tensor) {
    let n = logits.rows();
    let scale = 1.0 / n as f64;
    let mut dlogits = Tensor::zeros(&[n, n_outputs]);
    let mut loss = 0.0;
    if n_outputs == 1 {
        for (i, (&z, &y)) in logits.data().iter().zip(&labels.classes).enumerate() {
            let y = f64::from(y);
            loss += (softplus(z) - y * z) * scale;
            dlogits.data_mut()[i] = (sigmoid(z) - y) * scale;
        }
    } else {
        for (i, (row, &y)) in logits
            .data()
            .chunks(n_outputs)
            .zip(&labels.classes)
            .enumerate()
        {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
            loss += (sum.ln() + m - row[y as usize]) * scale;
            let drow = &mut dlogits.data_mut()[i * n_outputs..(i + 1) * n_outputs];
            for (d, &z) in drow.iter_mut().zip(row) {
                *d = (z - m).exp() / sum * scale;
            }
            drow[y as usize] -= scale;
        }
    }
    (loss, dlogits)
}

/// Mean cross-entropy over the batch and its exact parameter gradients.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &LabelVector,
) -> Result<LossGrad, NnError> {
    loss_and_grad_inner(spec, params, batch, labels, None)
}

/// Training-path variant: draws inverted-dropout masks from `rng` when the
/// spec carries a non-zero dropout rate.
pub fn loss_and_grad_dropout(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &LabelVector,
    rng: &mut ChaCha8Rng,
) -> Result<LossGrad, NnError> {
    let plan = (spec.dropout > 0.0).then_some(DropoutPlan {
        rate: spec.dropout,
        rng,
    });
    loss_and_grad_inner(spec, params, batch, labels, plan)
}

fn loss_and_grad_inner(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &LabelVector,
    dropout: Option<DropoutPlan<'_>>,
) -> Result<LossGrad, NnError> {
    check_labels(spec, batch, labels)?;
    let (logits, cache) = forward_cached(spec, params, batch, dropout)?;
    let (loss, dlogits) = loss_from_logits(&logits, labels, spec.n_outputs);
    let grads = backward_cached(spec, params, batch, &cache, &dlogits)?;
    Ok(LossGrad {
        loss,
        grads,
        logits,
    })
}

/// Softmax probabilities of one logits row (for diagnostics and tests).
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

pub(crate) fn scheme_of(n_outputs: usize) -> LabelScheme {
    if n_outputs == 1 {
        LabelScheme::Binary
    } else {
        LabelScheme::FourClass
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelScheme;

    fn labels(classes: &[u8], scheme: LabelScheme) -> LabelVector {
        LabelVector {
            classes: classes.to_vec(),
            scheme,
            segment_duration: 0.1,
        }
    }

    #[test]
    fn binary_loss_known_values() {
        // logit 0 / y 1 -> ln 2; logit 1 / y 1 -> ln(1 + e^-1).
        let logits = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]);
        let (loss, _) = loss_from_logits(
            &logits,
            &labels(&[1, 1], LabelScheme::Binary),
            1,
        );
        let want = (2f64.ln() + (1.0 + (-1f64).exp()).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-15);
        assert!((want * 2.0 - 2f64.ln() - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn binary_loss_finite_for_extreme_logits() {
        let logits = Tensor::from_vec(&[4, 1], vec![-500.0, 500.0, -500.0, 500.0]);
        let (loss, d) = loss_from_logits(
            &logits,
            &labels(&[0, 1, 1, 0], LabelScheme::Binary),
            1,
        );
        assert!(loss.is_finite());
        assert!(d.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        for row in [
            vec![0.0, 0.0, 0.0, 0.0],
            vec![5.0, -3.0, 0.2, 1.7],
            vec![300.0, -300.0, 10.0, 9.0],
        ] {
            let p = softmax(&row);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn threshold_equals_logit_sign() {
        for z in [-3.0, -0.5, 0.0, 1e-12, 0.7, 42.0] {
            assert_eq!(sigmoid(z) > 0.5, z > 0.0, "logit {z}");
        }
    }

    #[test]
    fn four_class_loss_uniform_logits() {
        let logits = Tensor::from_vec(&[1, 4], vec![0.0; 4]);
        let (loss, d) = loss_from_logits(
            &logits,
            &labels(&[2], LabelScheme::FourClass),
            4,
        );
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // Gradient is softmax - onehot: 0.25 everywhere except -0.75 at y.
        assert!((d.data()[0] - 0.25).abs() < 1e-12);
        assert!((d.data()[2] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn dropout_applies_only_on_the_training_path() {
        use rand_chacha::rand_core::SeedableRng;
        let mut spec = super::super::tests::tiny_dense(&[8]);
        spec.dropout = 0.5;
        let params = super::super::init_params(&spec, 3).unwrap();
        let batch = Tensor::from_vec(&[3, 6], (0..18).map(|i| f64::from(i) * 0.1).collect());
        let labels = labels(&[1, 0, 1], LabelScheme::Binary);

        // Evaluation forward ignores dropout entirely.
        let eval_a = super::super::forward(&spec, &params, &batch).unwrap();
        let eval_b = super::super::forward(&spec, &params, &batch).unwrap();
        assert_eq!(eval_a, eval_b);

        // The training path masks activations, so its logits differ from
        // evaluation, deterministically per rng seed.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out_a = loss_and_grad_dropout(&spec, &params, &batch, &labels, &mut rng).unwrap();
        assert_ne!(out_a.logits, eval_a);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out_b = loss_and_grad_dropout(&spec, &params, &batch, &labels, &mut rng).unwrap();
        assert_eq!(out_a.logits, out_b.logits);
        assert_eq!(out_a.loss, out_b.loss);

        // Rate zero matches the plain loss exactly, rng or not.
        spec.dropout = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plain = loss_and_grad(&spec, &params, &batch, &labels).unwrap();
        let trained = loss_and_grad_dropout(&spec, &params, &batch, &labels, &mut rng).unwrap();
        assert_eq!(plain.loss, trained.loss);
        assert_eq!(plain.logits, trained.logits);
    }

    #[test]
    fn rejects_label_problems() {
        let spec = super::super::tests::tiny_dense(&[3]);
        let params = super::super::init_params(&spec, 0).unwrap();
        let batch = Tensor::from_vec(&[2, 6], vec![0.1; 12]);
        assert!(matches!(
            loss_and_grad(&spec, &params, &batch, &labels(&[0, 1], LabelScheme::FourClass)),
            Err(NnError::SchemeMismatch { .. })
        ));
        assert!(matches!(
            loss_and_grad(&spec, &params, &batch, &labels(&[0], LabelScheme::Binary)),
            Err(NnError::ShapeMismatch { .. })
        ));
        let bad = labels(&[0, 2], LabelScheme::Binary);
        assert!(matches!(
            loss_and_grad(&spec, &params, &batch, &bad),
            Err(NnError::LabelOutOfRange { label: 2, .. })
        ));
    }
}
