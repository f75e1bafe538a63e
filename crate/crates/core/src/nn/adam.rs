//! Adam with bias-corrected moment estimates.

use super::{NnError, ParamSet, Tensor};

/// Optimizer state: one first- and second-moment tensor per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, learning_rate: f64) -> AdamState {
        AdamState {
            m: params.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect(),
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One update: m and v track the gradient and its square, bias correction
/// divides out the warm-up, and the step is `lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
) -> Result<(), NnError> {
    if state.m.len() != params.n_tensors() || grads.n_tensors() != params.n_tensors() {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} tensors", params.n_tensors()),
            got: format!("{} grads / {} moments", grads.n_tensors(), state.m.len()),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (((_, p), (gname, g)), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.dims() != g.dims() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", p.dims()),
                got: format!("{gname}: {:?}", g.dims()),
            });
        }
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -=
                state.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, tests::tiny_dense};
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let spec = tiny_dense(&[3]);
        let mut params = init_params(&spec, 5).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params, 0.001);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    /// Scalar reference implementation of the recurrence.
    fn scalar_adam(theta0: f64, gs: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        theta
    }

    fn one_param_setup() -> (super::super::ModelSpec, ParamSet) {
        // A 1x1 output weight is the scalar under test; everything else
        // gets zero gradients.
        let spec = super::super::ModelSpec {
            arch: super::super::Arch::Dense {
                input_width: 1,
                hidden: vec![],
            },
            n_outputs: 1,
            dropout: 0.0,
        };
        let params = init_params(&spec, 0).unwrap().zeros_like();
        (spec, params)
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let (_, mut params) = one_param_setup();
        let mut grads = params.zeros_like();
        grads.get_mut("out.w").unwrap().data_mut()[0] = 1.0;
        let mut state = AdamState::new(&params, 0.001);
        adam_step(&mut params, &grads, &mut state).unwrap();
        // m_hat = v_hat = 1, so the step is -lr / (1 + eps).
        let got = params.get("out.w").unwrap().data()[0];
        assert!((got - (-0.000_999_999_99)).abs() < 1e-12, "got {got}");
        assert!((got - scalar_adam(0.0, &[1.0], 0.001)).abs() < 1e-18);
    }

    #[test]
    fn two_steps_match_scalar_trace() {
        let (_, mut params) = one_param_setup();
        let mut state = AdamState::new(&params, 0.001);
        for _ in 0..2 {
            let mut grads = params.zeros_like();
            grads.get_mut("out.w").unwrap().data_mut()[0] = 1.0;
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        let got = params.get("out.w").unwrap().data()[0];
        let want = scalar_adam(0.0, &[1.0, 1.0], 0.001);
        assert!((got - want).abs() < 1e-15, "got {got} want {want}");
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let spec = tiny_dense(&[2]);
        let mut params = init_params(&spec, 1).unwrap();
        let mut state = AdamState::new(&params, 0.01);
        for step in 0..5 {
            let mut grads = params.zeros_like();
            for (_, g) in grads.iter_mut() {
                for (i, v) in g.data_mut().iter_mut().enumerate() {
                    *v = ((step * 7 + i) as f64 * 0.63).sin();
                }
            }
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        assert!(state.v.iter().all(|t| t.data().iter().all(|&v| v >= 0.0)));
        assert_eq!(state.t, 5);
    }
}
