//! Stacked LSTM forward and backward-through-time passes.
//!
//! Standard cell, no peepholes: gates i/f/o are sigmoids, the candidate g is
//! a tanh, `c_t = f*c_{t-1} + i*g`, `h_t = o*tanh(c_t)`. Each batch row is
//! reshaped to (steps, step_width); trailing samples that do not fill a step
//! are ignored. The head reads the top layer's last hidden state.

use crate::linalg::{add_bias, matmul_acc, matmul_nt_acc, matmul_tn_acc};

use super::{Arch, DropoutPlan, ModelSpec, NnError, ParamSet, Tensor, LSTM_GATES};

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Activations of one layer at one step, each [n, cells].
struct StepState {
    gates: [Vec<f64>; 4], // i, f, g, o after their nonlinearities
    c: Vec<f64>,
    h: Vec<f64>,
}

pub(crate) struct LstmCache {
    /// [layer][step] cell activations.
    states: Vec<Vec<StepState>>,
    /// Per-step input matrices of layer 0, each [n, step_width].
    inputs: Vec<Tensor>,
    /// Dropout masks applied to each layer's step outputs, when active.
    drop: Vec<Vec<Option<Vec<f64>>>>,
    head: super::dense::DenseCache,
}

struct LayerParams<'a> {
    wx: [&'a Tensor; 4],
    wh: [&'a Tensor; 4],
    b: [&'a Tensor; 4],
}

fn layer_params<'a>(params: &'a ParamSet, layer: usize) -> Result<LayerParams<'a>, NnError> {
    let grab = |kind: &str, gate: &str| params.get(&format!("lstm{layer}.{kind}_{gate}"));
    Ok(LayerParams {
        wx: [
            grab("wx", "i")?,
            grab("wx", "f")?,
            grab("wx", "g")?,
            grab("wx", "o")?,
        ],
        wh: [
            grab("wh", "i")?,
            grab("wh", "f")?,
            grab("wh", "g")?,
            grab("wh", "o")?,
        ],
        b: [
            grab("b", "i")?,
            grab("b", "f")?,
            grab("b", "g")?,
            grab("b", "o")?,
        ],
    })
}

pub(crate) fn forward(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    mut dropout: Option<DropoutPlan<'_>>,
) -> Result<(Tensor, LstmCache), NnError> {
    let Arch::Lstm {
        input_width,
        steps,
        layers,
        cells,
    } = spec.arch
    else {
        unreachable!("lstm forward on lstm arch");
    };
    let n = batch.rows();
    let step_width = input_width / steps;

    // Slice the batch into per-step input matrices.
    let inputs: Vec<Tensor> = (0..steps)
        .map(|t| {
            let mut data = Vec::with_capacity(n * step_width);
            for r in 0..n {
                let row = &batch.data()[r * input_width..(r + 1) * input_width];
                data.extend_from_slice(&row[t * step_width..(t + 1) * step_width]);
            }
            Tensor::from_vec(&[n, step_width], data)
        })
        .collect();

    let mut states: Vec<Vec<StepState>> = Vec::with_capacity(layers);
    let mut drop: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(layers);
    let mut layer_in: Vec<Tensor> = inputs.clone();

    for layer in 0..layers {
        let p = layer_params(params, layer)?;
        let in_width = layer_in[0].row_width();
        let mut layer_states = Vec::with_capacity(steps);
        let mut layer_drop = Vec::with_capacity(steps);
        let mut h_prev = vec![0.0; n * cells];
        let mut c_prev = vec![0.0; n * cells];
        let mut layer_out = Vec::with_capacity(steps);
        for x_t in &layer_in {
            // Pre-activations for the four gates.
            let mut pre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n * cells]);
            for (gi, buf) in pre.iter_mut().enumerate() {
                matmul_acc(x_t.data(), p.wx[gi].data(), buf, n, in_width, cells);
                matmul_acc(&h_prev, p.wh[gi].data(), buf, n, cells, cells);
                add_bias(buf, p.b[gi].data());
            }
            let [pi, pf, pg, po] = pre;
            let i: Vec<f64> = pi.iter().map(|&z| sigmoid(z)).collect();
            let f: Vec<f64> = pf.iter().map(|&z| sigmoid(z)).collect();
            let g: Vec<f64> = pg.iter().map(|&z| z.tanh()).collect();
            let o: Vec<f64> = po.iter().map(|&z| sigmoid(z)).collect();
            let mut c = vec![0.0; n * cells];
            for idx in 0..n * cells {
                c[idx] = f[idx] * c_prev[idx] + i[idx] * g[idx];
            }
            let mut h = vec![0.0; n * cells];
            for idx in 0..n * cells {
                h[idx] = o[idx] * c[idx].tanh();
            }
            let mask = dropout.as_mut().map(|d| d.mask(n * cells));
            let mut out = h.clone();
            if let Some(m) = &mask {
                for (v, &k) in out.iter_mut().zip(m) {
                    *v *= k;
                }
            }
            layer_states.push(StepState {
                gates: [i, f, g, o],
                c: c.clone(),
                h: h.clone(),
            });
            layer_drop.push(mask);
            h_prev = h;
            c_prev = c;
            layer_out.push(Tensor::from_vec(&[n, cells], out));
        }
        states.push(layer_states);
        drop.push(layer_drop);
        layer_in = layer_out;
    }

    // Head on the top layer's final (possibly dropped-out) state.
    let last = layer_in.last().expect("at least one step").clone();
    let (logits, head) =
        super::dense::head_forward(params, &last, &[], spec.n_outputs, &mut None)?;
    Ok((
        logits,
        LstmCache {
            states,
            inputs,
            drop,
            head,
        },
    ))
}

pub(crate) fn backward(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    cache: &LstmCache,
    dlogits: &Tensor,
    grads: &mut ParamSet,
) -> Result<(), NnError> {
    let Arch::Lstm {
        steps,
        layers,
        cells,
        ..
    } = spec.arch
    else {
        unreachable!("lstm backward on lstm arch");
    };
    let n = batch.rows();

    // Head gradient w.r.t. the top layer's last output.
    let top_last = {
        let s = &cache.states[layers - 1][steps - 1];
        let mut out = s.h.clone();
        if let Some(m) = &cache.drop[layers - 1][steps - 1] {
            for (v, &k) in out.iter_mut().zip(m) {
                *v *= k;
            }
        }
        Tensor::from_vec(&[n, cells], out)
    };
    let dtop = super::dense::head_backward(params, &top_last, &cache.head, dlogits, &[], grads)?;

    // dH of the layer currently being processed, per step.
    let mut dh_seq: Vec<Vec<f64>> = vec![vec![0.0; n * cells]; steps];
    dh_seq[steps - 1].copy_from_slice(dtop.data());

    for layer in (0..layers).rev() {
        let p = layer_params(params, layer)?;
        let below_width = if layer == 0 {
            cache.inputs[0].row_width()
        } else {
            cells
        };
        let mut dx_seq: Vec<Vec<f64>> = if layer > 0 {
            vec![vec![0.0; n * below_width]; steps]
        } else {
            Vec::new()
        };
        let mut dc_next = vec![0.0; n * cells];
        let mut dh_carry = vec![0.0; n * cells];
        for t in (0..steps).rev() {
            let s = &cache.states[layer][t];
            let [i, f, g, o] = &s.gates;
            // Output-side gradient: from the layer above (through dropout)
            // plus the recurrent carry.
            let mut dh = dh_seq[t].clone();
            if let Some(m) = &cache.drop[layer][t] {
                for (v, &k) in dh.iter_mut().zip(m) {
                    *v *= k;
                }
            }
            for (v, &c) in dh.iter_mut().zip(&dh_carry) {
                *v += c;
            }

            let c_prev: &[f64] = if t == 0 {
                &[]
            } else {
                &cache.states[layer][t - 1].c
            };
            let mut dgates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n * cells]);
            let mut dc_prev = vec![0.0; n * cells];
            for idx in 0..n * cells {
                let tc = s.c[idx].tanh();
                let dc = dh[idx] * o[idx] * (1.0 - tc * tc) + dc_next[idx];
                let cp = if t == 0 { 0.0 } else { c_prev[idx] };
                dgates[0][idx] = dc * g[idx] * i[idx] * (1.0 - i[idx]);
                dgates[1][idx] = dc * cp * f[idx] * (1.0 - f[idx]);
                dgates[2][idx] = dc * i[idx] * (1.0 - g[idx] * g[idx]);
                dgates[3][idx] = dh[idx] * tc * o[idx] * (1.0 - o[idx]);
                dc_prev[idx] = dc * f[idx];
            }

            // Parameter gradients and the propagated signals. The input to
            // layer l > 0 was the dropped-out output of the layer below.
            let x_owned: Option<Tensor> = if layer == 0 {
                None
            } else {
                let below = &cache.states[layer - 1][t];
                let mut out = below.h.clone();
                if let Some(m) = &cache.drop[layer - 1][t] {
                    for (v, &k) in out.iter_mut().zip(m) {
                        *v *= k;
                    }
                }
                Some(Tensor::from_vec(&[n, below_width], out))
            };
            let x_t: &Tensor = x_owned.as_ref().unwrap_or(&cache.inputs[t]);
            dh_carry = vec![0.0; n * cells];
            for (gi, gate) in LSTM_GATES.iter().enumerate() {
                {
                    let gw = grads.get_mut(&format!("lstm{layer}.wx_{gate}"))?;
                    matmul_tn_acc(
                        x_t.data(),
                        &dgates[gi],
                        gw.data_mut(),
                        below_width,
                        n,
                        cells,
                    );
                }
                if t > 0 {
                    let h_prev = &cache.states[layer][t - 1].h;
                    let gw = grads.get_mut(&format!("lstm{layer}.wh_{gate}"))?;
                    matmul_tn_acc(h_prev, &dgates[gi], gw.data_mut(), cells, n, cells);
                }
                {
                    let gb = grads.get_mut(&format!("lstm{layer}.b_{gate}"))?;
                    for row in dgates[gi].chunks(cells) {
                        for (b, &d) in gb.data_mut().iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                }
                if t > 0 {
                    matmul_nt_acc(&dgates[gi], p.wh[gi].data(), &mut dh_carry, n, cells, cells);
                }
                if layer > 0 {
                    matmul_nt_acc(
                        &dgates[gi],
                        p.wx[gi].data(),
                        &mut dx_seq[t],
                        n,
                        cells,
                        below_width,
                    );
                }
            }
            dc_next = dc_prev;
        }
        if layer > 0 {
            dh_seq = dx_seq;
        }
    }
    Ok(())
}
