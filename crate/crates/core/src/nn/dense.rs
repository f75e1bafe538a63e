//! Fully connected stack: alternating affine + ReLU, affine output head.

use crate::linalg::{add_bias, matmul, matmul_nt_acc, matmul_tn_acc};

use super::{Arch, DropoutPlan, ModelSpec, NnError, ParamSet, Tensor};

pub(crate) struct DenseCache {
    /// Pre-activations of each hidden layer; the sign drives the ReLU grad.
    pre: Vec<Tensor>,
    /// Post-ReLU (and post-dropout) activations of each hidden layer.
    act: Vec<Tensor>,
    drop: Vec<Option<Vec<f64>>>,
}

fn relu_inplace(t: &mut [f64]) {
    for v in t {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Affine + ReLU chain over `widths`, reading params dense{i}.w/b, then the
/// out.w/b head. Shared by the CNN's dense tail.
pub(crate) fn head_forward(
    params: &ParamSet,
    input: &Tensor,
    widths: &[usize],
    n_outputs: usize,
    dropout: &mut Option<DropoutPlan<'_>>,
) -> Result<(Tensor, DenseCache), NnError> {
    let n = input.rows();
    let mut cache = DenseCache {
        pre: Vec::new(),
        act: Vec::new(),
        drop: Vec::new(),
    };
    let mut cur = input.clone();
    for (i, &width) in widths.iter().enumerate() {
        let w = params.get(&format!("dense{i}.w"))?;
        let b = params.get(&format!("dense{i}.b"))?;
        let mut out = matmul(cur.data(), w.data(), n, cur.row_width(), width);
        add_bias(&mut out, b.data());
        let pre = Tensor::from_vec(&[n, width], out.clone());
        relu_inplace(&mut out);
        let mask = dropout.as_mut().map(|d| d.mask(out.len()));
        if let Some(m) = &mask {
            for (o, &k) in out.iter_mut().zip(m) {
                *o *= k;
            }
        }
        cache.pre.push(pre);
        cur = Tensor::from_vec(&[n, width], out);
        cache.act.push(cur.clone());
        cache.drop.push(mask);
    }
    let w = params.get("out.w")?;
    let b = params.get("out.b")?;
    let mut out = matmul(cur.data(), w.data(), n, cur.row_width(), n_outputs);
    add_bias(&mut out, b.data());
    Ok((Tensor::from_vec(&[n, n_outputs], out), cache))
}

/// Backward through the head; returns the gradient w.r.t. the head input.
pub(crate) fn head_backward(
    params: &ParamSet,
    input: &Tensor,
    cache: &DenseCache,
    dlogits: &Tensor,
    widths: &[usize],
    grads: &mut ParamSet,
) -> Result<Tensor, NnError> {
    let n = input.rows();
    let last = cache.act.last().unwrap_or(input);

    // Output head.
    let w_out = params.get("out.w")?;
    let n_outputs = dlogits.row_width();
    {
        let g = grads.get_mut("out.w")?;
        matmul_tn_acc(
            last.data(),
            dlogits.data(),
            g.data_mut(),
            last.row_width(),
            n,
            n_outputs,
        );
    }
    {
        let g = grads.get_mut("out.b")?;
        for row in dlogits.data().chunks(n_outputs) {
            for (b, &d) in g.data_mut().iter_mut().zip(row) {
                *b += d;
            }
        }
    }
    let mut dcur = Tensor::zeros(&[n, last.row_width()]);
    matmul_nt_acc(
        dlogits.data(),
        w_out.data(),
        dcur.data_mut(),
        n,
        n_outputs,
        last.row_width(),
    );

    for i in (0..widths.len()).rev() {
        // Through dropout and the ReLU.
        if let Some(mask) = &cache.drop[i] {
            for (d, &k) in dcur.data_mut().iter_mut().zip(mask) {
                *d *= k;
            }
        }
        for (d, &p) in dcur.data_mut().iter_mut().zip(cache.pre[i].data()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        let below = if i == 0 { input } else { &cache.act[i - 1] };
        {
            let g = grads.get_mut(&format!("dense{i}.w"))?;
            matmul_tn_acc(
                below.data(),
                dcur.data(),
                g.data_mut(),
                below.row_width(),
                n,
                widths[i],
            );
        }
        {
            let g = grads.get_mut(&format!("dense{i}.b"))?;
            for row in dcur.data().chunks(widths[i]) {
                for (b, &d) in g.data_mut().iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        let w = params.get(&format!("dense{i}.w"))?;
        let mut dbelow = Tensor::zeros(&[n, below.row_width()]);
        matmul_nt_acc(
            dcur.data(),
            w.data(),
            dbelow.data_mut(),
            n,
            widths[i],
            below.row_width(),
        );
        dcur = dbelow;
    }
    Ok(dcur)
}

pub(crate) fn forward(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    mut dropout: Option<DropoutPlan<'_>>,
) -> Result<(Tensor, DenseCache), NnError> {
    let Arch::Dense { hidden, .. } = &spec.arch else {
        unreachable!("dense forward on dense arch");
    };
    head_forward(params, batch, hidden, spec.n_outputs, &mut dropout)
}

pub(crate) fn backward(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    cache: &DenseCache,
    dlogits: &Tensor,
    grads: &mut ParamSet,
) -> Result<(), NnError> {
    let Arch::Dense { hidden, .. } = &spec.arch else {
        unreachable!("dense backward on dense arch");
    };
    head_backward(params, batch, cache, dlogits, hidden, grads)?;
    Ok(())
}
