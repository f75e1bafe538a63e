//! Valid-padding convolution + ReLU + max-pool stack with a dense tail.
//!
//! Activations are laid out channels-last: a sample is (height, width,
//! channels) row-major, so the im2col patch rows are contiguous per channel
//! and every convolution becomes one matrix product. Pool windows tile the
//! activation without overlap; rows and columns that do not fill a window
//! are dropped. Gradient flows only to each window's argmax (first wins).

use crate::linalg::{matmul, matmul_nt_acc, matmul_tn_acc};

use super::{Arch, ConvLayerSpec, DropoutPlan, ModelSpec, NnError, ParamSet, Tensor};

/// Activation shape after each conv stage, plus the flattened width.
fn geometry(spec: &ModelSpec) -> Result<Vec<(usize, usize, usize)>, NnError> {
    let Arch::Conv {
        input_shape,
        in_channels,
        conv,
        ..
    } = &spec.arch
    else {
        unreachable!("conv geometry on conv arch");
    };
    if conv.is_empty() {
        return Err(NnError::BadSpec("at least one conv layer is required".into()));
    }
    let (mut h, mut w) = *input_shape;
    let mut ch = *in_channels;
    if h == 0 || w == 0 || ch == 0 {
        return Err(NnError::BadSpec("empty conv input shape".into()));
    }
    let mut shapes = vec![(h, w, ch)];
    for (i, c) in conv.iter().enumerate() {
        if c.kernel.0 == 0 || c.kernel.1 == 0 || c.pool.0 == 0 || c.pool.1 == 0 {
            return Err(NnError::BadSpec(format!("conv layer {i}: zero kernel or pool")));
        }
        if c.kernel.0 > h || c.kernel.1 > w {
            return Err(NnError::BadSpec(format!(
                "conv layer {i}: {}x{} kernel does not fit {h}x{w} input",
                c.kernel.0, c.kernel.1
            )));
        }
        h = h - c.kernel.0 + 1;
        w = w - c.kernel.1 + 1;
        ch = c.out_channels;
        h /= c.pool.0;
        w /= c.pool.1;
        if h == 0 || w == 0 {
            return Err(NnError::BadSpec(format!(
                "conv layer {i}: pooling leaves an empty activation"
            )));
        }
        shapes.push((h, w, ch));
    }
    Ok(shapes)
}

/// Width of the flattened activation entering the dense tail.
pub(crate) fn flatten_width(spec: &ModelSpec) -> Result<usize, NnError> {
    let (h, w, ch) = *geometry(spec)?.last().expect("at least the input shape");
    Ok(h * w * ch)
}

struct StageCache {
    /// Patch matrix [n * oh * ow, ch_in * kh * kw].
    cols: Vec<f64>,
    /// Pre-pool activation [n, oh, ow, oc] after ReLU (sign encodes grad mask).
    act: Vec<f64>,
    /// Flat argmax index into `act` for every pooled output element.
    argmax: Vec<usize>,
    /// Pooled output [n, ph, pw, oc].
    pooled: Tensor,
}

pub(crate) struct ConvCache {
    stages: Vec<StageCache>,
    head: super::dense::DenseCache,
}

/// Gather conv patches: one row per (sample, out_y, out_x).
fn im2col(
    input: &[f64],
    n: usize,
    (h, w, ch): (usize, usize, usize),
    (kh, kw): (usize, usize),
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let row_len = ch * kh * kw;
    let mut cols = vec![0.0; n * oh * ow * row_len];
    let mut out = 0;
    for s in 0..n {
        let sample = &input[s * h * w * ch..(s + 1) * h * w * ch];
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    let src = ((oy + ky) * w + ox) * ch;
                    let dst = out + ky * kw * ch;
                    cols[dst..dst + kw * ch].copy_from_slice(&sample[src..src + kw * ch]);
                }
                out += row_len;
            }
        }
    }
    cols
}

/// Kernel tensor [oc, ic, kh, kw] as a [ic*kh*kw, oc] matrix whose row order
/// matches the im2col patch layout (ky, kx, channel).
fn kernel_matrix(k: &Tensor) -> Vec<f64> {
    let [oc, ic, kh, kw] = *k.dims() else {
        panic!("conv kernel is rank 4");
    };
    let mut m = vec![0.0; ic * kh * kw * oc];
    for o in 0..oc {
        for c in 0..ic {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = ((o * ic + c) * kh + ky) * kw + kx;
                    let dst = ((ky * kw + kx) * ic + c) * oc + o;
                    m[dst] = k.data()[src];
                }
            }
        }
    }
    m
}

/// Scatter a [ic*kh*kw, oc]-shaped gradient back into kernel layout.
fn kernel_matrix_grad(gm: &[f64], gk: &mut Tensor) {
    let [oc, ic, kh, kw] = *gk.dims() else {
        panic!("conv kernel is rank 4");
    };
    for o in 0..oc {
        for c in 0..ic {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = ((o * ic + c) * kh + ky) * kw + kx;
                    let src = ((ky * kw + kx) * ic + c) * oc + o;
                    gk.data_mut()[dst] += gm[src];
                }
            }
        }
    }
}

fn pool_forward(
    act: &[f64],
    n: usize,
    (oh, ow, oc): (usize, usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let (gh, gw) = (oh / ph, ow / pw);
    let mut pooled = vec![0.0; n * gh * gw * oc];
    let mut argmax = vec![0usize; n * gh * gw * oc];
    let mut out = 0;
    for s in 0..n {
        let base = s * oh * ow * oc;
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..oc {
                    let mut best_idx = base + ((gy * ph) * ow + gx * pw) * oc + c;
                    let mut best = act[best_idx];
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let idx = base + ((gy * ph + dy) * ow + gx * pw + dx) * oc + c;
                            if act[idx] > best {
                                best = act[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    pooled[out] = best;
                    argmax[out] = best_idx;
                    out += 1;
                }
            }
        }
    }
    (pooled, argmax)
}

/// Route pooled gradients back to their argmax positions.
fn unpool(argmax: &[usize], dpooled: &[f64], act_len: usize) -> Vec<f64> {
    let mut dact = vec![0.0; act_len];
    for (&idx, &d) in argmax.iter().zip(dpooled) {
        dact[idx] += d;
    }
    dact
}

pub(crate) fn forward(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    mut dropout: Option<DropoutPlan<'_>>,
) -> Result<(Tensor, ConvCache), NnError> {
    let Arch::Conv { conv, dense, .. } = &spec.arch else {
        unreachable!("conv forward on conv arch");
    };
    let shapes = geometry(spec)?;
    let n = batch.rows();

    let mut cur = batch.data().to_vec();
    let mut stages = Vec::with_capacity(conv.len());
    for (i, c) in conv.iter().enumerate() {
        let (h, w, ch) = shapes[i];
        let (kh, kw) = c.kernel;
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let cols = im2col(&cur, n, (h, w, ch), (kh, kw));
        let km = kernel_matrix(params.get(&format!("conv{i}.k"))?);
        let bias = params.get(&format!("conv{i}.b"))?;
        let mut act = matmul(&cols, &km, n * oh * ow, ch * kh * kw, c.out_channels);
        for row in act.chunks_mut(c.out_channels) {
            for (v, &b) in row.iter_mut().zip(bias.data()) {
                *v += b;
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        let (pooled, argmax) = pool_forward(&act, n, (oh, ow, c.out_channels), c.pool);
        let (gh, gw, gc) = shapes[i + 1];
        let pooled = Tensor::from_vec(&[n, gh * gw * gc], pooled);
        cur = pooled.data().to_vec();
        stages.push(StageCache {
            cols,
            act,
            argmax,
            pooled,
        });
    }

    let flat = Tensor::from_vec(&[n, cur.len() / n], cur);
    let (logits, head) =
        super::dense::head_forward(params, &flat, dense, spec.n_outputs, &mut dropout)?;
    Ok((logits, ConvCache { stages, head }))
}

pub(crate) fn backward(
    spec: &ModelSpec,
    params: &ParamSet,
    cache: &ConvCache,
    dlogits: &Tensor,
    grads: &mut ParamSet,
) -> Result<(), NnError> {
    let Arch::Conv { conv, dense, .. } = &spec.arch else {
        unreachable!("conv backward on conv arch");
    };
    let shapes = geometry(spec)?;
    let n = dlogits.rows();

    let flat = &cache.stages.last().expect("at least one conv stage").pooled;
    let mut dcur = super::dense::head_backward(params, flat, &cache.head, dlogits, dense, grads)?
        .data()
        .to_vec();

    for (i, c) in conv.iter().enumerate().rev() {
        let stage = &cache.stages[i];
        let (h, w, ch) = shapes[i];
        let (kh, kw) = c.kernel;
        let (oh, ow) = (h - kh + 1, w - kw + 1);

        // Un-pool into the pre-pool activation, then gate by the ReLU.
        let mut dact = unpool(&stage.argmax, &dcur, n * oh * ow * c.out_channels);
        for (d, &a) in dact.iter_mut().zip(&stage.act) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }

        // Kernel and bias gradients.
        let patch_len = ch * kh * kw;
        let mut dkm = vec![0.0; patch_len * c.out_channels];
        matmul_tn_acc(
            &stage.cols,
            &dact,
            &mut dkm,
            patch_len,
            n * oh * ow,
            c.out_channels,
        );
        kernel_matrix_grad(&dkm, grads.get_mut(&format!("conv{i}.k"))?);
        {
            let gb = grads.get_mut(&format!("conv{i}.b"))?;
            for row in dact.chunks(c.out_channels) {
                for (b, &d) in gb.data_mut().iter_mut().zip(row) {
                    *b += d;
                }
            }
        }

        // Input gradient for the stage below.
        if i > 0 {
            let km = kernel_matrix(params.get(&format!("conv{i}.k"))?);
            let mut dcols = vec![0.0; n * oh * ow * patch_len];
            matmul_nt_acc(
                &dact,
                &km,
                &mut dcols,
                n * oh * ow,
                c.out_channels,
                patch_len,
            );
            // col2im scatter-add.
            let mut dinput = vec![0.0; n * h * w * ch];
            let mut src = 0;
            for s in 0..n {
                let base = s * h * w * ch;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ky in 0..kh {
                            let dst = base + ((oy + ky) * w + ox) * ch;
                            for v in 0..kw * ch {
                                dinput[dst + v] += dcols[src + ky * kw * ch + v];
                            }
                        }
                        src += patch_len;
                    }
                }
            }
            dcur = dinput;
        }
    }
    Ok(())
}

impl ConvLayerSpec {
    pub fn new(out_channels: usize, kernel: (usize, usize), pool: (usize, usize)) -> Self {
        ConvLayerSpec {
            out_channels,
            kernel,
            pool,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_window_maxima() {
        // One sample, 4x4 activation, one channel, 2x2 pool.
        let act = vec![
            1.0, 5.0, 2.0, 0.0, //
            3.0, 4.0, 0.0, 6.0, //
            9.0, 0.0, 1.0, 1.0, //
            0.0, 8.0, 2.0, 2.0,
        ];
        let (pooled, argmax) = pool_forward(&act, 1, (4, 4, 1), (2, 2));
        assert_eq!(pooled, vec![5.0, 6.0, 9.0, 2.0]);
        for (&idx, &p) in argmax.iter().zip(&pooled) {
            assert_eq!(act[idx], p, "argmax points at the maximum");
        }
        // Ties keep the first position scanned: the 2.0 at (3,2) beats
        // the equal 2.0 at (3,3).
        assert_eq!(argmax[3], 14, "first of the tied 2.0s");
    }

    #[test]
    fn unpool_routes_all_gradient_to_argmax() {
        let act: Vec<f64> = (0..36).map(|i| ((i * 7) % 11) as f64).collect();
        let (_, argmax) = pool_forward(&act, 2, (3, 3, 2), (3, 3));
        let dpooled = vec![0.5, -1.5, 2.0, 0.25];
        let dact = unpool(&argmax, &dpooled, act.len());
        let routed: f64 = dact.iter().sum();
        let incoming: f64 = dpooled.iter().sum();
        assert!((routed - incoming).abs() < 1e-15, "gradient mass preserved");
        for (i, &d) in dact.iter().enumerate() {
            if d != 0.0 {
                assert!(argmax.contains(&i), "gradient outside argmax at {i}");
            }
        }
        assert_eq!(dact.iter().filter(|&&d| d != 0.0).count(), dpooled.len());
    }

    #[test]
    fn residue_rows_and_columns_are_dropped_by_pooling() {
        let spec = ModelSpec {
            arch: Arch::Conv {
                input_shape: (129, 4),
                in_channels: 1,
                conv: vec![
                    ConvLayerSpec::new(16, (3, 3), (2, 2)),
                    ConvLayerSpec::new(32, (3, 1), (1, 1)),
                ],
                dense: vec![64],
            },
            n_outputs: 1,
            dropout: 0.0,
        };
        // 129x4 -> conv 127x2 -> pool 63x1 (row 127 dropped) -> conv 61x1.
        let shapes = geometry(&spec).unwrap();
        assert_eq!(shapes, vec![(129, 4, 1), (63, 1, 16), (61, 1, 32)]);
        assert_eq!(flatten_width(&spec).unwrap(), 61 * 32);
    }
}
