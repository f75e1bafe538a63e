//! Dense matrix kernels shared by the network layers.
//!
//! Every output element is accumulated by a sequential scan over the inner
//! dimension, so results are bit-identical no matter how the work is split
//! across threads. Parallelism only partitions disjoint output rows.

use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 16;

/// c += a @ b, with a: m x k, b: k x n, c: m x n (all row-major).
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "lhs size mismatch");
    assert_eq!(b.len(), k * n, "rhs size mismatch");
    assert_eq!(c.len(), m * n, "out size mismatch");
    let row = |ci: &mut [f64], ai: &[f64]| {
        for (l, &av) in ai.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for (ci, ai) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(ci, ai);
        }
    }
}

/// c = a @ b.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c += a @ b^T, with a: m x k, b: n x k, c: m x n.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "lhs size mismatch");
    assert_eq!(b.len(), n * k, "rhs size mismatch");
    assert_eq!(c.len(), m * n, "out size mismatch");
    let row = |ci: &mut [f64], ai: &[f64]| {
        for (cv, brow) in ci.iter_mut().zip(b.chunks(k)) {
            let mut acc = 0.0;
            for (&av, &bv) in ai.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for (ci, ai) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(ci, ai);
        }
    }
}

/// c += a^T @ b, with a: k x m, b: k x n, c: m x n.
///
/// Used for weight gradients (x^T @ dy); the k loop runs over batch rows.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m, "lhs size mismatch");
    assert_eq!(b.len(), k * n, "rhs size mismatch");
    assert_eq!(c.len(), m * n, "out size mismatch");
    let rows = |ci: &mut [f64], lo: usize, hi: usize| {
        // ci covers output rows lo..hi
        for l in 0..k {
            let arow = &a[l * m..(l + 1) * m];
            let brow = &b[l * n..(l + 1) * n];
            for i in lo..hi {
                let av = arow[i];
                let crow = &mut ci[(i - lo) * n..(i - lo + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let chunk = m.div_ceil(rayon::current_num_threads().max(1));
        c.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci_idx, ci)| {
                let lo = ci_idx * chunk;
                let hi = (lo + ci.len() / n).min(m);
                rows(ci, lo, hi);
            });
    } else {
        rows(c, 0, m);
    }
}

/// Adds a bias row to every row of a batch matrix.
pub fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let (m, k, n) = (6, 8, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.19).sin()).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.07).cos()).collect();
        // a @ b^T
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for l in 0..k {
                bt[l * n + j] = b[j * k + l];
            }
        }
        let want = naive(&a, &bt, m, k, n);
        let mut got = vec![0.0; m * n];
        matmul_nt_acc(&a, &b, &mut got, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // a^T @ b   (a is k x m here)
        let a2: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.23).sin()).collect();
        let b2: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut a2t = vec![0.0; m * k];
        for i in 0..k {
            for j in 0..m {
                a2t[j * k + i] = a2[i * m + j];
            }
        }
        let want = naive(&a2t, &b2, m, k, n);
        let mut got = vec![0.0; m * n];
        matmul_tn_acc(&a2, &b2, &mut got, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_split_is_bit_deterministic() {
        // Large enough to trigger the parallel path; compare against the
        // sequential loop, which must agree bit for bit.
        let (m, k, n) = (64, 64, 64);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.031).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.017).cos()).collect();
        let par = matmul(&a, &b, m, k, n);
        let mut seq = vec![0.0; m * n];
        for (ci, ai) in seq.chunks_mut(n).zip(a.chunks(k)) {
            for (l, &av) in ai.iter().enumerate() {
                for (cv, &bv) in ci.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
        assert_eq!(par, seq);
    }
}
