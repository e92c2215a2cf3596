//! Slice-level forward and backward kernels. No shape checking happens here;
//! callers in `graph` validate shapes first.

use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[k×n] += aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    // Branch on sign so exp never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// Per-row reciprocal RMS: `1 / sqrt(mean(x²) + eps)`.
pub fn inv_rms<S: Scalar>(x: &[S], d: usize, eps: S) -> Vec<S> {
    let dn = S::from_f64(d as f64);
    x.chunks_exact(d)
        .map(|row| {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            S::one() / (ms + eps).sqrt()
        })
        .collect()
}

/// Rotary angle tables for one head: `(cos, sin)` of shape `[seq_len × half]`.
pub fn rope_tables<S: Scalar>(seq_len: usize, head_dim: usize, theta: f64) -> (Vec<S>, Vec<S>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq_len * half);
    let mut sin = Vec::with_capacity(seq_len * half);
    for pos in 0..seq_len {
        for i in 0..half {
            let freq = theta.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(S::from_f64(angle.cos()));
            sin.push(S::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotate-half rotary embedding applied in place to a `[rows × n_heads·head_dim]`
/// buffer whose row `r` sits at position `r % seq_len`. `inverse` applies the
/// transpose rotation (used for the backward pass).
#[allow(clippy::too_many_arguments)]
pub fn rope_apply<S: Scalar>(
    x: &mut [S],
    n_heads: usize,
    head_dim: usize,
    seq_len: usize,
    cos: &[S],
    sin: &[S],
    inverse: bool,
) {
    let half = head_dim / 2;
    let width = n_heads * head_dim;
    for (r, row) in x.chunks_exact_mut(width).enumerate() {
        let pos = r % seq_len;
        let c = &cos[pos * half..(pos + 1) * half];
        let s = &sin[pos * half..(pos + 1) * half];
        for head in row.chunks_exact_mut(head_dim) {
            let (lo, hi) = head.split_at_mut(half);
            for i in 0..half {
                let (x1, x2) = (lo[i], hi[i]);
                let sn = if inverse { -s[i] } else { s[i] };
                lo[i] = x1 * c[i] - x2 * sn;
                hi[i] = x1 * sn + x2 * c[i];
            }
        }
    }
}

/// Causal multi-head attention forward. `q`, `k`, `v` are `[rows × width]`
/// with rows grouped into sequences of `seq_len`. Returns output and the
/// attention probabilities laid out `[seq][head][i][j]` (lower triangle used).
pub fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    width: usize,
    n_heads: usize,
    seq_len: usize,
) -> (Vec<S>, Vec<S>) {
    let total_rows = q.len() / width;
    let head_dim = width / n_heads;
    let n_seq = total_rows / seq_len;
    let scale = S::one() / S::from_f64(head_dim as f64).sqrt();
    let mut out = vec![S::zero(); q.len()];
    let mut probs = vec![S::zero(); n_seq * n_heads * seq_len * seq_len];
    let mut scores = vec![S::zero(); seq_len];
    for b in 0..n_seq {
        for h in 0..n_heads {
            let pbase = (b * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let qi = &q[(b * seq_len + i) * width + h * head_dim..][..head_dim];
                let mut max = S::neg_infinity();
                for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(b * seq_len + j) * width + h * head_dim..][..head_dim];
                    let mut dot = S::zero();
                    for (&a, &bb) in qi.iter().zip(kj) {
                        dot += a * bb;
                    }
                    *sc = dot * scale;
                    if *sc > max {
                        max = *sc;
                    }
                }
                let mut denom = S::zero();
                for sc in scores.iter_mut().take(i + 1) {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                let prow = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                let orow = &mut out[(b * seq_len + i) * width + h * head_dim..][..head_dim];
                for j in 0..=i {
                    let p = scores[j] / denom;
                    prow[j] = p;
                    let vj = &v[(b * seq_len + j) * width + h * head_dim..][..head_dim];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Causal attention backward. Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dout: &[S],
    width: usize,
    n_heads: usize,
    seq_len: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let head_dim = width / n_heads;
    let n_seq = q.len() / width / seq_len;
    let scale = S::one() / S::from_f64(head_dim as f64).sqrt();
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); seq_len];
    for b in 0..n_seq {
        for h in 0..n_heads {
            let pbase = (b * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let off_i = (b * seq_len + i) * width + h * head_dim;
                let prow = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                let doi = &dout[off_i..off_i + head_dim];
                // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                let mut row_dot = S::zero();
                for j in 0..=i {
                    let off_j = (b * seq_len + j) * width + h * head_dim;
                    let vj = &v[off_j..off_j + head_dim];
                    let mut d = S::zero();
                    for (&a, &bb) in doi.iter().zip(vj) {
                        d += a * bb;
                    }
                    dp[j] = d;
                    row_dot += d * prow[j];
                    let p = prow[j];
                    for (dvv, &g) in dv[off_j..off_j + head_dim].iter_mut().zip(doi) {
                        *dvv += p * g;
                    }
                }
                // dS_ij = P_ij (dP_ij - Σ_j P dP), scaled into dq, dk.
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - row_dot) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let off_j = (b * seq_len + j) * width + h * head_dim;
                    for c in 0..head_dim {
                        dq[off_i + c] += ds * k[off_j + c];
                        dk[off_j + c] += ds * q[off_i + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
