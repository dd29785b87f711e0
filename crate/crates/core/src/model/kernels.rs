//! Row kernels shared by the training graph and the incremental decoder.
//!
//! Both paths call exactly these functions with the same accumulation order,
//! which is what makes cached decoding bit-identical to a full recompute.

/// `out = x · w` for a row-major `w` of shape `x.len() × out.len()`.
#[inline]
pub fn linear_row(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    out.fill(0.0);
    for (p, xp) in x.iter().enumerate() {
        let row = &w[p * n..(p + 1) * n];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xp * wv;
        }
    }
}

#[inline]
pub fn add_bias(out: &mut [f64], bias: &[f64]) {
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
}

/// RMS normalisation with a learned gain; returns `1/rms` for the backward pass.
#[inline]
pub fn rmsnorm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = silu(gate) ⊙ up`
#[inline]
pub fn swiglu_row(gate: &[f64], up: &[f64], out: &mut [f64]) {
    for ((o, g), u) in out.iter_mut().zip(gate).zip(up) {
        *o = silu(*g) * u;
    }
}

/// Rotary position embedding tables.
#[derive(Debug, Clone)]
pub struct Rope {
    inv_freq: Vec<f64>,
    head_dim: usize,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let inv_freq = (0..half).map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64)).collect();
        Self { inv_freq, head_dim }
    }

    /// Rotate every head of `x` in place; `sign = -1.0` applies the inverse rotation.
    #[inline]
    pub fn rotate(&self, x: &mut [f64], pos: usize, sign: f64) {
        let half = self.head_dim / 2;
        for head in x.chunks_exact_mut(self.head_dim) {
            for (i, f) in self.inv_freq.iter().enumerate() {
                let angle = pos as f64 * f;
                let (s, c) = angle.sin_cos();
                let s = s * sign;
                let a = head[i];
                let b = head[i + half];
                head[i] = a * c - b * s;
                head[i + half] = a * s + b * c;
            }
        }
    }
}

/// Multi-head attention of one query row over `n_keys` key/value rows
/// (row-major, width `q.len()`). When `probs` is given, the softmax weights are
/// written head-major into `probs[h * n_keys + i]`.
#[inline]
pub fn attention_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n_keys: usize,
    n_heads: usize,
    out: &mut [f64],
    scores: &mut Vec<f64>,
    mut probs: Option<&mut [f64]>,
) {
    let d = q.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    out.fill(0.0);
    scores.resize(n_keys, 0.0);
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let mut max = f64::NEG_INFINITY;
        for (i, s) in scores.iter_mut().enumerate() {
            let kh = &keys[i * d + h * hd..i * d + (h + 1) * hd];
            let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
            *s = dot * scale;
            if *s > max {
                max = *s;
            }
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (i, s) in scores.iter().enumerate() {
            let p = s / sum;
            if let Some(pr) = probs.as_deref_mut() {
                pr[h * n_keys + i] = p;
            }
            let vh = &values[i * d + h * hd..i * d + (h + 1) * hd];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
}

/// `out = Σ_i table_i[id_i]`, summed in the given order.
#[inline]
pub fn embed_sum_row(terms: &[(&[f64], usize)], dim: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (table, id) in terms {
        let row = &table[id * dim..(id + 1) * dim];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Log-softmax cross-entropy of one row; writes the softmax into `probs`.
#[inline]
pub fn softmax_xent_row(logits: &[f64], target: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    -(logits[target] - max - sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive() {
        let x = [1.0, 2.0, -1.0];
        let w = [1.0, 0.0, 0.5, 1.0, 2.0, -1.0];
        let mut out = [0.0; 2];
        linear_row(&x, &w, &mut out);
        assert_eq!(out, [1.0 + 1.0 - 2.0, 0.0 + 2.0 + 1.0]);
    }

    #[test]
    fn rope_inverse() {
        let rope = Rope::new(4, 10_000.0);
        let orig = vec![0.3, -1.0, 2.0, 0.7, 1.0, 1.0, 1.0, 1.0];
        let mut x = orig.clone();
        rope.rotate(&mut x, 17, 1.0);
        rope.rotate(&mut x, 17, -1.0);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut y = orig.clone();
        rope.rotate(&mut y, 0, 1.0);
        assert_eq!(y, orig);
    }

    #[test]
    fn attention_single_key_is_value() {
        let q = [1.0, 2.0];
        let k = [0.5, 0.5];
        let v = [3.0, -4.0];
        let mut out = [0.0; 2];
        let mut scratch = Vec::new();
        attention_row(&q, &k, &v, 1, 1, &mut out, &mut scratch, None);
        assert_eq!(out, [3.0, -4.0]);
    }

    #[test]
    fn xent_uniform() {
        let mut p = [0.0; 4];
        let l = softmax_xent_row(&[0.0; 4], 2, &mut p);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
