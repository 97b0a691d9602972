//! Precision-generic attention kernels over flat row-major slices.
//!
//! These are the code paths that both the verified `f64` API and the `f32`
//! benchmark path execute. Every kernel is single-threaded and allocates only
//! O(N + d²) scratch, so softmax attention never holds an N×N buffer unless the
//! caller asks for the map.

use alloc::vec;
use num_traits::Float;

/// Feature map applied to queries and keys before the kernelized similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureMap {
    /// `ReLU(x)`, the vanilla linear attention kernel.
    Relu,
    /// `f_p(ReLU(x))` with focusing exponent `p >= 1`.
    Focused(f64),
}

impl FeatureMap {
    pub fn focus_p(&self) -> Option<f64> {
        match self {
            FeatureMap::Relu => None,
            FeatureMap::Focused(p) => Some(*p),
        }
    }
}

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn relu_in_place<T: Float>(x: &mut [T]) {
    for v in x.iter_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Replaces `row` with `f_p(ReLU(row))`.
///
/// The power is taken on the row scaled by its largest entry. `f_p` is
/// positively homogeneous of degree one, so the result is unchanged while
/// `x**p` can no longer overflow for large `p`. A row with no positive entry
/// maps to zero, and `p == 1` returns `ReLU(row)` exactly.
pub fn focus_in_place<T: Float>(row: &mut [T], p: T) {
    relu_in_place(row);
    if p == T::one() {
        return;
    }
    let max = row.iter().fold(T::zero(), |m, &v| m.max(v));
    if max == T::zero() {
        return;
    }
    let mut r_sq = T::zero();
    let mut a_sq = T::zero();
    for v in row.iter_mut() {
        let scaled = *v / max;
        r_sq = r_sq + scaled * scaled;
        let a = scaled.powf(p);
        a_sq = a_sq + a * a;
        *v = a;
    }
    // ||r|| / ||a|| with r = max * scaled
    let gain = max * r_sq.sqrt() / a_sq.sqrt();
    for v in row.iter_mut() {
        *v = gain * *v;
    }
}

/// Applies `map` to each length-`d` row of `x`, writing into `out`.
pub fn apply_feature_map<T: Float>(x: &[T], d: usize, map: FeatureMap, out: &mut [T]) {
    out.copy_from_slice(x);
    match map {
        FeatureMap::Relu => relu_in_place(out),
        FeatureMap::Focused(p) => {
            let p = T::from(p).expect("focus exponent representable");
            for row in out.chunks_exact_mut(d) {
                focus_in_place(row, p);
            }
        }
    }
}

/// Numerically safe softmax of one row, in place.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax attention `softmax(QKᵀ/√d)·V`, streamed one query row at a time.
///
/// `q`, `k` are `n×d`, `v` is `n×dv`. When `map` is given it receives the
/// full `n×n` attention matrix.
pub fn softmax_attention<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    dv: usize,
    out: &mut [T],
    mut map: Option<&mut [T]>,
) {
    let scale = T::one() / T::from(d).expect("head dim representable").sqrt();
    let mut weights = vec![T::zero(); n];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        for (j, w) in weights.iter_mut().enumerate() {
            *w = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
        softmax_in_place(&mut weights);
        let oi = &mut out[i * dv..(i + 1) * dv];
        oi.iter_mut().for_each(|o| *o = T::zero());
        for (j, &w) in weights.iter().enumerate() {
            for (o, &vj) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o = *o + w * vj;
            }
        }
        if let Some(m) = map.as_deref_mut() {
            m[i * n..(i + 1) * n].copy_from_slice(&weights);
        }
    }
}

/// Reordered linear attention on already-mapped features.
///
/// Builds `S = φ(K)ᵀV` (`d×dv`) and `z = φ(K)ᵀ1` once, then computes each
/// output row as `φ(Q_i)S / (φ(Q_i)·z + eps)`. With `normalize == false` the
/// denominator is dropped and the row is `φ(Q_i)S`.
pub fn linear_attention_reordered<T: Float>(
    phi_q: &[T],
    phi_k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    dv: usize,
    eps: T,
    normalize: bool,
    out: &mut [T],
) {
    let mut kv = vec![T::zero(); d * dv];
    let mut z = vec![T::zero(); d];
    for j in 0..n {
        let kj = &phi_k[j * d..(j + 1) * d];
        let vj = &v[j * dv..(j + 1) * dv];
        for (a, &ka) in kj.iter().enumerate() {
            if ka == T::zero() {
                continue;
            }
            z[a] = z[a] + ka;
            for (s, &vb) in kv[a * dv..(a + 1) * dv].iter_mut().zip(vj) {
                *s = *s + ka * vb;
            }
        }
    }
    for i in 0..n {
        let qi = &phi_q[i * d..(i + 1) * d];
        let oi = &mut out[i * dv..(i + 1) * dv];
        oi.iter_mut().for_each(|o| *o = T::zero());
        for (a, &qa) in qi.iter().enumerate() {
            if qa == T::zero() {
                continue;
            }
            for (o, &s) in oi.iter_mut().zip(&kv[a * dv..(a + 1) * dv]) {
                *o = *o + qa * s;
            }
        }
        if normalize {
            let den = dot(qi, &z) + eps;
            for o in oi.iter_mut() {
                *o = *o / den;
            }
        }
    }
}

/// Adds the depthwise convolution of `v` (`n×channels`, token index
/// `row·width + col`) to `out`.
///
/// `weights` holds one `size×size` kernel per channel, channel-major. The
/// kernel is applied as a cross-correlation with zero padding and stride 1.
pub fn dwc_accumulate<T: Float>(
    v: &[T],
    channels: usize,
    height: usize,
    width: usize,
    weights: &[T],
    size: usize,
    out: &mut [T],
) {
    let taps = size * size;
    let half = (size / 2) as isize;
    // tap-major layout so the channel loop is contiguous
    let mut by_tap = vec![T::zero(); taps * channels];
    for c in 0..channels {
        for t in 0..taps {
            by_tap[t * channels + c] = weights[c * taps + t];
        }
    }
    for r in 0..height as isize {
        for col in 0..width as isize {
            let dst = (r as usize * width + col as usize) * channels;
            for di in 0..size as isize {
                let sr = r + di - half;
                if sr < 0 || sr >= height as isize {
                    continue;
                }
                for dj in 0..size as isize {
                    let sc = col + dj - half;
                    if sc < 0 || sc >= width as isize {
                        continue;
                    }
                    let src = (sr as usize * width + sc as usize) * channels;
                    let tap = (di as usize * size + dj as usize) * channels;
                    let w = &by_tap[tap..tap + channels];
                    let o = &mut out[dst..dst + channels];
                    for ((o, &w), &x) in o.iter_mut().zip(w).zip(&v[src..src + channels]) {
                        *o = *o + w * x;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focus_matches_f32_and_f64() {
        let x64 = [0.3f64, -1.0, 2.0, 0.7];
        let x32 = [0.3f32, -1.0, 2.0, 0.7];
        let mut a = x64;
        let mut b = x32;
        focus_in_place(&mut a, 3.0);
        focus_in_place(&mut b, 3.0);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - f64::from(*v)).abs() < 1e-6);
        }
    }

    #[test]
    fn focus_survives_huge_exponent() {
        let mut row = [2.0f64, 1.0];
        focus_in_place(&mut row, 1024.0);
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row[0] - 5f64.sqrt()).abs() < 1e-12);
        assert!(row[1] >= 0.0 && row[1] < 1e-300);
    }

    #[test]
    fn softmax_row_handles_large_logits() {
        let mut row = [1000.0f64, 0.0];
        softmax_in_place(&mut row);
        assert_eq!(row[0], 1.0);
        assert!(row[1] < 1e-300);
    }
}
