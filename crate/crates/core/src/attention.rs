//! Softmax attention, reordered linear attention and focused linear attention.

use alloc::format;
use alloc::vec::Vec;

use crate::diagnostics;
use crate::dwc::{dwc_apply, DwcKernel, Grid};
use crate::error::{Error, Result};
use crate::kernels;
pub use crate::kernels::FeatureMap;
use crate::linalg::{matmul, Matrix, Vector};

/// Focusing exponent used throughout unless configured otherwise.
pub const DEFAULT_FOCUS_P: f64 = 3.0;
/// Guard added to the linear attention denominator.
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_KERNEL_SIZE: usize = 3;

/// Shape and hyper-parameters of one attention head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub n_tokens: usize,
    pub head_dim: usize,
    pub grid: Grid,
    pub focus_p: f64,
    pub dwc_kernel_size: usize,
    pub eps: f64,
}

impl Default for AttentionConfig {
    /// A single head over a 14×14 token grid with head dim 64.
    fn default() -> Self {
        Self {
            n_tokens: 196,
            head_dim: 64,
            grid: Grid::new(14, 14),
            focus_p: DEFAULT_FOCUS_P,
            dwc_kernel_size: DEFAULT_KERNEL_SIZE,
            eps: DEFAULT_EPS,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.tokens() != self.n_tokens {
            return Err(Error::Grid {
                height: self.grid.height,
                width: self.grid.width,
                tokens: self.n_tokens,
            });
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head dim must be >= 1".into()));
        }
        if self.dwc_kernel_size == 0 || self.dwc_kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd and >= 1, got {}",
                self.dwc_kernel_size
            )));
        }
        if !(self.focus_p >= 1.0) || !self.focus_p.is_finite() {
            return Err(Error::Config(format!("focus p must be >= 1, got {}", self.focus_p)));
        }
        check_eps(self.eps)?;
        Ok(())
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::Focused(self.focus_p)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    Ok(())
}

fn check_map(map: FeatureMap) -> Result<()> {
    match map {
        FeatureMap::Focused(p) if !(p >= 1.0) || !p.is_finite() => {
            Err(Error::Config(format!("focus p must be >= 1, got {p}")))
        }
        _ => Ok(()),
    }
}

/// Query, key and value projections, each `C×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
}

impl ProjectionSet {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        if w_q.rows() != w_q.cols() {
            return Err(Error::shape("ProjectionSet", w_q.shape(), w_q.shape()));
        }
        for w in [&w_k, &w_v] {
            if w.shape() != w_q.shape() {
                return Err(Error::shape("ProjectionSet", w_q.shape(), w.shape()));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn identity(c: usize) -> Self {
        Self {
            w_q: Matrix::identity(c),
            w_k: Matrix::identity(c),
            w_v: Matrix::identity(c),
        }
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }
}

/// `Q = xW_Q`, `K = xW_K`, `V = xW_V`.
pub fn project(x: &Matrix, proj: &ProjectionSet) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((matmul(x, &proj.w_q)?, matmul(x, &proj.w_k)?, matmul(x, &proj.w_v)?))
}

/// Splits the columns of `m` into `heads` contiguous blocks.
pub fn split_heads(m: &Matrix, heads: usize) -> Result<Vec<Matrix>> {
    if heads == 0 || !m.cols().is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{} channels cannot be split into {heads} heads",
            m.cols()
        )));
    }
    let d = m.cols() / heads;
    (0..heads).map(|h| m.column_block(h * d, d)).collect()
}

/// Inverse of [`split_heads`].
pub fn concat_heads(heads: &[Matrix]) -> Result<Matrix> {
    let Some(first) = heads.first() else {
        return Ok(Matrix::zeros(0, 0));
    };
    let rows = first.rows();
    if let Some(h) = heads.iter().find(|h| h.rows() != rows) {
        return Err(Error::shape("concat_heads", first.shape(), h.shape()));
    }
    let cols: usize = heads.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut offset = 0;
        for h in heads {
            out.row_mut(r)[offset..offset + h.cols()].copy_from_slice(h.row(r));
            offset += h.cols();
        }
    }
    Ok(out)
}

/// Runs `head_fn` independently on each head and concatenates the outputs.
pub fn multi_head<F>(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, mut head_fn: F) -> Result<Matrix>
where
    F: FnMut(&Matrix, &Matrix, &Matrix) -> Result<Matrix>,
{
    let (qs, ks, vs) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let outs = qs
        .iter()
        .zip(&ks)
        .zip(&vs)
        .map(|((q, k), v)| head_fn(q, k, v))
        .collect::<Result<Vec<_>>>()?;
    concat_heads(&outs)
}

/// Output of an attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub output: Matrix,
    /// `N×N` attention weights, only when requested.
    pub attention_map: Option<Matrix>,
}

fn check_qkv(op: &'static str, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    if v.rows() != q.rows() {
        return Err(Error::shape(op, q.shape(), v.shape()));
    }
    Ok(())
}

/// `softmax(QKᵀ/√d)·V` with `d = q.cols()`.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix, with_map: bool) -> Result<AttentionResult> {
    check_qkv("softmax_attention", q, k, v)?;
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let mut output = Matrix::zeros(n, dv);
    let mut map = with_map.then(|| Matrix::zeros(n, n));
    kernels::softmax_attention(
        q.as_slice(),
        k.as_slice(),
        v.as_slice(),
        n,
        d,
        dv,
        output.as_mut_slice(),
        map.as_mut().map(Matrix::as_mut_slice),
    );
    Ok(AttentionResult {
        output,
        attention_map: map,
    })
}

/// `f_p(ReLU(x))`. A vector with no positive entry maps to zero; `p` must be
/// at least 1.
pub fn focused_map(x: &Vector, p: f64) -> Vector {
    let mut out = x.as_slice().to_vec();
    kernels::focus_in_place(&mut out, p);
    Vector::new(out)
}

/// Applies `map` row by row.
pub fn apply_feature_map(m: &Matrix, map: FeatureMap) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    if m.cols() > 0 {
        kernels::apply_feature_map(m.as_slice(), m.cols(), map, out.as_mut_slice());
    }
    out
}

/// Reordered linear attention: `φ(Q_i)(φ(K)ᵀV) / (φ(Q_i)·φ(K)ᵀ1 + eps)`.
///
/// No `N×N` buffer is formed unless `with_map` is set, in which case the
/// materialized, row-normalized `φ(Q)φ(K)ᵀ` is attached for comparison.
pub fn linear_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: FeatureMap,
    eps: f64,
    with_map: bool,
) -> Result<AttentionResult> {
    linear_attention_with(q, k, v, map, eps, Normalization::Normalized, with_map)
}

/// Whether the attention term of focused linear attention is divided by its
/// row denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `φ(Q_i)S / (φ(Q_i)·z + eps)`.
    #[default]
    Normalized,
    /// `φ(Q)φ(K)ᵀV` taken literally, without a denominator.
    Unnormalized,
}

fn linear_attention_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: FeatureMap,
    eps: f64,
    norm: Normalization,
    with_map: bool,
) -> Result<AttentionResult> {
    check_qkv("linear_attention", q, k, v)?;
    check_map(map)?;
    check_eps(eps)?;
    let phi_q = apply_feature_map(q, map);
    let phi_k = apply_feature_map(k, map);
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let mut output = Matrix::zeros(n, dv);
    kernels::linear_attention_reordered(
        phi_q.as_slice(),
        phi_k.as_slice(),
        v.as_slice(),
        n,
        d,
        dv,
        eps,
        norm == Normalization::Normalized,
        output.as_mut_slice(),
    );
    let attention_map = if with_map {
        Some(match norm {
            Normalization::Normalized => diagnostics::normalized_linear_map(&phi_q, &phi_k, eps)?,
            Normalization::Unnormalized => crate::linalg::matmul_transposed(&phi_q, &phi_k)?,
        })
    } else {
        None
    };
    Ok(AttentionResult { output, attention_map })
}

/// Focused linear attention: the focused linear attention term plus the
/// depthwise convolution of `V`.
///
/// The output is exactly `linear_attention(..).output + dwc_apply(v)`, the
/// two terms computed separately and added entrywise.
pub fn focused_linear_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    kernel: &DwcKernel,
    norm: Normalization,
    with_map: bool,
) -> Result<AttentionResult> {
    cfg.validate()?;
    check_qkv("focused_linear_attention", q, k, v)?;
    cfg.grid.check(q.rows())?;
    if kernel.size() != cfg.dwc_kernel_size {
        return Err(Error::Config(format!(
            "kernel size {} does not match configured size {}",
            kernel.size(),
            cfg.dwc_kernel_size
        )));
    }
    let attn = linear_attention_with(q, k, v, cfg.feature_map(), cfg.eps, norm, with_map)?;
    let conv = dwc_apply(v, cfg.grid, kernel)?;
    Ok(AttentionResult {
        output: attn.output.add(&conv)?,
        attention_map: attn.attention_map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlopVariant {
    Softmax,
    Linear,
}

/// Multiply-add count of the implemented dataflow, two flops per multiply-add.
///
/// * softmax: `2N²d` for `QKᵀ`, `5N²` for the row softmax, `2N²d` for `AV`.
/// * linear: `2Nd²` for `φ(K)ᵀV`, `2Nd²` for `φ(Q)S`, `4Nd` for the
///   normalizer (`z` accumulation, the `φ(Q_i)·z` dot, the division).
pub fn flop_count(variant: FlopVariant, n: u64, d: u64) -> u64 {
    match variant {
        FlopVariant::Softmax => 4 * n * n * d + 5 * n * n,
        FlopVariant::Linear => 4 * n * d * d + 4 * n * d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::dot;
    use crate::rng::{Role, Streams};

    #[test]
    fn default_config_is_valid() {
        AttentionConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_fields() {
        let base = AttentionConfig::default();
        for bad in [
            AttentionConfig { eps: 0.0, ..base },
            AttentionConfig { eps: 1e-2, ..base },
            AttentionConfig { focus_p: 0.5, ..base },
            AttentionConfig {
                dwc_kernel_size: 4,
                ..base
            },
            AttentionConfig {
                grid: Grid::new(14, 13),
                ..base
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn identity_projection_and_zero_input() {
        let x = Streams::new(1).normal_matrix(0, Role::X, 4, 6);
        let (q, k, v) = project(&x, &ProjectionSet::identity(6)).unwrap();
        assert_eq!((&q, &k, &v), (&x, &x, &x));
        let (q, _, _) = project(&Matrix::zeros(4, 6), &ProjectionSet::identity(6)).unwrap();
        assert_eq!(q.max_abs(), 0.0);
    }

    #[test]
    fn projection_shape_error() {
        let x = Matrix::zeros(4, 5);
        assert!(project(&x, &ProjectionSet::identity(6)).is_err());
        assert!(ProjectionSet::new(Matrix::identity(3), Matrix::identity(2), Matrix::identity(3)).is_err());
    }

    #[test]
    fn single_token_softmax_returns_value() {
        let s = Streams::new(5);
        let (q, k, v) = s.qkv(0, 1, 4);
        let out = softmax_attention(&q, &k, &v, false).unwrap().output;
        assert_eq!(out, v);
    }

    #[test]
    fn zero_query_softmax_averages_values() {
        let s = Streams::new(5);
        let (_, k, v) = s.qkv(0, 6, 3);
        let out = softmax_attention(&Matrix::zeros(6, 3), &k, &v, true).unwrap();
        for c in 0..3 {
            let mean = v.column(c).as_slice().iter().sum::<f64>() / 6.0;
            for r in 0..6 {
                assert!((out.output[(r, c)] - mean).abs() < 1e-14);
            }
        }
        for r in 0..6 {
            let sum: f64 = out.attention_map.as_ref().unwrap().row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn focused_map_examples() {
        let x = Vector::new(alloc::vec![0.4, 0.0, 2.5]);
        assert_eq!(focused_map(&x, 1.0), x);
        for p in [1.0, 2.0, 3.0, 7.5] {
            let e = Vector::new(alloc::vec![0.0, 1.0, 0.0]);
            assert_eq!(focused_map(&e, p), e);
        }
        let y = focused_map(&Vector::new(alloc::vec![2.0, 1.0]), 3.0);
        let scale = 5f64.sqrt() / 65f64.sqrt();
        assert!((y[0] - 8.0 * scale).abs() < 1e-14);
        assert!((y[1] - scale).abs() < 1e-14);
        assert!((crate::linalg::l2_norm(&y) - 5f64.sqrt()).abs() < 1e-14);
        assert_eq!(
            focused_map(&Vector::new(alloc::vec![-1.0, -2.0]), 3.0),
            Vector::zeros(2)
        );
    }

    #[test]
    fn single_token_linear_attention_returns_value() {
        let s = Streams::new(9);
        let q = Matrix::from_rows(&[[0.5, 1.0, 0.2]]).unwrap();
        let k = Matrix::from_rows(&[[1.0, 0.3, 0.9]]).unwrap();
        let v = s.normal_matrix(0, Role::Value, 1, 3);
        for map in [FeatureMap::Relu, FeatureMap::Focused(3.0)] {
            // With one token the output is v·s/(s + eps), s = φ(q)·φ(k).
            let pq = apply_feature_map(&q, map);
            let pk = apply_feature_map(&k, map);
            let sim = dot(pq.row(0), pk.row(0));
            let out = linear_attention(&q, &k, &v, map, DEFAULT_EPS, false).unwrap().output;
            let expected = v.scale(sim / (sim + DEFAULT_EPS));
            assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
            let out = linear_attention(&q, &k, &v, map, 1e-12, false).unwrap().output;
            assert!(out.max_abs_diff(&v).unwrap() < 1e-9);
        }
    }

    #[test]
    fn identical_keys_give_identical_rows() {
        let s = Streams::new(11);
        let (q, _, v) = s.qkv(0, 7, 4);
        let key = [0.3, -0.2, 1.1, 0.6];
        let k = Matrix::from_fn(7, 4, |_, c| key[c]);
        // Every query then averages the same values; only the eps share of
        // each denominator differs, so use a negligible eps.
        let out = linear_attention(&q, &k, &v, FeatureMap::Focused(3.0), 1e-15, false)
            .unwrap()
            .output;
        for r in 1..7 {
            for c in 0..4 {
                assert!((out[(r, c)] - out[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_kernel_reduces_to_linear_term() {
        let cfg = AttentionConfig {
            n_tokens: 16,
            head_dim: 4,
            grid: Grid::new(4, 4),
            ..AttentionConfig::default()
        };
        let (q, k, v) = Streams::new(2).qkv(0, 16, 4);
        let zero = DwcKernel::zeros(4, 3).unwrap();
        let full = focused_linear_attention(&q, &k, &v, &cfg, &zero, Normalization::Normalized, false)
            .unwrap()
            .output;
        let lin = linear_attention(&q, &k, &v, FeatureMap::Focused(3.0), cfg.eps, false)
            .unwrap()
            .output;
        assert_eq!(full, lin);
        let zero_v = Matrix::zeros(16, 4);
        let kernel = DwcKernel::seeded(&Streams::new(2), 0, 4, 3).unwrap();
        let out = focused_linear_attention(&q, &k, &zero_v, &cfg, &kernel, Normalization::Normalized, false)
            .unwrap()
            .output;
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn flop_formulas() {
        assert_eq!(flop_count(FlopVariant::Softmax, 196, 64), 10_026_576);
        assert_eq!(flop_count(FlopVariant::Linear, 196, 64), 3_261_440);
    }

    #[test]
    fn heads_round_trip() {
        let m = Streams::new(4).normal_matrix(0, Role::X, 5, 12);
        let heads = split_heads(&m, 3).unwrap();
        assert_eq!(heads.len(), 3);
        assert_eq!(heads[1][(2, 0)], m[(2, 4)]);
        assert_eq!(concat_heads(&heads).unwrap(), m);
        assert!(split_heads(&m, 5).is_err());
    }
}
