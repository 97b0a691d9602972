//! Measurements behind the focused-attention analysis: inner-product scans of
//! the focused map, attention-map ranks, the equivalent attention matrix of
//! the convolution-augmented module, and attention sharpness.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{apply_feature_map, focused_map, AttentionConfig, FeatureMap};
use crate::dwc::{dwc_as_matrix, DwcKernel, Grid};
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, matmul_transposed, row_softmax, Matrix, Vector};
use crate::rng::{self, Role, Streams};
use crate::svd::{numerical_rank, DEFAULT_RANK_TOL};

/// Exponents scanned when looking for an inner-product witness.
pub const DEFAULT_P_GRID: [f64; 11] = [1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 1024.0];

/// Allowed distance from the limit at the largest scanned exponent.
pub const LIMIT_TOL: f64 = 1e-6;

/// Row sums accepted by [`attention_entropy`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Inner products `⟨φ_p(x), φ_p(y)⟩` over a grid of exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Result {
    pub x: Vector,
    pub y: Vector,
    /// Both vectors peak at the same coordinate.
    pub shared_argmax: bool,
    pub p_grid: Vec<f64>,
    pub inner_products: Vec<f64>,
    /// `⟨x, y⟩`.
    pub baseline: f64,
    /// `‖x‖‖y‖` when the argmax is shared, else 0.
    pub limit_value: f64,
    /// First exponent where the inner product moves past the baseline toward
    /// the limit.
    pub witness_p: Option<f64>,
}

impl Prop1Result {
    pub fn distance_to_limit(&self) -> Vec<f64> {
        self.inner_products
            .iter()
            .map(|ip| (ip - self.limit_value).abs())
            .collect()
    }

    /// Distance to the limit at the largest exponent, when that exponent is
    /// at least 256.
    pub fn final_gap(&self) -> Option<f64> {
        match (self.p_grid.last(), self.inner_products.last()) {
            (Some(&p), Some(ip)) if p >= 256.0 => Some((ip - self.limit_value).abs()),
            _ => None,
        }
    }

    pub fn converged(&self) -> bool {
        self.final_gap().is_some_and(|g| g < LIMIT_TOL)
    }

    /// True when the distance to the limit never increases from grid index
    /// `from` onward (up to `1e-15` relative slack).
    pub fn monotone_from(&self, from: usize) -> bool {
        let dist = self.distance_to_limit();
        let slack = 1e-15 * self.limit_value.max(self.baseline).max(1.0);
        dist.iter()
            .skip(from)
            .zip(dist.iter().skip(from + 1))
            .all(|(a, b)| *b <= *a + slack)
    }
}

fn single_strict_max(v: &Vector, name: &str) -> Result<usize> {
    let idx = v
        .argmax()
        .ok_or_else(|| Error::Assumption(format!("{name} is empty")))?;
    let max = v[idx];
    if v.as_slice().iter().filter(|&&e| e == max).count() != 1 {
        return Err(Error::Assumption(format!(
            "{name} must have a single largest value, {max} is tied"
        )));
    }
    Ok(idx)
}

/// Scans `⟨φ_p(x), φ_p(y)⟩` over `p_grid` for nonnegative `x`, `y` with a
/// single strict maximum each and `0 < ⟨x,y⟩ < ‖x‖‖y‖`.
pub fn prop1_verify(x: &Vector, y: &Vector, p_grid: &[f64]) -> Result<Prop1Result> {
    if x.len() != y.len() {
        return Err(Error::shape("prop1_verify", (1, x.len()), (1, y.len())));
    }
    for (name, v) in [("x", x), ("y", y)] {
        if let Some(i) = v.as_slice().iter().position(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::Assumption(format!(
                "{name} must be finite and nonnegative, entry {i} is {}",
                v[i]
            )));
        }
    }
    let mx = single_strict_max(x, "x")?;
    let my = single_strict_max(y, "y")?;
    let baseline = x.dot(y);
    let norms = l2_norm(x) * l2_norm(y);
    if !(baseline > 0.0) {
        return Err(Error::Assumption("<x, y> must be positive (x, y orthogonal)".into()));
    }
    if !(baseline < norms * (1.0 - 1e-12)) {
        return Err(Error::Assumption("<x, y> must be below |x||y| (x, y parallel)".into()));
    }
    if p_grid.is_empty() {
        return Err(Error::Assumption("p grid is empty".into()));
    }
    if let Some(p) = p_grid.iter().find(|p| !(**p > 1.0) || !p.is_finite()) {
        return Err(Error::Assumption(format!("p grid values must exceed 1, got {p}")));
    }
    if p_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Assumption("p grid must be strictly ascending".into()));
    }

    let shared_argmax = mx == my;
    let limit_value = if shared_argmax { norms } else { 0.0 };
    let inner_products: Vec<f64> = p_grid
        .iter()
        .map(|&p| focused_map(x, p).dot(&focused_map(y, p)))
        .collect();
    let witness_p = p_grid
        .iter()
        .zip(&inner_products)
        .find(|(_, &ip)| if shared_argmax { ip > baseline } else { ip < baseline })
        .map(|(&p, _)| p);

    Ok(Prop1Result {
        x: x.clone(),
        y: y.clone(),
        shared_argmax,
        p_grid: p_grid.to_vec(),
        inner_products,
        baseline,
        limit_value,
        witness_p,
    })
}

/// A seeded pair satisfying the preconditions of [`prop1_verify`].
///
/// Dimension is uniform in `2..=8`. Non-peak entries are uniform in
/// `[0, 0.9)` of the peak, so the runner-up ratio is at most 0.9 and
/// `0.9^1024` is far below the limit tolerance. Peaks are scaled by a factor
/// in `[0.5, 2)`. Pairs that come out nearly parallel are redrawn.
pub fn prop1_pair(streams: &Streams, instance: u64, shared_argmax: bool) -> (Vector, Vector) {
    let role = if shared_argmax { Role::X } else { Role::Y };
    let mut rng = streams.rng(instance, role);
    loop {
        let n = 2 + rng::random_index(&mut rng, 7);
        let mx = rng::random_index(&mut rng, n);
        let my = if shared_argmax {
            mx
        } else {
            (mx + 1 + rng::random_index(&mut rng, n - 1)) % n
        };
        let mut draw = |peak: usize| {
            let scale = rng::uniform(&mut rng, 0.5, 2.0);
            let mut v = rng::collect_uniform(&mut rng, n, 0.0, 0.9);
            v[peak] = 1.0;
            Vector::new(v.into_iter().map(|e| e * scale).collect())
        };
        let x = draw(mx);
        let y = draw(my);
        let baseline = x.dot(&y);
        if baseline > 0.0 && baseline < (1.0 - 1e-6) * l2_norm(&x) * l2_norm(&y) {
            return (x, y);
        }
    }
}

/// Row-normalized `φ(Q)φ(K)ᵀ`: row `i` is divided by
/// `Σ_j φ(Q_i)·φ(K_j) + eps`, the same denominator the reordered kernel uses.
pub fn normalized_linear_map(phi_q: &Matrix, phi_k: &Matrix, eps: f64) -> Result<Matrix> {
    let mut a = matmul_transposed(phi_q, phi_k)?;
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        let den = row.iter().sum::<f64>() + eps;
        for x in row.iter_mut() {
            *x /= den;
        }
    }
    Ok(a)
}

/// `M_eq = normalize(φ(Q)φ(K)ᵀ) + M_DWC` for one channel's kernel.
pub fn equivalent_attention_matrix(
    phi_q: &Matrix,
    phi_k: &Matrix,
    kernel_channel: &[f64],
    size: usize,
    grid: Grid,
    eps: f64,
) -> Result<Matrix> {
    grid.check(phi_q.rows())?;
    normalized_linear_map(phi_q, phi_k, eps)?.add(&dwc_as_matrix(kernel_channel, size, grid)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RankVariant {
    Softmax,
    LinearRelu,
    LinearFocused,
    FocusedPlusDwc,
}

impl RankVariant {
    pub const ALL: [RankVariant; 4] = [
        RankVariant::Softmax,
        RankVariant::LinearRelu,
        RankVariant::LinearFocused,
        RankVariant::FocusedPlusDwc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RankVariant::Softmax => "softmax",
            RankVariant::LinearRelu => "linear_relu",
            RankVariant::LinearFocused => "linear_focused",
            RankVariant::FocusedPlusDwc => "focused_plus_dwc",
        }
    }

    pub fn is_low_rank_linear(&self) -> bool {
        matches!(self, RankVariant::LinearRelu | RankVariant::LinearFocused)
    }
}

/// Whether `M_DWC` uses one kernel for all channels or each channel's own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    /// Channel 0's kernel stands in for every channel; one rank is reported.
    Shared,
    #[default]
    PerChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub variant: RankVariant,
    pub n: usize,
    pub d: usize,
    /// One entry per channel, or a single entry when no convolution is
    /// involved or the kernel is shared.
    pub per_channel_ranks: Vec<usize>,
    /// `min(N, d)` for the linear variants, `N` otherwise.
    pub bound: usize,
    /// Rank of the un-normalized `φ(Q)φ(K)ᵀ` for the linear variants.
    pub raw_rank: Option<usize>,
}

impl RankReport {
    pub fn max_rank(&self) -> usize {
        self.per_channel_ranks.iter().copied().max().unwrap_or(0)
    }

    pub fn within_bound(&self) -> bool {
        self.per_channel_ranks.iter().all(|&r| r <= self.bound) && self.raw_rank.is_none_or(|r| r <= self.bound)
    }
}

/// Materializes the attention map of `variant` and measures its numerical
/// rank (relative tolerance [`DEFAULT_RANK_TOL`]).
pub fn attention_rank_scan(
    q: &Matrix,
    k: &Matrix,
    variant: RankVariant,
    cfg: &AttentionConfig,
    kernel: Option<&DwcKernel>,
    mode: KernelMode,
) -> Result<RankReport> {
    if q.shape() != k.shape() {
        return Err(Error::shape("attention_rank_scan", q.shape(), k.shape()));
    }
    let (n, d) = q.shape();
    match (variant, kernel) {
        (RankVariant::FocusedPlusDwc, None) => return Err(Error::Config("focused_plus_dwc needs a DWC kernel".into())),
        (v, Some(_)) if v != RankVariant::FocusedPlusDwc => {
            return Err(Error::Config(format!("{} takes no DWC kernel", v.name())))
        }
        _ => {}
    }
    let map = match variant {
        RankVariant::LinearRelu => FeatureMap::Relu,
        _ => cfg.feature_map(),
    };
    let (per_channel_ranks, bound, raw_rank) = match variant {
        RankVariant::Softmax => {
            let scale = 1.0 / num_traits::Float::sqrt(d as f64);
            let attn = row_softmax(&matmul_transposed(q, k)?.scale(scale));
            (alloc::vec![numerical_rank(&attn, DEFAULT_RANK_TOL)?], n, None)
        }
        RankVariant::LinearRelu | RankVariant::LinearFocused => {
            let phi_q = apply_feature_map(q, map);
            let phi_k = apply_feature_map(k, map);
            let raw = numerical_rank(&matmul_transposed(&phi_q, &phi_k)?, DEFAULT_RANK_TOL)?;
            let attn = normalized_linear_map(&phi_q, &phi_k, cfg.eps)?;
            (
                alloc::vec![numerical_rank(&attn, DEFAULT_RANK_TOL)?],
                n.min(d),
                Some(raw),
            )
        }
        RankVariant::FocusedPlusDwc => {
            let kernel = kernel.expect("checked above");
            cfg.grid.check(n)?;
            if kernel.channels() != d {
                return Err(Error::ChannelMismatch {
                    kernel: kernel.channels(),
                    values: d,
                });
            }
            let phi_q = apply_feature_map(q, map);
            let phi_k = apply_feature_map(k, map);
            let attn = normalized_linear_map(&phi_q, &phi_k, cfg.eps)?;
            let channels = match mode {
                KernelMode::Shared => 1,
                KernelMode::PerChannel => d,
            };
            let ranks = (0..channels)
                .map(|c| {
                    let m_dwc = dwc_as_matrix(kernel.channel(c), kernel.size(), cfg.grid)?;
                    numerical_rank(&attn.add(&m_dwc)?, DEFAULT_RANK_TOL)
                })
                .collect::<Result<Vec<_>>>()?;
            (ranks, n, None)
        }
    };
    Ok(RankReport {
        variant,
        n,
        d,
        per_channel_ranks,
        bound,
        raw_rank,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessReport {
    /// Shannon entropy of each row, in nats.
    pub per_row_entropy: Vec<f64>,
    pub mean_entropy: f64,
    /// Mean over rows of the largest weight in the row.
    pub max_weight_mean: f64,
}

/// Shannon entropy `-Σ a ln a` of one distribution, with `0 ln 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * num_traits::Float::ln(a))
        .sum::<f64>()
}

/// Entropy and peak-weight statistics of a row-stochastic attention map.
pub fn attention_entropy(attn: &Matrix) -> Result<SharpnessReport> {
    let mut per_row_entropy = Vec::with_capacity(attn.rows());
    let mut max_sum = 0.0;
    for r in 0..attn.rows() {
        let row = attn.row(r);
        if let Some(c) = row.iter().position(|a| !(*a >= 0.0)) {
            return Err(Error::Domain {
                op: "attention_entropy",
                detail: format!("row {r} has negative weight {} at column {c}", row[c]),
            });
        }
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= ROW_SUM_TOL) {
            return Err(Error::Normalization { row: r, sum });
        }
        per_row_entropy.push(row_entropy(row));
        max_sum += row.iter().fold(0.0, |m: f64, &a| m.max(a));
    }
    let rows = attn.rows().max(1) as f64;
    Ok(SharpnessReport {
        mean_entropy: per_row_entropy.iter().sum::<f64>() / rows,
        max_weight_mean: max_sum / rows,
        per_row_entropy,
    })
}

/// Attention weights of one query over `keys` (one key per row) under the
/// focused map, normalized to sum to one.
pub fn focused_attention_row(q: &Vector, keys: &Matrix, p: f64) -> Vec<f64> {
    let fq = focused_map(q, p);
    let mut scores: Vec<f64> = (0..keys.rows())
        .map(|j| fq.dot(&focused_map(&Vector::new(keys.row(j).to_vec()), p)))
        .collect();
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    }
    scores
}

/// Query and key set with entries uniform in `[0, 1)`. With
/// `unique_match`, instances are redrawn until exactly one key peaks at the
/// same coordinate as the query.
pub fn sharpening_instance(
    streams: &Streams,
    instance: u64,
    d: usize,
    n_keys: usize,
    unique_match: bool,
) -> (Vector, Matrix) {
    let mut rng = streams.rng(instance, Role::Aux);
    loop {
        let q = rng::uniform_vector(&mut rng, d, 0.0, 1.0);
        let keys = rng::uniform_matrix(&mut rng, n_keys, d, 0.0, 1.0);
        if !unique_match {
            return (q, keys);
        }
        let target = q.argmax();
        let matches = (0..n_keys)
            .filter(|&j| Vector::new(keys.row(j).to_vec()).argmax() == target)
            .count();
        if matches == 1 {
            return (q, keys);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpeningSummary {
    pub trials: usize,
    pub mean_entropy_low: f64,
    pub mean_entropy_high: f64,
    /// Share of trials where the row at the higher exponent has entropy no
    /// larger than at the lower one.
    pub fraction_sharper: f64,
}

/// Compares attention-row entropy at `p_low` and `p_high` over seeded
/// instances from [`sharpening_instance`].
pub fn sharpening_trials(
    streams: &Streams,
    trials: usize,
    d: usize,
    n_keys: usize,
    p_low: f64,
    p_high: f64,
    unique_match: bool,
) -> SharpeningSummary {
    let mut low = 0.0;
    let mut high = 0.0;
    let mut sharper = 0usize;
    for t in 0..trials {
        let (q, keys) = sharpening_instance(streams, t as u64, d, n_keys, unique_match);
        let e_low = row_entropy(&focused_attention_row(&q, &keys, p_low));
        let e_high = row_entropy(&focused_attention_row(&q, &keys, p_high));
        low += e_low;
        high += e_high;
        if e_high <= e_low {
            sharper += 1;
        }
    }
    let n = trials.max(1) as f64;
    SharpeningSummary {
        trials,
        mean_entropy_low: low / n,
        mean_entropy_high: high / n,
        fraction_sharper: sharper as f64 / n,
    }
}
