//! Hand-written vector-Jacobian products and a central-difference checker.
//!
//! ReLU's subgradient at 0 is taken as 0, and a row that `f_p` maps to zero
//! has zero gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::attention::{
    apply_feature_map, focused_linear_attention, linear_attention, softmax_attention, AttentionConfig, FeatureMap,
    Normalization,
};
use crate::dwc::{dwc_apply, DwcKernel, Grid};
use crate::error::{Error, Result};
use crate::kernels::{self, dot};
use crate::linalg::{matmul, matmul_transposed, Matrix, Vector};
use crate::rng::{self, Role, Streams};

/// Gradient of `⟨g, f_p(ReLU(x))⟩` with respect to one row `x`.
fn focus_vjp_row(x: &[f64], p: f64, g: &[f64], out: &mut [f64]) {
    if p == 1.0 {
        for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
            *o = if xi > 0.0 { gi } else { 0.0 };
        }
        return;
    }
    let max = x.iter().fold(0.0f64, |m, &v| m.max(v));
    if max == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    // work with a = ReLU(x)/max and w = a^p; the map is scale-free in max
    let a: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v / max } else { 0.0 }).collect();
    let w: Vec<f64> = a.iter().map(|&ai| if ai > 0.0 { ai.powf(p) } else { 0.0 }).collect();
    let na = dot(&a, &a).sqrt();
    let nw = dot(&w, &w).sqrt();
    let gw = dot(g, &w);
    let t1 = gw / (na * nw);
    let t2 = gw * na / (nw * nw * nw);
    let t3 = na / nw;
    for i in 0..x.len() {
        out[i] = if x[i] > 0.0 {
            let dpow = p * a[i].powf(p - 1.0);
            t1 * a[i] - t2 * w[i] * dpow + t3 * g[i] * dpow
        } else {
            0.0
        };
    }
}

/// Vector-Jacobian product of [`crate::attention::focused_map`].
pub fn focused_map_vjp(x: &Vector, p: f64, upstream: &Vector) -> Vector {
    let mut out = vec![0.0; x.len()];
    focus_vjp_row(x.as_slice(), p, upstream.as_slice(), &mut out);
    Vector::new(out)
}

/// Row-wise VJP of [`apply_feature_map`].
pub fn feature_map_vjp(x: &Matrix, map: FeatureMap, upstream: &Matrix) -> Result<Matrix> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape("feature_map_vjp", x.shape(), upstream.shape()));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        match map {
            FeatureMap::Relu => {
                for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(x.row(r)).zip(upstream.row(r)) {
                    *o = if xi > 0.0 { gi } else { 0.0 };
                }
            }
            FeatureMap::Focused(p) => focus_vjp_row(x.row(r), p, upstream.row(r), out.row_mut(r)),
        }
    }
    Ok(out)
}

/// Gradients of `Σ upstream ⊙ softmax_attention(q, k, v)`.
pub fn softmax_attention_vjp(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let attn = softmax_attention(q, k, v, true)?.attention_map.expect("map requested");
    if upstream.shape() != (q.rows(), v.cols()) {
        return Err(Error::shape(
            "softmax_attention_vjp",
            (q.rows(), v.cols()),
            upstream.shape(),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let dv = matmul(&attn.transpose(), upstream)?;
    let d_attn = matmul_transposed(upstream, v)?;
    let mut d_logits = Matrix::zeros(attn.rows(), attn.cols());
    for i in 0..attn.rows() {
        let inner = dot(attn.row(i), d_attn.row(i));
        for j in 0..attn.cols() {
            d_logits[(i, j)] = attn[(i, j)] * (d_attn[(i, j)] - inner) * scale;
        }
    }
    let dq = matmul(&d_logits, k)?;
    let dk = matmul(&d_logits.transpose(), q)?;
    Ok((dq, dk, dv))
}

/// Gradients of `Σ upstream ⊙ linear_attention(q, k, v)` (or of the
/// un-normalized product when `norm` says so).
pub fn linear_attention_vjp(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: FeatureMap,
    eps: f64,
    norm: Normalization,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    if q.shape() != k.shape() || v.rows() != q.rows() {
        return Err(Error::shape("linear_attention_vjp", q.shape(), k.shape()));
    }
    if upstream.shape() != v.shape() {
        return Err(Error::shape("linear_attention_vjp", v.shape(), upstream.shape()));
    }
    let (n, d, dv_cols) = (q.rows(), q.cols(), v.cols());
    let phi_q = apply_feature_map(q, map);
    let phi_k = apply_feature_map(k, map);
    // S = φ(K)ᵀV, z = φ(K)ᵀ1
    let kv = matmul(&phi_k.transpose(), v)?;
    let z: Vec<f64> = (0..d).map(|a| (0..n).map(|j| phi_k[(j, a)]).sum()).collect();

    // d_num: gradient w.r.t. φ(Q_i)S, d_den: w.r.t. the denominator
    let mut d_num = upstream.clone();
    let mut d_den = vec![0.0; n];
    if norm == Normalization::Normalized {
        let num = matmul(&phi_q, &kv)?;
        for i in 0..n {
            let den = dot(phi_q.row(i), &z) + eps;
            let mut acc = 0.0;
            for c in 0..dv_cols {
                acc += upstream[(i, c)] * num[(i, c)];
                d_num[(i, c)] = upstream[(i, c)] / den;
            }
            d_den[i] = -acc / (den * den);
        }
    }
    let mut d_phi_q = matmul_transposed(&d_num, &kv)?;
    for i in 0..n {
        for (a, &za) in z.iter().enumerate() {
            d_phi_q[(i, a)] += d_den[i] * za;
        }
    }
    let d_kv = matmul(&phi_q.transpose(), &d_num)?;
    let d_z: Vec<f64> = (0..d).map(|a| (0..n).map(|i| d_den[i] * phi_q[(i, a)]).sum()).collect();
    let mut d_phi_k = matmul_transposed(v, &d_kv)?;
    for j in 0..n {
        for (a, &dza) in d_z.iter().enumerate() {
            d_phi_k[(j, a)] += dza;
        }
    }
    let dv = matmul(&phi_k, &d_kv)?;
    Ok((
        feature_map_vjp(q, map, &d_phi_q)?,
        feature_map_vjp(k, map, &d_phi_k)?,
        dv,
    ))
}

/// Gradients of `Σ upstream ⊙ dwc_apply(v)` with respect to `v` and the
/// kernel weights.
pub fn dwc_vjp(v: &Matrix, grid: Grid, kernel: &DwcKernel, upstream: &Matrix) -> Result<(Matrix, DwcKernel)> {
    grid.check(v.rows())?;
    if kernel.channels() != v.cols() {
        return Err(Error::ChannelMismatch {
            kernel: kernel.channels(),
            values: v.cols(),
        });
    }
    if upstream.shape() != v.shape() {
        return Err(Error::shape("dwc_vjp", v.shape(), upstream.shape()));
    }
    let size = kernel.size();
    let taps = size * size;
    let half = (size / 2) as isize;
    let channels = v.cols();
    let mut dv = Matrix::zeros(v.rows(), channels);
    let mut dk = DwcKernel::zeros(channels, size)?;
    for r in 0..grid.height as isize {
        for c in 0..grid.width as isize {
            let dst = r as usize * grid.width + c as usize;
            for di in 0..size as isize {
                for dj in 0..size as isize {
                    let (sr, sc) = (r + di - half, c + dj - half);
                    if sr < 0 || sc < 0 || sr >= grid.height as isize || sc >= grid.width as isize {
                        continue;
                    }
                    let src = sr as usize * grid.width + sc as usize;
                    let tap = di as usize * size + dj as usize;
                    for ch in 0..channels {
                        let g = upstream[(dst, ch)];
                        dv[(src, ch)] += kernel.weights()[ch * taps + tap] * g;
                        dk.weights_mut()[ch * taps + tap] += v[(src, ch)] * g;
                    }
                }
            }
        }
    }
    Ok((dv, dk))
}

/// Gradients of focused linear attention with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct FlaGradients {
    pub dq: Matrix,
    pub dk: Matrix,
    /// Attention path plus convolution path.
    pub dv: Matrix,
    pub dkernel: DwcKernel,
}

pub fn focused_linear_attention_vjp(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    kernel: &DwcKernel,
    norm: Normalization,
    upstream: &Matrix,
) -> Result<FlaGradients> {
    cfg.validate()?;
    let (dq, dk, dv_attn) = linear_attention_vjp(q, k, v, cfg.feature_map(), cfg.eps, norm, upstream)?;
    let (dv_conv, dkernel) = dwc_vjp(v, cfg.grid, kernel, upstream)?;
    Ok(FlaGradients {
        dq,
        dk,
        dv: dv_attn.add(&dv_conv)?,
        dkernel,
    })
}

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every
/// coordinate of `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|, 1e-8)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GradOp {
    FocusedMap,
    SoftmaxAttention,
    LinearAttention,
    FocusedLinearAttention,
    Dwc,
}

impl GradOp {
    pub const ALL: [GradOp; 5] = [
        GradOp::FocusedMap,
        GradOp::SoftmaxAttention,
        GradOp::LinearAttention,
        GradOp::FocusedLinearAttention,
        GradOp::Dwc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradOp::FocusedMap => "focused_map",
            GradOp::SoftmaxAttention => "softmax_attention",
            GradOp::LinearAttention => "linear_attention",
            GradOp::FocusedLinearAttention => "focused_linear_attention",
            GradOp::Dwc => "dwc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    /// Finite-difference step.
    pub h: f64,
    pub passed: bool,
}

/// Magnitudes of query/key entries in check instances; the lower end keeps
/// every coordinate well away from the ReLU kink.
const KINK_FREE: (f64, f64) = (0.1, 1.5);

/// A packed parameter vector, the forward map to a flat output, the upstream
/// gradient that defines the loss `Σ upstream ⊙ output`, and the analytic
/// gradient of that loss.
type Forward = alloc::boxed::Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct Problem {
    params: Vec<f64>,
    forward: Forward,
    upstream: Vec<f64>,
    analytic: Vec<f64>,
}

/// Flips signs (never magnitudes) until every row and every column has at
/// least two positive entries. A query whose active features meet the keys'
/// active features in a single coordinate produces an output that does not
/// depend on it except through `eps`; its true gradient is then eps-scale and
/// below what a step-`h` central difference can resolve.
fn ensure_two_positive(m: &mut Matrix) {
    let (rows, cols) = m.shape();
    for r in 0..rows {
        let mut positive = m.row(r).iter().filter(|&&x| x > 0.0).count();
        for c in 0..cols {
            if positive >= 2.min(cols) {
                break;
            }
            let x = &mut m.row_mut(r)[c];
            if *x < 0.0 {
                *x = -*x;
                positive += 1;
            }
        }
    }
    for c in 0..cols {
        let mut positive = (0..rows).filter(|&r| m[(r, c)] > 0.0).count();
        for r in 0..rows {
            if positive >= 2.min(rows) {
                break;
            }
            let x = &mut m.row_mut(r)[c];
            if *x < 0.0 {
                *x = -*x;
                positive += 1;
            }
        }
    }
}

fn unpack(params: &[f64], shapes: &[(usize, usize)]) -> Vec<Matrix> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::new(r, c, params[offset..offset + r * c].to_vec()).expect("packed shape");
            offset += r * c;
            m
        })
        .collect()
}

/// Central differences of `Σ upstream ⊙ forward(x)`. The two perturbed
/// outputs are differenced entry by entry before the upstream contraction,
/// so outputs a coordinate does not touch contribute exactly zero instead of
/// the rounding noise of two full loss sums.
fn central_difference_contracted(
    x: &[f64],
    h: f64,
    upstream: &[f64],
    forward: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = forward(&probe);
            probe[i] = orig - h;
            let minus = forward(&probe);
            probe[i] = orig;
            let diff: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| a - b).collect();
            dot(&diff, upstream) / (2.0 * h)
        })
        .collect()
}

fn build_problem(op: GradOp, seed: u64) -> Result<Problem> {
    let streams = Streams::new(seed);
    let kink_free = |role: Role, rows: usize, cols: usize| {
        let mut m = rng::kink_free_matrix(&mut streams.rng(0, role), rows, cols, KINK_FREE.0, KINK_FREE.1);
        ensure_two_positive(&mut m);
        m
    };
    let normal = |role: Role, rows: usize, cols: usize| streams.normal_matrix(0, role, rows, cols);
    let p = crate::attention::DEFAULT_FOCUS_P;
    let eps = crate::attention::DEFAULT_EPS;
    Ok(match op {
        GradOp::FocusedMap => {
            let x = kink_free(Role::X, 1, 8);
            let g = normal(Role::Upstream, 1, 8);
            let analytic = focused_map_vjp(&x.row(0).to_vec().into(), p, &g.row(0).to_vec().into()).into_vec();
            Problem {
                params: x.into_vec(),
                forward: alloc::boxed::Box::new(move |x| {
                    let mut y = x.to_vec();
                    kernels::focus_in_place(&mut y, p);
                    y
                }),
                upstream: g.into_vec(),
                analytic,
            }
        }
        GradOp::SoftmaxAttention => {
            let (n, d) = (6, 4);
            let (q, k, v) = (
                normal(Role::Query, n, d),
                normal(Role::Key, n, d),
                normal(Role::Value, n, d),
            );
            let g = normal(Role::Upstream, n, d);
            let (dq, dk, dv) = softmax_attention_vjp(&q, &k, &v, &g)?;
            let shapes = [(n, d); 3];
            Problem {
                params: [q, k, v].into_iter().flat_map(Matrix::into_vec).collect(),
                forward: alloc::boxed::Box::new(move |p| {
                    let m = unpack(p, &shapes);
                    softmax_attention(&m[0], &m[1], &m[2], false).unwrap().output.into_vec()
                }),
                upstream: g.into_vec(),
                analytic: [dq, dk, dv].into_iter().flat_map(Matrix::into_vec).collect(),
            }
        }
        GradOp::LinearAttention => {
            let (n, d) = (8, 4);
            let (q, k, v) = (
                kink_free(Role::Query, n, d),
                kink_free(Role::Key, n, d),
                normal(Role::Value, n, d),
            );
            let g = normal(Role::Upstream, n, d);
            let map = FeatureMap::Focused(p);
            let (dq, dk, dv) = linear_attention_vjp(&q, &k, &v, map, eps, Normalization::Normalized, &g)?;
            let shapes = [(n, d); 3];
            Problem {
                params: [q, k, v].into_iter().flat_map(Matrix::into_vec).collect(),
                forward: alloc::boxed::Box::new(move |p| {
                    let m = unpack(p, &shapes);
                    linear_attention(&m[0], &m[1], &m[2], map, eps, false)
                        .unwrap()
                        .output
                        .into_vec()
                }),
                upstream: g.into_vec(),
                analytic: [dq, dk, dv].into_iter().flat_map(Matrix::into_vec).collect(),
            }
        }
        GradOp::FocusedLinearAttention => {
            let grid = Grid::new(3, 3);
            let (n, d) = (9, 3);
            let cfg = AttentionConfig {
                n_tokens: n,
                head_dim: d,
                grid,
                ..AttentionConfig::default()
            };
            let (q, k, v) = (
                kink_free(Role::Query, n, d),
                kink_free(Role::Key, n, d),
                normal(Role::Value, n, d),
            );
            let kernel = DwcKernel::seeded(&streams, 0, d, cfg.dwc_kernel_size)?;
            let g = normal(Role::Upstream, n, d);
            let grads = focused_linear_attention_vjp(&q, &k, &v, &cfg, &kernel, Normalization::Normalized, &g)?;
            let shapes = [(n, d); 3];
            let size = kernel.size();
            let mut params: Vec<f64> = [q, k, v].into_iter().flat_map(Matrix::into_vec).collect();
            params.extend_from_slice(kernel.weights());
            Problem {
                params,
                forward: alloc::boxed::Box::new(move |p| {
                    let m = unpack(p, &shapes);
                    let kernel = DwcKernel::new(d, size, p[3 * n * d..].to_vec()).unwrap();
                    focused_linear_attention(&m[0], &m[1], &m[2], &cfg, &kernel, Normalization::Normalized, false)
                        .unwrap()
                        .output
                        .into_vec()
                }),
                upstream: g.into_vec(),
                analytic: [grads.dq, grads.dk, grads.dv]
                    .into_iter()
                    .flat_map(Matrix::into_vec)
                    .chain(grads.dkernel.weights().iter().copied())
                    .collect(),
            }
        }
        GradOp::Dwc => {
            let grid = Grid::new(3, 3);
            let (n, d, size) = (9, 3, 3);
            let v = normal(Role::Value, n, d);
            let kernel = DwcKernel::seeded(&streams, 0, d, size)?;
            let g = normal(Role::Upstream, n, d);
            let (dv, dk) = dwc_vjp(&v, grid, &kernel, &g)?;
            let mut params = v.into_vec();
            params.extend_from_slice(kernel.weights());
            Problem {
                params,
                forward: alloc::boxed::Box::new(move |p| {
                    let v = Matrix::new(n, d, p[..n * d].to_vec()).unwrap();
                    let kernel = DwcKernel::new(d, size, p[n * d..].to_vec()).unwrap();
                    dwc_apply(&v, grid, &kernel).unwrap().into_vec()
                }),
                upstream: g.into_vec(),
                analytic: dv.into_vec().into_iter().chain(dk.weights().iter().copied()).collect(),
            }
        }
    })
}

/// Compares the analytic gradient of `op` on the instance drawn from `seed`
/// against central differences with step `h`.
pub fn grad_check(op: GradOp, seed: u64, h: f64, threshold: f64) -> Result<GradCheckReport> {
    grad_check_scaled(op, seed, h, threshold, 1.0)
}

/// [`grad_check`] with the analytic gradient multiplied by `analytic_scale`
/// before comparison; a scale away from 1 must be reported as a failure.
pub fn grad_check_scaled(
    op: GradOp,
    seed: u64,
    h: f64,
    threshold: f64,
    analytic_scale: f64,
) -> Result<GradCheckReport> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step must lie in [1e-8, 1e-3], got {h}"
        )));
    }
    let problem = build_problem(op, seed)?;
    let numeric = central_difference_contracted(&problem.params, h, &problem.upstream, &*problem.forward);
    let analytic: Vec<f64> = problem.analytic.iter().map(|a| a * analytic_scale).collect();
    let max_rel_err = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        op_name: op.name(),
        seed,
        max_rel_err,
        h,
        passed: max_rel_err <= threshold,
    })
}
