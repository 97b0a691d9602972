//! The invariant suites behind `fla verify`: one named check per property,
//! each reduced to a pass/fail flag and a short deterministic detail string.

use anyhow::Result;
use fla_core::attention::{
    apply_feature_map, flop_count, focused_linear_attention, focused_map, linear_attention, softmax_attention,
    FlopVariant,
};
use fla_core::diagnostics::{
    attention_entropy, attention_rank_scan, equivalent_attention_matrix, prop1_pair, prop1_verify, row_entropy,
    sharpening_trials, KernelMode, RankVariant, DEFAULT_P_GRID,
};
use fla_core::dwc::{dwc_apply, dwc_as_matrix};
use fla_core::gradients::{dwc_vjp, focused_map_vjp, grad_check, grad_check_scaled, GradOp};
use fla_core::linalg::{elementwise_pow, l2_norm, matmul, relu_vector, row_softmax};
use fla_core::rng::{self, Role, Streams};
use fla_core::svd::{numerical_rank, DEFAULT_RANK_TOL};
use fla_core::{AttentionConfig, DwcKernel, Error, FeatureMap, Grid, Matrix, Normalization, Vector};

pub const MODULES: [&str; 5] = ["linalg-core", "attention-kernels", "dwc", "diagnostics", "gradients"];

pub const GRAD_INSTANCES: u64 = 50;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub module: &'static str,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.module.to_string(),
            self.check.clone(),
            self.passed.to_string(),
            self.detail.clone(),
        ]
    }
}

pub const CSV_HEADER: [&str; 4] = ["module", "check", "passed", "detail"];

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub seed: u64,
    pub attention: AttentionConfig,
    pub normalization: Normalization,
}

struct Suite {
    module: &'static str,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn new(module: &'static str) -> Self {
        Self {
            module,
            rows: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        self.rows.push(CheckRow {
            module: self.module,
            check: name.to_string(),
            passed,
            detail,
        });
    }
}

fn max_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.max_abs_diff(b)?)
}

fn within(value: f64, tol: f64) -> (bool, String) {
    (value <= tol, format!("max_err={value:.3e} tol={tol:.0e}"))
}

fn column(m: &Matrix, c: usize) -> Matrix {
    Matrix::new(m.rows(), 1, m.column(c).into_vec()).expect("column shape")
}

pub fn linalg_suite(cfg: &SuiteConfig) -> Vec<CheckRow> {
    let s = Streams::new(cfg.seed);
    let mut suite = Suite::new("linalg-core");
    suite.check("matmul_triple_loop_oracle", || {
        let a = s.normal_matrix(0, Role::X, 7, 5);
        let b = s.normal_matrix(0, Role::Y, 5, 3);
        let mut oracle = Matrix::zeros(7, 3);
        for i in 0..7 {
            for j in 0..3 {
                oracle[(i, j)] = (0..5).map(|k| a[(i, k)] * b[(k, j)]).sum();
            }
        }
        Ok(within(max_diff(&matmul(&a, &b)?, &oracle)?, 1e-12))
    });
    suite.check("matmul_hand_example", || {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])?;
        let b = Matrix::from_rows(&[[5.0], [6.0]])?;
        let got = matmul(&a, &b)?;
        Ok((got.as_slice() == [17.0, 39.0], format!("{:?}", got.as_slice())))
    });
    suite.check("matmul_associativity", || {
        let mut worst = 0.0f64;
        for t in 0..20 {
            let m = |r| s.normal_matrix(t, r, 8, 8);
            let (a, b, c) = (m(Role::X), m(Role::Y), m(Role::Aux));
            let left = matmul(&matmul(&a, &b)?, &c)?;
            let right = matmul(&a, &matmul(&b, &c)?)?;
            worst = worst.max(max_diff(&left, &right)? / left.max_abs().max(1.0));
        }
        Ok(within(worst, 1e-9))
    });
    suite.check("matmul_shape_error", || {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        Ok((matches!(err, Error::Shape { .. }), err.to_string()))
    });
    suite.check("row_softmax_distributions", || {
        let m = s.normal_matrix(1, Role::X, 20, 20).scale(30.0);
        let sm = row_softmax(&m);
        let mut worst = 0.0f64;
        let mut nonneg = true;
        for r in 0..20 {
            nonneg &= sm.row(r).iter().all(|&a| a >= 0.0);
            worst = worst.max((sm.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        let (ok, detail) = within(worst, 1e-12);
        Ok((ok && nonneg, detail))
    });
    suite.check("row_softmax_shift_invariance", || {
        let m = s.normal_matrix(2, Role::X, 6, 9);
        let shifted = m.map(|x| x + 123.25);
        Ok(within(max_diff(&row_softmax(&m), &row_softmax(&shifted))?, 1e-12))
    });
    suite.check("numerical_rank_of_product", || {
        let a = s.normal_matrix(3, Role::X, 12, 5);
        let b = s.normal_matrix(3, Role::Y, 5, 12);
        let r = numerical_rank(&matmul(&a, &b)?, DEFAULT_RANK_TOL)?;
        let z = numerical_rank(&Matrix::zeros(4, 4), DEFAULT_RANK_TOL)?;
        Ok((r == 5 && z == 0, format!("rank={r} zero_rank={z}")))
    });
    suite.check("elementwise_pow_domain", || {
        let ok = elementwise_pow(&Vector::new(vec![0.0, 2.0]), 3.0)?.as_slice() == [0.0, 8.0]
            && elementwise_pow(&Vector::new(vec![-1.0]), 2.0).is_err()
            && relu_vector(&Vector::new(vec![-1.0, 2.0])).as_slice() == [0.0, 2.0];
        Ok((ok, String::new()))
    });
    suite.rows
}

pub fn attention_suite(cfg: &SuiteConfig) -> Vec<CheckRow> {
    let s = Streams::new(cfg.seed);
    let ac = cfg.attention;
    let mut suite = Suite::new("attention-kernels");
    suite.check("norm_preservation", || {
        let mut worst = 0.0f64;
        for i in 0..1000 {
            let x = rng::normal_vector(&mut s.rng(i, Role::X), 16);
            let target = l2_norm(&relu_vector(&x));
            for p in [1.0, 2.0, 3.0, 4.0, 8.0, 32.0] {
                worst = worst.max((l2_norm(&focused_map(&x, p)) - target).abs());
            }
        }
        Ok(within(worst, 1e-12))
    });
    suite.check("identity_at_p1_bitwise", || {
        let mut mismatches = 0;
        for i in 0..1000 {
            let x = rng::uniform_vector(&mut s.rng(i, Role::Y), 16, 0.0, 4.0);
            let y = focused_map(&x, 1.0);
            mismatches += x
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
        }
        Ok((mismatches == 0, format!("mismatched_entries={mismatches}")))
    });
    suite.check("argmax_preservation", || {
        let mut bad = 0;
        for i in 0..1000 {
            let x = rng::normal_vector(&mut s.rng(i, Role::Aux), 12);
            let r = relu_vector(&x);
            if r.as_slice().iter().all(|&a| a == 0.0) {
                continue;
            }
            for p in [1.5, 3.0, 16.0, 256.0] {
                bad += usize::from(focused_map(&x, p).argmax() != r.argmax());
            }
        }
        Ok((bad == 0, format!("violations={bad}")))
    });
    suite.check("focused_map_example", || {
        let out = focused_map(&Vector::new(vec![2.0, 1.0]), 3.0);
        let c = 5f64.sqrt() / 65f64.sqrt();
        let err = (out[0] - 8.0 * c)
            .abs()
            .max((out[1] - c).abs())
            .max((l2_norm(&out) - 5f64.sqrt()).abs());
        Ok(within(err, 1e-12))
    });
    suite.check("softmax_double_loop_oracle", || {
        let (q, k, v) = s.qkv(10, 6, 3);
        let out = softmax_attention(&q, &k, &v, false)?.output;
        let mut oracle = Matrix::zeros(6, 3);
        for i in 0..6 {
            let logits: Vec<f64> = (0..6)
                .map(|j| (0..3).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / 3f64.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..6 {
                for c in 0..3 {
                    oracle[(i, c)] += w[j] / z * v[(j, c)];
                }
            }
        }
        Ok(within(max_diff(&out, &oracle)?, 1e-12))
    });
    suite.check("softmax_trivial_cases", || {
        let (q, k, v) = s.qkv(11, 1, 4);
        let single = softmax_attention(&q, &k, &v, false)?.output == v;
        let (_, k, v) = s.qkv(12, 5, 3);
        let out = softmax_attention(&Matrix::zeros(5, 3), &k, &v, false)?.output;
        let mut worst = 0.0f64;
        for c in 0..3 {
            let mean = v.column(c).as_slice().iter().sum::<f64>() / 5.0;
            for r in 0..5 {
                worst = worst.max((out[(r, c)] - mean).abs());
            }
        }
        let (ok, detail) = within(worst, 1e-12);
        Ok((ok && single, detail))
    });
    suite.check("softmax_scale_keeps_argmax", || {
        let mut bad = 0;
        for i in 0..100 {
            let (q, k, v) = s.qkv(100 + i, 8, 4);
            let a = softmax_attention(&q, &k, &v, true)?.attention_map.expect("map");
            let b = softmax_attention(&q.scale(0.1 + i as f64 * 0.05), &k, &v, true)?
                .attention_map
                .expect("map");
            for r in 0..8 {
                bad += usize::from(Vector::new(a.row(r).to_vec()).argmax() != Vector::new(b.row(r).to_vec()).argmax());
            }
        }
        Ok((bad == 0, format!("violations={bad}")))
    });
    suite.check("reordering_equivalence", || {
        let mut worst = 0.0f64;
        for i in 0..100 {
            let mut r = s.rng(i, Role::Aux);
            let n = 1 + rng::random_index(&mut r, 64);
            let d = 1 + rng::random_index(&mut r, 16);
            let (q, k, v) = s.qkv(200 + i, n, d);
            for map in [FeatureMap::Relu, FeatureMap::Focused(ac.focus_p)] {
                let res = linear_attention(&q, &k, &v, map, ac.eps, true)?;
                let materialized = matmul(res.attention_map.as_ref().expect("map"), &v)?;
                worst = worst.max(max_diff(&res.output, &materialized)?);
            }
        }
        Ok(within(worst, 1e-10))
    });
    suite.check("linear_single_token", || {
        let (q, k, v) = s.qkv(13, 1, 4);
        let map = FeatureMap::Focused(ac.focus_p);
        let sim: f64 = apply_feature_map(&q, map)
            .row(0)
            .iter()
            .zip(apply_feature_map(&k, map).row(0))
            .map(|(a, b)| a * b)
            .sum();
        let out = linear_attention(&q, &k, &v, map, ac.eps, false)?.output;
        let expected = v.scale(sim / (sim + ac.eps));
        Ok(within(max_diff(&out, &expected)?, 1e-14))
    });
    suite.check("focused_linear_composition", || {
        let (q, k, v) = s.qkv(14, ac.n_tokens, ac.head_dim);
        let kernel = DwcKernel::seeded(&s, 14, ac.head_dim, ac.dwc_kernel_size)?;
        let fla = focused_linear_attention(&q, &k, &v, &ac, &kernel, cfg.normalization, false)?.output;
        let conv = dwc_apply(&v, ac.grid, &kernel)?;
        let lin = match cfg.normalization {
            Normalization::Normalized => linear_attention(&q, &k, &v, ac.feature_map(), ac.eps, false)?.output,
            Normalization::Unnormalized => {
                let map = ac.feature_map();
                matmul(
                    &matmul(&apply_feature_map(&q, map), &apply_feature_map(&k, map).transpose())?,
                    &v,
                )?
            }
        };
        let bitwise = fla == lin.add(&conv)?;
        Ok((
            bitwise || cfg.normalization == Normalization::Unnormalized && max_diff(&fla, &lin.add(&conv)?)? <= 1e-9,
            format!("bitwise={bitwise}"),
        ))
    });
    suite.check("flop_model", || {
        let lin = flop_count(FlopVariant::Linear, 196, 64);
        let soft = flop_count(FlopVariant::Softmax, 196, 64);
        let mut crossover_ok = true;
        for d in 1..=128u64 {
            for n in 1..=512u64 {
                let (sf, lf) = (
                    flop_count(FlopVariant::Softmax, n, d),
                    flop_count(FlopVariant::Linear, n, d),
                );
                crossover_ok &= (n < 2 * d || lf < sf) && (2 * n > d || lf > sf);
            }
        }
        let ratio = lin as f64 / soft as f64;
        Ok((
            lin == 3_261_440 && soft == 4 * 196 * 196 * 64 + 5 * 196 * 196 && crossover_ok,
            format!("linear={lin} softmax={soft} ratio={ratio:.4}"),
        ))
    });
    suite.check("sharpening_unique_match", || {
        let summary = sharpening_trials(&s, 1000, 8, 8, 1.0, ac.focus_p, true);
        Ok((
            summary.fraction_sharper >= 0.95,
            format!("fraction_sharper={:.3}", summary.fraction_sharper),
        ))
    });
    suite.rows
}

pub fn dwc_suite(cfg: &SuiteConfig) -> Vec<CheckRow> {
    let s = Streams::new(cfg.seed);
    let ac = cfg.attention;
    let k = ac.dwc_kernel_size;
    let mut suite = Suite::new("dwc");
    suite.check("identity_kernels", || {
        let v = s.normal_matrix(0, Role::Value, 12, 3);
        let g = Grid::new(3, 4);
        let unit = DwcKernel::new(3, 1, vec![1.0; 3])?;
        let delta = DwcKernel::delta(3, 3)?;
        Ok((
            dwc_apply(&v, g, &unit)? == v && dwc_apply(&v, g, &delta)? == v,
            String::new(),
        ))
    });
    suite.check("all_ones_kernel_example", || {
        let mut v = Matrix::zeros(9, 1);
        v[(4, 0)] = 1.0;
        let out = dwc_apply(&v, Grid::new(3, 3), &DwcKernel::new(1, 3, vec![1.0; 9])?)?;
        Ok((
            out.as_slice().iter().all(|&x| x == 1.0),
            format!("{:?}", out.as_slice()),
        ))
    });
    suite.check("matrix_equivalence_and_sparsity", || {
        let v = s.normal_matrix(1, Role::Value, ac.n_tokens, ac.head_dim);
        let kernel = DwcKernel::seeded(&s, 1, ac.head_dim, k)?;
        let out = dwc_apply(&v, ac.grid, &kernel)?;
        let mut worst = 0.0f64;
        let mut sparse = true;
        for c in 0..ac.head_dim {
            let m = dwc_as_matrix(kernel.channel(c), k, ac.grid)?;
            worst = worst.max(max_diff(&matmul(&m, &column(&v, c))?, &column(&out, c))?);
            sparse &= (0..m.rows()).all(|r| m.row(r).iter().filter(|&&x| x != 0.0).count() <= k * k);
        }
        let (ok, detail) = within(worst, 1e-14);
        Ok((ok && sparse, format!("{detail} sparse={sparse}")))
    });
    suite.check("full_rank_7x7", || {
        let kernel = DwcKernel::seeded(&s, 2, 1, 3)?;
        let r = numerical_rank(&dwc_as_matrix(kernel.channel(0), 3, Grid::new(7, 7))?, DEFAULT_RANK_TOL)?;
        Ok((r == 49, format!("rank={r}")))
    });
    suite.check("linearity", || {
        let v1 = s.normal_matrix(3, Role::X, ac.n_tokens, ac.head_dim);
        let v2 = s.normal_matrix(3, Role::Y, ac.n_tokens, ac.head_dim);
        let kernel = DwcKernel::seeded(&s, 3, ac.head_dim, k)?;
        let (a, b) = (1.75, -0.5);
        let lhs = dwc_apply(&v1.scale(a).add(&v2.scale(b))?, ac.grid, &kernel)?;
        let rhs = dwc_apply(&v1, ac.grid, &kernel)?
            .scale(a)
            .add(&dwc_apply(&v2, ac.grid, &kernel)?.scale(b))?;
        Ok(within(max_diff(&lhs, &rhs)?, 1e-12))
    });
    suite.check("locality", || {
        let v = s.normal_matrix(4, Role::Value, ac.n_tokens, 2);
        let kernel = DwcKernel::seeded(&s, 4, 2, k)?;
        let base = dwc_apply(&v, ac.grid, &kernel)?;
        let mut violations = 0;
        for i in 0..20 {
            let t = rng::random_index(&mut s.rng(i, Role::Aux), ac.n_tokens);
            let mut bumped = v.clone();
            bumped[(t, 0)] += 1.0;
            bumped[(t, 1)] -= 1.0;
            let out = dwc_apply(&bumped, ac.grid, &kernel)?;
            for token in 0..ac.n_tokens {
                let changed = out.row(token) != base.row(token);
                violations += usize::from(changed && ac.grid.chebyshev(token, t) > k / 2);
            }
        }
        Ok((violations == 0, format!("violations={violations}")))
    });
    suite.rows
}

pub fn diagnostics_suite(cfg: &SuiteConfig) -> Vec<CheckRow> {
    let s = Streams::new(cfg.seed);
    let ac = cfg.attention;
    let mut suite = Suite::new("diagnostics");
    suite.check("prop1_examples", || {
        let x = Vector::new(vec![2.0, 1.0]);
        let grid = [1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0];
        let a = prop1_verify(&x, &Vector::new(vec![3.0, 1.0]), &grid)?;
        let b = prop1_verify(&x, &Vector::new(vec![1.0, 3.0]), &grid)?;
        let c = prop1_verify(
            &Vector::new(vec![1.0, 0.5, 0.2]),
            &Vector::new(vec![0.9, 0.6, 0.1]),
            &[2.0, 3.0, 4.0, 8.0, 32.0, 256.0],
        )?;
        let ok = a.witness_p.is_some() && a.converged() && b.witness_p.is_some() && b.converged() && c.monotone_from(0);
        Ok((
            ok,
            format!(
                "gap_shared={:.3e} gap_distinct={:.3e}",
                a.final_gap().unwrap_or(f64::NAN),
                b.final_gap().unwrap_or(f64::NAN)
            ),
        ))
    });
    for (name, shared) in [("prop1_shared_argmax", true), ("prop1_distinct_argmax", false)] {
        suite.check(name, || {
            let (mut witnesses, mut converged, mut worst) = (0, 0, 0.0f64);
            for i in 0..200 {
                let (x, y) = prop1_pair(&s, i, shared);
                let r = prop1_verify(&x, &y, &DEFAULT_P_GRID)?;
                witnesses += usize::from(r.witness_p.is_some());
                converged += usize::from(r.converged());
                worst = worst.max(r.final_gap().unwrap_or(f64::INFINITY));
            }
            Ok((
                witnesses == 200 && converged == 200,
                format!("witnesses={witnesses}/200 converged={converged}/200 worst_gap={worst:.3e}"),
            ))
        });
    }
    suite.check("rank_bound", || {
        let (q, k, _) = s.qkv(0, ac.n_tokens, ac.head_dim);
        let mut parts = Vec::new();
        let mut ok = true;
        for variant in [RankVariant::LinearRelu, RankVariant::LinearFocused] {
            let r = attention_rank_scan(&q, &k, variant, &ac, None, KernelMode::PerChannel)?;
            ok &= r.within_bound();
            parts.push(format!("{}={}/{}", variant.name(), r.max_rank(), r.bound));
        }
        Ok((ok, parts.join(" ")))
    });
    suite.check("softmax_full_rank", || {
        let (q, k, _) = s.qkv(0, ac.n_tokens, ac.head_dim);
        let r = attention_rank_scan(&q, &k, RankVariant::Softmax, &ac, None, KernelMode::PerChannel)?;
        Ok((
            r.max_rank() == ac.n_tokens,
            format!("rank={}/{}", r.max_rank(), ac.n_tokens),
        ))
    });
    suite.check("rank_restoration", || {
        let (q, k, _) = s.qkv(0, ac.n_tokens, ac.head_dim);
        let kernel = DwcKernel::center_dominant(&s, 0, ac.head_dim, ac.dwc_kernel_size)?;
        let r = attention_rank_scan(
            &q,
            &k,
            RankVariant::FocusedPlusDwc,
            &ac,
            Some(&kernel),
            KernelMode::PerChannel,
        )?;
        let full = r.per_channel_ranks.iter().filter(|&&x| x == ac.n_tokens).count();
        Ok((
            full == r.per_channel_ranks.len(),
            format!("full_rank_channels={full}/{}", r.per_channel_ranks.len()),
        ))
    });
    suite.check("m_eq_consistency", || {
        let (q, k, v) = s.qkv(1, ac.n_tokens, ac.head_dim);
        let kernel = DwcKernel::seeded(&s, 1, ac.head_dim, ac.dwc_kernel_size)?;
        let out = focused_linear_attention(&q, &k, &v, &ac, &kernel, Normalization::Normalized, false)?.output;
        let map = ac.feature_map();
        let (pq, pk) = (apply_feature_map(&q, map), apply_feature_map(&k, map));
        let mut worst = 0.0f64;
        for c in 0..ac.head_dim {
            let m_eq = equivalent_attention_matrix(&pq, &pk, kernel.channel(c), ac.dwc_kernel_size, ac.grid, ac.eps)?;
            worst = worst.max(max_diff(&matmul(&m_eq, &column(&v, c))?, &column(&out, c))?);
        }
        Ok(within(worst, 1e-10))
    });
    suite.check("entropy_examples", || {
        let uniform = attention_entropy(&Matrix::from_fn(4, 4, |_, _| 0.25))?;
        let onehot = attention_entropy(&Matrix::identity(4))?;
        let sharp = row_entropy(&[0.75, 0.11, 0.09, 0.05]);
        let smooth = row_entropy(&[0.37, 0.19, 0.26, 0.18]);
        let bad = attention_entropy(&Matrix::from_rows(&[[0.5, 0.6]])?).is_err();
        let ok =
            (uniform.mean_entropy - 4f64.ln()).abs() < 1e-15 && onehot.mean_entropy == 0.0 && sharp < smooth && bad;
        Ok((ok, format!("sharp={sharp:.4} smooth={smooth:.4}")))
    });
    suite.check("entropy_ordering", || {
        let summary = sharpening_trials(&s, 1000, 8, 8, 1.0, ac.focus_p, false);
        Ok((
            summary.mean_entropy_high < summary.mean_entropy_low,
            format!(
                "mean_p1={:.4} mean_p{}={:.4}",
                summary.mean_entropy_low, ac.focus_p, summary.mean_entropy_high
            ),
        ))
    });
    suite.rows
}

pub fn gradients_suite(cfg: &SuiteConfig) -> Vec<CheckRow> {
    let s = Streams::new(cfg.seed);
    let mut suite = Suite::new("gradients");
    for op in GradOp::ALL {
        suite.check(&format!("fd_{}", op.name()), || {
            let (mut failed, mut worst) = (Vec::new(), 0.0f64);
            for i in 0..GRAD_INSTANCES {
                let seed = cfg.seed.wrapping_add(i);
                let r = grad_check(op, seed, GRAD_STEP, GRAD_THRESHOLD)?;
                worst = worst.max(r.max_rel_err);
                if !r.passed {
                    failed.push(seed.to_string());
                }
            }
            let mut detail = format!("instances={GRAD_INSTANCES} max_rel_err={worst:.3e}");
            if !failed.is_empty() {
                detail.push_str(&format!(" failed_seeds={}", failed.join(";")));
            }
            Ok((failed.is_empty(), detail))
        });
    }
    suite.check("corrupted_gradient_detected", || {
        let mut missed = Vec::new();
        for op in GradOp::ALL {
            if grad_check_scaled(op, cfg.seed, GRAD_STEP, GRAD_THRESHOLD, 1.01)?.passed {
                missed.push(op.name());
            }
        }
        Ok((missed.is_empty(), format!("missed={}", missed.join(";"))))
    });
    suite.check("relu_dead_zone", || {
        let x = Vector::new(vec![-0.5, 1.0, -2.0, 0.3]);
        let g = Vector::new(vec![1.0, 1.0, 1.0, 1.0]);
        let dx = focused_map_vjp(&x, 3.0, &g);
        Ok((dx[0] == 0.0 && dx[2] == 0.0, format!("{:?}", dx.as_slice())))
    });
    suite.check("dwc_transpose_identity", || {
        let ac = cfg.attention;
        let v = s.normal_matrix(0, Role::Value, ac.n_tokens, ac.head_dim);
        let g = s.normal_matrix(0, Role::Upstream, ac.n_tokens, ac.head_dim);
        let kernel = DwcKernel::seeded(&s, 0, ac.head_dim, ac.dwc_kernel_size)?;
        let (dv, _) = dwc_vjp(&v, ac.grid, &kernel, &g)?;
        let mut worst = 0.0f64;
        for c in 0..ac.head_dim {
            let mt = dwc_as_matrix(kernel.channel(c), ac.dwc_kernel_size, ac.grid)?.transpose();
            worst = worst.max(max_diff(&matmul(&mt, &column(&g, c))?, &column(&dv, c))?);
        }
        Ok(within(worst, 1e-12))
    });
    suite.rows
}

/// Runs every suite. Modules run on separate threads unless `serial`; rows
/// come back in module order either way.
pub fn run_all(cfg: &SuiteConfig, serial: bool) -> Vec<CheckRow> {
    let suites: [fn(&SuiteConfig) -> Vec<CheckRow>; 5] = [
        linalg_suite,
        attention_suite,
        dwc_suite,
        diagnostics_suite,
        gradients_suite,
    ];
    if serial {
        return suites.iter().flat_map(|f| f(cfg)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = suites.iter().map(|f| scope.spawn(move || f(cfg))).collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("suite thread panicked"))
            .collect()
    })
}
