//! Wall-clock and FLOP-model comparison of the attention variants.
//!
//! Inputs for every configuration may be generated on worker threads, but
//! every timed run happens on the calling thread with nothing else from this
//! module running, so measurements never compete with each other.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use fla_core::attention::{flop_count, FlopVariant, DEFAULT_EPS, DEFAULT_FOCUS_P, DEFAULT_KERNEL_SIZE};
use fla_core::kernels::{self, FeatureMap};
use fla_core::rng::Streams;
use fla_core::{DwcKernel, Error, Grid, Matrix};
use num_traits::Float;

use crate::io;

pub const MIN_REPS: usize = 5;
pub const MIN_WARMUP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchVariant {
    Softmax,
    /// Reordered linear attention with the ReLU feature map.
    Linear,
    /// Focused map, reordered linear attention and the depthwise convolution.
    Focused,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 3] = [BenchVariant::Softmax, BenchVariant::Linear, BenchVariant::Focused];

    pub fn name(&self) -> &'static str {
        match self {
            BenchVariant::Softmax => "softmax",
            BenchVariant::Linear => "linear",
            BenchVariant::Focused => "focused",
        }
    }

    /// The DWC and the focused map add `O(Nd)` work; the model counts the
    /// attention dataflow only.
    pub fn flops(&self, n: usize, d: usize) -> u64 {
        let variant = match self {
            BenchVariant::Softmax => FlopVariant::Softmax,
            BenchVariant::Linear | BenchVariant::Focused => FlopVariant::Linear,
        };
        flop_count(variant, n as u64, d as u64)
    }
}

impl fmt::Display for BenchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchVariant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| anyhow::anyhow!("unknown bench variant {s:?} (softmax, linear, focused)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

impl FromStr for Precision {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            _ => bail!("unknown precision {s:?} (f64, f32)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: BenchVariant,
    pub n: usize,
    pub d: usize,
    pub precision: Precision,
    pub flops: u64,
    pub wall_ns_median: u128,
    pub wall_ns_p10: u128,
    pub wall_ns_p90: u128,
    pub reps: usize,
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub variants: Vec<BenchVariant>,
    pub n_grid: Vec<usize>,
    pub d_grid: Vec<usize>,
    pub precisions: Vec<Precision>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Generate inputs on the calling thread too.
    pub serial: bool,
}

/// `n` values up to `limit` that admit a square-ish grid.
pub fn valid_sizes(limit: usize) -> Vec<usize> {
    (1..=limit).filter(|&n| Grid::square_ish(n).is_some()).collect()
}

fn grid_for(n: usize) -> Result<Grid> {
    Grid::square_ish(n).ok_or_else(|| {
        let near: Vec<String> = valid_sizes(n + 16)
            .into_iter()
            .filter(|&m| m + 16 >= n)
            .map(|m| m.to_string())
            .collect();
        Error::Config(format!(
            "n={n} has no square-ish grid (floor(sqrt(n)) must divide n); nearby valid n: {}",
            near.join(", ")
        ))
        .into()
    })
}

/// Seeded inputs of one configuration, in the precision being timed.
struct Instance<T> {
    n: usize,
    d: usize,
    grid: Grid,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    kernel: Vec<T>,
}

fn cast<T: Float>(m: Matrix) -> Vec<T> {
    m.into_vec()
        .into_iter()
        .map(|x| T::from(x).expect("finite input"))
        .collect()
}

fn instance<T: Float>(seed: u64, n: usize, d: usize) -> Result<Instance<T>> {
    let grid = grid_for(n)?;
    let streams = Streams::new(seed);
    let (q, k, v) = streams.qkv(n as u64, n, d);
    let kernel = DwcKernel::seeded(&streams, n as u64, d, DEFAULT_KERNEL_SIZE)?;
    Ok(Instance {
        n,
        d,
        grid,
        q: cast(q),
        k: cast(k),
        v: cast(v),
        kernel: kernel
            .weights()
            .iter()
            .map(|&x| T::from(x).expect("finite weight"))
            .collect(),
    })
}

/// Working buffers, allocated once per configuration.
struct Scratch<T> {
    phi_q: Vec<T>,
    phi_k: Vec<T>,
    out: Vec<T>,
}

impl<T: Float> Scratch<T> {
    fn new(n: usize, d: usize) -> Self {
        Self {
            phi_q: vec![T::zero(); n * d],
            phi_k: vec![T::zero(); n * d],
            out: vec![T::zero(); n * d],
        }
    }
}

fn run_once<T: Float>(variant: BenchVariant, inst: &Instance<T>, s: &mut Scratch<T>) {
    let (n, d) = (inst.n, inst.d);
    let eps = T::from(DEFAULT_EPS).expect("eps representable");
    match variant {
        BenchVariant::Softmax => {
            kernels::softmax_attention(&inst.q, &inst.k, &inst.v, n, d, d, &mut s.out, None);
        }
        BenchVariant::Linear | BenchVariant::Focused => {
            let map = if variant == BenchVariant::Linear {
                FeatureMap::Relu
            } else {
                FeatureMap::Focused(DEFAULT_FOCUS_P)
            };
            kernels::apply_feature_map(&inst.q, d, map, &mut s.phi_q);
            kernels::apply_feature_map(&inst.k, d, map, &mut s.phi_k);
            kernels::linear_attention_reordered(&s.phi_q, &s.phi_k, &inst.v, n, d, d, eps, true, &mut s.out);
            if variant == BenchVariant::Focused {
                let g = inst.grid;
                kernels::dwc_accumulate(
                    &inst.v,
                    d,
                    g.height,
                    g.width,
                    &inst.kernel,
                    DEFAULT_KERNEL_SIZE,
                    &mut s.out,
                );
            }
        }
    }
}

/// Output of one variant on the seeded instance; used for the determinism
/// and `n = 1` sanity checks.
pub fn bench_output(variant: BenchVariant, seed: u64, n: usize, d: usize) -> Result<Vec<f64>> {
    let inst = instance::<f64>(seed, n, d)?;
    let mut s = Scratch::new(n, d);
    run_once(variant, &inst, &mut s);
    Ok(s.out)
}

/// Nearest-rank quantile of sorted samples.
fn quantile(sorted: &[u128], q: f64) -> u128 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn time_config<T: Float>(variant: BenchVariant, inst: &Instance<T>, reps: usize, warmup: usize) -> Vec<u128> {
    let mut s = Scratch::new(inst.n, inst.d);
    for _ in 0..warmup {
        run_once(variant, inst, &mut s);
        std::hint::black_box(&s.out);
    }
    let mut samples: Vec<u128> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            run_once(variant, inst, &mut s);
            std::hint::black_box(&s.out);
            start.elapsed().as_nanos()
        })
        .collect();
    samples.sort_unstable();
    samples
}

fn record(variant: BenchVariant, n: usize, d: usize, precision: Precision, samples: &[u128]) -> BenchRecord {
    BenchRecord {
        variant,
        n,
        d,
        precision,
        flops: variant.flops(n, d),
        wall_ns_median: quantile(samples, 0.5),
        wall_ns_p10: quantile(samples, 0.1),
        wall_ns_p90: quantile(samples, 0.9),
        reps: samples.len(),
    }
}

enum Prepared {
    F64(Instance<f64>),
    F32(Instance<f32>),
}

fn prepare(seed: u64, n: usize, d: usize, precision: Precision) -> Result<Prepared> {
    Ok(match precision {
        Precision::F64 => Prepared::F64(instance(seed, n, d)?),
        Precision::F32 => Prepared::F32(instance(seed, n, d)?),
    })
}

/// Softmax and linear attention agree on a single token (both return `v` up
/// to the eps share of the linear denominator).
fn single_token_sanity(seed: u64, d: usize) -> Result<()> {
    let soft = bench_output(BenchVariant::Softmax, seed, 1, d)?;
    let lin = bench_output(BenchVariant::Linear, seed, 1, d)?;
    let scale = soft.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let diff = soft.iter().zip(&lin).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure!(
        diff <= 1e-4 * scale,
        "n=1 sanity check failed: softmax and linear outputs differ by {diff:e}"
    );
    Ok(())
}

pub fn run_bench(plan: &BenchPlan) -> Result<Vec<BenchRecord>> {
    ensure!(
        plan.reps >= MIN_REPS,
        "reps must be at least {MIN_REPS}, got {}",
        plan.reps
    );
    ensure!(
        plan.warmup >= MIN_WARMUP,
        "warmup must be at least {MIN_WARMUP}, got {}",
        plan.warmup
    );
    ensure!(
        !plan.variants.is_empty() && !plan.n_grid.is_empty() && !plan.d_grid.is_empty() && !plan.precisions.is_empty(),
        "bench needs at least one variant, n, d and precision"
    );
    for &n in &plan.n_grid {
        grid_for(n)?;
    }
    ensure!(plan.d_grid.iter().all(|&d| d > 0), "d must be positive");

    let mut configs: Vec<(usize, usize, Precision)> = Vec::new();
    for &n in &plan.n_grid {
        for &d in &plan.d_grid {
            for &p in &plan.precisions {
                configs.push((n, d, p));
            }
        }
    }
    configs.sort();
    configs.dedup();

    if plan.n_grid.contains(&1) {
        for &d in &plan.d_grid {
            single_token_sanity(plan.seed, d)?;
        }
    }

    let prepared: Vec<Prepared> = if plan.serial {
        configs
            .iter()
            .map(|&(n, d, p)| prepare(plan.seed, n, d, p))
            .collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = configs
                .iter()
                .map(|&(n, d, p)| scope.spawn(move || prepare(plan.seed, n, d, p)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("input generation panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };

    let mut records = Vec::new();
    for (&(n, d, precision), inst) in configs.iter().zip(&prepared) {
        for &variant in &plan.variants {
            let samples = match inst {
                Prepared::F64(i) => time_config(variant, i, plan.reps, plan.warmup),
                Prepared::F32(i) => time_config(variant, i, plan.reps, plan.warmup),
            };
            records.push(record(variant, n, d, precision, &samples));
        }
    }
    records.sort_by_key(|r| (r.variant, r.n, r.d, r.precision));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub variant: BenchVariant,
    pub d: usize,
    pub precision: Precision,
    pub slope: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit of `ln(median time)` against `ln N` for every
/// `(variant, d, precision)` group. `n = 1` records are left out.
pub fn fit_scaling(records: &[BenchRecord]) -> Result<Vec<ScalingFit>> {
    let mut keys: Vec<(BenchVariant, usize, Precision)> =
        records.iter().map(|r| (r.variant, r.d, r.precision)).collect();
    keys.sort();
    keys.dedup();
    let mut fits = Vec::with_capacity(keys.len());
    for (variant, d, precision) in keys {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| (r.variant, r.d, r.precision) == (variant, d, precision) && r.n > 1)
            .map(|r| ((r.n as f64).ln(), (r.wall_ns_median.max(1) as f64).ln()))
            .collect();
        let mut distinct: Vec<u64> = pts.iter().map(|p| p.0.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(Error::InsufficientPoints(format!(
                "{variant} d={d} {}: {} distinct n > 1, need 3",
                precision.name(),
                distinct.len()
            ))
            .into());
        }
        let (slope, r_squared) = ols(&pts);
        fits.push(ScalingFit {
            variant,
            d,
            precision,
            slope,
            r_squared,
            points: pts.len(),
        });
    }
    Ok(fits)
}

/// Slope and coefficient of determination of `y = a + b x`.
fn ols(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { slope * sxy / syy };
    (slope, r2)
}

pub const CSV_HEADER: [&str; 9] = [
    "variant",
    "n",
    "d",
    "precision",
    "flops",
    "wall_ns_median",
    "wall_ns_p10",
    "wall_ns_p90",
    "reps",
];

fn fields(r: &BenchRecord) -> Vec<String> {
    vec![
        r.variant.name().to_string(),
        r.n.to_string(),
        r.d.to_string(),
        r.precision.name().to_string(),
        r.flops.to_string(),
        r.wall_ns_median.to_string(),
        r.wall_ns_p10.to_string(),
        r.wall_ns_p90.to_string(),
        r.reps.to_string(),
    ]
}

pub fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    io::write_report(path, &CSV_HEADER, records.iter().map(fields))
}

/// Whitespace-separated columns, one gnuplot data block (separated by two
/// blank lines) per variant and precision, so `index` selects a series.
pub fn write_gnuplot(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut text = format!("# {}\n", CSV_HEADER.join(" "));
    let mut last = None;
    for r in records {
        let key = (r.variant, r.precision);
        if last.is_some_and(|k| k != key) {
            text.push_str("\n\n");
        }
        last = Some(key);
        text.push_str(&fields(r).join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
}

pub fn write_fits(path: &Path, fits: &[ScalingFit]) -> Result<()> {
    io::write_report(
        path,
        &["variant", "d", "precision", "slope", "r_squared", "points"],
        fits.iter().map(|f| {
            vec![
                f.variant.name().to_string(),
                f.d.to_string(),
                f.precision.name().to_string(),
                f.slope.to_string(),
                f.r_squared.to_string(),
                f.points.to_string(),
            ]
        }),
    )
}
