//! Argument parsing and the subcommand handlers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fla_core::attention::{apply_feature_map, softmax_attention};
use fla_core::diagnostics::{
    attention_entropy, attention_rank_scan, equivalent_attention_matrix, normalized_linear_map, prop1_pair,
    prop1_verify, KernelMode, RankReport, RankVariant, DEFAULT_P_GRID,
};
use fla_core::gradients::{grad_check, GradOp};
use fla_core::rng::Streams;
use fla_core::svd::{numerical_rank, DEFAULT_RANK_TOL};
use fla_core::{AttentionConfig, DwcKernel, FeatureMap, Grid, Matrix, Normalization, Vector};

use crate::bench::{self, BenchPlan, BenchVariant, Precision};
use crate::io;
use crate::suites::{self, SuiteConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fla",
    version,
    about = "Verify, export and benchmark focused linear attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every invariant suite and write one CSV row per check.
    Verify(VerifyArgs),
    /// Scan ⟨φ_p(x), φ_p(y)⟩ over the exponent grid for seeded or given pairs.
    Prop1(Prop1Args),
    /// Numerical rank of attention maps (and of M_eq per channel).
    RankScan(RankScanArgs),
    /// Entropy and peak weight of the attention maps of one instance.
    Entropy(EntropyArgs),
    /// Compare hand-written gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time the attention variants over a grid of sizes.
    Bench(BenchArgs),
    /// Write attention maps as PGM images plus their entropy report.
    ExportAttn(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Seed for every generated matrix.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AttentionArgs {
    /// Number of tokens N.
    #[arg(long, default_value_t = 196)]
    pub n: usize,
    /// Head dimension d.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Token grid HxW with H·W = N [default: the square-ish grid of N, 14x14 for 196].
    #[arg(long)]
    pub grid: Option<String>,
    /// Focused factor p (at least 1).
    #[arg(long, default_value_t = 3.0)]
    pub p: f64,
    /// Odd DWC kernel size.
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    /// Denominator guard, in (0, 1e-3].
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Divide the attention term by its row denominator (the default).
    #[arg(long, conflicts_with = "literal_eq12")]
    pub normalized: bool,
    /// Add the convolution to the unnormalized φ(Q)φ(K)ᵀV instead.
    #[arg(long)]
    pub literal_eq12: bool,
}

impl AttentionArgs {
    pub fn config(&self) -> Result<AttentionConfig> {
        let grid = match &self.grid {
            Some(g) => io::parse_grid(g)?,
            None => Grid::square_ish(self.n)
                .with_context(|| format!("no square-ish grid for n={}; pass --grid HxW", self.n))?,
        };
        let cfg = AttentionConfig {
            n_tokens: self.n,
            head_dim: self.d,
            grid,
            focus_p: self.p,
            dwc_kernel_size: self.kernel_size,
            eps: self.eps,
        };
        ensure!(self.d > 0, "invalid configuration: d must be positive");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn normalization(&self) -> Normalization {
        if self.literal_eq12 {
            Normalization::Unnormalized
        } else {
            Normalization::Normalized
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    /// Run the module suites one after another on a single thread.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Prop1Args {
    #[command(flatten)]
    pub output: OutputArgs,
    /// Seeded pairs per case (shared and distinct argmax).
    #[arg(long, default_value_t = 200)]
    pub pairs: u64,
    /// Vector x as a one-row matrix CSV (needs --y); replaces the seeded pairs.
    #[arg(long, requires = "y")]
    pub x: Option<PathBuf>,
    /// Vector y as a one-row matrix CSV (needs --x).
    #[arg(long, requires = "x")]
    pub y: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RankVariantArg {
    All,
    Softmax,
    LinearRelu,
    LinearFocused,
    FocusedPlusDwc,
}

impl RankVariantArg {
    fn variants(self) -> Vec<RankVariant> {
        match self {
            RankVariantArg::All => RankVariant::ALL.to_vec(),
            RankVariantArg::Softmax => vec![RankVariant::Softmax],
            RankVariantArg::LinearRelu => vec![RankVariant::LinearRelu],
            RankVariantArg::LinearFocused => vec![RankVariant::LinearFocused],
            RankVariantArg::FocusedPlusDwc => vec![RankVariant::FocusedPlusDwc],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelModeArg {
    PerChannel,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelInit {
    /// Uniform [-1, 1) with the center tap shifted by +1.
    Seeded,
    /// Center tap larger than the sum of the others' magnitudes.
    CenterDominant,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Query matrix CSV (replaces the seeded Q).
    #[arg(long)]
    pub q: Option<PathBuf>,
    /// Key matrix CSV (replaces the seeded K).
    #[arg(long)]
    pub k: Option<PathBuf>,
    /// Value matrix CSV (replaces the seeded V).
    #[arg(long)]
    pub v: Option<PathBuf>,
    /// DWC kernel CSV (replaces the generated kernel).
    #[arg(long)]
    pub kernel: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RankScanArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Attention map(s) to measure.
    #[arg(long, value_enum, default_value_t = RankVariantArg::All)]
    pub variant: RankVariantArg,
    /// Seeded instances to scan (ignored when --q/--k are given).
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
    /// One M_DWC per channel, or channel 0's kernel for all.
    #[arg(long, value_enum, default_value_t = KernelModeArg::PerChannel)]
    pub kernel_mode: KernelModeArg,
    /// Generated kernel family when --kernel is not given.
    #[arg(long, value_enum, default_value_t = KernelInit::CenterDominant)]
    pub kernel_init: KernelInit,
}

#[derive(Debug, Clone, Args)]
pub struct EntropyArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    #[command(flatten)]
    pub inputs: InputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradOpArg {
    All,
    FocusedMap,
    SoftmaxAttention,
    LinearAttention,
    FocusedLinearAttention,
    Dwc,
}

impl GradOpArg {
    fn ops(self) -> Vec<GradOp> {
        match self {
            GradOpArg::All => GradOp::ALL.to_vec(),
            GradOpArg::FocusedMap => vec![GradOp::FocusedMap],
            GradOpArg::SoftmaxAttention => vec![GradOp::SoftmaxAttention],
            GradOpArg::LinearAttention => vec![GradOp::LinearAttention],
            GradOpArg::FocusedLinearAttention => vec![GradOp::FocusedLinearAttention],
            GradOpArg::Dwc => vec![GradOp::Dwc],
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    /// Operation(s) to check.
    #[arg(long, value_enum, default_value_t = GradOpArg::All)]
    pub op: GradOpArg,
    /// Instances per operation; instance i uses seed + i.
    #[arg(long, default_value_t = suites::GRAD_INSTANCES)]
    pub instances: u64,
    /// Central-difference step, in [1e-8, 1e-3].
    #[arg(long, default_value_t = suites::GRAD_STEP)]
    pub h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = suites::GRAD_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    /// Variants to time (comma separated): softmax, linear, focused.
    #[arg(long, value_delimiter = ',', default_value = "softmax,linear,focused")]
    pub variant: Vec<BenchVariant>,
    /// Token counts (comma separated); each needs a square-ish grid.
    #[arg(long, value_delimiter = ',', default_value = "64,196,576,1024")]
    pub n_grid: Vec<usize>,
    /// Head dimensions (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub d_grid: Vec<usize>,
    /// Precisions (comma separated): f64, f32.
    #[arg(long, value_delimiter = ',', default_value = "f64")]
    pub precision: Vec<Precision>,
    /// Timed repetitions per configuration (at least 5).
    #[arg(long, default_value_t = bench::MIN_REPS)]
    pub reps: usize,
    /// Discarded warm-up runs per configuration (at least 2).
    #[arg(long, default_value_t = bench::MIN_WARMUP)]
    pub warmup: usize,
    /// Generate inputs on the measuring thread as well.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Channel whose M_eq is exported for the focused+DWC map.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
}

/// Exit status: 0 when everything passed, 1 when a check failed, 2 on any
/// error.
pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(&a),
        Command::Prop1(a) => cmd_prop1(&a),
        Command::RankScan(a) => cmd_rank_scan(&a),
        Command::Entropy(a) => cmd_entropy(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::ExportAttn(a) => cmd_export(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let cfg = SuiteConfig {
        seed: a.output.seed,
        attention: a.attention.config()?,
        normalization: a.attention.normalization(),
    };
    create_out(&a.output.out)?;
    let rows = suites::run_all(&cfg, a.serial);
    let path = a.output.out.join("verify.csv");
    io::write_report(&path, &suites::CSV_HEADER, rows.iter().map(|r| r.fields()))?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!("FAILED {}::{} {}", r.module, r.check, r.detail);
    }
    println!(
        "{} checks, {} failed; report written to {}",
        rows.len(),
        failed.len(),
        path.display()
    );
    Ok(failed.is_empty())
}

fn one_row_vector(path: &Path) -> Result<Vector> {
    let m = io::read_matrix(path)?;
    ensure!(
        m.rows() == 1,
        "{}: expected a single row, found {}",
        path.display(),
        m.rows()
    );
    Ok(Vector::new(m.into_vec()))
}

pub fn cmd_prop1(a: &Prop1Args) -> Result<bool> {
    create_out(&a.output.out)?;
    let mut pairs: Vec<(String, u64, Vector, Vector)> = Vec::new();
    if let (Some(x), Some(y)) = (&a.x, &a.y) {
        pairs.push(("given".into(), 0, one_row_vector(x)?, one_row_vector(y)?));
    } else {
        let streams = Streams::new(a.output.seed);
        for (case, shared) in [("shared", true), ("distinct", false)] {
            for i in 0..a.pairs {
                let (x, y) = prop1_pair(&streams, i, shared);
                pairs.push((case.into(), i, x, y));
            }
        }
    }
    let mut rows = Vec::new();
    let mut all_ok = true;
    for (case, instance, x, y) in &pairs {
        let r = prop1_verify(x, y, &DEFAULT_P_GRID)?;
        let ok = r.witness_p.is_some() && r.converged();
        all_ok &= ok;
        for (p, ip) in r.p_grid.iter().zip(&r.inner_products) {
            rows.push(vec![
                case.clone(),
                instance.to_string(),
                p.to_string(),
                ip.to_string(),
                r.baseline.to_string(),
                r.limit_value.to_string(),
                r.witness_p.map(|w| w.to_string()).unwrap_or_default(),
                ok.to_string(),
            ]);
        }
    }
    let path = a.output.out.join("prop1.csv");
    io::write_report(
        &path,
        &[
            "case",
            "instance",
            "p",
            "inner_product",
            "baseline",
            "limit_value",
            "witness_p",
            "passed",
        ],
        rows,
    )?;
    println!(
        "{} pairs; all passed: {all_ok}; report written to {}",
        pairs.len(),
        path.display()
    );
    Ok(all_ok)
}

pub const DIAGNOSTICS_HEADER: [&str; 8] = [
    "variant",
    "n",
    "d",
    "channel",
    "rank",
    "bound",
    "mean_entropy",
    "max_weight_mean",
];

/// Q, K, V and kernel for instance `i`: from files when given, seeded
/// otherwise.
fn load_instance(
    inputs: &InputArgs,
    cfg: &AttentionConfig,
    streams: &Streams,
    i: u64,
    init: KernelInit,
) -> Result<(Matrix, Matrix, Matrix, DwcKernel)> {
    let (sq, sk, sv) = streams.qkv(i, cfg.n_tokens, cfg.head_dim);
    let read = |p: &Option<PathBuf>, seeded: Matrix| -> Result<Matrix> {
        let m = match p {
            Some(path) => io::read_matrix(path)?,
            None => seeded,
        };
        ensure!(
            m.shape() == (cfg.n_tokens, cfg.head_dim),
            "matrix is {}x{}, configuration needs {}x{}",
            m.rows(),
            m.cols(),
            cfg.n_tokens,
            cfg.head_dim
        );
        Ok(m)
    };
    let kernel = match &inputs.kernel {
        Some(path) => io::read_kernel(path)?,
        None => match init {
            KernelInit::Seeded => DwcKernel::seeded(streams, i, cfg.head_dim, cfg.dwc_kernel_size)?,
            KernelInit::CenterDominant => DwcKernel::center_dominant(streams, i, cfg.head_dim, cfg.dwc_kernel_size)?,
        },
    };
    ensure!(
        kernel.channels() == cfg.head_dim && kernel.size() == cfg.dwc_kernel_size,
        "kernel has {} channels of size {}, configuration needs {} of size {}",
        kernel.channels(),
        kernel.size(),
        cfg.head_dim,
        cfg.dwc_kernel_size
    );
    Ok((read(&inputs.q, sq)?, read(&inputs.k, sk)?, read(&inputs.v, sv)?, kernel))
}

fn entropy_fields(m: &Matrix) -> (String, String) {
    match attention_entropy(m) {
        Ok(r) => (r.mean_entropy.to_string(), r.max_weight_mean.to_string()),
        Err(_) => (String::new(), String::new()),
    }
}

fn rank_rows(report: &RankReport, entropy: Option<(String, String)>) -> Vec<Vec<String>> {
    let (me, mw) = entropy.unwrap_or_default();
    let per_channel = report.variant == RankVariant::FocusedPlusDwc && report.per_channel_ranks.len() > 1;
    let mut rows: Vec<Vec<String>> = report
        .per_channel_ranks
        .iter()
        .enumerate()
        .map(|(c, r)| {
            vec![
                report.variant.name().to_string(),
                report.n.to_string(),
                report.d.to_string(),
                if per_channel { c.to_string() } else { "all".into() },
                r.to_string(),
                report.bound.to_string(),
                me.clone(),
                mw.clone(),
            ]
        })
        .collect();
    if let Some(raw) = report.raw_rank {
        rows.push(vec![
            report.variant.name().to_string(),
            report.n.to_string(),
            report.d.to_string(),
            "raw".into(),
            raw.to_string(),
            report.bound.to_string(),
            String::new(),
            String::new(),
        ]);
    }
    rows
}

/// The row-stochastic map a variant applies to V, when it has one.
fn stochastic_map(variant: RankVariant, q: &Matrix, k: &Matrix, cfg: &AttentionConfig) -> Result<Option<Matrix>> {
    let linear =
        |map: FeatureMap| normalized_linear_map(&apply_feature_map(q, map), &apply_feature_map(k, map), cfg.eps);
    Ok(match variant {
        RankVariant::Softmax => softmax_attention(q, k, &Matrix::zeros(q.rows(), 1), true)?.attention_map,
        RankVariant::LinearRelu => Some(linear(FeatureMap::Relu)?),
        RankVariant::LinearFocused => Some(linear(cfg.feature_map())?),
        RankVariant::FocusedPlusDwc => None,
    })
}

pub fn cmd_rank_scan(a: &RankScanArgs) -> Result<bool> {
    let cfg = a.attention.config()?;
    create_out(&a.output.out)?;
    let streams = Streams::new(a.output.seed);
    let from_files = a.inputs.q.is_some() || a.inputs.k.is_some();
    let instances = if from_files { 1 } else { a.instances.max(1) };
    let mode = match a.kernel_mode {
        KernelModeArg::PerChannel => KernelMode::PerChannel,
        KernelModeArg::Shared => KernelMode::Shared,
    };
    let mut rows = Vec::new();
    let mut all_within = true;
    for i in 0..instances {
        let (q, k, _, kernel) = load_instance(&a.inputs, &cfg, &streams, i, a.kernel_init)?;
        for variant in a.variant.variants() {
            let kern = (variant == RankVariant::FocusedPlusDwc).then_some(&kernel);
            let report = attention_rank_scan(&q, &k, variant, &cfg, kern, mode)?;
            all_within &= report.within_bound();
            let entropy = stochastic_map(variant, &q, &k, &cfg)?.map(|m| entropy_fields(&m));
            println!(
                "instance {i} {}: max rank {} (bound {})",
                variant.name(),
                report.max_rank(),
                report.bound
            );
            rows.extend(rank_rows(&report, entropy));
        }
    }
    let path = a.output.out.join("rank_scan.csv");
    io::write_report(&path, &DIAGNOSTICS_HEADER, rows)?;
    println!("report written to {}", path.display());
    Ok(all_within)
}

/// The attention maps of one instance, in export order. The focused+DWC
/// entry is M_eq of `channel`.
fn attention_maps(
    q: &Matrix,
    k: &Matrix,
    kernel: &DwcKernel,
    cfg: &AttentionConfig,
    channel: usize,
) -> Result<Vec<(String, Matrix)>> {
    ensure!(
        channel < cfg.head_dim,
        "channel {channel} out of range for d={}",
        cfg.head_dim
    );
    let lin = |map: FeatureMap| normalized_linear_map(&apply_feature_map(q, map), &apply_feature_map(k, map), cfg.eps);
    let focused = cfg.feature_map();
    let (pq, pk) = (apply_feature_map(q, focused), apply_feature_map(k, focused));
    Ok(vec![
        (
            "softmax".into(),
            softmax_attention(q, k, &Matrix::zeros(q.rows(), 1), true)?
                .attention_map
                .expect("map requested"),
        ),
        ("linear_relu".into(), lin(FeatureMap::Relu)?),
        ("linear_focused_p1".into(), lin(FeatureMap::Focused(1.0))?),
        (format!("linear_focused_p{}", cfg.focus_p), lin(focused)?),
        (
            "focused_dwc".into(),
            equivalent_attention_matrix(
                &pq,
                &pk,
                kernel.channel(channel),
                cfg.dwc_kernel_size,
                cfg.grid,
                cfg.eps,
            )?,
        ),
    ])
}

fn map_report_rows(maps: &[(String, Matrix)], cfg: &AttentionConfig, channel: usize) -> Result<Vec<Vec<String>>> {
    maps.iter()
        .map(|(name, m)| {
            let rank = numerical_rank(m, DEFAULT_RANK_TOL)?;
            let is_meq = name == "focused_dwc";
            let bound = if name.starts_with("linear") {
                cfg.n_tokens.min(cfg.head_dim)
            } else {
                cfg.n_tokens
            };
            let (me, mw) = if is_meq { Default::default() } else { entropy_fields(m) };
            Ok(vec![
                name.clone(),
                cfg.n_tokens.to_string(),
                cfg.head_dim.to_string(),
                if is_meq { channel.to_string() } else { "all".into() },
                rank.to_string(),
                bound.to_string(),
                me,
                mw,
            ])
        })
        .collect()
}

pub fn cmd_entropy(a: &EntropyArgs) -> Result<bool> {
    let cfg = a.attention.config()?;
    create_out(&a.output.out)?;
    let streams = Streams::new(a.output.seed);
    let (q, k, _, kernel) = load_instance(&a.inputs, &cfg, &streams, 0, KernelInit::Seeded)?;
    let maps = attention_maps(&q, &k, &kernel, &cfg, 0)?;
    let rows = map_report_rows(&maps, &cfg, 0)?;
    for r in &rows {
        if r[6].is_empty() {
            println!("{}: rank {} (not a row-stochastic map)", r[0], r[4]);
        } else {
            println!("{}: rank {} mean entropy {} max weight {}", r[0], r[4], r[6], r[7]);
        }
    }
    let path = a.output.out.join("entropy.csv");
    io::write_report(&path, &DIAGNOSTICS_HEADER, rows)?;
    println!("report written to {}", path.display());
    Ok(true)
}

pub fn cmd_export(a: &ExportArgs) -> Result<bool> {
    let cfg = a.attention.config()?;
    create_out(&a.output.out)?;
    let streams = Streams::new(a.output.seed);
    let (q, k, v, kernel) = load_instance(&a.inputs, &cfg, &streams, 0, KernelInit::Seeded)?;
    let maps = attention_maps(&q, &k, &kernel, &cfg, a.channel)?;
    for (name, m) in &maps {
        io::write_pgm(&a.output.out.join(format!("{name}.pgm")), m)?;
    }
    let rows = map_report_rows(&maps, &cfg, a.channel)?;
    io::write_report(&a.output.out.join("entropy.csv"), &DIAGNOSTICS_HEADER, rows)?;
    for (name, m) in [("q", &q), ("k", &k), ("v", &v)] {
        io::write_matrix(&a.output.out.join(format!("{name}.csv")), m)?;
    }
    io::write_kernel(&a.output.out.join("kernel.csv"), &kernel)?;
    println!("{} maps written to {}", maps.len(), a.output.out.display());
    Ok(true)
}

pub const GRADCHECK_HEADER: [&str; 5] = ["op_name", "seed", "h", "max_rel_err", "passed"];

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    ensure!(a.instances > 0, "instances must be positive");
    ensure!(a.threshold > 0.0, "threshold must be positive");
    create_out(&a.output.out)?;
    let mut rows = Vec::new();
    let mut all = true;
    for op in a.op.ops() {
        let mut worst = 0.0f64;
        for i in 0..a.instances {
            let r = grad_check(op, a.output.seed.wrapping_add(i), a.h, a.threshold)?;
            all &= r.passed;
            worst = worst.max(r.max_rel_err);
            rows.push(vec![
                r.op_name.to_string(),
                r.seed.to_string(),
                r.h.to_string(),
                r.max_rel_err.to_string(),
                r.passed.to_string(),
            ]);
        }
        println!(
            "{}: max relative error {worst:.3e} over {} instances",
            op.name(),
            a.instances
        );
    }
    let path = a.output.out.join("gradcheck.csv");
    io::write_report(&path, &GRADCHECK_HEADER, rows)?;
    println!("report written to {}", path.display());
    Ok(all)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<bool> {
    if a.n_grid.is_empty() || a.d_grid.is_empty() {
        bail!("bench needs at least one n and one d");
    }
    create_out(&a.output.out)?;
    let plan = BenchPlan {
        variants: a.variant.clone(),
        n_grid: a.n_grid.clone(),
        d_grid: a.d_grid.clone(),
        precisions: a.precision.clone(),
        reps: a.reps,
        warmup: a.warmup,
        seed: a.output.seed,
        serial: a.serial,
    };
    let records = bench::run_bench(&plan)?;
    for r in &records {
        println!(
            "{:<8} n={:<6} d={:<4} {} median {:>12} ns  flops {}",
            r.variant.name(),
            r.n,
            r.d,
            r.precision.name(),
            r.wall_ns_median,
            r.flops
        );
    }
    bench::write_csv(&a.output.out.join("bench.csv"), &records)?;
    bench::write_gnuplot(&a.output.out.join("bench.dat"), &records)?;
    match bench::fit_scaling(&records) {
        Ok(fits) => {
            for f in &fits {
                println!(
                    "{} d={} {}: slope {:.3} (R² {:.3})",
                    f.variant.name(),
                    f.d,
                    f.precision.name(),
                    f.slope,
                    f.r_squared
                );
            }
            bench::write_fits(&a.output.out.join("fit.csv"), &fits)?;
        }
        Err(e) => eprintln!("note: no scaling fit ({e})"),
    }
    println!("records written to {}", a.output.out.display());
    Ok(true)
}
