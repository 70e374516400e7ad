//! Command-line front end: error sweeps, bound curves, label generation,
//! training and evaluation. Every run writes a manifest next to its output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gmmflow::bounds::{lcurve, linspace, write_lcurve_csv};
use gmmflow::experiments::{
    argmin, build_instance, fit_linear, fit_log_growth, fit_loglog_slope, run_error_sweep, run_sigma_sweep,
    sample_means, CovKind, ErrorReport, ExperimentError, MeanSampler, Norm, SweepConfig,
};
use gmmflow::flow::{FlowError, Integrator, SolveConfig};
use gmmflow::gmm::{mc_score, GmmError, MixtureFile, MixtureSpec};
use gmmflow::labels::{generate_labels, split, LabelError, LabeledDataset};
use gmmflow::linalg::RngStream;
use gmmflow::mlp::{evaluate, MlpConfig, MlpError, MlpModel};

pub const WORKERS_ENV: &str = "GMMFLOW_WORKERS";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GmmError> for CliError {
    fn from(e: GmmError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Io(e) => e.into(),
            ExperimentError::Flow(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::Io(e) => e.into(),
            LabelError::Solve { source, index } => match source {
                FlowError::NonFinite { .. } => CliError::Numerical(format!("pair {index}: {source}")),
                other => CliError::Config(other.to_string()),
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<MlpError> for CliError {
    fn from(e: MlpError) -> Self {
        match e {
            MlpError::Io(e) => e.into(),
            MlpError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gmmflow", version, about = "Exact-score Gaussian-mixture probability-flow sampler")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Endpoint error versus step size.
    VerifyH(SweepArgs),
    /// Endpoint error versus dimension.
    VerifyDim(SweepArgs),
    /// Endpoint error versus isotropic covariance scale.
    VerifySigma(SigmaArgs),
    /// Lipschitz bound of the linear drift part versus σ.
    Lcurve(LcurveArgs),
    /// Generate labeled noise-to-sample pairs.
    GenLabels(GenLabelsArgs),
    /// Split a dataset into train/validation/test files.
    Split(SplitArgs),
    /// Train the distillation network.
    Train(TrainArgs),
    /// RMSE of the ODE discretization and of a trained model.
    Eval(EvalArgs),
    /// Exact and Monte-Carlo score at a single point.
    Score(ScoreArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L2,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L2 => Norm::L2,
            NormArg::Linf => Norm::Linf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IntegratorArg {
    Euler,
    Heun,
}

impl From<IntegratorArg> for Integrator {
    fn from(i: IntegratorArg) -> Self {
        match i {
            IntegratorArg::Euler => Integrator::Euler,
            IntegratorArg::Heun => Integrator::Heun,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core. Defaults to $GMMFLOW_WORKERS, then 0.
    #[arg(long)]
    pub workers: Option<usize>,
    /// JSON configuration, or a manifest from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub traj: Option<usize>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long)]
    pub ref_k: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SigmaArgs {
    #[command(flatten)]
    pub sweep: SweepArgs,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Also write the `sigma,L` bound curve to this path.
    #[arg(long)]
    pub lcurve: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct LcurveArgs {
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.05)]
    pub lo: f64,
    #[arg(long, default_value_t = 1.5)]
    pub hi: f64,
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GenLabelsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long, value_enum)]
    pub integrator: Option<IntegratorArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Mixture file to use instead of drawing a new instance.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Mixture file written by `gen-labels`.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Euler steps of the approximate map.
    #[arg(long, default_value_t = 100)]
    pub disc_steps: usize,
    /// Heun steps of the reference map.
    #[arg(long, default_value_t = 1000)]
    pub ref_steps: usize,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ScoreArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub z: Vec<f64>,
    #[arg(long)]
    pub t: f64,
}

/// Record of one run, written next to its primary output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let file_name = path.file_name().ok_or_else(|| CliError::Io(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_manifest<C: Serialize>(
    subcommand: &str,
    config: &C,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    started: Instant,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        config: serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs.clone(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    write_atomic(&manifest_path(&outputs[0]), &json)
}

/// Loads a configuration file; a manifest contributes its `config` field.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value = match value.get("subcommand").and(value.get("config")) {
        Some(inner) => inner.clone(),
        None => value,
    };
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn resolve_workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(w) = flag {
        return Ok(w);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("{WORKERS_ENV}={v} is not a count"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepKind {
    H,
    Dim,
    Sigma,
}

fn default_sweep(kind: SweepKind, profile: Profile, norm: Norm) -> SweepConfig {
    let full = profile == Profile::Full;
    let (dims, ks) = match kind {
        SweepKind::H if full => (vec![10, 100, 1000, 10_000], vec![5, 10, 20, 50, 100]),
        SweepKind::H => (vec![10], vec![5, 10, 20, 50, 100]),
        SweepKind::Dim if full => (vec![10, 100, 1000, 10_000], vec![10, 20, 40, 100]),
        SweepKind::Dim => (vec![10, 100, 1000], vec![10, 20, 40, 100]),
        SweepKind::Sigma => (vec![10], vec![100]),
    };
    let mut cfg = SweepConfig::desk(dims, ks, norm, 42);
    if kind == SweepKind::Sigma {
        cfg.sigma_grid = Some(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        cfg.norms = vec![Norm::L2, Norm::Linf];
    }
    cfg
}

fn resolve_sweep(kind: SweepKind, a: &SweepArgs, sigmas: Option<&Vec<f64>>) -> Result<SweepConfig, CliError> {
    let norm = a.norm.map(Norm::from).unwrap_or(Norm::L2);
    let mut cfg = match &a.common.config {
        Some(p) => load_config::<SweepConfig>(p)?,
        None => default_sweep(kind, a.common.profile, norm),
    };
    if let Some(n) = a.norm {
        // The ℓ∞ sweeps use diagonal covariance and hypercube means.
        let fresh = SweepConfig::desk(vec![1], vec![1], n.into(), 0);
        cfg.norms = vec![n.into()];
        cfg.mean_sampler = fresh.mean_sampler;
        cfg.cov_kind = fresh.cov_kind;
    }
    if let Some(v) = &a.dims {
        cfg.dims = v.clone();
    }
    if let Some(v) = &a.ks {
        cfg.steps = v.clone();
    }
    if let Some(v) = a.traj {
        cfg.n_traj = v;
    }
    if let Some(v) = a.ref_k {
        cfg.ref_steps = v;
    }
    if let Some(v) = a.components {
        cfg.components = v;
    }
    if let Some(v) = a.radius {
        cfg.data_radius = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if kind == SweepKind::Sigma {
        if let Some(s) = sigmas {
            cfg.sigma_grid = Some(s.clone());
        }
        if cfg.sigma_grid.is_none() {
            cfg.sigma_grid = Some(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        }
        cfg.norms = vec![Norm::L2, Norm::Linf];
    } else if cfg.sigma_grid.is_some() {
        return Err(CliError::Config("sigma grids belong to verify-sigma".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish_sweep(report: &ErrorReport, out: &Path) -> Result<(), CliError> {
    write_atomic(out, report.to_csv().as_bytes())?;
    let bad = report.nonfinite_total();
    if bad > 0 {
        return Err(CliError::Numerical(format!("{bad} non-finite trajectory results; see {}", out.display())));
    }
    Ok(())
}

fn fmt_fit(r: Result<gmmflow::experiments::LinearFit, ExperimentError>) -> String {
    match r {
        Ok(f) => format!("slope={:.4} r2={:.4}", f.slope, f.r2),
        Err(_) => "slope undefined".into(),
    }
}

fn cmd_verify_h(a: &SweepArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let cfg = resolve_sweep(SweepKind::H, a, None)?;
    let report = run_error_sweep(&cfg, resolve_workers(a.common.workers)?)?;
    let mut lines = Vec::new();
    for &norm in &cfg.norms {
        for &d in &cfg.dims {
            let fit = fit_loglog_slope(&report.error_vs_h(norm, d, None));
            lines.push(format!("{} d={d}: error vs h {}", norm.label(), fmt_fit(fit)));
        }
    }
    finish_sweep(&report, &a.out)?;
    write_manifest("verify-h", &cfg, Some(cfg.seed), vec![a.out.clone()], started)?;
    Ok(lines.join("\n"))
}

fn cmd_verify_dim(a: &SweepArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let cfg = resolve_sweep(SweepKind::Dim, a, None)?;
    let report = run_error_sweep(&cfg, resolve_workers(a.common.workers)?)?;
    let mut lines = Vec::new();
    for &norm in &cfg.norms {
        for &k in &cfg.steps {
            let pts = report.error_vs_d(norm, k);
            let line = if pts.len() < 2 {
                format!("{} K={k}: slope undefined (single dimension)", norm.label())
            } else {
                match norm {
                    Norm::L2 => format!("l2 K={k}: error vs d log-log {}", fmt_fit(fit_loglog_slope(&pts))),
                    Norm::Linf => format!(
                        "linf K={k}: a+b ln d {}; linear in d {}",
                        fmt_fit(fit_log_growth(&pts)),
                        fmt_fit(fit_linear(&pts))
                    ),
                }
            };
            lines.push(line);
        }
    }
    finish_sweep(&report, &a.out)?;
    write_manifest("verify-dim", &cfg, Some(cfg.seed), vec![a.out.clone()], started)?;
    Ok(lines.join("\n"))
}

fn cmd_verify_sigma(a: &SigmaArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let cfg = resolve_sweep(SweepKind::Sigma, &a.sweep, a.sigmas.as_ref())?;
    let report = run_sigma_sweep(&cfg, resolve_workers(a.sweep.common.workers)?)?;
    let grid = cfg.sigma_grid.clone().unwrap_or_default();
    let mut lines = Vec::new();
    for &norm in &cfg.norms {
        for &d in &cfg.dims {
            for &k in &cfg.steps {
                let means: Vec<f64> = grid
                    .iter()
                    .map(|s| {
                        let tag = format!("{s}");
                        report
                            .select(norm)
                            .find(|r| r.d == d && r.steps == k && r.sigma_tag == tag)
                            .map_or(f64::NAN, |r| r.mean_error)
                    })
                    .collect();
                if let Some(i) = argmin(&means) {
                    let interior = i > 0 && i + 1 < grid.len();
                    lines.push(format!(
                        "{} d={d} K={k}: argmin sigma={} ({})",
                        norm.label(),
                        grid[i],
                        if interior { "interior" } else { "boundary" }
                    ));
                }
            }
        }
    }
    finish_sweep(&report, &a.sweep.out)?;
    let mut outputs = vec![a.sweep.out.clone()];
    if let Some(p) = &a.lcurve {
        let mut buf = Vec::new();
        write_lcurve_csv(&mut buf, &lcurve(&grid))?;
        write_atomic(p, &buf)?;
        outputs.push(p.clone());
    }
    write_manifest("verify-sigma", &cfg, Some(cfg.seed), outputs, started)?;
    Ok(lines.join("\n"))
}

fn cmd_lcurve(a: &LcurveArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let grid = match &a.sigmas {
        Some(s) => s.clone(),
        None => linspace(a.lo, a.hi, a.n),
    };
    if grid.is_empty() || grid.iter().any(|s| !(*s > 0.0)) {
        return Err(CliError::Config("sigma grid must be non-empty and positive".into()));
    }
    let curve = lcurve(&grid);
    let mut buf = Vec::new();
    write_lcurve_csv(&mut buf, &curve)?;
    write_atomic(&a.out, &buf)?;
    write_manifest("lcurve", &grid, None, vec![a.out.clone()], started)?;
    let best = curve.iter().min_by(|x, y| x.1.total_cmp(&y.1)).unwrap();
    Ok(format!("minimum L={} at sigma={}", best.1, best.0))
}

/// Resolved `gen-labels` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLabelsConfig {
    pub dim: usize,
    pub count: usize,
    pub components: usize,
    pub solve: SolveConfig,
    pub seed: u64,
    pub spec_file: Option<PathBuf>,
}

pub fn spec_sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "labels".into());
    out.with_file_name(format!("{stem}.spec.json"))
}

/// Corner means and a diagonal covariance with entries uniform in `[0.2, 0.4]`.
pub fn distillation_instance(d: usize, components: usize, seed: u64) -> Result<MixtureSpec, CliError> {
    let mut rng = RngStream::new(RngStream::derive_seed(seed, &[d as u64]), u64::MAX);
    let means = sample_means(MeanSampler::RademacherCorners, components, 1.0, d, &mut rng);
    Ok(build_instance(means, CovKind::UniformDiagonal { lo: 0.2, hi: 0.4 }, 1.0, false, &mut rng)?)
}

fn read_spec(path: &Path) -> Result<MixtureSpec, CliError> {
    let file: MixtureFile = load_config(path)?;
    Ok(MixtureSpec::from_file(&file)?)
}

fn cmd_gen_labels(a: &GenLabelsArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let full = a.common.profile == Profile::Full;
    let mut cfg = match &a.common.config {
        Some(p) => load_config::<GenLabelsConfig>(p)?,
        None => GenLabelsConfig {
            dim: 8,
            count: if full { 100_000 } else { 20_000 },
            components: 10,
            solve: SolveConfig { steps: 100, integrator: Integrator::Euler, record_path: false },
            seed: 42,
            spec_file: None,
        },
    };
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.components {
        cfg.components = v;
    }
    if let Some(i) = a.integrator {
        cfg.solve.integrator = i.into();
        if a.steps.is_none() {
            cfg.solve.steps = if cfg.solve.integrator == Integrator::Heun { 1000 } else { 100 };
        }
    }
    if let Some(v) = a.steps {
        cfg.solve.steps = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if let Some(p) = &a.spec {
        cfg.spec_file = Some(p.clone());
    }
    if cfg.solve.steps == 0 || cfg.count == 0 || cfg.dim == 0 || cfg.components == 0 {
        return Err(CliError::Config("dim, count, components and steps must be positive".into()));
    }
    let spec = match &cfg.spec_file {
        Some(p) => read_spec(p)?,
        None => distillation_instance(cfg.dim, cfg.components, cfg.seed)?,
    };
    cfg.dim = spec.dim();
    cfg.components = spec.components();
    let ds = generate_labels(&spec, cfg.count, &cfg.solve, cfg.seed, resolve_workers(a.common.workers)?)?;
    let mut buf = Vec::new();
    ds.write_to(&mut buf)?;
    write_atomic(&a.out, &buf)?;
    let sidecar = spec_sidecar(&a.out);
    let spec_json = serde_json::to_vec_pretty(&spec.to_file()).map_err(|e| CliError::Config(e.to_string()))?;
    write_atomic(&sidecar, &spec_json)?;
    write_manifest("gen-labels", &cfg, Some(cfg.seed), vec![a.out.clone(), sidecar], started)?;
    Ok(format!("{} pairs of dimension {}, digest {}", ds.len(), ds.dim(), ds.digest()))
}

fn cmd_split(a: &SplitArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let [f0, f1, f2] = a.fractions[..] else {
        return Err(CliError::Config("--fractions needs three values".into()));
    };
    let ds = LabeledDataset::load(&a.data)?;
    let (tr, va, te) = split(&ds, (f0, f1, f2), a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut outputs = Vec::new();
    for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
        let p = a.out_dir.join(format!("{name}.gflb"));
        let mut buf = Vec::new();
        part.write_to(&mut buf)?;
        write_atomic(&p, &buf)?;
        outputs.push(p);
    }
    #[derive(Serialize)]
    struct SplitConfig<'a> {
        data: &'a Path,
        fractions: (f64, f64, f64),
        seed: u64,
    }
    let cfg = SplitConfig { data: &a.data, fractions: (f0, f1, f2), seed: a.seed };
    write_manifest("split", &cfg, Some(a.seed), outputs, started)?;
    Ok(format!("train={} val={} test={}", tr.len(), va.len(), te.len()))
}

pub fn history_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    out.with_file_name(format!("{stem}.history.csv"))
}

fn cmd_train(a: &TrainArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let tr = LabeledDataset::load(&a.train)?;
    let va = LabeledDataset::load_expecting(&a.val, tr.dim())?;
    let full = a.common.profile == Profile::Full;
    let mut cfg = match &a.common.config {
        Some(p) => load_config::<MlpConfig>(p)?,
        None => MlpConfig::new(tr.dim(), if full { 1024 } else { 128 }, 42),
    };
    cfg.d = tr.dim();
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    let mut model = MlpModel::new(cfg.clone())?;
    let report = model.train(&tr, &va)?;
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf)?;
    write_atomic(&a.out, &buf)?;
    let hist = history_path(&a.out);
    write_atomic(&hist, report.to_csv().as_bytes())?;
    write_manifest("train", &cfg, Some(cfg.seed), vec![a.out.clone(), hist], started)?;
    Ok(format!(
        "best epoch {} val_loss {:.6e}, stopped by {:?} after {} epochs",
        report.best_epoch,
        report.best_val_loss,
        report.stop,
        report.history.len() - 1
    ))
}

/// RMSE between Euler and Heun endpoints started from each `y` of `ds`.
pub fn discretization_rmse(
    spec: &MixtureSpec,
    ds: &LabeledDataset,
    disc_steps: usize,
    ref_steps: usize,
    workers: usize,
) -> Result<f64, CliError> {
    let approx = SolveConfig::euler(disc_steps)?;
    let reference = SolveConfig::heun(ref_steps)?;
    let solve_all = |cfg: &SolveConfig| -> Result<Vec<Vec<f64>>, FlowError> {
        gmmflow::parallel::indexed_map(workers, ds.len(), |m| {
            let y = spec.to_eigen(ds.y.row(m));
            gmmflow::flow::solve_eigen(spec, y.as_slice().unwrap(), cfg, m).map(|s| s.y_final)
        })
        .into_iter()
        .collect()
    };
    let a = solve_all(&approx)?;
    let b = solve_all(&reference)?;
    // The eigenbasis is orthogonal, so squared distances are unchanged by it.
    let sq: f64 = a.iter().zip(&b).flat_map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q))).sum();
    Ok((sq / (ds.len() * ds.dim()) as f64).sqrt())
}

fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let started = Instant::now();
    let model = MlpModel::load(&a.model)?;
    let spec = read_spec(&a.spec)?;
    let d = model.config.d;
    if spec.dim() != d {
        return Err(CliError::Config(format!("model dimension {d} but mixture dimension {}", spec.dim())));
    }
    let tr = LabeledDataset::load_expecting(&a.train, d)?;
    let te = LabeledDataset::load_expecting(&a.test, d)?;
    let workers = resolve_workers(a.workers)?;
    let disc = discretization_rmse(&spec, &te, a.disc_steps, a.ref_steps, workers)?;
    let train_rmse = evaluate(&model, &tr)?;
    let test_rmse = evaluate(&model, &te)?;
    let csv = format!(
        "quantity,split,rmse\node_discretization,test,{disc}\nmodel,train,{train_rmse}\nmodel,test,{test_rmse}\n"
    );
    write_atomic(&a.out, csv.as_bytes())?;
    #[derive(Serialize)]
    struct EvalConfig<'a> {
        model: &'a Path,
        spec: &'a Path,
        train: &'a Path,
        test: &'a Path,
        disc_steps: usize,
        ref_steps: usize,
    }
    let cfg = EvalConfig {
        model: &a.model,
        spec: &a.spec,
        train: &a.train,
        test: &a.test,
        disc_steps: a.disc_steps,
        ref_steps: a.ref_steps,
    };
    write_manifest("eval", &cfg, None, vec![a.out.clone()], started)?;
    Ok(format!("ode_discretization={disc:.5} model_train={train_rmse:.5} model_test={test_rmse:.5}"))
}

/// CSV `k,exact,mc`; the Monte-Carlo column treats the component means as data.
fn cmd_score(a: &ScoreArgs) -> Result<String, CliError> {
    let spec = read_spec(&a.spec)?;
    let z = ndarray::Array1::from(a.z.clone());
    let exact = spec.exact_score(z.view(), a.t)?;
    let mc = mc_score(spec.means(), z.view(), a.t)?;
    let mut s = String::from("k,exact,mc");
    for k in 0..z.len() {
        s.push_str(&format!("\n{k},{},{}", exact[k], mc[k]));
    }
    Ok(s)
}

/// Runs one parsed command, returning the text to print on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::VerifyH(a) => cmd_verify_h(a),
        Command::VerifyDim(a) => cmd_verify_dim(a),
        Command::VerifySigma(a) => cmd_verify_sigma(a),
        Command::Lcurve(a) => cmd_lcurve(a),
        Command::GenLabels(a) => cmd_gen_labels(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
    }
}
