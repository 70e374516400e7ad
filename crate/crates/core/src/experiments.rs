//! Discretization-error sweeps over dimension, step size and covariance scale.
//!
//! Every trajectory starts from the same `z_1` for the Euler run and the Heun
//! reference, so the recorded difference isolates discretization error.
//! Instances for a dimension `d` are drawn from a seed derived from
//! `(seed, d)`, and trajectory `m` uses substream `m` of that seed, so every
//! reduction is keyed by index and the output does not depend on scheduling.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{solve_eigen, FlowError, Integrator, SolveConfig};
use crate::gmm::{GmmError, MixtureSpec};
use crate::linalg::{cycle5_spectrum, gaussian_vector, norm_l2, norm_linf, random_orthogonal, CovarianceSpec, LinalgError, RngStream};
use crate::parallel::indexed_map;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid sweep configuration: {0}")]
    InvalidConfig(String),
    #[error("fit needs at least two distinct positive abscissae")]
    DegenerateFit,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanSampler {
    /// Uniform in the ℓ2 ball of radius `M`.
    Ball,
    /// Uniform in `[-M, M]^d`.
    Hypercube,
    /// Independent `±1` coordinates.
    RademacherCorners,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovKind {
    /// `U diag(0.1, ..., 0.5, 0.1, ...) Uᵀ` with Haar `U`.
    Cycle5FullSpd,
    /// `diag(0.1, ..., 0.5, 0.1, ...)`.
    Cycle5Diagonal,
    Isotropic { sigma: f64 },
    /// Diagonal entries drawn uniformly from `[lo, hi]`.
    UniformDiagonal { lo: f64, hi: f64 },
}

impl CovKind {
    pub fn is_diagonal(&self) -> bool {
        !matches!(self, CovKind::Cycle5FullSpd)
    }

    pub fn tag(&self) -> String {
        match self {
            CovKind::Cycle5FullSpd => "cycle5-full".into(),
            CovKind::Cycle5Diagonal => "cycle5-diag".into(),
            CovKind::Isotropic { sigma } => format!("{sigma}"),
            CovKind::UniformDiagonal { lo, hi } => format!("udiag-{lo}-{hi}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L2,
    Linf,
}

impl Norm {
    pub fn label(&self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dims: Vec<usize>,
    /// Step counts `K` of the approximate solver (`h = 1/K`).
    pub steps: Vec<usize>,
    #[serde(default)]
    pub sigma_grid: Option<Vec<f64>>,
    pub n_traj: usize,
    pub components: usize,
    pub data_radius: f64,
    pub mean_sampler: MeanSampler,
    pub cov_kind: CovKind,
    pub norms: Vec<Norm>,
    pub ref_steps: usize,
    #[serde(default = "default_approx")]
    pub approx_integrator: Integrator,
    /// Draw and apply the random rotation of a full-SPD covariance. The ℓ2
    /// error law is rotation invariant, so sweeps may stay in the eigenbasis.
    #[serde(default)]
    pub materialize_rotation: bool,
    pub seed: u64,
}

fn default_approx() -> Integrator {
    Integrator::Euler
}

impl SweepConfig {
    /// `J = 10`, `M = 1`, 1000 trajectories, Heun reference with `K = 1000`.
    pub fn desk(dims: Vec<usize>, steps: Vec<usize>, norm: Norm, seed: u64) -> Self {
        let (mean_sampler, cov_kind) = match norm {
            Norm::L2 => (MeanSampler::Ball, CovKind::Cycle5FullSpd),
            Norm::Linf => (MeanSampler::Hypercube, CovKind::Cycle5Diagonal),
        };
        Self {
            dims,
            steps,
            sigma_grid: None,
            n_traj: 1000,
            components: 10,
            data_radius: 1.0,
            mean_sampler,
            cov_kind,
            norms: vec![norm],
            ref_steps: 1000,
            approx_integrator: Integrator::Euler,
            materialize_rotation: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.to_string()));
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dims must be non-empty and positive");
        }
        if self.steps.is_empty() || self.steps.contains(&0) {
            return bad("steps must be non-empty and positive");
        }
        if self.n_traj == 0 {
            return bad("n_traj must be at least 1");
        }
        if self.components == 0 {
            return bad("components must be at least 1");
        }
        if !(self.data_radius > 0.0) {
            return bad("data_radius must be positive");
        }
        if self.norms.is_empty() {
            return bad("at least one norm is required");
        }
        for &k in &self.steps {
            let ok = match self.approx_integrator {
                Integrator::Euler => k < self.ref_steps,
                Integrator::Heun => k <= self.ref_steps,
            };
            if !ok {
                return bad("ref_steps must exceed every step count");
            }
        }
        let diagonal = match &self.sigma_grid {
            Some(_) => true,
            None => self.cov_kind.is_diagonal(),
        };
        if self.norms.contains(&Norm::Linf) && !diagonal {
            return bad("the linf norm requires a diagonal covariance");
        }
        if let Some(grid) = &self.sigma_grid {
            if grid.is_empty() || grid.iter().any(|s| !(*s > 0.0)) {
                return bad("sigma grid must be non-empty and positive");
            }
        }
        if let CovKind::Isotropic { sigma } = self.cov_kind {
            if !(sigma > 0.0) {
                return bad("sigma must be positive");
            }
        }
        if let CovKind::UniformDiagonal { lo, hi } = self.cov_kind {
            if !(lo > 0.0 && lo <= hi) {
                return bad("uniform diagonal needs 0 < lo <= hi");
            }
        }
        Ok(())
    }
}

/// `J` component means in `R^d`, one per row.
pub fn sample_means(kind: MeanSampler, j: usize, radius: f64, d: usize, rng: &mut RngStream) -> Array2<f64> {
    let mut means = Array2::<f64>::zeros((j, d));
    for mut row in means.outer_iter_mut() {
        match kind {
            MeanSampler::Ball => {
                let g = gaussian_vector(d, rng);
                let n = norm_l2(g.view());
                let r = radius * rng.next_f64().powf(1.0 / d as f64);
                row.assign(&(g * (r / n)));
            }
            MeanSampler::Hypercube => row.iter_mut().for_each(|x| *x = rng.uniform(-radius, radius)),
            MeanSampler::RademacherCorners => {
                row.iter_mut().for_each(|x| *x = if rng.next_u64() >> 63 == 1 { 1.0 } else { -1.0 })
            }
        }
    }
    means
}

/// Builds the mixture for one sweep cell. The declared data radius is the
/// larger of the sampling radius and the largest drawn mean norm.
pub fn build_instance(
    means: Array2<f64>,
    cov_kind: CovKind,
    radius: f64,
    materialize_rotation: bool,
    rng: &mut RngStream,
) -> Result<MixtureSpec, ExperimentError> {
    let d = means.ncols();
    let cov = match cov_kind {
        CovKind::Cycle5FullSpd if materialize_rotation => {
            let u = random_orthogonal(d, rng)?;
            CovarianceSpec::eigen_factored(&u, cycle5_spectrum(d))?
        }
        CovKind::Cycle5FullSpd | CovKind::Cycle5Diagonal => CovarianceSpec::diagonal(cycle5_spectrum(d))?,
        CovKind::Isotropic { sigma } => CovarianceSpec::isotropic(sigma)?,
        CovKind::UniformDiagonal { lo, hi } => {
            CovarianceSpec::diagonal((0..d).map(|_| rng.uniform(lo, hi)).collect())?
        }
    };
    let spec = MixtureSpec::new(means, cov)?;
    let declared = spec.data_radius().max(radius);
    Ok(spec.with_data_radius(declared)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub norm: Norm,
    pub d: usize,
    pub steps: usize,
    pub h: f64,
    pub sigma_tag: String,
    pub mean_error: f64,
    pub std_error: f64,
    pub n_traj: usize,
    pub n_nonfinite: usize,
}

/// Per-trajectory errors of one `(d, σ, K)` cell; `None` marks a non-finite run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSamples {
    pub d: usize,
    pub steps: usize,
    pub sigma_tag: String,
    pub l2: Vec<Option<f64>>,
    pub linf: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
    pub samples: Vec<CellSamples>,
}

pub const CSV_HEADER: &str = "norm,d,K,h,sigma_tag,mean_error,std_error,n_traj,n_nonfinite";

impl ErrorReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.norm.label(),
                r.d,
                r.steps,
                r.h,
                r.sigma_tag,
                r.mean_error,
                r.std_error,
                r.n_traj,
                r.n_nonfinite
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn nonfinite_total(&self) -> usize {
        self.rows.iter().map(|r| r.n_nonfinite).sum()
    }

    pub fn select(&self, norm: Norm) -> impl Iterator<Item = &ErrorRow> {
        self.rows.iter().filter(move |r| r.norm == norm)
    }

    /// `(h, mean error)` at fixed `d` (and σ tag, when given).
    pub fn error_vs_h(&self, norm: Norm, d: usize, sigma_tag: Option<&str>) -> Vec<(f64, f64)> {
        self.select(norm)
            .filter(|r| r.d == d && sigma_tag.is_none_or(|t| r.sigma_tag == t))
            .map(|r| (r.h, r.mean_error))
            .collect()
    }

    /// `(d, mean error)` at fixed `K`.
    pub fn error_vs_d(&self, norm: Norm, steps: usize) -> Vec<(f64, f64)> {
        self.select(norm)
            .filter(|r| r.steps == steps)
            .map(|r| (r.d as f64, r.mean_error))
            .collect()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-trajectory `(ℓ2, ℓ∞)` errors for each approximate step count.
fn trajectory_errors(
    spec: &MixtureSpec,
    cfg: &SweepConfig,
    cell_seed: u64,
    m: usize,
) -> Vec<Option<(f64, f64)>> {
    let d = spec.dim();
    let z1 = gaussian_vector(d, &mut RngStream::new(cell_seed, m as u64));
    let y1 = spec.to_eigen(z1.view());
    let y1 = y1.as_slice().unwrap();
    let reference = SolveConfig { steps: cfg.ref_steps, integrator: Integrator::Heun, record_path: false };
    let Ok(reference) = solve_eigen(spec, y1, &reference, m) else {
        return vec![None; cfg.steps.len()];
    };
    cfg.steps
        .iter()
        .map(|&k| {
            let approx = SolveConfig { steps: k, integrator: cfg.approx_integrator, record_path: false };
            let approx = solve_eigen(spec, y1, &approx, m).ok()?;
            let diff_eig = Array1::from_iter(approx.y_final.iter().zip(&reference.y_final).map(|(a, b)| a - b));
            let l2 = norm_l2(diff_eig.view());
            // ℓ∞ is basis dependent: measure it in the original coordinates.
            let linf = match spec.basis() {
                Some(_) => norm_linf(spec.from_eigen(diff_eig.view()).view()),
                None => norm_linf(diff_eig.view()),
            };
            Some((l2, linf))
        })
        .collect()
}

fn cell_seed(seed: u64, d: usize) -> u64 {
    RngStream::derive_seed(seed, &[d as u64])
}

/// Instance means for dimension `d`; shared by every σ of a σ sweep.
fn cell_means(cfg: &SweepConfig, d: usize) -> (Array2<f64>, RngStream) {
    let mut rng = RngStream::new(cell_seed(cfg.seed, d), u64::MAX);
    let means = sample_means(cfg.mean_sampler, cfg.components, cfg.data_radius, d, &mut rng);
    (means, rng)
}

fn run_cells(cfg: &SweepConfig, covs: &[CovKind], workers: usize) -> Result<ErrorReport, ExperimentError> {
    let mut samples = Vec::new();
    for &d in &cfg.dims {
        let seed = cell_seed(cfg.seed, d);
        for &cov in covs {
            let (means, mut rng) = cell_means(cfg, d);
            let spec = build_instance(means, cov, cfg.data_radius, cfg.materialize_rotation, &mut rng)?;
            let per_traj = indexed_map(workers, cfg.n_traj, |m| trajectory_errors(&spec, cfg, seed, m));
            for (ki, &k) in cfg.steps.iter().enumerate() {
                samples.push(CellSamples {
                    d,
                    steps: k,
                    sigma_tag: cov.tag(),
                    l2: per_traj.iter().map(|t| t[ki].map(|e| e.0)).collect(),
                    linf: per_traj.iter().map(|t| t[ki].map(|e| e.1)).collect(),
                });
            }
        }
    }
    let mut rows = Vec::new();
    for &norm in &cfg.norms {
        for cell in &samples {
            let values = match norm {
                Norm::L2 => &cell.l2,
                Norm::Linf => &cell.linf,
            };
            let finite: Vec<f64> = values.iter().flatten().copied().collect();
            let (mean_error, std_error) = mean_std(&finite);
            rows.push(ErrorRow {
                norm,
                d: cell.d,
                steps: cell.steps,
                h: 1.0 / cell.steps as f64,
                sigma_tag: cell.sigma_tag.clone(),
                mean_error,
                std_error,
                n_traj: cfg.n_traj,
                n_nonfinite: values.len() - finite.len(),
            });
        }
    }
    Ok(ErrorReport { rows, samples })
}

/// Mean/std of the approximate-vs-reference endpoint error over the full
/// `dims × steps` grid.
pub fn run_error_sweep(cfg: &SweepConfig, workers: usize) -> Result<ErrorReport, ExperimentError> {
    cfg.validate()?;
    if cfg.sigma_grid.is_some() {
        return run_sigma_sweep(cfg, workers);
    }
    run_cells(cfg, &[cfg.cov_kind], workers)
}

/// Isotropic `Σ = σI` for each σ of the grid, recording both norms. Means and
/// initial states are shared across σ.
pub fn run_sigma_sweep(cfg: &SweepConfig, workers: usize) -> Result<ErrorReport, ExperimentError> {
    let grid = cfg
        .sigma_grid
        .clone()
        .ok_or_else(|| ExperimentError::InvalidConfig("sigma sweep needs a sigma grid".into()))?;
    let mut cfg = cfg.clone();
    cfg.norms = vec![Norm::L2, Norm::Linf];
    cfg.validate()?;
    let covs: Vec<CovKind> = grid.iter().map(|&sigma| CovKind::Isotropic { sigma }).collect();
    run_cells(&cfg, &covs, workers)
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub residual_ss: f64,
}

pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearFit, ExperimentError> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(ExperimentError::DegenerateFit);
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(ExperimentError::DegenerateFit);
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual_ss: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let total_ss: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if total_ss > 0.0 { 1.0 - residual_ss / total_ss } else { 1.0 };
    Ok(LinearFit { slope, intercept, r2, residual_ss })
}

/// Least squares on `(ln x, ln y)`; the slope is the power-law exponent.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LinearFit, ExperimentError> {
    if points.iter().any(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(ExperimentError::DegenerateFit);
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|p| (p.0.ln(), p.1.ln())).collect();
    fit_linear(&logs)
}

/// `y ≈ a + b ln d`, reported as `intercept = a`, `slope = b`.
pub fn fit_log_growth(points: &[(f64, f64)]) -> Result<LinearFit, ExperimentError> {
    if points.iter().any(|p| !(p.0 > 0.0)) {
        return Err(ExperimentError::DegenerateFit);
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|p| (p.0.ln(), p.1)).collect();
    fit_linear(&logs)
}

/// Index of the smallest mean error in `values`.
pub fn argmin(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}
