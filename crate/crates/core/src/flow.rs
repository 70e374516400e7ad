//! The reverse probability-flow ODE with the `(t-1)⁻¹` singularity removed,
//!
//! ```text
//! dz/dt = f(z, t) = ½ (I - 2(1-t)Σ) M_t⁻¹ z - ((1+t)/2) M_t⁻¹ Σ_j w_j(z,t) z_0^j,
//! ```
//!
//! integrated backward from `t = 1` (standard normal initial state) to `t = 0`
//! on the uniform grid `t_k = 1 - k/K`.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{GmmError, MixtureSpec};
use crate::linalg::{gaussian_vector, softmax_into, RngStream};
use crate::parallel::indexed_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("step count must be at least 1")]
    InvalidSteps,
    #[error("expected the {expected:?} integrator, config asks for {got:?}")]
    IntegratorMismatch { expected: Integrator, got: Integrator },
    #[error("non-finite state in trajectory {trajectory} at step {step}")]
    NonFinite { trajectory: usize, step: usize },
    #[error("closed form requires a single component, got {0}")]
    NotSingleComponent(usize),
    #[error("at least one trajectory is required")]
    NoTrajectories,
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Number of steps `K`; the step size is `h = 1/K`.
    pub steps: usize,
    pub integrator: Integrator,
    #[serde(default)]
    pub record_path: bool,
}

impl SolveConfig {
    pub fn new(steps: usize, integrator: Integrator) -> Result<Self, FlowError> {
        if steps == 0 {
            return Err(FlowError::InvalidSteps);
        }
        Ok(Self { steps, integrator, record_path: false })
    }

    pub fn euler(steps: usize) -> Result<Self, FlowError> {
        Self::new(steps, Integrator::Euler)
    }

    pub fn heun(steps: usize) -> Result<Self, FlowError> {
        Self::new(steps, Integrator::Heun)
    }

    pub fn with_path(mut self) -> Self {
        self.record_path = true;
        self
    }

    pub fn h(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `t_k = 1 - k h`, exact at both ends.
    pub fn time(&self, k: usize) -> f64 {
        (self.steps - k) as f64 / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub z_final: Array1<f64>,
    /// States at `t_0 = 1, ..., t_K = 0` when requested.
    pub path: Option<Vec<Array1<f64>>>,
    pub trajectory_index: usize,
}

/// Scratch buffers for allocation-free drift evaluation.
#[derive(Debug, Clone)]
pub struct DriftWorkspace {
    inv_m: Vec<f64>,
    log_e: Vec<f64>,
    w: Vec<f64>,
    mbar: Vec<f64>,
}

impl DriftWorkspace {
    pub fn new(spec: &MixtureSpec) -> Self {
        Self {
            inv_m: vec![0.0; spec.dim()],
            log_e: vec![0.0; spec.components()],
            w: vec![0.0; spec.components()],
            mbar: vec![0.0; spec.dim()],
        }
    }
}

/// Drift in eigen coordinates, written into `out`.
pub fn drift_eig_into(spec: &MixtureSpec, y: &[f64], t: f64, ws: &mut DriftWorkspace, out: &mut [f64]) {
    let a = 1.0 - t;
    let lambda = spec.eigenvalues();
    for (k, inv) in ws.inv_m.iter_mut().enumerate() {
        *inv = 1.0 / (a * a * lambda[k] + t);
    }
    spec.log_kernels_eig(y, t, &ws.inv_m, &mut ws.log_e);
    softmax_into(&ws.log_e, &mut ws.w);
    spec.weighted_mean_eig(&ws.w, &mut ws.mbar);
    let half_one_plus_t = 0.5 * (1.0 + t);
    for k in 0..y.len() {
        let lin = 0.5 * (1.0 - 2.0 * a * lambda[k]);
        out[k] = ws.inv_m[k] * (lin * y[k] - half_one_plus_t * ws.mbar[k]);
    }
}

/// Drift `f(z, t)` in the original basis.
pub fn drift(spec: &MixtureSpec, z: ArrayView1<f64>, t: f64) -> Result<Array1<f64>, FlowError> {
    if z.len() != spec.dim() {
        return Err(GmmError::DimensionMismatch { expected: spec.dim(), got: z.len() }.into());
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(GmmError::TimeOutOfRange(t).into());
    }
    let y = spec.to_eigen(z);
    let mut ws = DriftWorkspace::new(spec);
    let mut out = vec![0.0; spec.dim()];
    drift_eig_into(spec, y.as_slice().unwrap(), t, &mut ws, &mut out);
    Ok(spec.from_eigen(ArrayView1::from(&out)))
}

/// Endpoint (and optional path) of a solve carried out in eigen coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSolution {
    pub y_final: Vec<f64>,
    pub path: Option<Vec<Vec<f64>>>,
}

/// Integrates from `y1` (eigen coordinates) at `t = 1` down to `t = 0`.
pub fn solve_eigen(
    spec: &MixtureSpec,
    y1: &[f64],
    cfg: &SolveConfig,
    trajectory: usize,
) -> Result<EigenSolution, FlowError> {
    if cfg.steps == 0 {
        return Err(FlowError::InvalidSteps);
    }
    let d = spec.dim();
    let h = cfg.h();
    let mut ws = DriftWorkspace::new(spec);
    let mut y = y1.to_vec();
    let mut f0 = vec![0.0; d];
    let mut f1 = vec![0.0; d];
    let mut pred = vec![0.0; d];
    let mut path = cfg.record_path.then(|| {
        let mut p = Vec::with_capacity(cfg.steps + 1);
        p.push(y.clone());
        p
    });

    for k in 0..cfg.steps {
        let t = cfg.time(k);
        drift_eig_into(spec, &y, t, &mut ws, &mut f0);
        match cfg.integrator {
            Integrator::Euler => {
                for (yk, fk) in y.iter_mut().zip(&f0) {
                    *yk -= h * fk;
                }
            }
            Integrator::Heun => {
                for ((p, yk), fk) in pred.iter_mut().zip(&y).zip(&f0) {
                    *p = yk - h * fk;
                }
                drift_eig_into(spec, &pred, cfg.time(k + 1), &mut ws, &mut f1);
                for ((yk, a), b) in y.iter_mut().zip(&f0).zip(&f1) {
                    *yk -= 0.5 * h * (a + b);
                }
            }
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite { trajectory, step: k + 1 });
        }
        if let Some(p) = path.as_mut() {
            p.push(y.clone());
        }
    }
    Ok(EigenSolution { y_final: y, path })
}

fn solve_checked(
    spec: &MixtureSpec,
    z1: ArrayView1<f64>,
    cfg: &SolveConfig,
    trajectory: usize,
) -> Result<SolveResult, FlowError> {
    if z1.len() != spec.dim() {
        return Err(GmmError::DimensionMismatch { expected: spec.dim(), got: z1.len() }.into());
    }
    let y1 = spec.to_eigen(z1);
    let sol = solve_eigen(spec, y1.as_slice().unwrap(), cfg, trajectory)?;
    let back = |v: &[f64]| spec.from_eigen(ArrayView1::from(v));
    let z_final = back(&sol.y_final);
    let path = sol.path.map(|p| {
        let mut states: Vec<Array1<f64>> = p.iter().map(|v| back(v)).collect();
        // Keep the endpoints bit-identical to the caller's input and the returned result.
        states[0] = z1.to_owned();
        *states.last_mut().unwrap() = z_final.clone();
        states
    });
    Ok(SolveResult { z_final, path, trajectory_index: trajectory })
}

/// Explicit Euler, `z^{k+1} = z^k - h f(z^k, 1 - k h)`.
pub fn euler_solve(spec: &MixtureSpec, z1: ArrayView1<f64>, cfg: &SolveConfig) -> Result<SolveResult, FlowError> {
    if cfg.integrator != Integrator::Euler {
        return Err(FlowError::IntegratorMismatch { expected: Integrator::Euler, got: cfg.integrator });
    }
    solve_checked(spec, z1, cfg, 0)
}

/// Explicit trapezoidal rule (Heun) on the same grid.
pub fn heun_solve(spec: &MixtureSpec, z1: ArrayView1<f64>, cfg: &SolveConfig) -> Result<SolveResult, FlowError> {
    if cfg.integrator != Integrator::Heun {
        return Err(FlowError::IntegratorMismatch { expected: Integrator::Heun, got: cfg.integrator });
    }
    solve_checked(spec, z1, cfg, 0)
}

/// Dispatches on `cfg.integrator`.
pub fn solve(spec: &MixtureSpec, z1: ArrayView1<f64>, cfg: &SolveConfig) -> Result<SolveResult, FlowError> {
    solve_checked(spec, z1, cfg, 0)
}

/// Exact flow of a one-component mixture: `z_t = M_t^{1/2} z_1 + (1-t) z_0`.
pub fn closed_form_single_component(
    spec: &MixtureSpec,
    z1: ArrayView1<f64>,
    t: f64,
) -> Result<Array1<f64>, FlowError> {
    if spec.components() != 1 {
        return Err(FlowError::NotSingleComponent(spec.components()));
    }
    if z1.len() != spec.dim() {
        return Err(GmmError::DimensionMismatch { expected: spec.dim(), got: z1.len() }.into());
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(GmmError::TimeOutOfRange(t).into());
    }
    let y1 = spec.to_eigen(z1);
    let tc = spec.time_covariance(t);
    let mu = spec.means_eig().row(0).to_owned();
    let y = Array1::from_iter((0..spec.dim()).map(|k| tc.m[k].sqrt() * y1[k] + (1.0 - t) * mu[k]));
    Ok(spec.from_eigen(y.view()))
}

/// Initial state of trajectory `m`: standard normal from substream `(seed, m)`.
pub fn initial_state(d: usize, seed: u64, m: usize) -> Array1<f64> {
    gaussian_vector(d, &mut RngStream::new(seed, m as u64))
}

/// Solves `n_traj` trajectories; output is ordered by trajectory and does not
/// depend on `workers`. The first failing trajectory (by index) is reported.
pub fn batch_solve(
    spec: &MixtureSpec,
    n_traj: usize,
    cfg: &SolveConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<SolveResult>, FlowError> {
    if n_traj == 0 {
        return Err(FlowError::NoTrajectories);
    }
    indexed_map(workers, n_traj, |m| {
        let z1 = initial_state(spec.dim(), seed, m);
        solve_checked(spec, z1.view(), cfg, m)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_orthogonal, CovarianceSpec};
    use ndarray::{array, Array2};

    fn random_instance(d: usize, j: usize, seed: u64) -> MixtureSpec {
        let mut rng = RngStream::new(seed, 0);
        let means = Array2::from_shape_fn((j, d), |_| rng.uniform(-0.5, 0.5));
        let u = random_orthogonal(d, &mut rng).unwrap();
        let lambda: Vec<f64> = (0..d).map(|_| rng.uniform(0.2, 0.8)).collect();
        MixtureSpec::new(means, CovarianceSpec::eigen_factored(&u, lambda).unwrap()).unwrap()
    }

    #[test]
    fn drift_of_standard_gaussian() {
        let spec = MixtureSpec::new(array![[0.0, 0.0]], CovarianceSpec::isotropic(1.0).unwrap()).unwrap();
        let z = array![0.7, -1.3];
        for &t in &[0.0, 0.25, 0.5, 0.9, 1.0] {
            let f = drift(&spec, z.view(), t).unwrap();
            let c = (2.0 * t - 1.0) / (2.0 * (t * t - t + 1.0));
            for k in 0..2 {
                assert!((f[k] - c * z[k]).abs() < 1e-15);
            }
        }
        assert!(drift(&spec, z.view(), 0.5).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn drift_at_t1_is_regular() {
        let spec = random_instance(4, 5, 1);
        let z = array![0.3, -0.2, 1.0, 0.5];
        let f = drift(&spec, z.view(), 1.0).unwrap();
        let mean = spec.means().mean_axis(ndarray::Axis(0)).unwrap();
        for k in 0..4 {
            assert!((f[k] - (0.5 * z[k] - mean[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn drift_matches_singular_form_away_from_t1() {
        // b(t) = -1/(1-t), σ²(t) = 1 + 2t/(1-t) = (1+t)/(1-t).
        let spec = random_instance(3, 4, 2);
        let z = array![0.4, -0.9, 0.2];
        let t = 0.3;
        let s = spec.exact_score(z.view(), t).unwrap();
        let b = -1.0 / (1.0 - t);
        let sigma2 = 1.0 + 2.0 * t / (1.0 - t);
        let expected = &z * b - &(s * (0.5 * sigma2));
        let f = drift(&spec, z.view(), t).unwrap();
        for k in 0..3 {
            assert!((f[k] - expected[k]).abs() <= 1e-12 * expected[k].abs().max(1.0));
        }
    }

    #[test]
    fn single_euler_step_uses_t1_drift() {
        let spec = random_instance(3, 3, 3);
        let z1 = array![0.5, 0.1, -0.4];
        let r = euler_solve(&spec, z1.view(), &SolveConfig::euler(1).unwrap()).unwrap();
        let mean = spec.means().mean_axis(ndarray::Axis(0)).unwrap();
        let expected = &z1 - &(&z1 * 0.5 - &mean);
        for k in 0..3 {
            assert!((r.z_final[k] - expected[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn integrator_mismatch_is_rejected() {
        let spec = random_instance(2, 2, 4);
        let z1 = array![0.0, 0.0];
        assert!(matches!(
            euler_solve(&spec, z1.view(), &SolveConfig::heun(4).unwrap()),
            Err(FlowError::IntegratorMismatch { .. })
        ));
        assert_eq!(SolveConfig::euler(0), Err(FlowError::InvalidSteps));
    }

    #[test]
    fn path_endpoints() {
        let spec = random_instance(3, 2, 5);
        let z1 = array![1.0, -1.0, 0.5];
        let cfg = SolveConfig::heun(10).unwrap().with_path();
        let r = heun_solve(&spec, z1.view(), &cfg).unwrap();
        let path = r.path.unwrap();
        assert_eq!(path.len(), 11);
        assert_eq!(path[0], z1);
        assert_eq!(path[10], r.z_final);
    }

    #[test]
    fn closed_form_endpoints() {
        let mu = array![[0.3, -0.2]];
        let spec = MixtureSpec::new(mu.clone(), CovarianceSpec::diagonal(vec![0.25, 0.16]).unwrap()).unwrap();
        let z1 = array![1.0, 2.0];
        let z0 = closed_form_single_component(&spec, z1.view(), 0.0).unwrap();
        assert!((z0[0] - (0.5 + 0.3)).abs() < 1e-15);
        assert!((z0[1] - (0.8 - 0.2)).abs() < 1e-15);
        assert_eq!(closed_form_single_component(&spec, z1.view(), 1.0).unwrap(), z1);
        let two = random_instance(2, 2, 6);
        assert!(matches!(
            closed_form_single_component(&two, z1.view(), 0.5),
            Err(FlowError::NotSingleComponent(2))
        ));
    }

    #[test]
    fn closed_form_solves_the_ode() {
        let spec = random_instance(4, 1, 7);
        let z1 = array![0.3, -1.2, 0.8, 0.1];
        let t = 0.5;
        let h = 1e-5;
        let zp = closed_form_single_component(&spec, z1.view(), t + h).unwrap();
        let zm = closed_form_single_component(&spec, z1.view(), t - h).unwrap();
        let fd = (&zp - &zm) / (2.0 * h);
        let z = closed_form_single_component(&spec, z1.view(), t).unwrap();
        let f = drift(&spec, z.view(), t).unwrap();
        let err = (&fd - &f).mapv(|x| x * x).sum().sqrt() / f.mapv(|x| x * x).sum().sqrt();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn heun_and_euler_converge_together() {
        let spec = random_instance(3, 4, 8);
        let z1 = array![0.2, 0.9, -0.6];
        let gaps: Vec<f64> = [10, 100, 1000]
            .iter()
            .map(|&k| {
                let e = euler_solve(&spec, z1.view(), &SolveConfig::euler(k).unwrap()).unwrap().z_final;
                let h = heun_solve(&spec, z1.view(), &SolveConfig::heun(k).unwrap()).unwrap().z_final;
                (&e - &h).mapv(|x| x * x).sum().sqrt()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn batch_is_independent_of_worker_count() {
        let spec = random_instance(5, 3, 9);
        let cfg = SolveConfig::euler(20).unwrap();
        let a = batch_solve(&spec, 4, &cfg, 11, 1).unwrap();
        let b = batch_solve(&spec, 4, &cfg, 11, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, r)| r.trajectory_index == i));
        assert_eq!(batch_solve(&spec, 0, &cfg, 11, 1), Err(FlowError::NoTrajectories));
    }
}
