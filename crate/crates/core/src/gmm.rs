//! Equal-weight Gaussian mixture with a shared SPD covariance, and the exact
//! quantities of its noised marginals `N((1-t) z_0^j, (1-t)²Σ + tI)`.
//!
//! Everything that involves `M_t = (1-t)²Σ + tI` is evaluated in the fixed
//! eigenbasis of `Σ`, where `M_t` is diagonal with entries
//! `m_k(t) = (1-t)² λ_k + t`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{log_sum_exp, softmax_into, CovarianceSpec, LinalgError, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("mixture needs at least one component")]
    NoComponents,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("the Monte-Carlo score kernel is singular at t = 0")]
    SingularTime,
    #[error("component index {index} out of range for {count} components")]
    ComponentOutOfRange { index: usize, count: usize },
    #[error("declared data radius {declared} is smaller than the largest mean norm {actual}")]
    RadiusTooSmall { declared: f64, actual: f64 },
    #[error("empty data set")]
    EmptyData,
    #[error(transparent)]
    Covariance(#[from] LinalgError),
}

/// `(1/J) Σ_j N(z_0^j, Σ)` with immutable, precomputed eigenbasis data.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    means: Array2<f64>,
    cov: CovarianceSpec,
    lambda: Array1<f64>,
    basis: Option<Array2<f64>>,
    means_eig: Array2<f64>,
    data_radius: f64,
}

/// Serializable form of a [`MixtureSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFile {
    pub means: Vec<Vec<f64>>,
    pub cov: CovarianceSpec,
    /// Defaults to the largest mean norm.
    #[serde(default)]
    pub data_radius: Option<f64>,
}

impl MixtureSpec {
    /// `means` holds one component mean per row.
    pub fn new(means: Array2<f64>, cov: CovarianceSpec) -> Result<Self, GmmError> {
        let (j, d) = means.dim();
        if j == 0 {
            return Err(GmmError::NoComponents);
        }
        if d == 0 {
            return Err(GmmError::Covariance(LinalgError::EmptyDimension));
        }
        if let Some(cd) = cov.fixed_dim() {
            if cd != d {
                return Err(GmmError::DimensionMismatch { expected: d, got: cd });
            }
        }
        cov.validate()?;
        let lambda = cov.eigenvalues(d);
        let basis = cov.basis();
        let means_eig = match &basis {
            Some(u) => means.dot(u),
            None => means.clone(),
        };
        let data_radius = means
            .outer_iter()
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        Ok(Self { means, cov, lambda, basis, means_eig, data_radius })
    }

    /// Declares a data radius `M` at least as large as every mean norm.
    pub fn with_data_radius(mut self, radius: f64) -> Result<Self, GmmError> {
        if radius < self.data_radius {
            return Err(GmmError::RadiusTooSmall { declared: radius, actual: self.data_radius });
        }
        self.data_radius = radius;
        Ok(self)
    }

    pub fn from_file(file: &MixtureFile) -> Result<Self, GmmError> {
        let j = file.means.len();
        if j == 0 {
            return Err(GmmError::NoComponents);
        }
        let d = file.means[0].len();
        if let Some(bad) = file.means.iter().find(|m| m.len() != d) {
            return Err(GmmError::DimensionMismatch { expected: d, got: bad.len() });
        }
        let flat: Vec<f64> = file.means.iter().flatten().copied().collect();
        let means = Array2::from_shape_vec((j, d), flat).expect("rectangular means");
        let spec = Self::new(means, file.cov.clone())?;
        match file.data_radius {
            Some(r) => spec.with_data_radius(r),
            None => Ok(spec),
        }
    }

    pub fn to_file(&self) -> MixtureFile {
        MixtureFile {
            means: self.means.outer_iter().map(|r| r.to_vec()).collect(),
            cov: self.cov.clone(),
            data_radius: Some(self.data_radius),
        }
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn components(&self) -> usize {
        self.means.nrows()
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    /// Means expressed in the eigenbasis of `Σ` (`Uᵀ z_0^j` per row).
    pub fn means_eig(&self) -> ArrayView2<'_, f64> {
        self.means_eig.view()
    }

    pub fn cov(&self) -> &CovarianceSpec {
        &self.cov
    }

    pub fn eigenvalues(&self) -> ArrayView1<'_, f64> {
        self.lambda.view()
    }

    pub fn basis(&self) -> Option<&Array2<f64>> {
        self.basis.as_ref()
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `M` of the bounded-data assumption.
    pub fn data_radius(&self) -> f64 {
        self.data_radius
    }

    /// `Uᵀ z`.
    pub fn to_eigen(&self, z: ArrayView1<f64>) -> Array1<f64> {
        match &self.basis {
            Some(u) => u.t().dot(&z),
            None => z.to_owned(),
        }
    }

    /// `U y`.
    pub fn from_eigen(&self, y: ArrayView1<f64>) -> Array1<f64> {
        match &self.basis {
            Some(u) => u.dot(&y),
            None => y.to_owned(),
        }
    }

    fn check_point(&self, z: ArrayView1<f64>, t: f64) -> Result<(), GmmError> {
        if z.len() != self.dim() {
            return Err(GmmError::DimensionMismatch { expected: self.dim(), got: z.len() });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(GmmError::TimeOutOfRange(t));
        }
        Ok(())
    }

    fn check_component(&self, j: usize) -> Result<(), GmmError> {
        if j >= self.components() {
            return Err(GmmError::ComponentOutOfRange { index: j, count: self.components() });
        }
        Ok(())
    }

    /// `log e_j(y, t)` for every component, with `y` in eigen coordinates and
    /// `inv_m = 1 / m_k(t)`.
    pub fn log_kernels_eig(&self, y: &[f64], t: f64, inv_m: &[f64], out: &mut [f64]) {
        let a = 1.0 - t;
        let d = y.len();
        for (j, o) in out.iter_mut().enumerate() {
            let mu = self.means_eig.row(j);
            let mu = mu.as_slice().expect("standard layout");
            let mut acc = [0.0f64; 4];
            let chunks = d / 4;
            for c in 0..chunks {
                let k = 4 * c;
                for l in 0..4 {
                    let r = y[k + l] - a * mu[k + l];
                    acc[l] += r * r * inv_m[k + l];
                }
            }
            let mut q = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for k in (4 * chunks)..d {
                let r = y[k] - a * mu[k];
                q += r * r * inv_m[k];
            }
            *o = -0.5 * q;
        }
    }

    /// `Σ_j w_j μ_j` in eigen coordinates.
    pub fn weighted_mean_eig(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &wj) in w.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            let mu = self.means_eig.row(j);
            let mu = mu.as_slice().expect("standard layout");
            for (o, &m) in out.iter_mut().zip(mu) {
                *o += wj * m;
            }
        }
    }

    pub fn time_covariance(&self, t: f64) -> TimeCovariance {
        TimeCovariance::new(self.lambda.view(), t)
    }

    /// Log-density of the time-`t` marginal at `z`.
    pub fn marginal_log_density(&self, z: ArrayView1<f64>, t: f64) -> Result<f64, GmmError> {
        self.check_point(z, t)?;
        let y = self.to_eigen(z);
        let tc = self.time_covariance(t);
        let inv_m = tc.inverse();
        let mut log_e = vec![0.0; self.components()];
        self.log_kernels_eig(y.as_slice().unwrap(), t, &inv_m, &mut log_e);
        let log_norm: f64 = tc.m.iter().map(|m| (2.0 * std::f64::consts::PI * m).ln()).sum();
        Ok(log_sum_exp(&log_e) - (self.components() as f64).ln() - 0.5 * log_norm)
    }

    pub fn weights(&self, z: ArrayView1<f64>, t: f64) -> Result<WeightVector, GmmError> {
        self.check_point(z, t)?;
        let y = self.to_eigen(z);
        Ok(self.weights_eig(y.as_slice().unwrap(), t))
    }

    fn weights_eig(&self, y: &[f64], t: f64) -> WeightVector {
        let inv_m = self.time_covariance(t).inverse();
        let mut log_e = vec![0.0; self.components()];
        self.log_kernels_eig(y, t, &inv_m, &mut log_e);
        WeightVector::from_log(log_e)
    }

    /// `S(z, t) = -M_t⁻¹ z + (1-t) M_t⁻¹ Σ_j w_j z_0^j`.
    pub fn exact_score(&self, z: ArrayView1<f64>, t: f64) -> Result<Array1<f64>, GmmError> {
        self.check_point(z, t)?;
        let y = self.to_eigen(z);
        let inv_m = self.time_covariance(t).inverse();
        let w = self.weights_eig(y.as_slice().unwrap(), t);
        let mut mbar = vec![0.0; self.dim()];
        self.weighted_mean_eig(&w.w, &mut mbar);
        let s = Array1::from_iter(
            (0..self.dim()).map(|k| inv_m[k] * (-y[k] + (1.0 - t) * mbar[k])),
        );
        Ok(self.from_eigen(s.view()))
    }

    /// `∇_z w_j = (1-t) M_t⁻¹ w_j Σ_{j'} (z_0^j - z_0^{j'}) w_{j'}`.
    pub fn weight_gradient(&self, z: ArrayView1<f64>, t: f64, j: usize) -> Result<Array1<f64>, GmmError> {
        self.check_point(z, t)?;
        self.check_component(j)?;
        let y = self.to_eigen(z);
        let inv_m = self.time_covariance(t).inverse();
        let w = self.weights_eig(y.as_slice().unwrap(), t);
        let mut mbar = vec![0.0; self.dim()];
        self.weighted_mean_eig(&w.w, &mut mbar);
        let mu = self.means_eig.row(j);
        let scale = (1.0 - t) * w.w[j];
        let g = Array1::from_iter((0..self.dim()).map(|k| scale * inv_m[k] * (mu[k] - mbar[k])));
        Ok(self.from_eigen(g.view()))
    }

    /// `∂_t log e_j` for every component, in eigen coordinates.
    fn log_kernel_time_derivatives(&self, y: &[f64], t: f64) -> Vec<f64> {
        let a = 1.0 - t;
        let tc = self.time_covariance(t);
        (0..self.components())
            .map(|j| {
                let mu = self.means_eig.row(j);
                let mut total = 0.0;
                for k in 0..self.dim() {
                    let m = tc.m[k];
                    let r = y[k] - a * mu[k];
                    let dm = 1.0 - 2.0 * a * self.lambda[k];
                    total += -r * mu[k] / m + 0.5 * r * r * dm / (m * m);
                }
                total
            })
            .collect()
    }

    /// `∂w_j/∂t` at fixed `z`, as `w_j (ℓ̇_j - Σ_{j'} w_{j'} ℓ̇_{j'})`.
    pub fn weight_time_derivative(&self, z: ArrayView1<f64>, t: f64, j: usize) -> Result<f64, GmmError> {
        self.check_point(z, t)?;
        self.check_component(j)?;
        let y = self.to_eigen(z);
        let y = y.as_slice().unwrap();
        let w = self.weights_eig(y, t);
        let rates = self.log_kernel_time_derivatives(y, t);
        let avg: f64 = w.w.iter().zip(&rates).map(|(w, r)| w * r).sum();
        Ok(w.w[j] * (rates[j] - avg))
    }

    /// `n` draws: component uniformly at random, then `N(z_0^ξ, Σ)`.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Array2<f64> {
        let d = self.dim();
        let sqrt_lambda = self.lambda.mapv(f64::sqrt);
        let mut out = Array2::<f64>::zeros((n, d));
        for mut row in out.outer_iter_mut() {
            let xi = rng.below(self.components() as u64) as usize;
            let g = Array1::from_iter((0..d).map(|k| sqrt_lambda[k] * rng.standard_normal()));
            let offset = self.from_eigen(g.view());
            row.assign(&(&self.means.row(xi) + &offset));
        }
        out
    }
}

/// Normalized mixture weights with their log-domain kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub log_e: Vec<f64>,
    pub w: Vec<f64>,
}

impl WeightVector {
    pub fn from_log(log_e: Vec<f64>) -> Self {
        let mut w = vec![0.0; log_e.len()];
        softmax_into(&log_e, &mut w);
        Self { log_e, w }
    }
}

/// Diagonal of `M_t` in the eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCovariance {
    pub t: f64,
    pub m: Array1<f64>,
}

impl TimeCovariance {
    pub fn new(lambda: ArrayView1<f64>, t: f64) -> Self {
        let a = 1.0 - t;
        Self { t, m: lambda.mapv(|l| a * a * l + t) }
    }

    pub fn inverse(&self) -> Vec<f64> {
        self.m.iter().map(|m| 1.0 / m).collect()
    }
}

/// Training-free score from raw samples `x_j` (one per row):
/// `Σ_j -(z - (1-t) x_j)/t · w̄_j` with `w̄ = softmax(-‖z - (1-t)x_j‖² / 2t)`.
pub fn mc_score(data: ArrayView2<f64>, z: ArrayView1<f64>, t: f64) -> Result<Array1<f64>, GmmError> {
    if data.nrows() == 0 {
        return Err(GmmError::EmptyData);
    }
    if data.ncols() != z.len() {
        return Err(GmmError::DimensionMismatch { expected: data.ncols(), got: z.len() });
    }
    if t == 0.0 {
        return Err(GmmError::SingularTime);
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(GmmError::TimeOutOfRange(t));
    }
    let a = 1.0 - t;
    let log_w: Vec<f64> = data
        .outer_iter()
        .map(|x| {
            let sq: f64 = z.iter().zip(x.iter()).map(|(zk, xk)| (zk - a * xk).powi(2)).sum();
            -sq / (2.0 * t)
        })
        .collect();
    let mut w = vec![0.0; log_w.len()];
    softmax_into(&log_w, &mut w);
    let mut s = Array1::<f64>::zeros(z.len());
    for (x, &wj) in data.outer_iter().zip(&w) {
        for k in 0..z.len() {
            s[k] -= wj * (z[k] - a * x[k]) / t;
        }
    }
    Ok(s)
}
