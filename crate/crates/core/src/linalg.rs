//! Dense numerical primitives: SPD covariance representations, a cyclic Jacobi
//! eigensolver, Haar-distributed orthogonal matrices and reproducible random
//! streams.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: max |A - A^T| = {max_asym:e}")]
    NotSymmetric { max_asym: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("eigenvalue {index} is not strictly positive: {value}")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("basis is not orthogonal: max |U^T U - I| = {max_dev:e}")]
    NotOrthogonal { max_dev: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Largest deviation of `UᵀU` from the identity.
pub fn orthogonality_defect(u: &Array2<f64>) -> f64 {
    let gram = u.t().dot(u);
    let mut worst = 0.0f64;
    for ((i, j), v) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

/// Shared covariance of the mixture components.
///
/// Every variant carries its spectrum explicitly, so `λ_min` and `λ_max` are
/// available without a decomposition. `Isotropic` is dimension-free; its
/// spectrum is materialized on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Isotropic { sigma: f64 },
    Diagonal { eigenvalues: Vec<f64> },
    EigenFactored { basis: Vec<Vec<f64>>, eigenvalues: Vec<f64> },
}

impl CovarianceSpec {
    pub fn isotropic(sigma: f64) -> Result<Self, LinalgError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index: 0, value: sigma });
        }
        Ok(Self::Isotropic { sigma })
    }

    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self, LinalgError> {
        check_spectrum(&eigenvalues)?;
        Ok(Self::Diagonal { eigenvalues })
    }

    /// `Σ = U diag(λ) Uᵀ` with the columns of `basis` as eigenvectors.
    pub fn eigen_factored(basis: &Array2<f64>, eigenvalues: Vec<f64>) -> Result<Self, LinalgError> {
        check_spectrum(&eigenvalues)?;
        let (r, c) = basis.dim();
        if r != c {
            return Err(LinalgError::NotSquare { rows: r, cols: c });
        }
        if r != eigenvalues.len() {
            return Err(LinalgError::DimensionMismatch { expected: eigenvalues.len(), got: r });
        }
        let max_dev = orthogonality_defect(basis);
        if max_dev > 1e-10 {
            return Err(LinalgError::NotOrthogonal { max_dev });
        }
        Ok(Self::EigenFactored {
            basis: basis.outer_iter().map(|row| row.to_vec()).collect(),
            eigenvalues,
        })
    }

    /// Builds the eigen-factored form of a dense SPD matrix.
    pub fn from_matrix(a: &Array2<f64>, cfg: &JacobiConfig) -> Result<Self, LinalgError> {
        let (u, lambda) = symmetric_eigendecompose(a, cfg)?;
        Self::eigen_factored(&u, lambda.to_vec())
    }

    /// Dimension fixed by the representation, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            Self::Isotropic { .. } => None,
            Self::Diagonal { eigenvalues } | Self::EigenFactored { eigenvalues, .. } => {
                Some(eigenvalues.len())
            }
        }
    }

    pub fn eigenvalues(&self, d: usize) -> Array1<f64> {
        match self {
            Self::Isotropic { sigma } => Array1::from_elem(d, *sigma),
            Self::Diagonal { eigenvalues } | Self::EigenFactored { eigenvalues, .. } => {
                Array1::from_vec(eigenvalues.clone())
            }
        }
    }

    /// Eigenbasis `U`; `None` means the identity.
    pub fn basis(&self) -> Option<Array2<f64>> {
        match self {
            Self::EigenFactored { basis, .. } => {
                let d = basis.len();
                let flat: Vec<f64> = basis.iter().flatten().copied().collect();
                Some(Array2::from_shape_vec((d, d), flat).expect("square basis"))
            }
            _ => None,
        }
    }

    pub fn lambda_min(&self) -> f64 {
        match self {
            Self::Isotropic { sigma } => *sigma,
            Self::Diagonal { eigenvalues } | Self::EigenFactored { eigenvalues, .. } => {
                eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }

    pub fn lambda_max(&self) -> f64 {
        match self {
            Self::Isotropic { sigma } => *sigma,
            Self::Diagonal { eigenvalues } | Self::EigenFactored { eigenvalues, .. } => {
                eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    pub fn to_dense(&self, d: usize) -> Array2<f64> {
        let lambda = self.eigenvalues(d);
        match self.basis() {
            None => Array2::from_diag(&lambda),
            Some(u) => {
                let scaled = &u * &lambda.view().insert_axis(ndarray::Axis(0));
                scaled.dot(&u.t())
            }
        }
    }

    /// Re-validates invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<(), LinalgError> {
        match self {
            Self::Isotropic { sigma } => Self::isotropic(*sigma).map(|_| ()),
            Self::Diagonal { eigenvalues } => check_spectrum(eigenvalues),
            Self::EigenFactored { basis, eigenvalues } => {
                check_spectrum(eigenvalues)?;
                let d = eigenvalues.len();
                if basis.len() != d || basis.iter().any(|r| r.len() != d) {
                    return Err(LinalgError::DimensionMismatch { expected: d, got: basis.len() });
                }
                let u = self.basis().expect("eigen-factored");
                let max_dev = orthogonality_defect(&u);
                if max_dev > 1e-10 {
                    return Err(LinalgError::NotOrthogonal { max_dev });
                }
                Ok(())
            }
        }
    }
}

fn check_spectrum(lambda: &[f64]) -> Result<(), LinalgError> {
    if lambda.is_empty() {
        return Err(LinalgError::EmptyDimension);
    }
    for (index, &value) in lambda.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { index, value });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobiConfig {
    /// Allowed `max |A - Aᵀ|` before the input is rejected.
    pub symmetry_tol: f64,
    /// Stop once the off-diagonal Frobenius norm is below `rel_tol · ‖A‖_F`.
    pub rel_tol: f64,
    pub max_sweeps: usize,
}

impl Default for JacobiConfig {
    fn default() -> Self {
        Self { symmetry_tol: 1e-12, rel_tol: 1e-12, max_sweeps: 100 }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns `(U, λ)` with `A ≈ U diag(λ) Uᵀ`, orthonormal columns in `U` and
/// eigenvalues in ascending order.
pub fn symmetric_eigendecompose(
    a: &Array2<f64>,
    cfg: &JacobiConfig,
) -> Result<(Array2<f64>, Array1<f64>), LinalgError> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    if n == 0 {
        return Err(LinalgError::EmptyDimension);
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if max_asym > cfg.symmetry_tol * scale.max(1.0) {
        return Err(LinalgError::NotSymmetric { max_asym });
    }

    // Work on the symmetrized copy.
    let mut m = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = cfg.rel_tol * frob;

    let off_norm = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= target || n == 1 {
            break;
        }
        if sweeps == cfg.max_sweeps {
            return Err(LinalgError::NoConvergence { sweeps, off_norm: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]));
    let lambda = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut u = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        u.column_mut(dst).assign(&v.column(src));
    }
    Ok((u, lambda))
}

/// Haar-distributed orthogonal matrix: Householder QR of a standard Gaussian
/// matrix, with the columns of `Q` rescaled by `sign(R_kk)`.
pub fn random_orthogonal(d: usize, rng: &mut RngStream) -> Result<Array2<f64>, LinalgError> {
    if d == 0 {
        return Err(LinalgError::EmptyDimension);
    }
    let mut a = Array2::<f64>::zeros((d, d));
    for x in a.iter_mut() {
        *x = rng.standard_normal();
    }
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut r_diag = vec![0.0; d];

    for k in 0..d {
        let norm = (k..d).map(|i| a[[i, k]] * a[[i, k]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            r_diag[k] = 0.0;
            continue;
        }
        let x0 = a[[k, k]];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..d).map(|i| a[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            r_diag[k] = x0;
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for j in k..d {
            let dot: f64 = (k..d).map(|i| v[i - k] * a[[i, j]]).sum();
            for i in k..d {
                a[[i, j]] -= 2.0 * v[i - k] * dot;
            }
        }
        r_diag[k] = a[[k, k]];
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{d-1}, accumulated right to left onto the identity.
    let mut q = Array2::<f64>::eye(d);
    for k in (0..d).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..d {
            let dot: f64 = (k..d).map(|i| v[i - k] * q[[i, j]]).sum();
            for i in k..d {
                q[[i, j]] -= 2.0 * v[i - k] * dot;
            }
        }
    }
    for (k, &r) in r_diag.iter().enumerate() {
        if r < 0.0 {
            q.column_mut(k).mapv_inplace(|x| -x);
        }
    }
    Ok(q)
}

/// The repeating spectrum `(0.1, 0.2, 0.3, 0.4, 0.5, 0.1, ...)` of length `d`.
pub fn cycle5_spectrum(d: usize) -> Vec<f64> {
    const PATTERN: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
    (0..d).map(|k| PATTERN[k % 5]).collect()
}

pub fn gaussian_vector(d: usize, rng: &mut RngStream) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.standard_normal()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in (4 * chunks)..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm_l2(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_linf(v: ArrayView1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `log Σ exp(x_i)` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// In-place softmax of log-weights with max subtraction.
pub fn softmax_into(log_w: &[f64], out: &mut [f64]) {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(log_w) {
        *o = (l - max).exp();
        total += *o;
    }
    let inv = 1.0 / total;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Reproducible random stream `(master_seed, stream_index)`.
///
/// Backed by ChaCha8 with the stream index selecting an independent keystream,
/// so substreams can be handed to workers in any order. Normal deviates come
/// from Box–Muller evaluated with `libm` so the bits do not depend on the
/// platform's math library.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    index: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self { seed, index, rng, spare: None }
    }

    /// Derives a child master seed from a parent seed and a path of tags.
    pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
        tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    fn next_f64_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer in `0..n` (rejection sampling).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_f64_open_low();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(d: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngStream::new(seed, 0);
        let mut b = Array2::<f64>::zeros((d, d));
        b.iter_mut().for_each(|x| *x = rng.standard_normal());
        b.t().dot(&b) + Array2::<f64>::eye(d) * 0.1
    }

    #[test]
    fn eigen_of_diagonal_is_trivial() {
        let a = Array2::from_diag(&Array1::from_vec(vec![0.5, 0.1]));
        let (u, l) = symmetric_eigendecompose(&a, &JacobiConfig::default()).unwrap();
        assert_eq!(l.to_vec(), vec![0.1, 0.5]);
        assert!((u[[1, 0]].abs() - 1.0).abs() < 1e-15);
        assert!((u[[0, 1]].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eigen_of_identity() {
        let (_, l) = symmetric_eigendecompose(&Array2::eye(4), &JacobiConfig::default()).unwrap();
        assert!(l.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn eigen_reconstructs_random_spd() {
        for seed in 0..10 {
            let a = random_spd(5, seed);
            let (u, l) = symmetric_eigendecompose(&a, &JacobiConfig::default()).unwrap();
            assert!(orthogonality_defect(&u) < 1e-12);
            assert!(l.windows(2).into_iter().all(|w| w[0] <= w[1]));
            let recon = (&u * &l.view().insert_axis(ndarray::Axis(0))).dot(&u.t());
            let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in recon.iter().zip(a.iter()) {
                assert!((x - y).abs() <= 1e-10 * scale, "{x} vs {y}");
            }
            let diag = u.t().dot(&a).dot(&u);
            for ((i, j), v) in diag.indexed_iter() {
                if i != j {
                    assert!(v.abs() < 1e-10 * scale);
                }
            }
        }
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let a = Array2::from_shape_vec((2, 2), vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(
            symmetric_eigendecompose(&a, &JacobiConfig::default()),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn eigen_reports_non_convergence() {
        let a = random_spd(6, 3);
        let cfg = JacobiConfig { max_sweeps: 1, ..JacobiConfig::default() };
        assert!(matches!(symmetric_eigendecompose(&a, &cfg), Err(LinalgError::NoConvergence { sweeps: 1, .. })));
    }

    #[test]
    fn orthogonal_one_by_one_is_unit() {
        let q = random_orthogonal(1, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(q[[0, 0]].abs(), 1.0);
    }

    #[test]
    fn orthogonal_is_orthogonal_and_deterministic() {
        let q1 = random_orthogonal(8, &mut RngStream::new(9, 0)).unwrap();
        let q2 = random_orthogonal(8, &mut RngStream::new(9, 0)).unwrap();
        assert!(orthogonality_defect(&q1) <= 1e-12);
        assert!(orthogonality_defect(&q1.t().to_owned()) <= 1e-12);
        assert_eq!(q1, q2);
        assert_ne!(q1, random_orthogonal(8, &mut RngStream::new(9, 1)).unwrap());
    }

    #[test]
    fn haar_first_entry_is_symmetric() {
        // Without the sign fix the (0,0) entry of Q is biased negative.
        let n = 4000;
        let mut sum = 0.0;
        for i in 0..n {
            let q = random_orthogonal(3, &mut RngStream::new(5, i)).unwrap();
            sum += q[[0, 0]];
        }
        // Var(Q_00) = 1/3 under Haar; 4 sigma band.
        assert!((sum / n as f64).abs() < 4.0 * (1.0f64 / 3.0 / n as f64).sqrt());
    }

    #[test]
    fn cycle5_pattern() {
        assert_eq!(cycle5_spectrum(5), vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(cycle5_spectrum(7), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.1, 0.2]);
        assert_eq!(cycle5_spectrum(1), vec![0.1]);
    }

    #[test]
    fn gaussian_vector_moments() {
        let v = gaussian_vector(100_000, &mut RngStream::new(42, 0));
        let mean = v.mean().unwrap();
        let var = v.mapv(|x| (x - mean).powi(2)).sum() / (v.len() as f64 - 1.0);
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.02, "var {var}");
    }

    #[test]
    fn gaussian_vector_deterministic_and_stream_separated() {
        let a = gaussian_vector(16, &mut RngStream::new(7, 3));
        let b = gaussian_vector(16, &mut RngStream::new(7, 3));
        let c = gaussian_vector(16, &mut RngStream::new(7, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn covariance_constructors_validate() {
        assert!(CovarianceSpec::diagonal(vec![0.1, 0.0]).is_err());
        assert!(CovarianceSpec::isotropic(-1.0).is_err());
        let skew = Array2::from_shape_vec((2, 2), vec![1.0, 0.1, 0.0, 1.0]).unwrap();
        assert!(matches!(
            CovarianceSpec::eigen_factored(&skew, vec![1.0, 1.0]),
            Err(LinalgError::NotOrthogonal { .. })
        ));
        let c = CovarianceSpec::diagonal(vec![0.3, 0.1, 0.5]).unwrap();
        assert_eq!(c.lambda_min(), 0.1);
        assert_eq!(c.lambda_max(), 0.5);
    }

    #[test]
    fn from_matrix_round_trips_dense() {
        let a = random_spd(4, 11);
        let c = CovarianceSpec::from_matrix(&a, &JacobiConfig::default()).unwrap();
        let back = c.to_dense(4);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_and_lse_are_shift_invariant() {
        let x = [1.0, -2.0, 0.5];
        let shifted: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        softmax_into(&x, &mut a);
        softmax_into(&shifted, &mut b);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-15);
        }
        assert!((log_sum_exp(&shifted) - 1000.0 - log_sum_exp(&x)).abs() < 1e-12);
    }
}
