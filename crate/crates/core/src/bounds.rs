//! Computable constants of the a-priori error analysis for the reverse flow.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// Spectral extremes of `Σ`, data radius `M`, `‖z_1‖₂` and step size `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub data_radius: f64,
    pub z1_norm: f64,
    pub h: f64,
}

impl BoundInputs {
    pub fn new(lambda_min: f64, lambda_max: f64, data_radius: f64) -> Self {
        Self { lambda_min, lambda_max, data_radius, z1_norm: 0.0, h: 0.0 }
    }

    pub fn with_z1_norm(mut self, z1_norm: f64) -> Self {
        self.z1_norm = z1_norm;
        self
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.lambda_min > 0.0
            && self.lambda_min <= self.lambda_max
            && self.data_radius >= 0.0
            && self.z1_norm >= 0.0
            && self.h >= 0.0
    }

    /// `min{λ_min, ½}`, the floor of the spectrum of `M_t` over `t ∈ [0, 1]`.
    fn floor(&self) -> f64 {
        self.lambda_min.min(0.5)
    }
}

/// Uniform Lipschitz constant of the drift in `z`:
/// `(1 + 2λ_max + 8M²) / (4 min{λ_min², ¼})`.
pub fn drift_lipschitz(b: &BoundInputs) -> f64 {
    let m = b.data_radius;
    (1.0 + 2.0 * b.lambda_max + 8.0 * m * m) / (4.0 * b.floor().powi(2))
}

/// Bound on the linear part of the drift for `Σ = σI`:
/// `(1 + 2σ) / (2 min{σ, ½})`.
pub fn linear_part_lipschitz(sigma: f64) -> f64 {
    (1.0 + 2.0 * sigma) / (2.0 * sigma.min(0.5))
}

/// `κ = max{√λ_max, 1} / min{√λ_min, ¼}`; exact paths obey `‖z_t‖₂ ≤ κ (M + ‖z_1‖₂)`.
pub fn envelope_kappa(b: &BoundInputs) -> f64 {
    b.lambda_max.sqrt().max(1.0) / b.lambda_min.sqrt().min(0.25)
}

pub fn envelope_bound(b: &BoundInputs) -> f64 {
    envelope_kappa(b) * (b.data_radius + b.z1_norm)
}

/// Constants of the weight-derivative bounds:
/// `‖∇w_j‖ ≤ grad · w_j` and `|∂_t w_j| ≤ time · (‖z‖ + M)² · w_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightBoundConstants {
    pub grad: f64,
    pub time: f64,
}

pub fn weight_bound_constants(b: &BoundInputs) -> WeightBoundConstants {
    WeightBoundConstants {
        grad: 2.0 * b.data_radius / b.floor(),
        time: (2.0 + 2.0 * b.lambda_max) / b.floor().powi(2),
    }
}

/// Pathwise Euler error bound up to its unknown absolute constant.
pub fn euler_bound_shape(b: &BoundInputs) -> f64 {
    let lip = drift_lipschitz(b);
    let m = b.data_radius;
    let inner = 1.0 + envelope_bound(b) + m;
    lip.exp() * (1.0 + b.lambda_max).powi(2) * (1.0 + m) * inner * inner
        / ((1.0 + 2.0 * b.lambda_max + 8.0 * m * m) * b.floor())
        * b.h
}

/// `(σ, L(σ))` pairs over `grid`.
pub fn lcurve(grid: &[f64]) -> Vec<(f64, f64)> {
    grid.iter().map(|&s| (s, linear_part_lipschitz(s))).collect()
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Writes `sigma,L` rows.
pub fn write_lcurve_csv<W: Write>(mut w: W, curve: &[(f64, f64)]) -> io::Result<()> {
    writeln!(w, "sigma,L")?;
    for (s, l) in curve {
        writeln!(w, "{s},{l}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lipschitz_substitutions() {
        assert!((drift_lipschitz(&BoundInputs::new(0.5, 0.5, 1.0)) - 10.0).abs() < 1e-12);
        assert!((drift_lipschitz(&BoundInputs::new(0.1, 0.1, 1.0)) - 230.0).abs() < 1e-9);
        assert!((drift_lipschitz(&BoundInputs::new(1.0, 1.0, 0.0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn linear_part_values() {
        assert_eq!(linear_part_lipschitz(0.5), 2.0);
        assert!((linear_part_lipschitz(0.1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn lcurve_falls_then_rises() {
        let curve = lcurve(&linspace(0.05, 1.5, 30));
        let argmin = curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, _)| i)
            .unwrap();
        assert!(argmin > 0 && argmin < curve.len() - 1);
        for i in 1..=argmin {
            assert!(curve[i].1 < curve[i - 1].1);
        }
        for i in (argmin + 1)..curve.len() {
            assert!(curve[i].1 > curve[i - 1].1);
        }
        // A grid containing 0.5 has its unique minimum there.
        let grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let c = lcurve(&grid);
        let best = c.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!(best.0, 0.5);
        assert_eq!(c.iter().filter(|p| p.1 == best.1).count(), 1);
    }

    #[test]
    fn kappa_substitutions() {
        assert_eq!(envelope_kappa(&BoundInputs::new(1.0, 1.0, 0.0)), 4.0);
        let b = BoundInputs::new(0.25, 0.25, 1.0).with_z1_norm(1.0);
        assert_eq!(envelope_kappa(&b), 4.0);
        assert_eq!(envelope_bound(&b), 8.0);
        assert_eq!(envelope_kappa(&BoundInputs::new(1.0, 4.0, 0.0)), 8.0);
    }

    #[test]
    fn weight_constants() {
        let c = weight_bound_constants(&BoundInputs::new(0.5, 0.5, 1.0));
        assert_eq!((c.grad, c.time), (4.0, 12.0));
        assert_eq!(weight_bound_constants(&BoundInputs::new(0.5, 0.5, 0.0)).grad, 0.0);
        let c = weight_bound_constants(&BoundInputs::new(0.1, 0.5, 1.0));
        assert!((c.grad - 20.0).abs() < 1e-12);
        assert!((c.time - 300.0).abs() < 1e-9);
    }

    #[test]
    fn bound_shape_is_linear_in_h() {
        let b = BoundInputs::new(0.2, 0.5, 1.0).with_z1_norm(3.0);
        let r = euler_bound_shape(&b.with_h(0.02)) / euler_bound_shape(&b.with_h(0.01));
        assert!((r - 2.0).abs() < 1e-12);
        assert!(b.is_valid());
        assert!(!BoundInputs::new(0.5, 0.1, 1.0).is_valid());
    }

    #[test]
    fn lcurve_csv_format() {
        let mut buf = Vec::new();
        write_lcurve_csv(&mut buf, &lcurve(&[0.5, 0.1])).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("sigma,L\n0.5,2\n0.1,"));
    }
}
