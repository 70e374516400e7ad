//! Noise-to-sample pairs `(y_m, x_m)` from the reverse ODE, with persistence
//! and seeded splits.

use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::{solve_eigen, FlowError, SolveConfig};
use crate::gmm::MixtureSpec;
use crate::linalg::{gaussian_vector, RngStream};
use crate::parallel::indexed_map;

const MAGIC: &[u8; 4] = b"GFLB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("pair count must be at least 1")]
    EmptyCount,
    #[error("pair {index}: {source}")]
    Solve { index: usize, source: FlowError },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("split of {total} pairs leaves the {part} set empty")]
    EmptySplit { total: usize, part: &'static str },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated dataset file")]
    Truncated,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("malformed provenance: {0}")]
    Provenance(#[from] serde_json::Error),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for LabelError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            LabelError::Truncated
        } else {
            LabelError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_digest: String,
    pub solve: SolveConfig,
    pub seed: u64,
}

/// `count × d` arrays of initial states `y` and endpoints `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub y: Array2<f64>,
    pub x: Array2<f64>,
    pub provenance: Provenance,
}

/// SHA-256 over the means, covariance and solver configuration.
pub fn spec_digest(spec: &MixtureSpec, cfg: &SolveConfig) -> String {
    let mut h = Sha256::new();
    h.update((spec.components() as u64).to_le_bytes());
    h.update((spec.dim() as u64).to_le_bytes());
    for v in spec.means() {
        h.update(v.to_le_bytes());
    }
    h.update(serde_json::to_vec(spec.cov()).expect("covariance serializes"));
    h.update(serde_json::to_vec(cfg).expect("solve config serializes"));
    hex::encode(h.finalize())
}

/// Pair `m` starts from `y_m` drawn on substream `(seed, m)`.
pub fn generate_labels(
    spec: &MixtureSpec,
    count: usize,
    cfg: &SolveConfig,
    seed: u64,
    workers: usize,
) -> Result<LabeledDataset, LabelError> {
    if count == 0 {
        return Err(LabelError::EmptyCount);
    }
    let d = spec.dim();
    let plain = SolveConfig { record_path: false, ..*cfg };
    let pairs = indexed_map(workers, count, |m| {
        let y = gaussian_vector(d, &mut RngStream::new(seed, m as u64));
        let y_eig = spec.to_eigen(y.view());
        let sol = solve_eigen(spec, y_eig.as_slice().unwrap(), &plain, m)
            .map_err(|source| LabelError::Solve { index: m, source })?;
        Ok::<_, LabelError>((y, spec.from_eigen(ArrayView1::from(&sol.y_final))))
    });
    let mut ys = Array2::zeros((count, d));
    let mut xs = Array2::zeros((count, d));
    for (m, pair) in pairs.into_iter().enumerate() {
        let (y, x) = pair?;
        ys.row_mut(m).assign(&y);
        xs.row_mut(m).assign(&x);
    }
    Ok(LabeledDataset {
        y: ys,
        x: xs,
        provenance: Provenance { spec_digest: spec_digest(spec, &plain), solve: plain, seed },
    })
}

impl LabeledDataset {
    pub fn new(y: Array2<f64>, x: Array2<f64>, provenance: Provenance) -> Result<Self, LabelError> {
        if y.dim() != x.dim() {
            return Err(LabelError::DimensionMismatch { expected: y.ncols(), got: x.ncols() });
        }
        if y.nrows() == 0 {
            return Err(LabelError::EmptyCount);
        }
        Ok(Self { y, x, provenance })
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            y: self.y.select(ndarray::Axis(0), idx),
            x: self.x.select(ndarray::Axis(0), idx),
            provenance: self.provenance.clone(),
        }
    }

    /// SHA-256 over dimensions, pair bits and provenance.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for v in self.y.iter().chain(self.x.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.provenance).expect("provenance serializes"));
        hex::encode(h.finalize())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), LabelError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * self.dim() * 16);
        for (y, x) in self.y.outer_iter().zip(self.x.outer_iter()) {
            for v in y.iter().chain(x.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        let prov = serde_json::to_vec(&self.provenance)?;
        w.write_all(&(prov.len() as u64).to_le_bytes())?;
        w.write_all(&prov)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, LabelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LabelError::BadMagic);
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(LabelError::BadVersion(version));
        }
        let d = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if d == 0 || count == 0 {
            return Err(LabelError::EmptyCount);
        }
        let mut y = Array2::zeros((count, d));
        let mut x = Array2::zeros((count, d));
        let mut record = vec![0u8; 16 * d];
        for m in 0..count {
            r.read_exact(&mut record)?;
            let mut vals = record.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            for k in 0..d {
                y[[m, k]] = vals.next().unwrap();
            }
            for k in 0..d {
                x[[m, k]] = vals.next().unwrap();
            }
        }
        let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut prov = vec![0u8; len];
        r.read_exact(&mut prov)?;
        let provenance = serde_json::from_slice(&prov)?;
        Ok(Self { y, x, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LabelError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Loads and checks the dimension.
    pub fn load_expecting(path: &Path, d: usize) -> Result<Self, LabelError> {
        let ds = Self::load(path)?;
        if ds.dim() != d {
            return Err(LabelError::DimensionMismatch { expected: d, got: ds.dim() });
        }
        Ok(ds)
    }

    /// Header `y_0..y_{d-1},x_0..x_{d-1}`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|k| format!("y_{k}")).collect();
        header.extend((0..d).map(|k| format!("x_{k}")));
        let mut s = header.join(",");
        s.push('\n');
        for (y, x) in self.y.outer_iter().zip(self.x.outer_iter()) {
            let row: Vec<String> = y.iter().chain(x.iter()).map(|v| format!("{v:.16e}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses [`LabeledDataset::to_csv`] output; provenance is supplied by the caller.
    pub fn from_csv(text: &str, provenance: Provenance) -> Result<Self, LabelError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LabelError::Csv("missing header".into()))?;
        let cols = header.split(',').count();
        if cols == 0 || cols % 2 != 0 {
            return Err(LabelError::Csv("header must have 2d columns".into()));
        }
        let d = cols / 2;
        let mut vals = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let before = vals.len();
            for f in line.split(',') {
                vals.push(f.trim().parse::<f64>().map_err(|e| LabelError::Csv(format!("row {i}: {e}")))?);
            }
            if vals.len() - before != cols {
                return Err(LabelError::DimensionMismatch { expected: cols, got: vals.len() - before });
            }
            rows += 1;
        }
        let both = Array2::from_shape_vec((rows, cols), vals).map_err(|e| LabelError::Csv(e.to_string()))?;
        let y = both.slice(ndarray::s![.., ..d]).to_owned();
        let x = both.slice(ndarray::s![.., d..]).to_owned();
        Self::new(y, x, provenance)
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], LabelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Split sizes: validation and test round down, the remainder goes to train.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize), LabelError> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(LabelError::InvalidFractions(fractions));
    }
    let val = (n as f64 * b + 1e-9).floor() as usize;
    let test = (n as f64 * c + 1e-9).floor() as usize;
    let train = n - val - test;
    for (size, part) in [(train, "train"), (val, "validation"), (test, "test")] {
        if size == 0 {
            return Err(LabelError::EmptySplit { total: n, part });
        }
    }
    Ok((train, val, test))
}

/// Disjoint train/validation/test subsets from a seeded permutation.
pub fn split(
    ds: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), LabelError> {
    let (train, val, _) = split_sizes(ds.len(), fractions)?;
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    RngStream::new(seed, 0).shuffle(&mut perm);
    Ok((
        ds.subset(&perm[..train]),
        ds.subset(&perm[train..train + val]),
        ds.subset(&perm[train + val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Integrator;
    use crate::linalg::CovarianceSpec;
    use ndarray::array;

    fn one_component() -> MixtureSpec {
        MixtureSpec::new(array![[0.3, -0.2, 0.5]], CovarianceSpec::diagonal(vec![0.25, 0.5, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn heun_labels_match_closed_form() {
        let spec = one_component();
        let cfg = SolveConfig::new(1000, Integrator::Heun).unwrap();
        let ds = generate_labels(&spec, 20, &cfg, 5, 0).unwrap();
        let sd = [0.5, 0.5f64.sqrt(), 1.0];
        let mu = [0.3, -0.2, 0.5];
        for (y, x) in ds.y.outer_iter().zip(ds.x.outer_iter()) {
            for k in 0..3 {
                assert!((x[k] - (sd[k] * y[k] + mu[k])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn regeneration_is_deterministic() {
        let spec = one_component();
        let cfg = SolveConfig::euler(50).unwrap();
        let a = generate_labels(&spec, 30, &cfg, 9, 1).unwrap();
        let b = generate_labels(&spec, 30, &cfg, 9, 4).unwrap();
        assert_eq!(a.digest(), b.digest());
        let again = solve_eigen(&spec, spec.to_eigen(a.y.row(7)).as_slice().unwrap(), &cfg, 7).unwrap();
        assert_eq!(spec.from_eigen(ArrayView1::from(&again.y_final)), a.x.row(7));
    }

    #[test]
    fn symmetric_pair_has_centered_samples() {
        let spec =
            MixtureSpec::new(array![[1.0, -0.5], [-1.0, 0.5]], CovarianceSpec::isotropic(0.3).unwrap()).unwrap();
        let n = 10_000;
        let ds = generate_labels(&spec, n, &SolveConfig::euler(100).unwrap(), 11, 0).unwrap();
        // Per-coordinate variance is σ + μ_k²; the mean is within 3 standard errors of 0.
        for (k, mu2) in [1.0, 0.25].iter().enumerate() {
            let mean = ds.x.column(k).sum() / n as f64;
            let se = ((0.3 + mu2) / n as f64).sqrt();
            assert!(mean.abs() < 3.0 * se, "coord {k}: {mean}");
        }
    }

    #[test]
    fn single_component_endpoint_law() {
        let spec = one_component();
        let n = 10_000;
        let ds = generate_labels(&spec, n, &SolveConfig::euler(100).unwrap(), 12, 0).unwrap();
        let lambda = [0.25, 0.5, 1.0];
        let mu = [0.3, -0.2, 0.5];
        for k in 0..3 {
            let col = ds.x.column(k);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            assert!((mean - mu[k]).abs() < 4.0 * (lambda[k] / n as f64).sqrt());
            assert!((var / lambda[k] - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn digest_tracks_inputs() {
        let spec = one_component();
        let e = SolveConfig::euler(100).unwrap();
        let base = spec_digest(&spec, &e);
        assert_ne!(base, spec_digest(&spec, &SolveConfig::euler(101).unwrap()));
        assert_ne!(base, spec_digest(&spec, &SolveConfig::heun(100).unwrap()));
        let moved = MixtureSpec::new(array![[0.3, -0.2, 0.6]], spec.cov().clone()).unwrap();
        assert_ne!(base, spec_digest(&moved, &e));
        let recov =
            MixtureSpec::new(spec.means().to_owned(), CovarianceSpec::diagonal(vec![0.25, 0.5, 0.9]).unwrap())
                .unwrap();
        assert_ne!(base, spec_digest(&recov, &e));
    }

    fn dummy(n: usize, d: usize) -> LabeledDataset {
        let y = Array2::from_shape_fn((n, d), |(i, k)| (i * d + k) as f64 * 0.1);
        let x = y.mapv(|v| -v / 3.0);
        let prov = Provenance { spec_digest: "x".into(), solve: SolveConfig::euler(10).unwrap(), seed: 1 };
        LabeledDataset::new(y, x, prov).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        assert_eq!(split_sizes(100_000, (0.8, 0.1, 0.1)).unwrap(), (80_000, 10_000, 10_000));
        assert!(matches!(split_sizes(5, (0.8, 0.1, 0.1)), Err(LabelError::EmptySplit { .. })));
        assert!(split_sizes(100, (0.8, 0.1, 0.2)).is_err());
        let ds = dummy(103, 2);
        let (a, b, c) = split(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (83, 10, 10));
        let mut firsts: Vec<i64> =
            a.y.column(0).iter().chain(b.y.column(0)).chain(c.y.column(0)).map(|v| (v * 10.0).round() as i64).collect();
        firsts.sort();
        assert_eq!(firsts, (0..103).map(|i| 2 * i).collect::<Vec<i64>>());
        let (a2, _, _) = split(&ds, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let ds = dummy(7, 3);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(LabeledDataset::read_from(&buf[..]).unwrap(), ds);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(LabeledDataset::read_from(&bad[..]), Err(LabelError::BadMagic)));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(LabeledDataset::read_from(&bad[..]), Err(LabelError::BadVersion(2))));
        assert!(matches!(LabeledDataset::read_from(&buf[..buf.len() - 40]), Err(LabelError::Truncated)));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.gflb");
        ds.save(&p).unwrap();
        assert!(matches!(LabeledDataset::load_expecting(&p, 4), Err(LabelError::DimensionMismatch { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let mut ds = dummy(3, 2);
        ds.y[[0, 0]] = std::f64::consts::PI;
        ds.x[[2, 1]] = -1.0 / 3.0;
        let back = LabeledDataset::from_csv(&ds.to_csv(), ds.provenance.clone()).unwrap();
        assert!(ds.to_csv().starts_with("y_0,y_1,x_0,x_1\n"));
        for (a, b) in ds.y.iter().chain(ds.x.iter()).zip(back.y.iter().chain(back.x.iter())) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }
}
