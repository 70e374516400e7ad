//! Two-hidden-layer GELU perceptron for learning the noise-to-sample map,
//! trained with AdamW (decoupled weight decay) and validation early stopping.
//!
//! Parameters live in one flat vector laid out as
//! `W1 (d×H), b1, W2 (H×H), b2, W3 (H×d), b3`; a layer computes `x W + b`
//! on row-major batches.

use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::LabeledDataset;
use crate::linalg::RngStream;

const MAGIC: &[u8; 4] = b"GFMP";
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss {last})")]
    NonFiniteLoss { epoch: usize, batch: usize, last: f64 },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub d: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(d: usize, hidden: usize, seed: u64) -> Self {
        Self { d, hidden, lr: 1e-3, weight_decay: 1e-4, batch_size: 256, patience: 50, max_epochs: 1000, seed }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |m: &str| Err(MlpError::InvalidConfig(m.to_string()));
        if self.d == 0 || self.hidden == 0 {
            return bad("d and hidden must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch_size, patience and max_epochs must be positive");
        }
        Ok(())
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `Φ(x) + x φ(x)`.
pub fn gelu_prime(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Offsets of the six parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    d: usize,
    h: usize,
}

impl Layout {
    fn shapes(&self) -> [(usize, usize); 6] {
        let (d, h) = (self.d, self.h);
        [(d, h), (1, h), (h, h), (1, h), (h, d), (1, d)]
    }

    fn len(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn offsets(&self) -> [usize; 7] {
        let mut o = [0; 7];
        for (i, (r, c)) in self.shapes().iter().enumerate() {
            o[i + 1] = o[i] + r * c;
        }
        o
    }

    /// True for entries of weight matrices, false for biases.
    fn weight_mask(&self) -> Vec<bool> {
        let o = self.offsets();
        let mut mask = vec![false; self.len()];
        for b in [0, 2, 4] {
            mask[o[b]..o[b + 1]].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

struct Views<'a> {
    w: [ArrayView2<'a, f64>; 3],
    b: [ArrayView1<'a, f64>; 3],
}

fn views(layout: Layout, theta: &[f64]) -> Views<'_> {
    let o = layout.offsets();
    let s = layout.shapes();
    let m = |i: usize| ArrayView2::from_shape(s[i], &theta[o[i]..o[i + 1]]).unwrap();
    let v = |i: usize| ArrayView1::from(&theta[o[i]..o[i + 1]]);
    Views { w: [m(0), m(2), m(4)], b: [v(1), v(3), v(5)] }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub params: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: u64,
    pub epoch: usize,
    pub best: Option<(usize, f64, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Epoch 0 holds full-pass losses of the initial parameters; later train
/// losses are sample-weighted means of the minibatch losses of that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
        }
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    d: usize,
    hidden: usize,
    config: MlpConfig,
    epoch: usize,
    val_loss: Option<f64>,
    n_params: usize,
}

impl MlpModel {
    /// Weights uniform in `±√(1/fan_in)`, zero biases, drawn from substream `(seed, 0)`.
    pub fn new(config: MlpConfig) -> Result<Self, MlpError> {
        config.validate()?;
        let layout = Layout { d: config.d, h: config.hidden };
        let mut params = vec![0.0; layout.len()];
        let o = layout.offsets();
        let mut rng = RngStream::new(config.seed, 0);
        for (b, fan_in) in [(0, config.d), (2, config.hidden), (4, config.hidden)] {
            let a = (1.0 / fan_in as f64).sqrt();
            params[o[b]..o[b + 1]].iter_mut().for_each(|p| *p = rng.uniform(-a, a));
        }
        Ok(Self::with_params(config, params))
    }

    /// Wraps explicit parameters (for hand-set or loaded models).
    pub fn with_params(config: MlpConfig, params: Vec<f64>) -> Self {
        let n = params.len();
        Self { config, params, adam_m: vec![0.0; n], adam_v: vec![0.0; n], step: 0, epoch: 0, best: None }
    }

    fn layout(&self) -> Layout {
        Layout { d: self.config.d, h: self.config.hidden }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn weight_mask(&self) -> Vec<bool> {
        self.layout().weight_mask()
    }

    /// Parameter block `i` in `W1, b1, W2, b2, W3, b3` order.
    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.layout().offsets();
        &mut self.params[o[i]..o[i + 1]]
    }

    fn check_dim(&self, got: usize) -> Result<(), MlpError> {
        if got != self.config.d {
            return Err(MlpError::DimensionMismatch { expected: self.config.d, got });
        }
        Ok(())
    }

    /// Applies the network to each row of `y`.
    pub fn forward(&self, y: ArrayView2<f64>) -> Result<Array2<f64>, MlpError> {
        self.check_dim(y.ncols())?;
        let v = views(self.layout(), &self.params);
        let h1 = (y.dot(&v.w[0]) + v.b[0]).mapv(gelu);
        let h2 = (h1.dot(&v.w[1]) + v.b[1]).mapv(gelu);
        Ok(h2.dot(&v.w[2]) + v.b[2])
    }

    pub fn forward_one(&self, y: ArrayView1<f64>) -> Result<Array1<f64>, MlpError> {
        let out = self.forward(y.insert_axis(Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    /// Mean squared error over rows and coordinates, with its gradient
    /// written into `grad`.
    pub fn loss_and_grad(&self, y: ArrayView2<f64>, x: ArrayView2<f64>, grad: &mut [f64]) -> Result<f64, MlpError> {
        self.check_dim(y.ncols())?;
        self.check_dim(x.ncols())?;
        let layout = self.layout();
        let v = views(layout, &self.params);
        let a1 = y.dot(&v.w[0]) + v.b[0];
        let h1 = a1.mapv(gelu);
        let a2 = h1.dot(&v.w[1]) + v.b[1];
        let h2 = a2.mapv(gelu);
        let resid = h2.dot(&v.w[2]) + v.b[2] - x;
        let count = resid.len() as f64;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / count;

        let g_out = resid * (2.0 / count);
        let g_w3 = h2.t().dot(&g_out);
        let g_b3 = g_out.sum_axis(Axis(0));
        let mut g_a2 = g_out.dot(&v.w[2].t());
        g_a2.zip_mut_with(&a2, |g, a| *g *= gelu_prime(*a));
        let g_w2 = h1.t().dot(&g_a2);
        let g_b2 = g_a2.sum_axis(Axis(0));
        let mut g_a1 = g_a2.dot(&v.w[1].t());
        g_a1.zip_mut_with(&a1, |g, a| *g *= gelu_prime(*a));
        let g_w1 = y.t().dot(&g_a1);
        let g_b1 = g_a1.sum_axis(Axis(0));

        let o = layout.offsets();
        let blocks: [Vec<f64>; 6] = [
            g_w1.iter().copied().collect(),
            g_b1.to_vec(),
            g_w2.iter().copied().collect(),
            g_b2.to_vec(),
            g_w3.iter().copied().collect(),
            g_b3.to_vec(),
        ];
        for (i, b) in blocks.iter().enumerate() {
            grad[o[i]..o[i + 1]].copy_from_slice(b);
        }
        Ok(loss)
    }

    pub fn loss(&self, y: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<f64, MlpError> {
        self.check_dim(x.ncols())?;
        let pred = self.forward(y)?;
        Ok((pred - x).iter().map(|r| r * r).sum::<f64>() / x.len() as f64)
    }

    /// One AdamW update: weights first shrink by `1 - lr·wd`, then every
    /// parameter takes the bias-corrected Adam step.
    pub fn adamw_step(&mut self, grad: &[f64]) {
        let lr = self.config.lr;
        let shrink = 1.0 - lr * self.config.weight_decay;
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let mask = self.weight_mask();
        for i in 0..self.params.len() {
            if mask[i] {
                self.params[i] *= shrink;
            }
            let g = grad[i];
            self.adam_m[i] = BETA1 * self.adam_m[i] + (1.0 - BETA1) * g;
            self.adam_v[i] = BETA2 * self.adam_v[i] + (1.0 - BETA2) * g * g;
            let mh = self.adam_m[i] / c1;
            let vh = self.adam_v[i] / c2;
            self.params[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }

    /// Trains until validation loss has not improved for `patience` epochs or
    /// `max_epochs` is reached, then restores the best-validation parameters.
    pub fn train(&mut self, train: &LabeledDataset, val: &LabeledDataset) -> Result<TrainReport, MlpError> {
        if train.is_empty() || val.is_empty() {
            return Err(MlpError::EmptyDataset);
        }
        self.check_dim(train.dim())?;
        self.check_dim(val.dim())?;
        let cfg = self.config.clone();
        let n = train.len();
        let mut grad = vec![0.0; self.params.len()];
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffler = RngStream::new(cfg.seed, 1);

        let initial_val = self.loss(val.y.view(), val.x.view())?;
        let mut history = vec![EpochRecord {
            epoch: 0,
            train_loss: self.loss(train.y.view(), train.x.view())?,
            val_loss: initial_val,
        }];
        self.best = Some((0, initial_val, self.params.clone()));
        let mut stop = StopReason::MaxEpochs;
        let mut last = history[0].train_loss;

        for epoch in 1..=cfg.max_epochs {
            shuffler.shuffle(&mut order);
            let mut total = 0.0;
            for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
                let yb = train.y.select(Axis(0), idx);
                let xb = train.x.select(Axis(0), idx);
                let loss = self.loss_and_grad(yb.view(), xb.view(), &mut grad)?;
                if !loss.is_finite() {
                    return Err(MlpError::NonFiniteLoss { epoch, batch, last });
                }
                last = loss;
                total += loss * idx.len() as f64;
                self.adamw_step(&grad);
            }
            let val_loss = self.loss(val.y.view(), val.x.view())?;
            if !val_loss.is_finite() {
                return Err(MlpError::NonFiniteLoss { epoch, batch: usize::MAX, last });
            }
            self.epoch = epoch;
            history.push(EpochRecord { epoch, train_loss: total / n as f64, val_loss });
            let (best_epoch, best_val, _) = self.best.as_ref().unwrap();
            if val_loss < *best_val {
                self.best = Some((epoch, val_loss, self.params.clone()));
            } else if epoch - best_epoch >= cfg.patience {
                stop = StopReason::Patience;
                break;
            }
        }
        let (best_epoch, best_val_loss, best_params) = self.best.clone().unwrap();
        self.params = best_params;
        Ok(TrainReport { history, best_epoch, best_val_loss, stop })
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), MlpError> {
        let header = CheckpointHeader {
            d: self.config.d,
            hidden: self.config.hidden,
            config: self.config.clone(),
            epoch: self.epoch,
            val_loss: self.best.as_ref().map(|b| b.1),
            n_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, MlpError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MlpError::BadCheckpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        header.config.validate()?;
        let expected = Layout { d: header.d, h: header.hidden }.len();
        if header.n_params != expected || header.config.d != header.d || header.config.hidden != header.hidden {
            return Err(MlpError::BadCheckpoint("inconsistent header".into()));
        }
        let mut buf = vec![0u8; expected * 8];
        r.read_exact(&mut buf)?;
        let params = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut model = Self::with_params(header.config, params);
        model.epoch = header.epoch;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        Self::read_checkpoint(io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Root mean squared residual over pairs and coordinates.
pub fn evaluate(model: &MlpModel, ds: &LabeledDataset) -> Result<f64, MlpError> {
    Ok(model.loss(ds.y.view(), ds.x.view())?.sqrt())
}
