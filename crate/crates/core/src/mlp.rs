//! Multilayer perceptron classifier, written from scratch in `f64`.
//!
//! Hidden layers are `dense -> batchnorm -> ReLU -> inverted dropout`; the
//! output layer is `dense -> softmax` trained with cross-entropy and Adam.
//! All kernels are single-threaded with a fixed summation order, so a seed
//! fixes the whole training trajectory.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Row;
use crate::featurize::{fit_scaler, FeatureError, FeatureVector, ScaleMode, Scaler};
use crate::generator::rng_for;
use crate::schedule::UnrollFactor;

/// Hidden layer widths.
pub const HIDDEN_DIMS: [usize; 4] = [500, 400, 250, 100];
/// Dropout rate after each hidden layer.
pub const DROPOUT_RATES: [f64; 4] = [0.12, 0.10, 0.04, 0.07];
/// Probabilities are clamped here before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

pub const MODEL_FORMAT: &str = "unroll-tuner-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training or validation split is empty")]
    EmptySplit,
    #[error("model has no fitted scaler")]
    ModelNotTrained,
    #[error("unsupported model file: {0}")]
    FormatVersionMismatch(String),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (x, &b) in o.iter_mut().zip(other.row(k)) {
                    *x += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (x, &bv) in out.row_mut(i).iter_mut().zip(b) {
                    *x += a * bv;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    fn add_row_vector(&mut self, v: &[f64]) {
        for i in 0..self.rows {
            for (x, b) in self.row_mut(i).iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, x) in s.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        s
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let r = out.row_mut(i);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in r.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in r.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Mean cross-entropy of `probs` against class indices.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> f64 {
    let n = probs.rows as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -probs.get(i, c).max(LOG_CLAMP).ln())
        .sum::<f64>()
        / n
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Present on hidden layers only.
    pub norm: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub classes: Vec<UnrollFactor>,
    pub scaler: Option<Scaler>,
    pub layer_dims: Vec<usize>,
    pub dropout_rates: Vec<f64>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub layers: Vec<Layer>,
}

/// Forward-pass mode: training draws dropout masks from the generator and
/// normalises with batch statistics.
pub enum Mode<'a, R: Rng> {
    Train(&'a mut R),
    Infer,
}

/// Intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Cache {
    input: Matrix,
    hidden: Vec<HiddenCache>,
    pub probs: Matrix,
}

#[derive(Debug, Clone)]
struct HiddenCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    /// Pre-ReLU batchnorm output.
    pre_relu: Matrix,
    /// Scaled dropout mask (all ones outside training).
    mask: Matrix,
    /// Layer output after dropout.
    out: Matrix,
}

/// Gradients, in parameter order (see [`MlpModel::params`]).
pub type Grads = Vec<Vec<f64>>;

impl MlpModel {
    /// Architecture with the standard hidden widths and dropout rates.
    pub fn new(input_width: usize, classes: Vec<UnrollFactor>, seed: u64) -> Self {
        let mut dims = vec![input_width];
        dims.extend(HIDDEN_DIMS);
        dims.push(classes.len());
        MlpModel::with_dims(&dims, &DROPOUT_RATES, classes, seed)
    }

    /// Uniform weights in `[-l, l]` with `l = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases, unit gamma, zero beta.
    pub fn with_dims(dims: &[usize], dropout: &[f64], classes: Vec<UnrollFactor>, seed: u64) -> Self {
        assert!(dims.len() >= 2 && dims[0] >= 1);
        assert_eq!(dropout.len(), dims.len() - 2, "one dropout rate per hidden layer");
        assert_eq!(*dims.last().unwrap(), classes.len());
        let mut rng = rng_for(seed, 0, 6);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weights: Matrix {
                        rows: fan_in,
                        cols: fan_out,
                        data,
                    },
                    bias: vec![0.0; fan_out],
                    norm: (l + 1 < n_layers).then(|| BatchNorm {
                        gamma: vec![1.0; fan_out],
                        beta: vec![0.0; fan_out],
                        running_mean: vec![0.0; fan_out],
                        running_var: vec![1.0; fan_out],
                    }),
                }
            })
            .collect();
        MlpModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: "mlp".into(),
            classes,
            scaler: None,
            layer_dims: dims.to_vec(),
            dropout_rates: dropout.to_vec(),
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            layers,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0]
    }

    /// Parameter tensors in order `W, b, gamma, beta` per layer.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.weights.data);
            v.push(&l.bias);
            if let Some(n) = &l.norm {
                v.push(&n.gamma);
                v.push(&n.beta);
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.weights.data);
            v.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                v.push(&mut n.gamma);
                v.push(&mut n.beta);
            }
        }
        v
    }

    pub fn forward<R: Rng>(&self, x: &Matrix, mut mode: Mode<'_, R>) -> Result<Cache, MlpError> {
        if x.cols != self.input_width() {
            return Err(MlpError::DimensionMismatch {
                expected: self.input_width(),
                found: x.cols,
            });
        }
        let n = x.rows as f64;
        let mut hidden = Vec::new();
        let mut act = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers[..last].iter().enumerate() {
            let mut z = act.matmul(&layer.weights);
            z.add_row_vector(&layer.bias);
            let bn = layer.norm.as_ref().expect("hidden layer has batchnorm");
            let (mean, var) = match mode {
                Mode::Train(_) => {
                    let mean: Vec<f64> = z.column_sums().iter().map(|s| s / n).collect();
                    let mut var = vec![0.0; z.cols];
                    for i in 0..z.rows {
                        for ((v, x), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                            *v += (x - m) * (x - m);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= n);
                    (mean, var)
                }
                Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect();
            let mut xhat = z;
            let mut pre = Matrix::zeros(xhat.rows, xhat.cols);
            for i in 0..xhat.rows {
                let (xr, pr) = (xhat.row_mut(i), &mut pre.data[i * bn.gamma.len()..(i + 1) * bn.gamma.len()]);
                for j in 0..xr.len() {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    pr[j] = bn.gamma[j] * xr[j] + bn.beta[j];
                }
            }
            let rate = self.dropout_rates[l];
            let mut mask = Matrix {
                rows: pre.rows,
                cols: pre.cols,
                data: vec![1.0; pre.data.len()],
            };
            if let Mode::Train(rng) = &mut mode {
                if rate > 0.0 {
                    let keep = 1.0 / (1.0 - rate);
                    for m in mask.data.iter_mut() {
                        *m = if rng.random::<f64>() < rate { 0.0 } else { keep };
                    }
                }
            }
            let out = Matrix {
                rows: pre.rows,
                cols: pre.cols,
                data: pre
                    .data
                    .iter()
                    .zip(&mask.data)
                    .map(|(y, m)| y.max(0.0) * m)
                    .collect(),
            };
            act = out.clone();
            hidden.push(HiddenCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                pre_relu: pre,
                mask,
                out,
            });
        }
        let mut logits = act.matmul(&self.layers[last].weights);
        logits.add_row_vector(&self.layers[last].bias);
        Ok(Cache {
            input: x.clone(),
            hidden,
            probs: softmax_rows(&logits),
        })
    }

    /// Inference-mode class probabilities.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix, MlpError> {
        Ok(self.forward::<rand_xoshiro::Xoshiro256PlusPlus>(x, Mode::Infer)?.probs)
    }

    /// Gradients of the mean cross-entropy, given a forward cache.
    pub fn backward(&self, cache: &Cache, labels: &[usize]) -> Grads {
        let n = cache.probs.rows as f64;
        let mut delta = cache.probs.clone();
        for (i, &c) in labels.iter().enumerate() {
            delta.data[i * delta.cols + c] -= 1.0;
        }
        delta.data.iter_mut().for_each(|d| *d /= n);

        let mut grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { &cache.input } else { &cache.hidden[l - 1].out };
            // delta is d(loss)/d(z_l) here
            let dz = if let Some(bn) = &layer.norm {
                let h = &cache.hidden[l];
                // through dropout and ReLU
                let mut dy = delta;
                for ((d, m), y) in dy.data.iter_mut().zip(&h.mask.data).zip(&h.pre_relu.data) {
                    *d = if *y > 0.0 { *d * m } else { 0.0 };
                }
                let mut dgamma = vec![0.0; dy.cols];
                let dbeta = dy.column_sums();
                for i in 0..dy.rows {
                    for (j, (d, xh)) in dy.row(i).iter().zip(h.xhat.row(i)).enumerate() {
                        dgamma[j] += d * xh;
                    }
                }
                // dxhat = dy * gamma; dz = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                let mut dxhat = dy;
                for i in 0..dxhat.rows {
                    for (d, g) in dxhat.row_mut(i).iter_mut().zip(&bn.gamma) {
                        *d *= g;
                    }
                }
                let sum_d = dxhat.column_sums();
                let mut sum_dx = vec![0.0; dxhat.cols];
                for i in 0..dxhat.rows {
                    for (j, (d, xh)) in dxhat.row(i).iter().zip(h.xhat.row(i)).enumerate() {
                        sum_dx[j] += d * xh;
                    }
                }
                let mut dz = dxhat;
                for i in 0..dz.rows {
                    let xr = h.xhat.row(i).to_vec();
                    for (j, d) in dz.row_mut(i).iter_mut().enumerate() {
                        *d = h.inv_std[j] / n * (n * *d - sum_d[j] - xr[j] * sum_dx[j]);
                    }
                }
                grads[l] = vec![Vec::new(), Vec::new(), dgamma, dbeta];
                dz
            } else {
                grads[l] = vec![Vec::new(), Vec::new()];
                delta
            };
            grads[l][0] = input.matmul_tn(&dz).data;
            grads[l][1] = dz.column_sums();
            delta = if l > 0 {
                dz.matmul_nt(&layer.weights)
            } else {
                Matrix::zeros(0, 0)
            };
        }
        grads.into_iter().flatten().collect()
    }

    /// Train-mode loss and gradients for one batch.
    pub fn loss_and_gradients<R: Rng>(
        &self,
        x: &Matrix,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<(f64, Grads, Cache), MlpError> {
        if labels.len() != x.rows {
            return Err(MlpError::DimensionMismatch {
                expected: x.rows,
                found: labels.len(),
            });
        }
        let cache = self.forward(x, Mode::Train(rng))?;
        let loss = cross_entropy(&cache.probs, labels);
        let grads = self.backward(&cache, labels);
        Ok((loss, grads, cache))
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn update_running_stats(&mut self, cache: &Cache) {
        let mom = self.bn_momentum;
        for (layer, h) in self.layers.iter_mut().zip(&cache.hidden) {
            let bn = layer.norm.as_mut().unwrap();
            for j in 0..bn.running_mean.len() {
                bn.running_mean[j] = mom * bn.running_mean[j] + (1.0 - mom) * h.batch_mean[j];
                bn.running_var[j] = mom * bn.running_var[j] + (1.0 - mom) * h.batch_var[j];
            }
        }
    }

    /// Factor predicted for a feature vector, through the attached scaler.
    pub fn predict_class(&self, fv: &FeatureVector) -> Result<UnrollFactor, MlpError> {
        let scaler = self.scaler.as_ref().ok_or(MlpError::ModelNotTrained)?;
        let x = Matrix::from_rows(&[scaler.transform(&fv.to_row())]);
        let p = self.predict_proba(&x)?;
        Ok(self.classes[argmax(p.row(0))])
    }

    /// Class indices for already-scaled rows.
    pub fn predict_indices(&self, x: &Matrix) -> Result<Vec<usize>, MlpError> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows).map(|i| argmax(p.row(i))).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    /// Smallest validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub scale_mode: ScaleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            min_delta: 1e-4,
            max_epochs: 500,
            seed: 0,
            scale_mode: ScaleMode::Standardize,
        }
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &MlpModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Grads, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

/// Scaled design matrix with class-index labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Examples {
    fn select(&self, idx: &[usize]) -> Examples {
        let mut x = Matrix::zeros(idx.len(), self.x.cols);
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
        }
        Examples {
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

fn accuracy_of(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// Mini-batch Adam with early stopping on validation loss. Returns the
/// snapshot with the lowest validation loss and the per-epoch history.
pub fn train_examples(
    mut model: MlpModel,
    train: &Examples,
    valid: &Examples,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochStats>), MlpError> {
    if train.y.is_empty() || valid.y.is_empty() {
        return Err(MlpError::EmptySplit);
    }
    let mut adam = Adam::new(&model);
    let mut dropout_rng = rng_for(cfg.seed, 0, 7);
    let mut history = Vec::new();
    let mut best: Option<(f64, MlpModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng_for(cfg.seed, epoch as u64, 8));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = train.select(chunk);
            let (loss, grads, cache) = model.loss_and_gradients(&batch.x, &batch.y, &mut dropout_rng)?;
            loss_sum += loss * chunk.len() as f64;
            correct += (0..cache.probs.rows)
                .filter(|&i| argmax(cache.probs.row(i)) == batch.y[i])
                .count();
            model.update_running_stats(&cache);
            adam.step(&mut model, &grads, cfg);
        }
        let vp = model.predict_proba(&valid.x)?;
        let valid_loss = cross_entropy(&vp, &valid.y);
        let vpred: Vec<usize> = (0..vp.rows).map(|i| argmax(vp.row(i))).collect();
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.y.len() as f64,
            train_accuracy: correct as f64 / train.y.len() as f64,
            valid_loss,
            valid_accuracy: accuracy_of(&vpred, &valid.y),
        };
        log::debug!("{stats:?}");
        history.push(stats);
        // the snapshot tracks the lowest loss; patience resets only on a
        // decrease larger than min_delta
        let best_loss = best.as_ref().map_or(f64::INFINITY, |(b, _)| *b);
        if valid_loss < best_loss - cfg.min_delta {
            since_best = 0;
        } else {
            since_best += 1;
        }
        if valid_loss < best_loss {
            best = Some((valid_loss, model.clone()));
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), history))
}

/// Class index of each row's label within `classes`.
pub fn label_indices(rows: &[Row], classes: &[UnrollFactor]) -> Result<Vec<usize>, MlpError> {
    rows.iter()
        .map(|r| {
            classes
                .iter()
                .position(|c| *c == r.label)
                .ok_or(MlpError::Feature(FeatureError::LabelNotInClassSet(r.label.get())))
        })
        .collect()
}

/// Scales rows and maps labels to class indices.
pub fn examples(rows: &[Row], scaler: &Scaler, classes: &[UnrollFactor]) -> Result<Examples, MlpError> {
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(&r.features.to_row())).collect();
    let mut x = Matrix::from_rows(&scaled);
    x.cols = scaler.output_width();
    Ok(Examples {
        x,
        y: label_indices(rows, classes)?,
    })
}

/// Fits the scaler on `train`, builds the standard architecture and trains.
pub fn fit(
    train: &[Row],
    valid: &[Row],
    classes: &[UnrollFactor],
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochStats>), MlpError> {
    if train.is_empty() || valid.is_empty() {
        return Err(MlpError::EmptySplit);
    }
    let rows: Vec<Vec<f64>> = train.iter().map(|r| r.features.to_row()).collect();
    let scaler = fit_scaler(&rows, cfg.scale_mode)?;
    let tr = examples(train, &scaler, classes)?;
    let va = examples(valid, &scaler, classes)?;
    let mut model = MlpModel::new(scaler.output_width(), classes.to_vec(), cfg.seed);
    model.scaler = Some(scaler);
    train_examples(model, &tr, &va, cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MlpError + '_ {
    move |source| MlpError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Checks the `format`/`version`/`kind` header of a model container.
pub fn check_container(text: &str, kind: &str) -> Result<serde_json::Value, MlpError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| MlpError::CorruptFile(e.to_string()))?;
    let format = v.get("format").and_then(|f| f.as_str());
    let version = v.get("version").and_then(|f| f.as_u64());
    if format != Some(MODEL_FORMAT) || version != Some(MODEL_VERSION as u64) {
        return Err(MlpError::FormatVersionMismatch(format!(
            "format {format:?}, version {version:?}"
        )));
    }
    let found = v.get("kind").and_then(|k| k.as_str());
    if found != Some(kind) {
        return Err(MlpError::FormatVersionMismatch(format!(
            "expected a {kind} model, found {found:?}"
        )));
    }
    Ok(v)
}

impl MlpModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, MlpError> {
        let v = check_container(text, "mlp")?;
        let m: MlpModel = serde_json::from_value(v).map_err(|e| MlpError::CorruptFile(e.to_string()))?;
        m.check_shapes()?;
        Ok(m)
    }

    fn check_shapes(&self) -> Result<(), MlpError> {
        let bad = |m: String| Err(MlpError::CorruptFile(m));
        let d = &self.layer_dims;
        if d.len() < 2 || self.layers.len() != d.len() - 1 {
            return bad("layer count does not match layer_dims".into());
        }
        if *d.last().unwrap() != self.classes.len() || self.dropout_rates.len() != d.len() - 2 {
            return bad("class list or dropout rates do not match layer_dims".into());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &layer.weights;
            if w.rows != d[l] || w.cols != d[l + 1] || w.data.len() != w.rows * w.cols || layer.bias.len() != d[l + 1] {
                return bad(format!("layer {l} has the wrong shape"));
            }
            let hidden = l + 1 < self.layers.len();
            match &layer.norm {
                Some(bn) if hidden => {
                    if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                        .iter()
                        .any(|v| v.len() != d[l + 1])
                        || bn.running_var.iter().any(|v| *v < 0.0)
                    {
                        return bad(format!("layer {l} batchnorm has the wrong shape"));
                    }
                }
                None if !hidden => {}
                _ => return bad(format!("layer {l} batchnorm placement")),
            }
        }
        if let Some(s) = &self.scaler {
            if s.output_width() != d[0] {
                return bad("scaler width does not match the input layer".into());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        MlpModel::from_json(&text)
    }
}

pub fn save_model(m: &MlpModel, path: &Path) -> Result<(), MlpError> {
    m.save(path)
}

pub fn load_model(path: &Path) -> Result<MlpModel, MlpError> {
    MlpModel::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn classes() -> Vec<UnrollFactor> {
        UnrollFactor::ALL.to_vec()
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let z = Matrix::zeros(2, 7);
        let p = softmax_rows(&z);
        assert!(p.data.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));
        let a = Matrix::from_rows(&[vec![1.0, -2.0, 3.5, 0.0, 0.1, 7.0, -1.0]]);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|x| *x += 123.0);
        let (pa, pb) = (softmax_rows(&a), softmax_rows(&b));
        for (x, y) in pa.data.iter().zip(&pb.data) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((pa.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_anchors() {
        let uniform = softmax_rows(&Matrix::zeros(3, 7));
        assert!((cross_entropy(&uniform, &[0, 3, 6]) - 7f64.ln()).abs() < 1e-12);
        let mut onehot = Matrix::zeros(1, 7);
        onehot.data[2] = 1.0;
        assert!(cross_entropy(&onehot, &[2]).abs() < 1e-12);
        // clamped, not infinite
        assert!((cross_entropy(&onehot, &[0]) - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]]);
        assert_eq!(a.matmul(&b).data, vec![7.0, -1.0, 16.0, -1.0]);
        let at = Matrix::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]);
        assert_eq!(at.matmul_tn(&b).data, a.matmul(&b).data);
        let bt = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]);
        assert_eq!(a.matmul_nt(&bt).data, a.matmul(&b).data);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpModel::new(30, classes(), 5);
        assert_eq!(a, MlpModel::new(30, classes(), 5));
        assert_ne!(a, MlpModel::new(30, classes(), 6));
        assert_eq!(a.layer_dims, vec![30, 500, 400, 250, 100, 7]);
        assert_eq!((a.layers[0].weights.rows, a.layers[0].weights.cols), (30, 500));
        let limit = (6.0f64 / 530.0).sqrt();
        assert!(a.layers[0].weights.data.iter().all(|w| w.abs() <= limit));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn adam_single_step_matches_hand_evaluation() {
        let mut m = MlpModel::with_dims(&[1, 1], &[], vec![UnrollFactor::NONE], 0);
        m.layers[0].weights.data[0] = 1.0;
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&m);
        adam.step(&mut m, &vec![vec![1.0], vec![0.0]], &cfg);
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1
        let expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((m.layers[0].weights.data[0] - expected).abs() < 1e-15);
        assert_eq!(m.layers[0].bias[0], 0.0);
    }

    #[test]
    fn infer_is_repeatable_and_rows_sum_to_one() {
        let m = MlpModel::with_dims(&[4, 8, 7], &[0.5], classes(), 1);
        let x = Matrix::from_rows(&[vec![0.1, -0.2, 0.3, 1.0], vec![2.0, 0.0, -1.0, 0.5]]);
        let a = m.predict_proba(&x).unwrap();
        assert_eq!(a, m.predict_proba(&x).unwrap());
        for i in 0..2 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.row(i).iter().all(|p| *p > 0.0 && *p < 1.0));
        }
        assert!(matches!(
            m.predict_proba(&Matrix::zeros(1, 3)),
            Err(MlpError::DimensionMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn batchnorm_train_output_is_normalised() {
        let m = MlpModel::with_dims(&[3, 5, 7], &[0.0], classes(), 2);
        let x = Matrix::from_rows(&(0..16).map(|i| vec![i as f64, (i * i) as f64 / 10.0, -(i as f64)]).collect::<Vec<_>>());
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let c = m.forward(&x, Mode::Train(&mut rng)).unwrap();
        let xh = &c.hidden[0].xhat;
        for j in 0..xh.cols {
            let col: Vec<f64> = (0..xh.rows).map(|i| xh.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            // brute-force pre-activation variance of this unit
            let z: Vec<f64> = (0..16)
                .map(|i| (0..3).map(|k| x.get(i, k) * m.layers[0].weights.get(k, j)).sum::<f64>())
                .collect();
            let zm = z.iter().sum::<f64>() / 16.0;
            let zv = z.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - zv / (zv + m.bn_eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn model_round_trip_and_tamper_detection() {
        let mut m = MlpModel::with_dims(&[2, 4, 3, 7], &[0.1, 0.2], classes(), 3);
        m.layers[0].norm.as_mut().unwrap().running_mean[1] = 0.123456789012345;
        let text = m.to_json();
        let back = MlpModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        let header: Vec<&str> = text.lines().skip(1).take(3).map(str::trim).collect();
        assert_eq!(header, [r#""format": "unroll-tuner-model","#, r#""version": 1,"#, r#""kind": "mlp","#]);
        let wrong_kind = text.replacen(r#""kind": "mlp""#, r#""kind": "tree""#, 1);
        assert!(MlpModel::from_json(&wrong_kind).is_err());
        let tampered = text.replacen("\"rows\": 2", "\"rows\": 3", 1);
        assert!(matches!(MlpModel::from_json(&tampered), Err(MlpError::CorruptFile(_))));
        let wrong_version = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            MlpModel::from_json(&wrong_version),
            Err(MlpError::FormatVersionMismatch(_))
        ));
        assert!(m.predict_class(&FeatureVector::default()).is_err());
    }

    fn toy_batch() -> (Matrix, Vec<usize>) {
        let x = Matrix::from_rows(&[
            vec![0.3, -1.2, 0.8],
            vec![1.5, 0.4, -0.7],
            vec![-0.9, 0.2, 0.1],
            vec![0.0, 1.1, 1.3],
            vec![-1.4, -0.5, 0.6],
        ]);
        (x, vec![0, 2, 1, 2, 0])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = MlpModel::with_dims(&[3, 4, 3, 3], &[0.2, 0.1], classes()[..3].to_vec(), 11);
        let (x, y) = toy_batch();
        let loss_at = |m: &MlpModel| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(42);
            m.loss_and_gradients(&x, &y, &mut rng).unwrap().0
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(42);
        let (_, grads, _) = model.loss_and_gradients(&x, &y, &mut rng).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (t, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = model.clone();
                plus.params_mut()[t][i] += h;
                let mut minus = model.clone();
                minus.params_mut()[t][i] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut m = MlpModel::with_dims(&[2, 200, 7], &[0.3], classes(), 4);
        let x = Matrix::from_rows(&(0..50).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>());
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let c = m.forward(&x, Mode::Train(&mut rng)).unwrap();
        let mask = &c.hidden[0].mask.data;
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "mask mean {mean}");
        let dropped = mask.iter().filter(|v| **v == 0.0).count() as f64 / mask.len() as f64;
        assert!((dropped - 0.3).abs() < 0.02);
        // running statistics move toward the batch statistics
        m.update_running_stats(&c);
        let bn = m.layers[0].norm.as_ref().unwrap();
        let h = &c.hidden[0];
        assert!((bn.running_mean[0] - 0.1 * h.batch_mean[0]).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * h.batch_var[0])).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_with_patience_one() {
        // all-zero inputs: validation loss is stuck after the first epoch
        let m = MlpModel::with_dims(&[2, 3, 7], &[0.0], classes(), 0);
        let train = Examples { x: Matrix::zeros(4, 2), y: vec![0, 0, 0, 0] };
        let cfg = TrainConfig { patience: 1, max_epochs: 50, learning_rate: 0.0, ..Default::default() };
        let (_, hist) = train_examples(m.clone(), &train, &train.clone(), &cfg).unwrap();
        assert_eq!(hist.len(), 2);
        let empty = Examples { x: Matrix::zeros(0, 2), y: vec![] };
        assert!(matches!(train_examples(m, &empty, &train, &cfg), Err(MlpError::EmptySplit)));
    }

    #[test]
    fn learns_separable_classes_deterministically() {
        // class c sits at a distinct corner of a small cube
        let mut rng = rng_for(1, 0, 9);
        let make = |rng: &mut Xoshiro256PlusPlus, n: usize| {
            let mut rows = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 7;
                rows.push((0..3).map(|b| ((c >> b) & 1) as f64 * 2.0 + rng.random_range(-0.3..0.3)).collect());
                y.push(c);
            }
            Examples { x: Matrix::from_rows(&rows), y }
        };
        let (tr, va, te) = (make(&mut rng, 350), make(&mut rng, 70), make(&mut rng, 140));
        let cfg = TrainConfig { max_epochs: 40, patience: 5, seed: 3, ..Default::default() };
        let m = MlpModel::with_dims(&[3, 32, 16, 7], &[0.1, 0.05], classes(), 3);
        let (a, ha) = train_examples(m.clone(), &tr, &va, &cfg).unwrap();
        let (b, hb) = train_examples(m, &tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let acc = accuracy_of(&a.predict_indices(&te.x).unwrap(), &te.y);
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    use rand::SeedableRng;
}
