//! MLP refiner for the predicted low-frequency component.
//!
//! Hidden layers are `affine -> batch-norm -> tanh`, followed by a final
//! affine layer. Training minimizes mean squared error with Adam over
//! seeded mini-batches, so identical inputs and seed give bit-identical
//! weights.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PostprocessError;
use crate::data::Series;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    /// Input and output length (the forecast horizon).
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_split: f64,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            horizon: 96,
            hidden: vec![128; 5],
            batch_norm: true,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 32,
            train_split: 0.7,
            seed: 0,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl RefinerConfig {
    pub fn for_horizon(horizon: usize) -> Self {
        Self {
            horizon,
            ..Self::default()
        }
    }

    /// Longer schedule used with hosted chat models.
    pub fn gpt_profile(horizon: usize) -> Self {
        Self {
            epochs: 128,
            ..Self::for_horizon(horizon)
        }
    }

    pub fn validate(&self) -> Result<(), PostprocessError> {
        let bad = |msg: String| Err(PostprocessError::InvalidConfig(msg));
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be >= 1, got {:?}", self.hidden));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.train_split > 0.0 && self.train_split < 1.0) {
            return bad(format!(
                "train_split must lie in (0, 1), got {}",
                self.train_split
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_epsilon > 0.0) {
            return bad("batch-norm momentum must lie in (0, 1] and epsilon be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

/// Network parameters. Layer `i < hidden.len()` is hidden; the last one is
/// the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    norms: Vec<BatchNorm>,
    bn_epsilon: f64,
}

/// Gradients of the trainable parameters, in the same layout as [`Mlp`].
#[derive(Debug, Clone)]
pub struct Grads {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    gammas: Vec<Array1<f64>>,
    betas: Vec<Array1<f64>>,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.extend(self.weights[i].iter());
            out.extend(self.biases[i].iter());
            if i < self.gammas.len() {
                out.extend(self.gammas[i].iter());
                out.extend(self.betas[i].iter());
            }
        }
        out
    }
}

/// Per-layer values kept from the forward pass for backpropagation.
struct Trace {
    inputs: Vec<Array2<f64>>,
    xhat: Vec<Option<Array2<f64>>>,
    inv_std: Vec<Option<Array1<f64>>>,
    batch_stats: Vec<Option<(Array1<f64>, Array1<f64>)>>,
    out: Array2<f64>,
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization for
    /// weights and biases; unit scale and zero shift for batch-norm.
    pub fn init(cfg: &RefinerConfig, rng: &mut impl Rng) -> Self {
        let mut dims = vec![cfg.horizon];
        dims.extend(&cfg.hidden);
        dims.push(cfg.horizon);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((w[0], w[1]), || {
                rng.gen_range(-bound..bound)
            }));
            biases.push(Array1::from_shape_simple_fn(w[1], || {
                rng.gen_range(-bound..bound)
            }));
        }
        let norms = if cfg.batch_norm {
            cfg.hidden
                .iter()
                .map(|&n| BatchNorm {
                    gamma: Array1::ones(n),
                    beta: Array1::zeros(n),
                    running_mean: Array1::zeros(n),
                    running_var: Array1::ones(n),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            weights,
            biases,
            norms,
            bn_epsilon: cfg.bn_epsilon,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }

    fn hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.flatten().len()
    }

    /// Trainable parameters in a fixed order matching [`Grads::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.extend(self.weights[i].iter());
            out.extend(self.biases[i].iter());
            if let Some(bn) = self.norms.get(i) {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for i in 0..self.weights.len() {
            self.weights[i]
                .iter_mut()
                .for_each(|v| *v = it.next().expect("parameter count"));
            self.biases[i]
                .iter_mut()
                .for_each(|v| *v = it.next().expect("parameter count"));
            if let Some(bn) = self.norms.get_mut(i) {
                bn.gamma
                    .iter_mut()
                    .for_each(|v| *v = it.next().expect("parameter count"));
                bn.beta
                    .iter_mut()
                    .for_each(|v| *v = it.next().expect("parameter count"));
            }
        }
    }

    fn forward_trace(&self, x: ArrayView2<f64>, training: bool) -> Trace {
        let n = x.nrows();
        // a single row has no batch statistics; fall back to running ones
        let use_batch = training && n > 1;
        let mut a = x.to_owned();
        let mut tr = Trace {
            inputs: Vec::new(),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            batch_stats: Vec::new(),
            out: Array2::zeros((0, 0)),
        };
        for l in 0..self.hidden_layers() {
            let z = a.dot(&self.weights[l]) + &self.biases[l];
            tr.inputs.push(a);
            let y = match self.norms.get(l) {
                Some(bn) => {
                    let (mean, var) = if use_batch {
                        let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                        let var = (&z - &mean)
                            .mapv(|v| v * v)
                            .mean_axis(Axis(0))
                            .expect("non-empty batch");
                        (mean, var)
                    } else {
                        (bn.running_mean.clone(), bn.running_var.clone())
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + self.bn_epsilon).sqrt());
                    let xhat = (&z - &mean) * &inv_std;
                    let y = &xhat * &bn.gamma + &bn.beta;
                    tr.xhat.push(Some(xhat));
                    tr.inv_std.push(Some(inv_std));
                    tr.batch_stats.push(use_batch.then_some((mean, var)));
                    y
                }
                None => {
                    tr.xhat.push(None);
                    tr.inv_std.push(None);
                    tr.batch_stats.push(None);
                    z
                }
            };
            a = y.mapv(f64::tanh);
        }
        let last = self.hidden_layers();
        tr.out = a.dot(&self.weights[last]) + &self.biases[last];
        tr.inputs.push(a);
        tr
    }

    /// Inference-mode forward pass (batch-norm uses running statistics).
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_trace(x, false).out
    }

    /// Training-mode mean squared error over all output elements and its
    /// gradient. Does not touch the running statistics.
    pub fn loss_and_grads(&self, x: ArrayView2<f64>, t: ArrayView2<f64>) -> (f64, Grads) {
        let (loss, grads, _) = self.loss_grads_stats(x, t);
        (loss, grads)
    }

    #[allow(clippy::type_complexity)]
    fn loss_grads_stats(
        &self,
        x: ArrayView2<f64>,
        t: ArrayView2<f64>,
    ) -> (f64, Grads, Vec<Option<(Array1<f64>, Array1<f64>)>>) {
        let tr = self.forward_trace(x, true);
        let diff = &tr.out - &t;
        let count = diff.len() as f64;
        let loss = diff.mapv(|v| v * v).sum() / count;
        let rows = x.nrows() as f64;

        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut gg = vec![Array1::zeros(0); self.norms.len()];
        let mut gbeta = vec![Array1::zeros(0); self.norms.len()];

        let mut delta = diff * (2.0 / count);
        for l in (0..layers).rev() {
            gw[l] = tr.inputs[l].t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            // back through the previous hidden layer's tanh and batch-norm
            let h = l - 1;
            let a = &tr.inputs[l];
            let dy = delta.dot(&self.weights[l].t()) * a.mapv(|v| 1.0 - v * v);
            delta = match (self.norms.get(h), &tr.xhat[h], &tr.inv_std[h]) {
                (Some(bn), Some(xhat), Some(inv_std)) => {
                    gg[h] = (&dy * xhat).sum_axis(Axis(0));
                    gbeta[h] = dy.sum_axis(Axis(0));
                    let dxhat = &dy * &bn.gamma;
                    if tr.batch_stats[h].is_some() {
                        let sum_dxhat = dxhat.sum_axis(Axis(0));
                        let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                        ((&dxhat * rows) - &sum_dxhat - &(xhat * &sum_dxhat_xhat))
                            * (inv_std / rows)
                    } else {
                        dxhat * inv_std
                    }
                }
                _ => dy,
            };
        }
        let grads = Grads {
            weights: gw,
            biases: gb,
            gammas: gg,
            betas: gbeta,
        };
        (loss, grads, tr.batch_stats)
    }

    fn update_running_stats(
        &mut self,
        stats: &[Option<(Array1<f64>, Array1<f64>)>],
        rows: usize,
        momentum: f64,
    ) {
        let unbias = rows as f64 / (rows as f64 - 1.0);
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            if let Some((mean, var)) = s {
                bn.running_mean = &bn.running_mean * (1.0 - momentum) + mean * momentum;
                bn.running_var = &bn.running_var * (1.0 - momentum) + var * (momentum * unbias);
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
            && self.norms.iter().all(|bn| {
                bn.running_mean
                    .iter()
                    .chain(bn.running_var.iter())
                    .all(|v| v.is_finite())
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Validation loss of the freshly initialized network.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLoss>,
}

impl TrainingLog {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_val_loss, |e| e.val_loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerModel {
    config: RefinerConfig,
    net: Mlp,
    trained: bool,
}

impl RefinerModel {
    /// A freshly initialized network with the config's seed.
    pub fn untrained(cfg: &RefinerConfig) -> Result<Self, PostprocessError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            config: cfg.clone(),
            net: Mlp::init(cfg, &mut rng),
            trained: false,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Inference on raw rows, regardless of the trained flag.
    pub fn forward(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PostprocessError> {
        let x = to_matrix(rows, self.config.horizon)?;
        Ok(self
            .net
            .predict(x.view())
            .outer_iter()
            .map(|r| r.to_vec())
            .collect())
    }

    pub fn to_json(&self) -> Result<String, PostprocessError> {
        let layers = self
            .net
            .weights
            .iter()
            .zip(&self.net.biases)
            .map(|(w, b)| LayerState {
                rows: w.nrows(),
                cols: w.ncols(),
                weights: w.iter().copied().collect(),
                bias: b.to_vec(),
            })
            .collect();
        let batch_norm = self
            .net
            .norms
            .iter()
            .map(|bn| BatchNormState {
                gamma: bn.gamma.to_vec(),
                beta: bn.beta.to_vec(),
                running_mean: bn.running_mean.to_vec(),
                running_var: bn.running_var.to_vec(),
            })
            .collect();
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            trained: self.trained,
            layers,
            batch_norm,
        };
        serde_json::to_string(&ckpt).map_err(|e| PostprocessError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, PostprocessError> {
        let bad = |m: String| PostprocessError::Checkpoint(m);
        let ckpt: Checkpoint = serde_json::from_str(s).map_err(|e| bad(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        ckpt.config.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in ckpt.layers {
            let w = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                .map_err(|e| bad(e.to_string()))?;
            if l.bias.len() != l.cols {
                return Err(bad("bias length does not match layer width".into()));
            }
            weights.push(w);
            biases.push(Array1::from(l.bias));
        }
        let norms: Vec<BatchNorm> = ckpt
            .batch_norm
            .into_iter()
            .map(|s| BatchNorm {
                gamma: s.gamma.into(),
                beta: s.beta.into(),
                running_mean: s.running_mean.into(),
                running_var: s.running_var.into(),
            })
            .collect();
        let model = Self {
            net: Mlp {
                weights,
                biases,
                norms,
                bn_epsilon: ckpt.config.bn_epsilon,
            },
            config: ckpt.config,
            trained: ckpt.trained,
        };
        let mut dims = vec![model.config.horizon];
        dims.extend(&model.config.hidden);
        dims.push(model.config.horizon);
        let shapes_ok = model.net.weights.len() == dims.len() - 1
            && model
                .net
                .weights
                .iter()
                .zip(dims.windows(2))
                .all(|(w, d)| w.dim() == (d[0], d[1]))
            && (model.net.norms.is_empty() || model.net.norms.len() == model.config.hidden.len())
            && model
                .net
                .norms
                .iter()
                .zip(&model.config.hidden)
                .all(|(bn, &n)| bn.gamma.len() == n && bn.running_var.len() == n);
        if !shapes_ok {
            return Err(bad("layer shapes do not match the config".into()));
        }
        if !model.net.all_finite()
            || model
                .net
                .norms
                .iter()
                .any(|bn| bn.running_var.iter().any(|&v| v <= 0.0))
        {
            return Err(bad(
                "non-finite parameters or non-positive running variance".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PostprocessError> {
        std::fs::write(path, self.to_json()?).map_err(|e| PostprocessError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PostprocessError> {
        let s = std::fs::read_to_string(path).map_err(|e| PostprocessError::Io(e.to_string()))?;
        Self::from_json(&s)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerState {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BatchNormState {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: RefinerConfig,
    trained: bool,
    layers: Vec<LayerState>,
    batch_norm: Vec<BatchNormState>,
}

fn to_matrix(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>, PostprocessError> {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(PostprocessError::DimensionMismatch {
                expected: width,
                got: r.len(),
            });
        }
        m.row_mut(i)
            .assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(m)
}

fn rows_of(idx: &[usize], x: &Array2<f64>) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Trains on `(predicted, truth)` pairs of low-frequency components.
pub fn train_refiner(
    pairs: &[(Series, Series)],
    cfg: &RefinerConfig,
) -> Result<(RefinerModel, TrainingLog), PostprocessError> {
    cfg.validate()?;
    if pairs.len() < 2 {
        return Err(PostprocessError::InsufficientData { pairs: pairs.len() });
    }
    let h = cfg.horizon;
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    for (p, t) in pairs {
        for s in [p, t] {
            if s.len() != h {
                return Err(PostprocessError::DimensionMismatch {
                    expected: h,
                    got: s.len(),
                });
            }
        }
        xs.push(p.values().to_vec());
        ts.push(t.values().to_vec());
    }
    let x = to_matrix(&xs, h)?;
    let t = to_matrix(&ts, h)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::init(cfg, &mut rng);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_train =
        ((pairs.len() as f64 * cfg.train_split).round() as usize).clamp(1, pairs.len() - 1);
    let (train_idx, val_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let (xv, tv) = (rows_of(val_idx, &x), rows_of(val_idx, &t));
    let val_loss = |net: &Mlp| {
        let d = net.predict(xv.view()) - &tv;
        d.mapv(|v| v * v).mean().unwrap_or(0.0)
    };

    let mut log = TrainingLog {
        train_pairs: train_idx.len(),
        val_pairs: val_idx.len(),
        initial_val_loss: val_loss(&net),
        epochs: Vec::with_capacity(cfg.epochs),
    };

    let mut params = net.flatten();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut step = 0i32;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (xb, tb) = (rows_of(batch, &x), rows_of(batch, &t));
            let (loss, grads, stats) = net.loss_grads_stats(xb.view(), tb.view());
            if !loss.is_finite() {
                return Err(PostprocessError::NonFiniteLoss { epoch });
            }
            total += loss * batch.len() as f64;
            step += 1;
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(step), 1.0 - ADAM_BETA2.powi(step));
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grads.flatten())
                .zip(&mut m)
                .zip(&mut v)
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
            net.set_flat(&params);
            net.update_running_stats(&stats, batch.len(), cfg.bn_momentum);
        }
        let epoch_loss = EpochLoss {
            epoch,
            train_loss: total / train_idx.len() as f64,
            val_loss: val_loss(&net),
        };
        if !epoch_loss.val_loss.is_finite() || !net.all_finite() {
            return Err(PostprocessError::NonFiniteLoss { epoch });
        }
        log::debug!(
            "refiner epoch {epoch}: train {:.6} val {:.6}",
            epoch_loss.train_loss,
            epoch_loss.val_loss
        );
        log.epochs.push(epoch_loss);
    }
    Ok((
        RefinerModel {
            config: cfg.clone(),
            net,
            trained: true,
        },
        log,
    ))
}

pub fn refine_low(
    model: &RefinerModel,
    predicted_low: &Series,
) -> Result<Series, PostprocessError> {
    if !model.trained {
        return Err(PostprocessError::UntrainedModel);
    }
    let out = model.forward(&[predicted_low.values().to_vec()])?;
    let out = out.into_iter().next().unwrap_or_default();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(PostprocessError::NonFiniteOutput);
    }
    Ok(predicted_low
        .with_values(out)
        .expect("finite values of the same length"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small_cfg(h: usize, width: usize) -> RefinerConfig {
        RefinerConfig {
            horizon: h,
            hidden: vec![width; 5],
            ..RefinerConfig::default()
        }
    }

    fn random_net(cfg: &RefinerConfig, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::init(cfg, &mut rng);
        for bn in &mut net.norms {
            bn.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            bn.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            bn.running_mean.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
            bn.running_var.mapv_inplace(|_| rng.gen_range(0.5..2.0));
        }
        net
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    fn check_gradients(batch_norm: bool, rows: usize) {
        let cfg = RefinerConfig {
            batch_norm,
            ..small_cfg(4, 8)
        };
        let mut net = random_net(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(rows, 4, &mut rng);
        let t = random_matrix(rows, 4, &mut rng);
        let (_, grads) = net.loss_and_grads(x.view(), t.view());
        let analytic = grads.flatten();
        let base = net.flatten();
        assert_eq!(analytic.len(), base.len());
        let step = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + step;
            net.set_flat(&p);
            let up = net.loss_and_grads(x.view(), t.view()).0;
            p[i] = base[i] - step;
            net.set_flat(&p);
            let down = net.loss_and_grads(x.view(), t.view()).0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "param {i}: analytic {a} numeric {numeric} rel {rel}"
            );
        }
        net.set_flat(&base);
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(true, 6);
        check_gradients(false, 6);
        // single-row batches normalize with running statistics
        check_gradients(true, 1);
    }

    #[test]
    fn identical_rows_match_single_row_in_inference() {
        let cfg = small_cfg(6, 16);
        let net = random_net(&cfg, 3);
        let row: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let single = net.predict(Array2::from_shape_vec((1, 6), row.clone()).unwrap().view());
        let batch = net.predict(Array2::from_shape_fn((5, 6), |(_, j)| row[j]).view());
        for r in batch.outer_iter() {
            assert_eq!(r, single.row(0));
        }
    }

    fn smooth_pairs(n: usize, h: usize, shift: f64, seed: u64) -> Vec<(Series, Series)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let amp = rng.gen_range(0.2..0.6);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let cycles = rng.gen_range(0.5..2.0);
                let level = rng.gen_range(-0.3..0.3);
                let x: Vec<f64> = (0..h)
                    .map(|i| level + amp * (2.0 * PI * cycles * i as f64 / h as f64 + phase).sin())
                    .collect();
                let t = x.iter().map(|v| v + shift).collect();
                (Series::new(x, 0).unwrap(), Series::new(t, 0).unwrap())
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = smooth_pairs(20, 8, 0.3, 1);
        let cfg = RefinerConfig {
            epochs: 3,
            batch_size: 4,
            seed: 5,
            ..small_cfg(8, 16)
        };
        let (a, la) = train_refiner(&pairs, &cfg).unwrap();
        let (b, lb) = train_refiner(&pairs, &cfg).unwrap();
        let bits = |m: &RefinerModel| {
            m.net
                .flatten()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la, lb);
        let (c, _) = train_refiner(&pairs, &RefinerConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn needs_two_pairs() {
        let pairs = smooth_pairs(1, 8, 0.0, 1);
        assert!(matches!(
            train_refiner(&pairs, &small_cfg(8, 4)),
            Err(PostprocessError::InsufficientData { pairs: 1 })
        ));
        let two = smooth_pairs(2, 8, 0.0, 1);
        let (_, log) = train_refiner(
            &two,
            &RefinerConfig {
                epochs: 1,
                ..small_cfg(8, 4)
            },
        )
        .unwrap();
        assert_eq!((log.train_pairs, log.val_pairs), (1, 1));
    }

    #[test]
    fn refine_low_contract() {
        let pairs = smooth_pairs(10, 8, 0.0, 2);
        let cfg = RefinerConfig {
            epochs: 2,
            ..small_cfg(8, 8)
        };
        let untrained = RefinerModel::untrained(&cfg).unwrap();
        assert!(matches!(
            refine_low(&untrained, &pairs[0].0),
            Err(PostprocessError::UntrainedModel)
        ));
        let (model, _) = train_refiner(&pairs, &cfg).unwrap();
        let a = refine_low(&model, &pairs[0].0).unwrap();
        let b = refine_low(&model, &pairs[0].0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let short = Series::new(vec![0.0; 7], 0).unwrap();
        assert!(matches!(
            refine_low(&model, &short),
            Err(PostprocessError::DimensionMismatch {
                expected: 8,
                got: 7
            })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let pairs = smooth_pairs(12, 6, 0.1, 3);
        let cfg = RefinerConfig {
            epochs: 2,
            ..small_cfg(6, 8)
        };
        let (model, _) = train_refiner(&pairs, &cfg).unwrap();
        let json = model.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["format_version"], CHECKPOINT_FORMAT_VERSION);
        let back = RefinerModel::from_json(&json).unwrap();
        assert_eq!(back, model);
        let tampered = json.replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(
            RefinerModel::from_json(&tampered),
            Err(PostprocessError::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            RefinerConfig {
                epochs: 0,
                ..RefinerConfig::default()
            },
            RefinerConfig {
                train_split: 1.0,
                ..RefinerConfig::default()
            },
            RefinerConfig {
                hidden: vec![128, 0],
                ..RefinerConfig::default()
            },
        ] {
            assert!(matches!(
                cfg.validate(),
                Err(PostprocessError::InvalidConfig(_))
            ));
        }
        assert!(RefinerConfig::default().validate().is_ok());
    }
}
