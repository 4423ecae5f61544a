//! Optimization loop, evaluation and multi-stream score fusion.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{argmax, softmax, Batch, HyperGcnModel};
use crate::nn::{ParamKind, Parameterized};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub step_epochs: Vec<usize>,
    pub step_factors: Vec<f64>,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Rescales the whole gradient to at most this L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.0004,
            base_lr: 0.05,
            warmup_epochs: 5,
            step_epochs: vec![110, 120],
            step_factors: vec![0.1, 0.1],
            total_epochs: 140,
            batch_size: 64,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad(format!("momentum={} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay={} must be finite and non-negative", self.weight_decay));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr={} must be finite and non-negative", self.base_lr));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad("total_epochs and batch_size must be positive".into());
        }
        if self.step_epochs.len() != self.step_factors.len() {
            return bad(format!("{} step epochs vs {} factors", self.step_epochs.len(), self.step_factors.len()));
        }
        if self.step_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("step epochs must be strictly ascending".into());
        }
        if self.step_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return bad("step epochs must precede total_epochs".into());
        }
        if self.step_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return bad("step factors must be positive".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup `base·(e+1)/warmup`, then `base` scaled by every step factor already passed.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::EpochOutOfRange { epoch, total: cfg.total_epochs });
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    Ok(cfg
        .step_epochs
        .iter()
        .zip(&cfg.step_factors)
        .filter(|(&e, _)| epoch >= e)
        .fold(cfg.base_lr, |lr, (_, &f)| lr * f))
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// One buffer per parameter tensor, in visiting order.
    pub momentum: Vec<Vec<f64>>,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub best_accuracy: f64,
}

impl TrainState {
    pub fn new(model: &impl Parameterized, seed: u64) -> Self {
        Self {
            momentum: model.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            epoch: 0,
            step: 0,
            seed,
            best_accuracy: 0.0,
        }
    }
}

/// Nesterov SGD: `g = grad + wd·p`, `m = μ·m + g`, `p -= lr·(g + μ·m)`.
/// Buffers and decay-exempt tensors skip the decay term; buffers are never updated.
pub fn sgd_step(model: &mut impl Parameterized, state: &mut TrainState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    let mut params = model.params_mut();
    if state.momentum.len() != params.len() {
        return Err(Error::ShapeMismatch(format!("{} momentum buffers for {} tensors", state.momentum.len(), params.len())));
    }
    if let Some(p) = params.iter().find(|p| p.kind != ParamKind::Buffer && p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    let scale = cfg.clip_norm.map_or(1.0, |max| {
        let norm = params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > max { max / norm } else { 1.0 }
    });
    for (p, m) in params.iter_mut().zip(&mut state.momentum) {
        if p.kind == ParamKind::Buffer {
            continue;
        }
        let wd = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        for ((x, &g), mi) in p.value.iter_mut().zip(p.grad.iter()).zip(m.iter_mut()) {
            let g = scale * g + wd * *x;
            *mi = cfg.momentum * *mi + g;
            *x -= lr * (g + cfg.momentum * *mi);
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Sample order of one epoch, a pure function of the seed and epoch index.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

pub fn train_epoch(model: &mut HyperGcnModel, data: &[Sample], state: &mut TrainState, cfg: &OptimConfig) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let epoch = state.epoch;
    let lr = lr_at(epoch, cfg)?;
    let order = epoch_order(data.len(), state.seed, epoch);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let batch = Batch::new(&chunk.iter().map(|&i| &data[i]).collect::<Vec<_>>());
        model.zero_grad();
        let (loss, logits, cache) = model.loss_and_grad(&batch, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        sgd_step(model, state, lr, cfg)?;
        model.commit(&cache);
        loss_sum += loss * chunk.len() as f64;
        correct += count_correct(&logits, &batch.labels);
    }
    state.epoch += 1;
    Ok(EpochStats { loss: loss_sum / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
}

pub fn count_correct(scores: &Array2<f64>, labels: &[usize]) -> usize {
    scores.rows().into_iter().zip(labels).filter(|(r, &l)| argmax(r.view()) == l).count()
}

/// Inference-mode class scores for every sample, in order.
pub fn predict(model: &HyperGcnModel, data: &[Sample], batch_size: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.len(), model.config.num_classes));
    for (ci, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let (logits, _) = model.forward(&Batch::new(&chunk.iter().collect::<Vec<_>>()), false)?;
        let start = ci * batch_size.max(1);
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&logits);
    }
    Ok(out)
}

/// Top-1 accuracy in inference mode; returns the scores as well.
pub fn evaluate(model: &HyperGcnModel, data: &[Sample], batch_size: usize) -> Result<(f64, Array2<f64>)> {
    let scores = predict(model, data, batch_size)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let acc = if data.is_empty() { 0.0 } else { count_correct(&scores, &labels) as f64 / data.len() as f64 };
    Ok((acc, scores))
}

/// Softmax of every stream, weighted sum; returns the fused probabilities.
pub fn fuse_scores(score_sets: &[Array2<f64>], weights: &[f64]) -> Result<Array2<f64>> {
    let first = score_sets.first().ok_or_else(|| Error::ShapeMismatch("no score sets".into()))?;
    if weights.len() != score_sets.len() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} streams", weights.len(), score_sets.len())));
    }
    if let Some(s) = score_sets.iter().find(|s| s.dim() != first.dim()) {
        return Err(Error::ShapeMismatch(format!("stream shapes {:?} and {:?}", first.dim(), s.dim())));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::ShapeMismatch("non-finite stream weight".into()));
    }
    let mut fused = Array2::zeros(first.raw_dim());
    for (s, &w) in score_sets.iter().zip(weights) {
        for (mut out, row) in fused.rows_mut().into_iter().zip(s.rows()) {
            out.scaled_add(w, &softmax(row.to_owned()));
        }
    }
    Ok(fused)
}

pub fn ensemble_scores(score_sets: &[Array2<f64>], weights: &[f64], labels: &[usize]) -> Result<f64> {
    let fused = fuse_scores(score_sets, weights)?;
    if labels.len() != fused.nrows() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} score rows", labels.len(), fused.nrows())));
    }
    Ok(if labels.is_empty() { 0.0 } else { count_correct(&fused, labels) as f64 / labels.len() as f64 })
}

/// `epoch<TAB>lr<TAB>train_loss<TAB>train_acc<TAB>val_acc`, `-` without a validation split.
pub fn metrics_line(epoch: usize, lr: f64, stats: EpochStats, val_acc: Option<f64>) -> String {
    let mut s = format!("{epoch}\t{lr:.6e}\t{:.6}\t{:.4}\t", stats.loss, stats.accuracy);
    match val_acc {
        Some(v) => write!(s, "{v:.4}").expect("string write"),
        None => s.push('-'),
    }
    s
}

/// Row-major text dump of a score matrix, one sample per line.
pub fn scores_to_text(scores: &Array2<f64>, labels: &[usize]) -> String {
    let mut out = String::new();
    for (row, label) in scores.rows().into_iter().zip(labels) {
        write!(out, "{label}").expect("string write");
        for x in row {
            write!(out, "\t{x:.9e}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn scores_from_text(text: &str) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split('\t');
        let label = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Data(format!("score line {}: bad label", i + 1)))?;
        let row: Vec<f64> = fields
            .map(|f| f.parse().map_err(|_| Error::Data(format!("score line {}: bad value {f:?}", i + 1))))
            .collect::<Result<_>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::ShapeMismatch(format!("score line {} has {} columns", i + 1, row.len())));
        }
        labels.push(label);
        values.extend(row);
    }
    let cols = width.unwrap_or(0);
    let scores = Array2::from_shape_vec((labels.len(), cols), values).expect("rows have equal width");
    Ok((scores, labels))
}

/// Mean over samples of `-log p(label)`, the unsmoothed likelihood part of the objective.
pub fn mean_nll(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = scores
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(r, &l)| -crate::model::log_softmax(r.to_owned())[l])
        .sum();
    total / labels.len().max(1) as f64
}
