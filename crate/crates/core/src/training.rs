//! Exclusion-aware training.
//!
//! The objective is the cross-entropy of the final classifier plus, for every
//! exit `i` of `N` and class `j`, `alpha / (N - i + 1)` times the binary
//! cross-entropy between the exclusion probability `p_ij` and the indicator
//! `[j == label]`. Both parts are averaged over the batch.
//!
//! The softmax heads used by the confidence baseline are fitted alongside on
//! detached pooled features, so they never change the backbone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::collect_outputs;
use crate::model::Model;
use crate::parallel::{try_map_range, Execution};
use crate::tensor::tape::bce;
use crate::tensor::{argmax, ops, GradTape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Scale of the exit terms.
    pub alpha: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 36.0 }
    }
}

impl LossConfig {
    /// `alpha` must be finite and non-negative. Zero switches the exit terms
    /// off, which is how plain training is compared against.
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// `alpha / (n - i + 1)` for 1-based exit `i`.
pub fn head_coefficient(i: usize, n: usize, alpha: f32) -> Result<f32> {
    if i == 0 || i > n {
        return Err(Error::OutOfRange {
            index: i,
            valid: format!("1..={n}"),
        });
    }
    Ok(alpha / (n - i + 1) as f32)
}

/// Binary cross-entropy of one exclusion probability, clamped away from 0 and 1.
pub fn exit_bce(y: f32, positive: bool) -> f32 {
    bce(y, if positive { 1.0 } else { 0.0 })
}

/// Per-sample composite loss from already computed outputs.
pub fn composite_loss(final_logits: &[f32], exit_probs: &[Vec<f32>], label: usize, cfg: &LossConfig) -> Result<f32> {
    let m = final_logits.len();
    let n = exit_probs.len();
    let mut total = ops::cross_entropy_logits(final_logits, label)?;
    for (i, p) in exit_probs.iter().enumerate() {
        if p.len() != m {
            return Err(Error::shape(
                "composite_loss",
                format!("exit {} has {} probabilities for {m} classes", i + 1, p.len()),
            ));
        }
        let coef = head_coefficient(i + 1, n, cfg.alpha)?;
        let s: f32 = p.iter().enumerate().map(|(j, &y)| exit_bce(y, j == label)).sum();
        total += coef * s;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Composite(LossConfig),
    CrossEntropyOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Multiply the learning rate by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub weight_decay: f32,
    pub lr_decay: Option<StepDecay>,
    pub seed: u64,
    /// Fraction of the training data held out for validation metrics.
    pub validation_split: f64,
    /// Also fit the softmax exit heads used by the confidence baseline.
    pub train_baseline_heads: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 200,
            batch_size: 32,
            optimizer: Optimizer::default(),
            weight_decay: 0.0,
            lr_decay: None,
            seed: 0,
            validation_split: 0.1,
            train_baseline_heads: true,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return Err(Error::Config(format!(
                "validation split {} outside [0, 1)",
                self.validation_split
            )));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || d.factor.is_nan() || d.factor <= 0.0 {
                return Err(Error::Config("lr decay needs every >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every) as i32),
            None => self.learning_rate,
        }
    }
}

/// Loss components of one sample or a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f32,
    pub cross_entropy: f32,
    pub exit: f32,
    /// Cross-entropy of the baseline softmax heads (not part of `total`).
    pub baseline_heads: f32,
}

/// Loss parts and per-parameter gradients for one sample, in
/// [`Model::params`] order. Parameters the loss does not reach get zeros.
pub fn sample_gradients(
    model: &Model,
    input: &Tensor,
    label: usize,
    objective: Objective,
    baseline_heads: bool,
) -> Result<(LossParts, Vec<Tensor>, bool)> {
    if label >= model.num_classes() {
        return Err(Error::OutOfRange {
            index: label,
            valid: format!("0..{}", model.num_classes()),
        });
    }
    let mut tape = GradTape::new();
    let fwd = model.forward_tape(&mut tape, input)?;
    let correct = argmax(tape.value(fwd.final_logits).data()) == label;
    let ce = tape.cross_entropy(fwd.final_logits, label)?;
    let mut parts = LossParts {
        cross_entropy: tape.value(ce).item()?,
        ..LossParts::default()
    };
    let mut loss = ce;
    if let Objective::Composite(cfg) = objective {
        let n = fwd.exclusion_logits.len();
        let mut targets = vec![0.0; model.num_classes()];
        targets[label] = 1.0;
        for (i, &z) in fwd.exclusion_logits.iter().enumerate() {
            let coef = head_coefficient(i + 1, n, cfg.alpha)?;
            let term = tape.bce_with_logits(z, targets.clone(), coef)?;
            parts.exit += tape.value(term).item()?;
            loss = tape.add(loss, term)?;
        }
    }
    parts.total = tape.value(loss).item()?;
    if baseline_heads {
        for &z in &fwd.classifier_logits {
            let term = tape.cross_entropy(z, label)?;
            parts.baseline_heads += tape.value(term).item()?;
            loss = tape.add(loss, term)?;
        }
    }
    let mut grads = tape.backward(loss)?;
    let out = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((parts, out, correct))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f32,
    /// Batch-mean composite loss averaged over the epoch.
    pub loss: f32,
    pub cross_entropy: f32,
    pub exit_loss: f32,
    pub baseline_head_loss: f32,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Per-exit ROC AUC of the exclusion heads on the validation set (the
    /// training set when there is none). `None` if undefined.
    pub exit_auc: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainingHistory {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

enum OptState {
    Sgd { velocity: Vec<Vec<f32>> },
    Adam { m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, t: i32 },
}

impl OptState {
    fn new(opt: Optimizer, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        match opt {
            Optimizer::Sgd { .. } => OptState::Sgd { velocity: zeros() },
            Optimizer::Adam { .. } => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, opt: Optimizer, lr: f32, weight_decay: f32, params: &mut [Tensor], grads: &[Vec<f32>]) {
        match (self, opt) {
            (OptState::Sgd { velocity }, Optimizer::Sgd { momentum }) => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                        let gi = gi + weight_decay * *w;
                        *vi = momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
            }
            (OptState::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((p, g), mk), vk) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(mk.iter_mut()).zip(vk.iter_mut()) {
                        let gi = gi + weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer state matches its config"),
        }
    }
}

/// Splits off `validation_split` of `data` (seeded) and trains on the rest
/// with the composite objective.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, loss: &LossConfig) -> Result<TrainingHistory> {
    cfg.validate()?;
    loss.validate()?;
    if cfg.validation_split > 0.0 {
        let (tr, va) = data.split_validation(cfg.validation_split, cfg.seed)?;
        train_with(model, &tr, Some(&va), cfg, Objective::Composite(*loss))
    } else {
        train_with(model, data, None, cfg, Objective::Composite(*loss))
    }
}

/// Trains on `train_set` as given; `val` only feeds the metrics.
pub fn train_with(
    model: &mut Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if let Objective::Composite(l) = objective {
        l.validate()?;
    }
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for d in std::iter::once(train_set).chain(val) {
        if d.num_classes() != model.num_classes() || d.image_shape() != model.config().input_shape {
            return Err(Error::Config(format!(
                "dataset ({} classes, {:?}) does not fit the model ({} classes, {:?})",
                d.num_classes(),
                d.image_shape(),
                model.num_classes(),
                model.config().input_shape
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut state = OptState::new(cfg.optimizer, model.params());
    let mut history = TrainingHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sums = LossParts::default();
        let mut correct = 0usize;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let per_sample = try_map_range(cfg.execution, batch.len(), |k| {
                let i = batch[k];
                sample_gradients(
                    model,
                    &train_set.image(i),
                    train_set.label(i),
                    objective,
                    cfg.train_baseline_heads,
                )
            })?;
            let scale = 1.0 / batch.len() as f32;
            let mut mean = LossParts::default();
            let mut grads: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for (parts, g, ok) in &per_sample {
                mean.total += parts.total;
                mean.cross_entropy += parts.cross_entropy;
                mean.exit += parts.exit;
                mean.baseline_heads += parts.baseline_heads;
                correct += *ok as usize;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            mean.total *= scale;
            if !mean.total.is_finite() || !mean.baseline_heads.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    loss: mean.total,
                });
            }
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            state.step(cfg.optimizer, lr, cfg.weight_decay, model.params_mut(), &grads);
            if model.params().iter().any(|p| !p.all_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    loss: mean.total,
                });
            }
            sums.total += mean.total;
            sums.cross_entropy += mean.cross_entropy * scale;
            sums.exit += mean.exit * scale;
            sums.baseline_heads += mean.baseline_heads * scale;
            batches += 1;
        }
        let nb = batches as f32;
        let probe = val.unwrap_or(train_set);
        let outputs = collect_outputs(model, probe, cfg.execution)?;
        let val_accuracy = val.map(|v| {
            let hits = outputs
                .iter()
                .zip(v.labels())
                .filter(|(o, &l)| argmax(&o.final_logits) == l)
                .count();
            hits as f64 / v.len().max(1) as f64
        });
        let exit_auc = (0..model.num_exits())
            .map(|e| {
                let probs: Vec<&[f32]> = outputs.iter().map(|o| o.exits[e].exclusion_probs.as_slice()).collect();
                exclusion_auc(&probs, probe.labels())
            })
            .collect();
        history.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: sums.total / nb,
            cross_entropy: sums.cross_entropy / nb,
            exit_loss: sums.exit / nb,
            baseline_head_loss: sums.baseline_heads / nb,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
            exit_auc,
        });
    }
    Ok(history)
}

/// ROC AUC of exclusion probabilities pooled over classes: positives are
/// `p[label]`, negatives every other entry. Ties count one half. `None` when
/// either side is empty.
pub fn exclusion_auc(probs: &[&[f32]], labels: &[usize]) -> Option<f64> {
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for (p, &l) in probs.iter().zip(labels) {
        scored.extend(p.iter().enumerate().map(|(j, &v)| (v, j == l)));
    }
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of positive ranks, average rank within tie groups.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * scored[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64))
}
