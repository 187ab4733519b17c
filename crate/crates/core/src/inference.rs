//! Dynamic inference by class exclusion, and the confidence-threshold
//! baseline.
//!
//! At every exit the engine first restores the globally most probable class
//! if an earlier exit removed it, then drops every remaining class whose
//! exclusion probability is below `beta * x`, `x` being the largest
//! probability among the remaining classes. Once a single class is left it is
//! the prediction and no deeper layer runs. Otherwise the final classifier
//! decides among the remaining classes.
//!
//! The engines pull probabilities from an [`ExitSource`], so the same code
//! drives a live [`Model`] or probabilities cached from an earlier pass.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::costmodel::CostModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FullOutput, Model, Stepper};
use crate::parallel::{try_map_range, Execution};
use crate::tensor::{argmax, ops, Tensor};

/// Set of classes still in contention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemainingSet {
    num_classes: usize,
    words: Vec<u64>,
}

impl RemainingSet {
    pub fn full(num_classes: usize) -> Self {
        let mut s = Self::empty(num_classes);
        for c in 0..num_classes {
            s.insert(c);
        }
        s
    }

    pub fn empty(num_classes: usize) -> Self {
        RemainingSet {
            num_classes,
            words: vec![0; num_classes.div_ceil(64)],
        }
    }

    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Result<Self> {
        let mut s = Self::empty(num_classes);
        for &c in classes {
            if c >= num_classes {
                return Err(Error::OutOfRange {
                    index: c,
                    valid: format!("0..{num_classes}"),
                });
            }
            s.insert(c);
        }
        Ok(s)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, class: usize) -> bool {
        class < self.num_classes && self.words[class / 64] & (1 << (class % 64)) != 0
    }

    pub fn insert(&mut self, class: usize) {
        assert!(class < self.num_classes, "class {class} out of range");
        self.words[class / 64] |= 1 << (class % 64);
    }

    pub fn remove(&mut self, class: usize) {
        if class < self.num_classes {
            self.words[class / 64] &= !(1 << (class % 64));
        }
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes).filter(|&c| self.contains(c))
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn is_subset_of(&self, other: &RemainingSet) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }
}

/// One class-exclusion coefficient per exit, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BetaSchedule(Vec<f64>);

impl BetaSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("beta schedule needs at least one exit".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1]")));
        }
        Ok(BetaSchedule(betas))
    }

    pub fn zeros(num_exits: usize) -> Self {
        BetaSchedule(vec![0.0; num_exits])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Coefficient of a 1-based exit.
    pub fn get(&self, exit: usize) -> f64 {
        self.0[exit - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Copy with the coefficient of a 1-based exit replaced.
    pub fn with(&self, exit: usize, beta: f64) -> Result<Self> {
        let mut v = self.0.clone();
        *v.get_mut(exit.wrapping_sub(1)).ok_or(Error::OutOfRange {
            index: exit,
            valid: format!("1..={}", self.0.len()),
        })? = beta;
        Self::new(v)
    }
}

impl TryFrom<Vec<f64>> for BetaSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        BetaSchedule::new(v)
    }
}

impl From<BetaSchedule> for Vec<f64> {
    fn from(b: BetaSchedule) -> Self {
        b.0
    }
}

/// Removes every remaining class whose probability is strictly below
/// `beta * x`, where `x` is the largest probability among remaining classes.
/// Returns the new set and the classes removed, ascending.
pub fn exclude_step(p: &[f32], remaining: &RemainingSet, beta: f64) -> Result<(RemainingSet, Vec<usize>)> {
    if remaining.is_empty() {
        return Err(Error::Contract("exclusion on an empty remaining set".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!("beta {beta} outside [0, 1]")));
    }
    if p.len() != remaining.num_classes() {
        return Err(Error::shape(
            "exclude_step",
            format!("{} probabilities for {} classes", p.len(), remaining.num_classes()),
        ));
    }
    let x = remaining.iter().map(|j| p[j]).fold(f32::NEG_INFINITY, f32::max);
    let threshold = beta * x as f64;
    let mut next = remaining.clone();
    let mut excluded = Vec::new();
    for j in remaining.iter() {
        if (p[j] as f64) < threshold {
            next.remove(j);
            excluded.push(j);
        }
    }
    Ok((next, excluded))
}

/// Puts back the global argmax of `p` (lowest index on ties) if it is missing
/// from `remaining`.
pub fn recover_step(p: &[f32], remaining: &RemainingSet) -> (RemainingSet, Option<usize>) {
    let g = argmax(p);
    if remaining.contains(g) {
        (remaining.clone(), None)
    } else {
        let mut next = remaining.clone();
        next.insert(g);
        (next, Some(g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    ClassExclusion,
    Confidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// Exclusion left a single class.
    SingleClass,
    /// Baseline classifier crossed its confidence threshold.
    Confident,
    /// Reached the final classifier.
    FinalLayer,
}

/// What happened at one visited exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitEvent {
    /// 1-based exit index.
    pub exit: usize,
    /// Exclusion probabilities (class exclusion) or classifier softmax
    /// (confidence baseline).
    pub probs: Vec<f32>,
    pub max_prob: f32,
    pub recovered: Option<usize>,
    pub excluded: Vec<usize>,
    /// Remaining classes after this exit, ascending.
    pub remaining: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub engine: Engine,
    pub exit_layer: usize,
    pub predicted_class: usize,
    pub exit_reason: ExitReason,
    pub flops: u64,
    pub macs: u64,
    /// True class, when known.
    #[serde(default)]
    pub label: Option<usize>,
    pub events: Vec<ExitEvent>,
}

impl InferenceTrace {
    pub fn is_correct(&self) -> Option<bool> {
        self.label.map(|l| l == self.predicted_class)
    }

    /// Fills `flops` and `macs` from a cost model.
    pub fn charge(&mut self, cost: &CostModel) -> Result<()> {
        self.flops = cost.flops_of_trace(self)?;
        self.macs = cost.macs_of_trace(self)?;
        Ok(())
    }
}

/// Supplies per-exit outputs in exit order. Each `next_*` call moves to the
/// next exit; an engine calls exactly one of them per exit.
pub trait ExitSource {
    fn num_exits(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn next_exclusion_probs(&mut self) -> Result<Vec<f32>>;
    fn next_classifier_probs(&mut self) -> Result<Vec<f32>>;
    /// Logits of the final classifier; runs whatever layers are left.
    fn final_logits(&mut self) -> Result<Vec<f32>>;
}

/// Live source: executes the model stage by stage.
pub struct ModelSource<'m> {
    stepper: Option<Stepper<'m>>,
    num_classes: usize,
}

impl<'m> ModelSource<'m> {
    pub fn new(model: &'m Model, input: &Tensor) -> Result<Self> {
        Ok(ModelSource {
            stepper: Some(model.stepper(input)?),
            num_classes: model.num_classes(),
        })
    }

    fn stepper(&mut self) -> Result<&mut Stepper<'m>> {
        self.stepper
            .as_mut()
            .ok_or_else(|| Error::Contract("source already finished".into()))
    }
}

impl ExitSource for ModelSource<'_> {
    fn num_exits(&self) -> usize {
        self.stepper.as_ref().map(|s| s.num_exits()).unwrap_or(0)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn next_exclusion_probs(&mut self) -> Result<Vec<f32>> {
        let st = self.stepper()?;
        st.advance()?;
        st.exclusion_probs()
    }

    fn next_classifier_probs(&mut self) -> Result<Vec<f32>> {
        let st = self.stepper()?;
        st.advance()?;
        st.classifier_probs()
    }

    fn final_logits(&mut self) -> Result<Vec<f32>> {
        let st = self
            .stepper
            .take()
            .ok_or_else(|| Error::Contract("source already finished".into()))?;
        st.finish()
    }
}

/// Source replaying the outputs of an earlier [`Model::forward_full`].
pub struct CachedSource<'c> {
    outputs: &'c FullOutput,
    cursor: usize,
}

impl<'c> CachedSource<'c> {
    pub fn new(outputs: &'c FullOutput) -> Self {
        CachedSource { outputs, cursor: 0 }
    }

    fn next_exit(&mut self) -> Result<&'c crate::model::ExitOutput> {
        let out = self
            .outputs
            .exits
            .get(self.cursor)
            .ok_or_else(|| Error::Contract("no exit left in cached outputs".into()))?;
        self.cursor += 1;
        Ok(out)
    }
}

impl ExitSource for CachedSource<'_> {
    fn num_exits(&self) -> usize {
        self.outputs.exits.len()
    }

    fn num_classes(&self) -> usize {
        self.outputs.final_logits.len()
    }

    fn next_exclusion_probs(&mut self) -> Result<Vec<f32>> {
        Ok(self.next_exit()?.exclusion_probs.clone())
    }

    fn next_classifier_probs(&mut self) -> Result<Vec<f32>> {
        Ok(self.next_exit()?.classifier_probs.clone())
    }

    fn final_logits(&mut self) -> Result<Vec<f32>> {
        Ok(self.outputs.final_logits.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionOptions {
    /// Restrict the final-classifier argmax to the remaining classes. When
    /// false the unrestricted argmax is used (ablation).
    pub restrict_final: bool,
}

impl Default for ExclusionOptions {
    fn default() -> Self {
        ExclusionOptions { restrict_final: true }
    }
}

fn attach_partial(err: Error, trace: &InferenceTrace) -> Error {
    match err {
        Error::NonFinite {
            context,
            partial_trace: None,
        } => Error::NonFinite {
            context,
            partial_trace: Some(Box::new(trace.clone())),
        },
        other => other,
    }
}

fn check_probs(p: &[f32], m: usize, exit: usize) -> Result<()> {
    if p.len() != m {
        return Err(Error::shape(
            "exit probabilities",
            format!("exit {exit} produced {} values for {m} classes", p.len()),
        ));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("probabilities at exit {exit}")));
    }
    Ok(())
}

/// Runs the class-exclusion policy against any source. The returned trace has
/// `flops`/`macs` left at zero; see [`InferenceTrace::charge`].
pub fn run_exclusion<S: ExitSource>(
    source: &mut S,
    betas: &BetaSchedule,
    opts: ExclusionOptions,
) -> Result<InferenceTrace> {
    let n = source.num_exits();
    let m = source.num_classes();
    if betas.len() != n {
        return Err(Error::Config(format!(
            "beta schedule has {} entries for {n} exits",
            betas.len()
        )));
    }
    let mut trace = InferenceTrace {
        engine: Engine::ClassExclusion,
        exit_layer: 0,
        predicted_class: 0,
        exit_reason: ExitReason::FinalLayer,
        flops: 0,
        macs: 0,
        label: None,
        events: Vec::with_capacity(n),
    };
    let mut remaining = RemainingSet::full(m);
    for exit in 1..=n {
        let p = source
            .next_exclusion_probs()
            .and_then(|p| check_probs(&p, m, exit).map(|_| p))
            .map_err(|e| attach_partial(e, &trace))?;
        let recovered = if exit > 1 {
            let (r, rec) = recover_step(&p, &remaining);
            remaining = r;
            rec
        } else {
            None
        };
        let (r, excluded) = exclude_step(&p, &remaining, betas.get(exit))?;
        remaining = r;
        trace.exit_layer = exit;
        trace.events.push(ExitEvent {
            exit,
            max_prob: p.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            probs: p,
            recovered,
            excluded,
            remaining: remaining.to_vec(),
        });
        if remaining.len() == 1 {
            trace.predicted_class = remaining.iter().next().unwrap();
            trace.exit_reason = ExitReason::SingleClass;
            return Ok(trace);
        }
    }
    let logits = source.final_logits().map_err(|e| attach_partial(e, &trace))?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(attach_partial(Error::non_finite("final classifier"), &trace));
    }
    trace.predicted_class = if opts.restrict_final {
        let mut best = remaining.iter().next().expect("remaining set is never empty");
        for j in remaining.iter() {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        best
    } else {
        argmax(&logits)
    };
    trace.exit_reason = ExitReason::FinalLayer;
    Ok(trace)
}

/// Class-exclusion inference of one input through a live model.
pub fn dynamic_infer(model: &Model, input: &Tensor, betas: &BetaSchedule) -> Result<InferenceTrace> {
    dynamic_infer_with(model, input, betas, ExclusionOptions::default())
}

pub fn dynamic_infer_with(
    model: &Model,
    input: &Tensor,
    betas: &BetaSchedule,
    opts: ExclusionOptions,
) -> Result<InferenceTrace> {
    let mut source = ModelSource::new(model, input)?;
    let mut trace = run_exclusion(&mut source, betas, opts)?;
    trace.charge(model.cost())?;
    Ok(trace)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceCriterion {
    /// Exit when the largest softmax probability is at least the threshold.
    #[default]
    MaxProb,
    /// Exit when the softmax entropy (nats) is at most the threshold.
    Entropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub thresholds: Vec<f32>,
    #[serde(default)]
    pub criterion: ConfidenceCriterion,
}

impl ConfidenceConfig {
    pub fn uniform(num_exits: usize, threshold: f32, criterion: ConfidenceCriterion) -> Self {
        ConfidenceConfig {
            thresholds: vec![threshold; num_exits],
            criterion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.thresholds.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::Config(format!("confidence threshold {t} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// Confidence-threshold early exit: each exit's softmax classifier may end
/// inference; otherwise the final classifier decides.
pub fn run_confidence<S: ExitSource>(source: &mut S, cfg: &ConfidenceConfig) -> Result<InferenceTrace> {
    cfg.validate()?;
    let n = source.num_exits();
    let m = source.num_classes();
    if cfg.thresholds.len() != n {
        return Err(Error::Config(format!(
            "{} confidence thresholds for {n} exits",
            cfg.thresholds.len()
        )));
    }
    let all: Vec<usize> = (0..m).collect();
    let mut trace = InferenceTrace {
        engine: Engine::Confidence,
        exit_layer: 0,
        predicted_class: 0,
        exit_reason: ExitReason::FinalLayer,
        flops: 0,
        macs: 0,
        label: None,
        events: Vec::with_capacity(n),
    };
    for exit in 1..=n {
        let q = source
            .next_classifier_probs()
            .and_then(|q| check_probs(&q, m, exit).map(|_| q))
            .map_err(|e| attach_partial(e, &trace))?;
        let max_prob = q.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let t = cfg.thresholds[exit - 1];
        let confident = match cfg.criterion {
            ConfidenceCriterion::MaxProb => max_prob >= t,
            ConfidenceCriterion::Entropy => ops::entropy(&q) <= t,
        };
        trace.exit_layer = exit;
        let predicted = argmax(&q);
        trace.events.push(ExitEvent {
            exit,
            probs: q,
            max_prob,
            recovered: None,
            excluded: Vec::new(),
            remaining: all.clone(),
        });
        if confident {
            trace.predicted_class = predicted;
            trace.exit_reason = ExitReason::Confident;
            return Ok(trace);
        }
    }
    let logits = source.final_logits().map_err(|e| attach_partial(e, &trace))?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(attach_partial(Error::non_finite("final classifier"), &trace));
    }
    trace.predicted_class = argmax(&logits);
    trace.exit_reason = ExitReason::FinalLayer;
    Ok(trace)
}

pub fn confidence_infer(model: &Model, input: &Tensor, cfg: &ConfidenceConfig) -> Result<InferenceTrace> {
    let mut source = ModelSource::new(model, input)?;
    let mut trace = run_confidence(&mut source, cfg)?;
    trace.charge(model.cost())?;
    Ok(trace)
}

/// Class-exclusion traces for a whole dataset, labels attached.
pub fn evaluate_exclusion(
    model: &Model,
    data: &Dataset,
    betas: &BetaSchedule,
    opts: ExclusionOptions,
    exec: Execution,
) -> Result<Vec<InferenceTrace>> {
    try_map_range(exec, data.len(), |i| {
        let mut t = dynamic_infer_with(model, &data.image(i), betas, opts)?;
        t.label = Some(data.label(i));
        Ok(t)
    })
}

pub fn evaluate_confidence(
    model: &Model,
    data: &Dataset,
    cfg: &ConfidenceConfig,
    exec: Execution,
) -> Result<Vec<InferenceTrace>> {
    try_map_range(exec, data.len(), |i| {
        let mut t = confidence_infer(model, &data.image(i), cfg)?;
        t.label = Some(data.label(i));
        Ok(t)
    })
}

/// Static (no early exit) accuracy of the plain backbone.
pub fn static_accuracy(model: &Model, data: &Dataset, exec: Execution) -> Result<f64> {
    let hits = try_map_range(exec, data.len(), |i| {
        Ok(model.predict_static(&data.image(i))? == data.label(i))
    })?;
    Ok(fraction(hits.iter().filter(|&&h| h).count(), hits.len()))
}

/// Every exit's outputs for every sample, for replaying the engines without
/// re-running the backbone.
pub fn collect_outputs(model: &Model, data: &Dataset, exec: Execution) -> Result<Vec<FullOutput>> {
    try_map_range(exec, data.len(), |i| model.forward_full(&data.image(i)))
}

/// Class-exclusion traces replayed from cached outputs; identical to
/// [`evaluate_exclusion`] on the same model and data.
pub fn replay_exclusion(
    outputs: &[FullOutput],
    labels: &[usize],
    betas: &BetaSchedule,
    opts: ExclusionOptions,
    cost: &CostModel,
    exec: Execution,
) -> Result<Vec<InferenceTrace>> {
    check_labels(outputs, labels)?;
    try_map_range(exec, outputs.len(), |i| {
        let mut t = run_exclusion(&mut CachedSource::new(&outputs[i]), betas, opts)?;
        t.charge(cost)?;
        t.label = Some(labels[i]);
        Ok(t)
    })
}

pub fn replay_confidence(
    outputs: &[FullOutput],
    labels: &[usize],
    cfg: &ConfidenceConfig,
    cost: &CostModel,
    exec: Execution,
) -> Result<Vec<InferenceTrace>> {
    check_labels(outputs, labels)?;
    try_map_range(exec, outputs.len(), |i| {
        let mut t = run_confidence(&mut CachedSource::new(&outputs[i]), cfg)?;
        t.charge(cost)?;
        t.label = Some(labels[i]);
        Ok(t)
    })
}

fn check_labels(outputs: &[FullOutput], labels: &[usize]) -> Result<()> {
    if outputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "cached outputs",
            detail: format!("{} outputs, {} labels", outputs.len(), labels.len()),
        });
    }
    Ok(())
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of labelled traces whose prediction matches the label.
pub fn accuracy(traces: &[InferenceTrace]) -> f64 {
    let hits = traces.iter().filter(|t| t.is_correct() == Some(true)).count();
    fraction(hits, traces.len())
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(traces: &[InferenceTrace], mut out: W) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n").map_err(|e| Error::io("<trace stream>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<InferenceTrace>> {
    let mut traces = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<trace stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line)?);
    }
    Ok(traces)
}
