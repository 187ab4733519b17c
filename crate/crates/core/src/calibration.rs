//! Greedy search of per-exit exclusion coefficients.
//!
//! Exits are visited from the most to the least expensive owning layer. Each
//! one sweeps `beta = 0, step, 2*step, ...` with the coefficients already
//! chosen held fixed and the unvisited exits at zero, and keeps the last value
//! whose validation accuracy stays within `epsilon` percentage points of the
//! all-zero schedule.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::costmodel::CostModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{accuracy, collect_outputs, replay_exclusion, BetaSchedule, ExclusionOptions};
use crate::model::{FullOutput, Model};
use crate::parallel::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Largest tolerated accuracy loss, in percentage points.
    pub epsilon: f64,
    pub step: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epsilon: 1.0,
            step: 0.01,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::Config(format!("step {} outside (0, 1]", self.step)));
        }
        Ok(())
    }

    /// Sweep values `k * step` up to 1, rounded to 10 decimals.
    pub fn probe_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let beta = ((k as f64 * self.step) * 1e10).round() / 1e10;
            if beta > 1.0 {
                break;
            }
            out.push(beta);
            k += 1;
        }
        out
    }
}

/// 1-based exits sorted by MAC count descending, shallower first on ties.
pub fn rank_by_macs(macs: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=macs.len()).collect();
    order.sort_by(|&a, &b| macs[b - 1].cmp(&macs[a - 1]).then(a.cmp(&b)));
    order
}

pub fn rank_exits_by_macs(cost: &CostModel) -> Result<Vec<usize>> {
    let macs = cost.exit_layer_macs();
    if macs.len() != cost.num_exits() || macs.is_empty() {
        return Err(Error::Inconsistent(format!(
            "cost model lists {} exit layers for {} exits",
            macs.len(),
            cost.num_exits()
        )));
    }
    Ok(rank_by_macs(&macs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub exit_index: usize,
    pub beta: f64,
    pub val_accuracy: f64,
    /// Whether the probe stayed within tolerance.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub betas: BetaSchedule,
    pub order: Vec<usize>,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub audit: Vec<ProbeRecord>,
}

impl SearchResult {
    pub fn audit_csv(&self) -> String {
        audit_csv(&self.audit)
    }
}

pub fn audit_csv(audit: &[ProbeRecord]) -> String {
    let mut s = String::from("exit_index,beta,val_accuracy,accepted\n");
    for r in audit {
        writeln!(s, "{},{},{},{}", r.exit_index, r.beta, r.val_accuracy, r.accepted).unwrap();
    }
    s
}

/// The greedy search over an arbitrary accuracy function (fraction in
/// `[0, 1]`) of a schedule.
pub fn search_with<F>(num_exits: usize, order: &[usize], cfg: &SearchConfig, mut accuracy_of: F) -> Result<SearchResult>
where
    F: FnMut(&BetaSchedule) -> Result<f64>,
{
    cfg.validate()?;
    let mut betas = BetaSchedule::zeros(num_exits);
    let baseline = accuracy_of(&betas)?;
    let mut current = baseline;
    let mut audit = Vec::new();
    let probes = cfg.probe_values();
    for &exit in order {
        for &beta in &probes {
            let candidate = betas.with(exit, beta)?;
            let acc = accuracy_of(&candidate)?;
            // Slack absorbs rounding in the percentage conversion.
            let ok = (baseline - acc) * 100.0 <= cfg.epsilon + 1e-9;
            audit.push(ProbeRecord {
                exit_index: exit,
                beta,
                val_accuracy: acc,
                accepted: ok,
            });
            if !ok {
                break;
            }
            betas = candidate;
            current = acc;
        }
    }
    Ok(SearchResult {
        betas,
        order: order.to_vec(),
        baseline_accuracy: baseline,
        final_accuracy: current,
        audit,
    })
}

/// Search over cached exit outputs of a validation set.
pub fn search_betas_cached(
    outputs: &[FullOutput],
    labels: &[usize],
    cost: &CostModel,
    cfg: &SearchConfig,
    opts: ExclusionOptions,
    exec: Execution,
) -> Result<SearchResult> {
    if outputs.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let order = rank_exits_by_macs(cost)?;
    search_with(cost.num_exits(), &order, cfg, |b| {
        Ok(accuracy(&replay_exclusion(outputs, labels, b, opts, cost, exec)?))
    })
}

/// Runs the model once over `val`, then searches on the cached outputs.
pub fn search_betas(model: &Model, val: &Dataset, cfg: &SearchConfig, exec: Execution) -> Result<SearchResult> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let outputs = collect_outputs(model, val, exec)?;
    search_betas_cached(&outputs, val.labels(), model.cost(), cfg, ExclusionOptions::default(), exec)
}
