//! Class exclusion against the confidence-threshold baseline at matched
//! accuracy.
//!
//! The baseline's uniform threshold is swept over a grid; the point whose
//! accuracy is closest to the class-exclusion accuracy (and within the
//! tolerance) is the one compared. Ties go to the cheaper point.

use serde::{Deserialize, Serialize};

use crate::costmodel::{average_flops, CostModel};
use crate::error::{Error, Result};
use crate::inference::{accuracy, replay_confidence, replay_exclusion, BetaSchedule, ConfidenceConfig, ConfidenceCriterion, ExclusionOptions};
use crate::model::FullOutput;
use crate::parallel::Execution;
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineProtocol {
    /// Uniform thresholds tried for every exit. For the entropy criterion
    /// each value is multiplied by `ln M`.
    pub grid: Vec<f32>,
    /// Largest accepted accuracy gap, in percentage points.
    pub tolerance: f64,
    pub criterion: ConfidenceCriterion,
}

impl Default for BaselineProtocol {
    fn default() -> Self {
        BaselineProtocol {
            grid: default_grid(),
            tolerance: 0.5,
            criterion: ConfidenceCriterion::MaxProb,
        }
    }
}

/// `0.00, 0.01, ..., 1.00` plus a few values close to one and one above it
/// (never exits early).
pub fn default_grid() -> Vec<f32> {
    let mut g: Vec<f32> = (0..=100).map(|k| k as f32 / 100.0).collect();
    g.extend([0.995, 0.998, 0.999, 0.9995, 0.9999, 1.01]);
    g.sort_by(f32::total_cmp);
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub accuracy: f64,
    pub mean_macs: f64,
    pub mean_flops: f64,
    /// Baseline threshold, for sweep points.
    pub threshold: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub original: OperatingPoint,
    pub class_exclusion: OperatingPoint,
    /// Closest baseline point; present whenever the sweep is non-empty.
    pub baseline: Option<OperatingPoint>,
    /// Baseline accuracy within tolerance of the class-exclusion accuracy.
    pub matched: bool,
    /// Class exclusion spends no more FLOPs than the matched baseline.
    pub fewer_flops_than_baseline: Option<bool>,
    pub sweep: Vec<OperatingPoint>,
    pub warnings: Vec<String>,
}

impl Comparison {
    /// `engine,accuracy,mean_macs,mean_flops` rows for the three engines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("engine,accuracy,mean_macs,mean_flops\n");
        let rows = [
            ("original", Some(&self.original)),
            ("class_exclusion", Some(&self.class_exclusion)),
            ("confidence_baseline", self.baseline.as_ref()),
        ];
        for (name, p) in rows {
            if let Some(p) = p {
                s.push_str(&format!("{name},{},{},{}\n", p.accuracy, p.mean_macs, p.mean_flops));
            }
        }
        s
    }
}

pub fn compare_cached(
    outputs: &[FullOutput],
    labels: &[usize],
    cost: &CostModel,
    betas: &BetaSchedule,
    protocol: &BaselineProtocol,
    exec: Execution,
) -> Result<Comparison> {
    if outputs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if protocol.tolerance.is_nan() || protocol.tolerance < 0.0 {
        return Err(Error::Config(format!("tolerance {} must be >= 0", protocol.tolerance)));
    }
    let static_hits = outputs
        .iter()
        .zip(labels)
        .filter(|(o, &l)| argmax(&o.final_logits) == l)
        .count();
    let original = OperatingPoint {
        accuracy: static_hits as f64 / outputs.len() as f64,
        mean_macs: cost.static_macs() as f64,
        mean_flops: cost.static_flops() as f64,
        threshold: None,
    };
    let traces = replay_exclusion(outputs, labels, betas, ExclusionOptions::default(), cost, exec)?;
    let summary = average_flops(&traces, cost)?;
    let class_exclusion = OperatingPoint {
        accuracy: accuracy(&traces),
        mean_macs: summary.mean_macs,
        mean_flops: summary.mean_flops,
        threshold: None,
    };

    let scale = match protocol.criterion {
        ConfidenceCriterion::MaxProb => 1.0,
        ConfidenceCriterion::Entropy => (cost.num_classes as f32).ln(),
    };
    let mut sweep = Vec::with_capacity(protocol.grid.len());
    for &t in &protocol.grid {
        let cfg = ConfidenceConfig::uniform(cost.num_exits(), t * scale, protocol.criterion);
        let tr = replay_confidence(outputs, labels, &cfg, cost, exec)?;
        let s = average_flops(&tr, cost)?;
        sweep.push(OperatingPoint {
            accuracy: accuracy(&tr),
            mean_macs: s.mean_macs,
            mean_flops: s.mean_flops,
            threshold: Some(t),
        });
    }

    let target = class_exclusion.accuracy;
    let baseline = sweep
        .iter()
        .min_by(|a, b| {
            let da = (a.accuracy - target).abs();
            let db = (b.accuracy - target).abs();
            da.total_cmp(&db).then(a.mean_flops.total_cmp(&b.mean_flops))
        })
        .cloned();
    let mut warnings = Vec::new();
    let matched = match &baseline {
        Some(b) => (b.accuracy - target).abs() * 100.0 <= protocol.tolerance + 1e-9,
        None => false,
    };
    if !matched {
        warnings.push(format!(
            "no baseline threshold within {} points of the class-exclusion accuracy {:.4}",
            protocol.tolerance, target
        ));
    }
    let fewer = baseline.as_ref().map(|b| class_exclusion.mean_flops <= b.mean_flops);
    if fewer == Some(false) {
        warnings.push(format!(
            "class exclusion uses more FLOPs ({:.0}) than the matched baseline ({:.0})",
            class_exclusion.mean_flops,
            baseline.as_ref().unwrap().mean_flops
        ));
    }
    Ok(Comparison {
        original,
        class_exclusion,
        baseline,
        matched,
        fewer_flops_than_baseline: fewer,
        sweep,
        warnings,
    })
}
