//! Closed-form MAC and FLOP accounting.
//!
//! Counting convention, shared with the instrumented kernels:
//!
//! | operation                | MACs          | FLOPs                              |
//! |--------------------------|---------------|------------------------------------|
//! | conv `Cin->Cout`, `KxK`  | `Cout*Cin*K²*Ho*Wo` | `2*MACs + Cout*Ho*Wo` (bias)  |
//! | dense `n->m`             | `m*n`         | `2*MACs + m` (bias)                |
//! | ReLU / sigmoid / softmax | 0             | 1 per element                      |
//! | max pool `KxK`           | 0             | `K²-1` comparisons per output      |
//! | global average pool      | 0             | `C*H*W` (`H*W-1` adds + 1 divide)  |
//!
//! An exit point costs a global average pool plus `M` affine units and `M`
//! sigmoids (class exclusion) or one `C->M` affine map and a softmax
//! (confidence baseline); the two overheads are equal under this convention.
//! Exit overhead is charged for every exit a trace visits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Engine, ExitReason, InferenceTrace};
use crate::model::{Activation, FeatureShape, LayerSpec, ModelConfig};

/// MACs of one backbone layer fed with `input`.
pub fn layer_macs(spec: &LayerSpec, input: FeatureShape) -> Result<u64> {
    let out = spec.output_shape(input)?;
    Ok(match (*spec, input) {
        (LayerSpec::Conv { kernel, .. }, FeatureShape::Map { c: cin, .. }) => {
            (out.len() * cin * kernel * kernel) as u64
        }
        (LayerSpec::Pool { .. }, _) => 0,
        (LayerSpec::Dense { units, .. }, _) => (units * input.len()) as u64,
        _ => unreachable!("output_shape rejected the combination"),
    })
}

/// FLOPs of one backbone layer fed with `input`, activation included.
pub fn layer_flops(spec: &LayerSpec, input: FeatureShape) -> Result<u64> {
    let out = spec.output_shape(input)?.len() as u64;
    let macs = layer_macs(spec, input)?;
    Ok(match *spec {
        LayerSpec::Conv { activation, .. } | LayerSpec::Dense { activation, .. } => {
            let act = if activation == Activation::Relu { out } else { 0 };
            2 * macs + out + act
        }
        LayerSpec::Pool { kernel, .. } => out * (kernel * kernel - 1) as u64,
    })
}

/// Global average pool over `channels x area` plus `M` exclusion units and
/// `M` sigmoids.
pub fn exit_overhead_flops(channels: usize, area: usize, num_classes: usize) -> u64 {
    let (c, a, m) = (channels as u64, area as u64, num_classes as u64);
    c * a + (2 * c * m + m) + m
}

pub fn exit_overhead_macs(channels: usize, num_classes: usize) -> u64 {
    (channels * num_classes) as u64
}

/// Global average pool plus a `C->M` affine classifier and its softmax.
pub fn classifier_overhead_flops(channels: usize, area: usize, num_classes: usize) -> u64 {
    let (c, a, m) = (channels as u64, area as u64, num_classes as u64);
    c * a + (2 * c * m + m) + m
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    pub macs: u64,
    pub flops: u64,
    /// 1-based exit owned by this layer, if any.
    pub exit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitCost {
    pub exit: usize,
    /// Backbone index of the owning convolution.
    pub layer: usize,
    pub channels: usize,
    pub area: usize,
    /// Backbone work between the previous exit and this one.
    pub stage_macs: u64,
    pub stage_flops: u64,
    pub exclusion_macs: u64,
    pub exclusion_flops: u64,
    pub classifier_macs: u64,
    pub classifier_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub num_classes: usize,
    pub layers: Vec<LayerCost>,
    pub exits: Vec<ExitCost>,
    /// Layers after the last exit plus the final classifier.
    pub tail_macs: u64,
    pub tail_flops: u64,
    pub classifier_macs: u64,
    pub classifier_flops: u64,
}

impl CostModel {
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        let plan = config.plan()?;
        let m = config.num_classes;
        let mut layers = Vec::with_capacity(config.backbone.len());
        for (l, spec) in config.backbone.iter().enumerate() {
            let input = plan.inputs[l];
            let exit = plan.exit_layers.iter().position(|&e| e == l).map(|i| i + 1);
            layers.push(LayerCost {
                layer: l,
                kind: match spec {
                    LayerSpec::Conv { .. } => "conv",
                    LayerSpec::Pool { .. } => "pool",
                    LayerSpec::Dense { .. } => "dense",
                }
                .to_string(),
                macs: layer_macs(spec, input)?,
                flops: layer_flops(spec, input)?,
                exit,
            });
        }
        let mut exits = Vec::with_capacity(plan.exit_layers.len());
        let mut start = 0;
        for (i, &layer) in plan.exit_layers.iter().enumerate() {
            let FeatureShape::Map { c, h, w } = plan.output_of(layer) else {
                unreachable!("conv layers produce maps")
            };
            let stage = &layers[start..=layer];
            exits.push(ExitCost {
                exit: i + 1,
                layer,
                channels: c,
                area: h * w,
                stage_macs: stage.iter().map(|l| l.macs).sum(),
                stage_flops: stage.iter().map(|l| l.flops).sum(),
                exclusion_macs: exit_overhead_macs(c, m),
                exclusion_flops: exit_overhead_flops(c, h * w, m),
                classifier_macs: exit_overhead_macs(c, m),
                classifier_flops: classifier_overhead_flops(c, h * w, m),
            });
            start = layer + 1;
        }
        let features = plan.classifier_inputs();
        let classifier_macs = (features * m) as u64;
        let classifier_flops = 2 * classifier_macs + m as u64;
        let tail = &layers[start..];
        Ok(CostModel {
            num_classes: m,
            tail_macs: tail.iter().map(|l| l.macs).sum::<u64>() + classifier_macs,
            tail_flops: tail.iter().map(|l| l.flops).sum::<u64>() + classifier_flops,
            layers,
            exits,
            classifier_macs,
            classifier_flops,
        })
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    /// Cost of the plain backbone without any exit heads.
    pub fn static_flops(&self) -> u64 {
        self.exits.iter().map(|e| e.stage_flops).sum::<u64>() + self.tail_flops
    }

    pub fn static_macs(&self) -> u64 {
        self.exits.iter().map(|e| e.stage_macs).sum::<u64>() + self.tail_macs
    }

    /// MACs of the convolution owning each exit, in exit order.
    pub fn exit_layer_macs(&self) -> Vec<u64> {
        self.exits.iter().map(|e| self.layers[e.layer].macs).collect()
    }

    fn check_trace(&self, trace: &InferenceTrace) -> Result<()> {
        let n = self.exits.len();
        if trace.exit_layer == 0 || trace.exit_layer > n {
            return Err(Error::Inconsistent(format!(
                "trace exits at layer {} but the cost model has {n} exits",
                trace.exit_layer
            )));
        }
        if trace.events.len() != trace.exit_layer {
            return Err(Error::Inconsistent(format!(
                "trace records {} exit events but exits at layer {}",
                trace.events.len(),
                trace.exit_layer
            )));
        }
        Ok(())
    }

    /// FLOPs spent by one traced inference.
    pub fn flops_of_trace(&self, trace: &InferenceTrace) -> Result<u64> {
        self.check_trace(trace)?;
        let visited = &self.exits[..trace.exit_layer];
        let mut total: u64 = visited.iter().map(|e| e.stage_flops).sum();
        total += match trace.engine {
            Engine::ClassExclusion => visited.iter().map(|e| e.exclusion_flops).sum::<u64>(),
            Engine::Confidence => visited.iter().map(|e| e.classifier_flops).sum::<u64>(),
        };
        if trace.exit_reason == ExitReason::FinalLayer {
            total += self.tail_flops;
        }
        Ok(total)
    }

    pub fn macs_of_trace(&self, trace: &InferenceTrace) -> Result<u64> {
        self.check_trace(trace)?;
        let visited = &self.exits[..trace.exit_layer];
        let mut total: u64 = visited.iter().map(|e| e.stage_macs).sum();
        total += match trace.engine {
            Engine::ClassExclusion => visited.iter().map(|e| e.exclusion_macs).sum::<u64>(),
            Engine::Confidence => visited.iter().map(|e| e.classifier_macs).sum::<u64>(),
        };
        if trace.exit_reason == ExitReason::FinalLayer {
            total += self.tail_macs;
        }
        Ok(total)
    }

    /// CSV table `layer,macs,flops,exit_overhead`; the last row is the final
    /// classifier.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,macs,flops,exit_overhead\n");
        for l in &self.layers {
            let overhead = l.exit.map(|e| self.exits[e - 1].exclusion_flops).unwrap_or(0);
            out.push_str(&format!("{},{},{},{}\n", l.layer, l.macs, l.flops, overhead));
        }
        out.push_str(&format!(
            "classifier,{},{},0\n",
            self.classifier_macs, self.classifier_flops
        ));
        out
    }
}

/// Mean cost of a set of traces against the static backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub count: usize,
    pub mean_flops: f64,
    pub mean_macs: f64,
    pub static_flops: u64,
    pub static_macs: u64,
    /// `1 - mean_flops / static_flops`.
    pub flops_reduction: f64,
    pub macs_reduction: f64,
}

pub fn average_flops(traces: &[InferenceTrace], cost: &CostModel) -> Result<CostSummary> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces to average"));
    }
    let mut flops: u64 = 0;
    let mut macs: u64 = 0;
    for t in traces {
        flops += cost.flops_of_trace(t)?;
        macs += cost.macs_of_trace(t)?;
    }
    let n = traces.len() as f64;
    let mean_flops = flops as f64 / n;
    let mean_macs = macs as f64 / n;
    Ok(CostSummary {
        count: traces.len(),
        mean_flops,
        mean_macs,
        static_flops: cost.static_flops(),
        static_macs: cost.static_macs(),
        flops_reduction: 1.0 - mean_flops / cost.static_flops() as f64,
        macs_reduction: 1.0 - mean_macs / cost.static_macs() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize) -> FeatureShape {
        FeatureShape::Map { c, h, w }
    }

    #[test]
    fn conv_and_dense_reference_counts() {
        let conv = LayerSpec::conv(16, 3, 1, 1);
        assert_eq!(layer_macs(&conv, map(3, 32, 32)).unwrap(), 442_368);
        let dense = LayerSpec::dense(10);
        assert_eq!(layer_macs(&dense, FeatureShape::Flat(512)).unwrap(), 5_120);
        assert_eq!(layer_macs(&LayerSpec::pool(2, 2), map(4, 8, 8)).unwrap(), 0);
    }

    #[test]
    fn exit_overhead_reference_counts() {
        assert_eq!(exit_overhead_flops(16, 64, 10), 1024 + 330 + 10);
        assert_eq!(exit_overhead_flops(7, 5, 1), 7 * 5 + (2 * 7 + 1) + 1);
    }

    #[test]
    fn incompatible_layer_is_an_error() {
        assert!(layer_macs(&LayerSpec::conv(4, 5, 1, 0), map(1, 3, 3)).is_err());
        assert!(layer_macs(&LayerSpec::pool(2, 2), FeatureShape::Flat(8)).is_err());
    }

    #[test]
    fn flops_at_least_twice_macs() {
        let cfg = ModelConfig {
            input_shape: [3, 28, 28],
            num_classes: 10,
            num_exits: 3,
            backbone: vec![
                LayerSpec::conv(16, 3, 1, 1),
                LayerSpec::pool(2, 2),
                LayerSpec::conv(32, 3, 1, 1),
                LayerSpec::pool(2, 2),
                LayerSpec::conv(64, 3, 1, 1),
            ],
        };
        let cost = CostModel::from_config(&cfg).unwrap();
        for l in &cost.layers {
            assert!(l.flops >= 2 * l.macs);
        }
        assert_eq!(cost.exit_layer_macs(), vec![338_688, 903_168, 903_168]);
        let csv = cost.to_csv();
        assert!(csv.starts_with("layer,macs,flops,exit_overhead\n"));
        assert_eq!(csv.lines().count(), 1 + 5 + 1);
    }
}
