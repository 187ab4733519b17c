//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the kernels or engines under test: the network is
//! re-evaluated with plain `f64` loops and the exclusion rules are re-derived
//! from boolean class masks.

#![allow(dead_code, clippy::too_many_arguments)]

use classex::inference::{ExitEvent, InferenceTrace};
use classex::model::{Activation, LayerSpec, Model, ModelConfig};
use rand::Rng;

// ---------------------------------------------------------------- random nets

/// Random conv-net with `n` conv layers (each may be followed by a pool) and
/// an optional trailing dense layer. Returns `None` for shape combinations
/// that do not fit, so callers just draw again.
pub fn random_config<R: Rng>(rng: &mut R, m: usize, n: usize, max_hw: usize) -> Option<ModelConfig> {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(4..=max_hw);
    let w = rng.random_range(4..=max_hw);
    let mut backbone = Vec::new();
    for _ in 0..n {
        let kernel = [1, 3, 3, 5][rng.random_range(0..4)];
        let stride = if rng.random_bool(0.2) { 2 } else { 1 };
        let pad = rng.random_range(0..=kernel / 2 + 1).min(kernel - 1 + usize::from(kernel == 1));
        let activation = if rng.random_bool(0.85) { Activation::Relu } else { Activation::None };
        backbone.push(LayerSpec::Conv {
            channels: rng.random_range(1..=4),
            kernel,
            stride,
            pad,
            activation,
        });
        if rng.random_bool(0.25) {
            backbone.push(LayerSpec::pool(2, rng.random_range(1..=2)));
        }
    }
    if rng.random_bool(0.3) {
        backbone.push(LayerSpec::dense(rng.random_range(2..=6)));
    }
    let cfg = ModelConfig {
        input_shape: [c, h, w],
        num_classes: m,
        num_exits: n,
        backbone,
    };
    cfg.validate().ok().map(|_| cfg)
}

/// Draws until a valid configuration comes up.
pub fn random_valid_config<R: Rng>(rng: &mut R, m: usize, n: usize, max_hw: usize) -> ModelConfig {
    loop {
        if let Some(c) = random_config(rng, m, n, max_hw) {
            return c;
        }
    }
}

pub fn random_input<R: Rng>(rng: &mut R, shape: [usize; 3]) -> Vec<f32> {
    (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------- f32 loop kernels

/// Direct convolution, accumulating bias first and then input channel, kernel
/// row, kernel column.
pub fn conv_loops(
    input: &[f32],
    [cin, h, w]: [usize; 3],
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; cout * ho * wo];
    for oc in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[oc];
                for ic in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                // A zero pixel still takes part in the sum.
                                acc += weight[((oc * cin + ic) * k + ky) * k + kx] * 0.0;
                                continue;
                            }
                            acc += weight[((oc * cin + ic) * k + ky) * k + kx]
                                * input[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, ho, wo)
}

// ---------------------------------------------------------------- f64 reference network

/// Everything a forward pass depends on discretely: ReLU signs, max-pool
/// winners and whether a probability hit the BCE clamp. Finite differences
/// are only trusted where this does not change.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Signature(pub Vec<u32>);

pub struct RefOutput {
    pub final_logits: Vec<f64>,
    pub exclusion_logits: Vec<Vec<f64>>,
    pub signature: Signature,
}

enum RefLayer {
    Conv {
        w: usize,
        b: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    Pool {
        k: usize,
        stride: usize,
    },
    Dense {
        w: usize,
        b: usize,
        units: usize,
        relu: bool,
    },
}

/// Mirror of a model's architecture evaluated in `f64`. Parameters are looked
/// up by name so the tensor order of the model is not assumed.
pub struct RefNet {
    pub input_shape: [usize; 3],
    pub m: usize,
    layers: Vec<RefLayer>,
    /// (conv layer index, exclusion weight index, exclusion bias index)
    exits: Vec<(usize, usize, usize)>,
    classifier: (usize, usize),
}

impl RefNet {
    pub fn new(model: &Model) -> Self {
        let cfg = model.config();
        let idx = |name: &str| {
            model
                .param_specs()
                .iter()
                .position(|s| s.name == name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
        };
        let mut layers = Vec::new();
        let mut exits = Vec::new();
        for (l, spec) in cfg.backbone.iter().enumerate() {
            layers.push(match *spec {
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                } => {
                    let e = exits.len() + 1;
                    exits.push((
                        l,
                        idx(&format!("exit.{e}.exclusion.weight")),
                        idx(&format!("exit.{e}.exclusion.bias")),
                    ));
                    RefLayer::Conv {
                        w: idx(&format!("backbone.{l}.weight")),
                        b: idx(&format!("backbone.{l}.bias")),
                        cout: channels,
                        k: kernel,
                        stride,
                        pad,
                        relu: activation == Activation::Relu,
                    }
                }
                LayerSpec::Pool { kernel, stride } => RefLayer::Pool { k: kernel, stride },
                LayerSpec::Dense { units, activation } => RefLayer::Dense {
                    w: idx(&format!("backbone.{l}.weight")),
                    b: idx(&format!("backbone.{l}.bias")),
                    units,
                    relu: activation == Activation::Relu,
                },
            });
        }
        RefNet {
            input_shape: cfg.input_shape,
            m: cfg.num_classes,
            layers,
            exits,
            classifier: (idx("classifier.weight"), idx("classifier.bias")),
        }
    }

    pub fn forward(&self, params: &[Vec<f64>], input: &[f64]) -> RefOutput {
        let [mut c, mut h, mut w] = self.input_shape;
        let mut x = input.to_vec();
        let mut sig = Vec::new();
        let mut exclusion_logits = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match *layer {
                RefLayer::Conv {
                    w: wi,
                    b: bi,
                    cout,
                    k,
                    stride,
                    pad,
                    relu,
                } => {
                    let (mut y, ho, wo) = conv_f64(&x, [c, h, w], &params[wi], &params[bi], cout, k, stride, pad);
                    if relu {
                        relu_in_place(&mut y, &mut sig);
                    }
                    x = y;
                    c = cout;
                    h = ho;
                    w = wo;
                    if let Some(&(_, ew, eb)) = self.exits.iter().find(|e| e.0 == l) {
                        let pooled = gap_f64(&x, [c, h, w]);
                        exclusion_logits.push(affine(&params[ew], &params[eb], &pooled, self.m));
                    }
                }
                RefLayer::Pool { k, stride } => {
                    let (y, ho, wo) = maxpool_f64(&x, [c, h, w], k, stride, &mut sig);
                    x = y;
                    h = ho;
                    w = wo;
                }
                RefLayer::Dense { w: wi, b: bi, units, relu } => {
                    let mut y = affine(&params[wi], &params[bi], &x, units);
                    if relu {
                        relu_in_place(&mut y, &mut sig);
                    }
                    x = y;
                }
            }
        }
        let final_logits = affine(&params[self.classifier.0], &params[self.classifier.1], &x, self.m);
        RefOutput {
            final_logits,
            exclusion_logits,
            signature: Signature(sig),
        }
    }

    /// Composite objective: cross-entropy of the final logits plus
    /// `alpha / (N - i + 1)` times the clamped BCE of every exclusion unit.
    /// Appends clamp flags to the signature.
    pub fn composite_loss(&self, params: &[Vec<f64>], input: &[f64], label: usize, alpha: f64) -> (f64, Signature) {
        let out = self.forward(params, input);
        let mut sig = out.signature;
        let z = &out.final_logits;
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        let mut loss = lse - z[label];
        let n = out.exclusion_logits.len();
        let eps = 1e-7f64;
        for (i, logits) in out.exclusion_logits.iter().enumerate() {
            let coef = alpha / (n - i) as f64;
            for (j, &zz) in logits.iter().enumerate() {
                let p = 1.0 / (1.0 + (-zz).exp());
                let clamped = p.clamp(eps, 1.0 - eps);
                sig.0.push(u32::from(clamped != p));
                let t = if j == label { 1.0 } else { 0.0 };
                loss += coef * -(t * clamped.ln() + (1.0 - t) * (1.0 - clamped).ln());
            }
        }
        (loss, sig)
    }
}

pub fn conv_f64(
    x: &[f64],
    [c, h, w]: [usize; 3],
    wt: &[f64],
    bs: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; cout * ho * wo];
    for oc in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bs[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt[((oc * c + ic) * k + ky) * k + kx] * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                y[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (y, ho, wo)
}

/// Max pooling; pushes the in-window index of every winner onto `sig`.
pub fn maxpool_f64(x: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, sig: &mut Vec<u32>) -> (Vec<f64>, usize, usize) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u32;
                for ky in 0..k {
                    for kx in 0..k {
                        let v = x[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                        if v > best {
                            best = v;
                            arg = (ky * k + kx) as u32;
                        }
                    }
                }
                sig.push(arg);
                y[(ch * ho + oy) * wo + ox] = best;
            }
        }
    }
    (y, ho, wo)
}

pub fn gap_f64(x: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let area = (h * w) as f64;
    (0..c).map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area).collect()
}

pub fn relu_in_place(y: &mut [f64], sig: &mut Vec<u32>) {
    for v in y.iter_mut() {
        sig.push(u32::from(*v > 0.0));
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out).map(|o| b[o] + (0..n).map(|i| w[o * n + i] * x[i]).sum::<f64>()).collect()
}

pub fn params_f64(model: &Model) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect()
}

// ---------------------------------------------------------------- exclusion simulator

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent {
    pub recovered: Option<usize>,
    pub excluded: Vec<usize>,
    pub remaining: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub exit_layer: usize,
    pub predicted: usize,
    pub single_class: bool,
    pub events: Vec<SimEvent>,
}

fn first_max(v: &[f32], allowed: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (j, &x) in v.iter().enumerate() {
        if allowed[j] && best.is_none_or(|b| x > v[b]) {
            best = Some(j);
        }
    }
    best.expect("at least one allowed class")
}

/// Replays the exclusion rules on explicit probability vectors.
pub fn simulate(probs: &[Vec<f32>], final_logits: &[f32], betas: &[f64], restrict_final: bool) -> SimTrace {
    let m = final_logits.len();
    let mut alive = vec![true; m];
    let mut events = Vec::new();
    for (i, p) in probs.iter().enumerate() {
        let mut recovered = None;
        if i > 0 {
            let g = first_max(p, &vec![true; m]);
            if !alive[g] {
                alive[g] = true;
                recovered = Some(g);
            }
        }
        let x = (0..m).filter(|&j| alive[j]).map(|j| p[j]).fold(f32::NEG_INFINITY, f32::max);
        let cut = betas[i] * x as f64;
        let excluded: Vec<usize> = (0..m).filter(|&j| alive[j] && (p[j] as f64) < cut).collect();
        for &j in &excluded {
            alive[j] = false;
        }
        let remaining: Vec<usize> = (0..m).filter(|&j| alive[j]).collect();
        let done = remaining.len() == 1;
        events.push(SimEvent {
            recovered,
            excluded,
            remaining: remaining.clone(),
        });
        if done {
            return SimTrace {
                exit_layer: i + 1,
                predicted: remaining[0],
                single_class: true,
                events,
            };
        }
    }
    let allowed = if restrict_final { alive } else { vec![true; m] };
    SimTrace {
        exit_layer: probs.len(),
        predicted: first_max(final_logits, &allowed),
        single_class: false,
        events,
    }
}

/// Compares an engine trace to a simulated one; returns a description of
/// the first difference.
pub fn trace_mismatch(t: &InferenceTrace, s: &SimTrace) -> Option<String> {
    if t.exit_layer != s.exit_layer {
        return Some(format!("exit layer {} vs {}", t.exit_layer, s.exit_layer));
    }
    if t.predicted_class != s.predicted {
        return Some(format!("prediction {} vs {}", t.predicted_class, s.predicted));
    }
    if t.events.len() != s.events.len() {
        return Some(format!("{} events vs {}", t.events.len(), s.events.len()));
    }
    for (a, b) in t.events.iter().zip(&s.events) {
        let ExitEvent {
            exit,
            recovered,
            excluded,
            remaining,
            ..
        } = a;
        if recovered != &b.recovered || excluded != &b.excluded || remaining != &b.remaining {
            return Some(format!("exit {exit}: {a:?} vs {b:?}"));
        }
    }
    None
}
