//! Backbone, exit points and staged forward passes.
//!
//! A backbone is a list of [`LayerSpec`]s. Every convolutional layer owns one
//! exit point that taps the layer's post-activation feature maps. An exit point
//! carries `M` class-exclusion units (one affine unit per class over the
//! global-average-pooled feature vector, each followed by a sigmoid) and one
//! softmax classifier used only by the confidence baseline. After the last
//! backbone layer the features are flattened into the final classifier.
//!
//! Stage `i` is the run of backbone layers ending at the `i`-th convolution;
//! the tail is whatever follows the last convolution plus the final classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::CostModel;
use crate::error::{Error, Result};
use crate::tensor::{ops, GradTape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        activation: Activation,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn conv(channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            channels,
            kernel,
            stride,
            pad,
            activation: Activation::Relu,
        }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        LayerSpec::Pool { kernel, stride }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            activation: Activation::Relu,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    /// Shape this layer produces from `input`.
    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        match (*self, input) {
            (
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                FeatureShape::Map { h, w, .. },
            ) => {
                if channels == 0 {
                    return Err(Error::Config("conv layer with zero channels".into()));
                }
                match (
                    ops::conv_out_dim(h, kernel, stride, pad),
                    ops::conv_out_dim(w, kernel, stride, pad),
                ) {
                    (Some(ho), Some(wo)) => Ok(FeatureShape::Map { c: channels, h: ho, w: wo }),
                    _ => Err(Error::Config(format!(
                        "conv kernel {kernel} stride {stride} pad {pad} does not fit {h}x{w}"
                    ))),
                }
            }
            (LayerSpec::Pool { kernel, stride }, FeatureShape::Map { c, h, w }) => {
                match (ops::conv_out_dim(h, kernel, stride, 0), ops::conv_out_dim(w, kernel, stride, 0)) {
                    (Some(ho), Some(wo)) => Ok(FeatureShape::Map { c, h: ho, w: wo }),
                    _ => Err(Error::Config(format!(
                        "pool window {kernel} stride {stride} does not fit {h}x{w}"
                    ))),
                }
            }
            (LayerSpec::Dense { units, .. }, _) => {
                if units == 0 {
                    return Err(Error::Config("dense layer with zero units".into()));
                }
                Ok(FeatureShape::Flat(units))
            }
            (spec, FeatureShape::Flat(_)) => Err(Error::Config(format!(
                "{spec:?} needs a [C,H,W] feature map but follows a dense layer"
            ))),
        }
    }
}

/// Shape of the activations flowing between backbone layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn len(self) -> usize {
        match self {
            FeatureShape::Map { c, h, w } => c * h * w,
            FeatureShape::Flat(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Must equal the number of convolutional layers in `backbone`.
    pub num_exits: usize,
    pub backbone: Vec<LayerSpec>,
}

/// Per-layer shapes resolved from a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    /// `inputs[l]` feeds backbone layer `l`; `inputs[L]` feeds the classifier.
    pub inputs: Vec<FeatureShape>,
    /// Backbone index of the convolution owning each exit, in exit order.
    pub exit_layers: Vec<usize>,
}

impl ShapePlan {
    pub fn output_of(&self, layer: usize) -> FeatureShape {
        self.inputs[layer + 1]
    }

    pub fn classifier_inputs(&self) -> usize {
        self.inputs.last().map(|s| s.len()).unwrap_or(0)
    }
}

impl ModelConfig {
    pub fn conv_count(&self) -> usize {
        self.backbone.iter().filter(|l| l.is_conv()).count()
    }

    pub fn plan(&self) -> Result<ShapePlan> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("degenerate input shape {:?}", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_exits == 0 {
            return Err(Error::Config("at least one exit point is required".into()));
        }
        if self.num_exits != self.conv_count() {
            return Err(Error::Config(format!(
                "num_exits = {} but the backbone has {} conv layers (one exit per conv layer)",
                self.num_exits,
                self.conv_count()
            )));
        }
        let mut inputs = vec![FeatureShape::Map { c, h, w }];
        let mut exit_layers = Vec::new();
        for (l, spec) in self.backbone.iter().enumerate() {
            let next = spec
                .output_shape(*inputs.last().unwrap())
                .map_err(|e| Error::Config(format!("layer {l}: {e}")))?;
            if spec.is_conv() {
                exit_layers.push(l);
            }
            inputs.push(next);
        }
        Ok(ShapePlan { inputs, exit_layers })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
enum LayerParams {
    Conv {
        params: Affine,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
    Dense {
        params: Affine,
        activation: Activation,
    },
}

#[derive(Clone, Copy, Debug)]
struct ExitParams {
    layer: usize,
    exclusion: Affine,
    classifier: Affine,
}

/// Declared name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Parameter layout: every tensor's name and shape in declaration order.
fn layout(config: &ModelConfig, plan: &ShapePlan) -> (Vec<ParamSpec>, Vec<LayerParams>, Vec<ExitParams>, Affine) {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| {
        specs.push(ParamSpec { name, shape });
        specs.len() - 1
    };
    let mut layers = Vec::new();
    for (l, spec) in config.backbone.iter().enumerate() {
        let input = plan.inputs[l];
        layers.push(match *spec {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                pad,
                activation,
            } => {
                let FeatureShape::Map { c, .. } = input else { unreachable!("plan validated") };
                let weight = add(format!("backbone.{l}.weight"), vec![channels, c, kernel, kernel]);
                let bias = add(format!("backbone.{l}.bias"), vec![channels]);
                LayerParams::Conv {
                    params: Affine { weight, bias },
                    stride,
                    pad,
                    activation,
                }
            }
            LayerSpec::Pool { kernel, stride } => LayerParams::Pool { kernel, stride },
            LayerSpec::Dense { units, activation } => {
                let weight = add(format!("backbone.{l}.weight"), vec![units, input.len()]);
                let bias = add(format!("backbone.{l}.bias"), vec![units]);
                LayerParams::Dense {
                    params: Affine { weight, bias },
                    activation,
                }
            }
        });
    }
    let m = config.num_classes;
    let mut exits = Vec::new();
    for (i, &layer) in plan.exit_layers.iter().enumerate() {
        let FeatureShape::Map { c, .. } = plan.output_of(layer) else { unreachable!("conv output is a map") };
        let e = i + 1;
        let exclusion = Affine {
            weight: add(format!("exit.{e}.exclusion.weight"), vec![m, c]),
            bias: add(format!("exit.{e}.exclusion.bias"), vec![m]),
        };
        let classifier = Affine {
            weight: add(format!("exit.{e}.classifier.weight"), vec![m, c]),
            bias: add(format!("exit.{e}.classifier.bias"), vec![m]),
        };
        exits.push(ExitParams {
            layer,
            exclusion,
            classifier,
        });
    }
    let classifier = Affine {
        weight: add("classifier.weight".into(), vec![m, plan.classifier_inputs()]),
        bias: add("classifier.bias".into(), vec![m]),
    };
    (specs, layers, exits, classifier)
}

/// Outputs of one exit point.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitOutput {
    /// Sigmoid output of each class-exclusion unit.
    pub exclusion_probs: Vec<f32>,
    /// Softmax of the exit's confidence-baseline classifier.
    pub classifier_probs: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullOutput {
    pub final_logits: Vec<f32>,
    pub exits: Vec<ExitOutput>,
}

/// Tape handles produced by [`Model::forward_tape`].
pub struct TapeForward {
    /// One leaf per parameter, in declaration order.
    pub params: Vec<Var>,
    pub final_logits: Var,
    /// Pre-sigmoid outputs of the exclusion units, one vector per exit.
    pub exclusion_logits: Vec<Var>,
    /// Baseline classifier logits computed on detached features, so their loss
    /// only reaches the classifier heads themselves.
    pub classifier_logits: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    plan: ShapePlan,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    layers: Vec<LayerParams>,
    exits: Vec<ExitParams>,
    classifier: Affine,
    cost: CostModel,
}

impl Model {
    /// Builds a model with Kaiming-uniform weights (bound `sqrt(6 / fan_in)`)
    /// and zero biases, deterministic in `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let (specs, _, _, _) = layout(&config, &plan);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|spec| {
                if spec.shape.len() == 1 {
                    return Tensor::zeros(&spec.shape);
                }
                let fan_in: usize = spec.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let n: usize = spec.shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(spec.shape.clone(), data).expect("layout shapes are valid")
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Assembles a model from explicit parameter tensors in declaration order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let plan = config.plan()?;
        let (specs, layers, exits, classifier) = layout(&config, &plan);
        if specs.len() != params.len() {
            return Err(Error::Inconsistent(format!(
                "config declares {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(Error::Inconsistent(format!(
                    "{} should be {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    p.shape()
                )));
            }
        }
        let cost = CostModel::from_config(&config)?;
        Ok(Model {
            config,
            plan,
            specs,
            params,
            layers,
            exits,
            classifier,
            cost,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Indices of the exclusion weight and bias tensors of a 1-based exit.
    pub fn exclusion_param_indices(&self, exit: usize) -> Result<(usize, usize)> {
        let e = self.exit(exit)?;
        Ok((e.exclusion.weight, e.exclusion.bias))
    }

    fn exit(&self, exit: usize) -> Result<&ExitParams> {
        if exit == 0 || exit > self.exits.len() {
            return Err(Error::OutOfRange {
                index: exit,
                valid: format!("1..={}", self.exits.len()),
            });
        }
        Ok(&self.exits[exit - 1])
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.config.input_shape {
            return Err(Error::shape(
                "model input",
                format!("expected {:?}, got {:?}", self.config.input_shape, input.shape()),
            ));
        }
        Ok(())
    }

    fn apply_layer(&self, l: usize, x: &Tensor) -> Result<Tensor> {
        let out = match self.layers[l] {
            LayerParams::Conv {
                params,
                stride,
                pad,
                activation,
            } => {
                let y = ops::conv2d(x, &self.params[params.weight], &self.params[params.bias], stride, pad)?;
                activate(y, activation)
            }
            LayerParams::Pool { kernel, stride } => ops::max_pool2d(x, kernel, stride)?,
            LayerParams::Dense { params, activation } => {
                let y = ops::dense(x, &self.params[params.weight], &self.params[params.bias])?;
                activate(y, activation)
            }
        };
        out.ensure_finite(&format!("backbone layer {l}"))?;
        Ok(out)
    }

    fn affine(&self, a: Affine, x: &Tensor) -> Result<Tensor> {
        ops::dense(x, &self.params[a.weight], &self.params[a.bias])
    }

    /// Staged executor over one input.
    pub fn stepper<'m>(&'m self, input: &Tensor) -> Result<Stepper<'m>> {
        self.check_input(input)?;
        Ok(Stepper {
            model: self,
            act: input.clone(),
            next_layer: 0,
            exits_done: 0,
            pooled: None,
        })
    }

    /// Runs every layer and every exit point.
    pub fn forward_full(&self, input: &Tensor) -> Result<FullOutput> {
        let mut st = self.stepper(input)?;
        let mut exits = Vec::with_capacity(self.num_exits());
        while st.exits_done() < self.num_exits() {
            st.advance()?;
            exits.push(ExitOutput {
                exclusion_probs: st.exclusion_probs()?,
                classifier_probs: st.classifier_probs()?,
            });
        }
        let final_logits = st.finish()?;
        Ok(FullOutput { final_logits, exits })
    }

    /// Runs the backbone only up to exit `upto_exit` (1-based) and returns the
    /// outputs of exits `1..=upto_exit`. Deeper layers are not executed.
    pub fn forward_prefix(&self, input: &Tensor, upto_exit: usize) -> Result<Vec<ExitOutput>> {
        self.exit(upto_exit)?;
        let mut st = self.stepper(input)?;
        let mut exits = Vec::with_capacity(upto_exit);
        for _ in 0..upto_exit {
            st.advance()?;
            exits.push(ExitOutput {
                exclusion_probs: st.exclusion_probs()?,
                classifier_probs: st.classifier_probs()?,
            });
        }
        Ok(exits)
    }

    /// Final-classifier logits of the plain backbone, no exit heads evaluated.
    pub fn static_logits(&self, input: &Tensor) -> Result<Vec<f32>> {
        self.stepper(input)?.finish()
    }

    /// Argmax of the plain backbone (lowest index on ties).
    pub fn predict_static(&self, input: &Tensor) -> Result<usize> {
        Ok(crate::tensor::argmax(&self.static_logits(input)?))
    }

    /// Records the full forward pass on `tape` for training.
    pub fn forward_tape<'a>(&'a self, tape: &mut GradTape<'a>, input: &'a Tensor) -> Result<TapeForward> {
        self.check_input(input)?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let mut x = tape.leaf(input);
        let mut exclusion_logits = Vec::with_capacity(self.exits.len());
        let mut classifier_logits = Vec::with_capacity(self.exits.len());
        let mut next_exit = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                LayerParams::Conv {
                    params: a,
                    stride,
                    pad,
                    activation,
                } => {
                    let y = tape.conv2d(x, params[a.weight], params[a.bias], stride, pad)?;
                    activate_tape(tape, y, activation)
                }
                LayerParams::Pool { kernel, stride } => tape.max_pool2d(x, kernel, stride)?,
                LayerParams::Dense { params: a, activation } => {
                    let y = tape.dense(x, params[a.weight], params[a.bias])?;
                    activate_tape(tape, y, activation)
                }
            };
            if next_exit < self.exits.len() && self.exits[next_exit].layer == l {
                let e = self.exits[next_exit];
                let pooled = tape.global_avg_pool(x)?;
                exclusion_logits.push(tape.dense(pooled, params[e.exclusion.weight], params[e.exclusion.bias])?);
                let frozen = tape.detach(pooled);
                classifier_logits.push(tape.dense(frozen, params[e.classifier.weight], params[e.classifier.bias])?);
                next_exit += 1;
            }
        }
        let final_logits = tape.dense(x, params[self.classifier.weight], params[self.classifier.bias])?;
        Ok(TapeForward {
            params,
            final_logits,
            exclusion_logits,
            classifier_logits,
        })
    }
}

fn activate(y: Tensor, activation: Activation) -> Tensor {
    match activation {
        Activation::Relu => ops::relu(&y),
        Activation::None => y,
    }
}

fn activate_tape(tape: &mut GradTape<'_>, y: Var, activation: Activation) -> Var {
    match activation {
        Activation::Relu => tape.relu(y),
        Activation::None => y,
    }
}

/// Executes a model one stage at a time so inference can stop early without
/// touching deeper layers. Exit heads are evaluated only when asked for.
pub struct Stepper<'m> {
    model: &'m Model,
    act: Tensor,
    next_layer: usize,
    exits_done: usize,
    pooled: Option<Tensor>,
}

impl<'m> Stepper<'m> {
    pub fn exits_done(&self) -> usize {
        self.exits_done
    }

    pub fn num_exits(&self) -> usize {
        self.model.num_exits()
    }

    /// Runs the next stage; returns the 1-based index of the exit reached.
    pub fn advance(&mut self) -> Result<usize> {
        let Some(exit) = self.model.exits.get(self.exits_done) else {
            return Err(Error::Contract("all exit points already visited".into()));
        };
        while self.next_layer <= exit.layer {
            self.act = self.model.apply_layer(self.next_layer, &self.act)?;
            self.next_layer += 1;
        }
        self.exits_done += 1;
        self.pooled = None;
        Ok(self.exits_done)
    }

    fn pooled(&mut self) -> Result<&Tensor> {
        if self.exits_done == 0 {
            return Err(Error::Contract("no exit point reached yet".into()));
        }
        if self.pooled.is_none() {
            self.pooled = Some(ops::global_avg_pool(&self.act)?);
        }
        Ok(self.pooled.as_ref().unwrap())
    }

    /// Class-exclusion probabilities at the exit just reached.
    pub fn exclusion_probs(&mut self) -> Result<Vec<f32>> {
        let head = self.model.exits[self.exits_done.saturating_sub(1)].exclusion;
        let pooled = self.pooled()?.clone();
        let p = ops::sigmoid(&self.model.affine(head, &pooled)?);
        p.ensure_finite(&format!("exclusion heads of exit {}", self.exits_done))?;
        Ok(p.into_data())
    }

    /// Baseline classifier softmax at the exit just reached.
    pub fn classifier_probs(&mut self) -> Result<Vec<f32>> {
        let head = self.model.exits[self.exits_done.saturating_sub(1)].classifier;
        let pooled = self.pooled()?.clone();
        let p = ops::softmax(&self.model.affine(head, &pooled)?);
        p.ensure_finite(&format!("classifier head of exit {}", self.exits_done))?;
        Ok(p.into_data())
    }

    /// Runs all remaining layers and the final classifier; returns its logits.
    pub fn finish(mut self) -> Result<Vec<f32>> {
        while self.next_layer < self.model.layers.len() {
            self.act = self.model.apply_layer(self.next_layer, &self.act)?;
            self.next_layer += 1;
        }
        let logits = self.model.affine(self.model.classifier, &self.act)?;
        logits.ensure_finite("final classifier")?;
        Ok(logits.into_data())
    }
}
