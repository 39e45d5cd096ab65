//! Layers, the residual backbone with its projector head, freeze strategies
//! and the SGD optimizer.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::BranchConv;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// How spatial activations are turned into one feature row per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapReduction {
    #[default]
    SpatialMean,
    Flatten,
}

/// Parameter leaves recorded during a forward pass, keyed by parameter name.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: Vec<(String, Var)>,
}

impl Bindings {
    pub(crate) fn bind<S: Scalar>(&mut self, tape: &mut Tape<S>, name: String, t: &Tensor<S>) -> Var {
        let v = tape.leaf(t);
        self.vars.push((name, v));
        v
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S: Scalar> {
    pub name: String,
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl<S: Scalar> ConvLayer<S> {
    /// A convolution with "same" padding for odd kernels, He-initialised.
    pub fn new<R: rand::Rng>(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let weight = Tensor::randn_with(
            &[out_ch, in_ch, kernel.0, kernel.1],
            rng,
            (2.0 / fan_in as f64).sqrt(),
        )?;
        let bias = if bias { Some(Tensor::zeros(&[out_ch])?) } else { None };
        let mut layer = Self {
            name: name.into(),
            weight,
            bias,
            stride,
            padding: ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2),
        };
        layer.set_trainable(true);
        Ok(layer)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn trainable(&self) -> bool {
        self.weight.requires_grad()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        if let Some(b) = &mut self.bias {
            b.set_requires_grad(on);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub(crate) fn record(&self, tape: &mut Tape<S>, x: Var, binds: &mut Bindings, prefix: &str) -> Result<Var> {
        let w = binds.bind(tape, format!("{prefix}.weight"), &self.weight);
        let b = self
            .bias
            .as_ref()
            .map(|b| binds.bind(tape, format!("{prefix}.bias"), b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

/// A convolution slot in the backbone: either a plain layer or one that
/// currently carries a trainable branch.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvUnit<S: Scalar> {
    Plain(ConvLayer<S>),
    Branched(BranchConv<S>),
}

impl<S: Scalar> ConvUnit<S> {
    pub fn base(&self) -> &ConvLayer<S> {
        match self {
            ConvUnit::Plain(c) => c,
            ConvUnit::Branched(b) => &b.base,
        }
    }

    pub fn base_mut(&mut self) -> &mut ConvLayer<S> {
        match self {
            ConvUnit::Plain(c) => c,
            ConvUnit::Branched(b) => &mut b.base,
        }
    }

    pub fn name(&self) -> &str {
        &self.base().name
    }

    pub fn is_branched(&self) -> bool {
        matches!(self, ConvUnit::Branched(_))
    }

    /// Trainable parameter count of the convolution weights and biases.
    pub fn trainable_params(&self) -> usize {
        match self {
            ConvUnit::Plain(c) => if c.trainable() { c.param_count() } else { 0 },
            ConvUnit::Branched(b) => {
                let base = if b.base.trainable() { b.base.param_count() } else { 0 };
                let branch = if b.branch.trainable() { b.branch.param_count() } else { 0 };
                base + branch
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var, binds: &mut Bindings) -> Result<Var> {
        match self {
            ConvUnit::Plain(c) => c.record(tape, x, binds, &c.name),
            ConvUnit::Branched(b) => b.record(tape, x, binds),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        match self {
            ConvUnit::Plain(c) => {
                let name = c.name.clone();
                c.visit_mut(&name, f);
            }
            ConvUnit::Branched(b) => {
                let name = b.base.name.clone();
                b.base.visit_mut(&name, f);
                b.branch.visit_mut(&format!("{name}.branch"), f);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer<S: Scalar> {
    pub name: String,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: S,
    pub momentum: S,
    frozen: bool,
}

impl<S: Scalar> BnLayer<S> {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            gamma: Tensor::full(&[channels], S::one())?.with_requires_grad(true),
            beta: Tensor::zeros(&[channels])?.with_requires_grad(true),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], S::one())?,
            eps: S::lit(1e-5),
            momentum: S::lit(0.1),
            frozen: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen layers keep their affine parameters and running statistics and
    /// always normalise with the running statistics.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.gamma.set_requires_grad(!frozen);
        self.beta.set_requires_grad(!frozen);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    fn record(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        mode: Mode,
        binds: &mut Bindings,
        updates: &mut Vec<(String, BatchStats<S>)>,
    ) -> Result<Var> {
        let g = binds.bind(tape, format!("{}.gamma", self.name), &self.gamma);
        let b = binds.bind(tape, format!("{}.beta", self.name), &self.beta);
        if self.frozen || mode == Mode::Eval {
            tape.batch_norm_eval(x, g, b, self.running_mean.data(), self.running_var.data(), self.eps)
        } else {
            let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
            updates.push((self.name.clone(), stats));
            Ok(y)
        }
    }

    fn update_running(&mut self, stats: &BatchStats<S>) {
        if self.frozen {
            return;
        }
        let m = self.momentum;
        let keep = S::one() - m;
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * v;
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}

/// Fully connected layer computing `x·W + b` with `W` stored as `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S: Scalar> {
    pub name: String,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: rand::Rng>(name: impl Into<String>, inp: usize, out: usize, gain: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            weight: Tensor::randn_with(&[inp, out], rng, (gain / inp as f64).sqrt())?.with_requires_grad(true),
            bias: Tensor::zeros(&[out])?.with_requires_grad(true),
        })
    }

    pub fn record(&self, tape: &mut Tape<S>, x: Var, binds: &mut Bindings) -> Result<Var> {
        let w = binds.bind(tape, format!("{}.weight", self.name), &self.weight);
        let b = binds.bind(tape, format!("{}.bias", self.name), &self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsample<S: Scalar> {
    pub conv: ConvUnit<S>,
    pub bn: BnLayer<S>,
}

/// Two 3×3 convolutions with batch norm and an identity or projected shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<S: Scalar> {
    pub name: String,
    pub conv1: ConvUnit<S>,
    pub bn1: BnLayer<S>,
    pub conv2: ConvUnit<S>,
    pub bn2: BnLayer<S>,
    pub downsample: Option<Downsample<S>>,
}

/// Two-layer MLP head used only by the self-supervised objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

/// Shape of the residual backbone and projector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub input_channels: usize,
    pub input_size: usize,
    pub embed_dim: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    #[serde(default)]
    pub conv_bias: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneSpec {
    /// Two stages of widths 8 and 16, one block each, 3×32×32 input.
    pub fn toy() -> Self {
        Self {
            stage_widths: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            input_channels: 3,
            input_size: 32,
            embed_dim: 32,
            projector_hidden: 64,
            projector_out: 32,
            conv_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_widths.len();
        if stages == 0 || stages != self.blocks_per_stage.len() {
            return Err(Error::Build(format!(
                "{} stage widths but {} block counts",
                stages,
                self.blocks_per_stage.len()
            )));
        }
        let dims = [self.input_channels, self.input_size, self.embed_dim, self.projector_hidden, self.projector_out];
        if dims.iter().chain(&self.stage_widths).chain(&self.blocks_per_stage).any(|&d| d == 0) {
            return Err(Error::Build("all backbone dimensions must be positive".into()));
        }
        if self.input_size >> (stages - 1) == 0 {
            return Err(Error::Build(format!(
                "input size {} too small for {stages} stages",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Whether a 1×1 head convolution maps the last stage width to `embed_dim`.
    pub fn has_head(&self) -> bool {
        self.stage_widths.last() != Some(&self.embed_dim)
    }
}

/// Encoder (stem, residual stages, optional 1×1 head, global pooling) plus
/// the projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub spec: BackboneSpec,
    pub stem_conv: ConvUnit<S>,
    pub stem_bn: BnLayer<S>,
    pub blocks: Vec<ResBlock<S>>,
    pub head: Option<ConvUnit<S>>,
    pub projector: Projector<S>,
}

/// Result of [`Model::forward`].
#[derive(Debug)]
pub struct ForwardOutput<S: Scalar> {
    pub embedding: Var,
    pub projection: Var,
    pub taps: Vec<(String, Var)>,
    pub bindings: Bindings,
    pub bn_updates: Vec<(String, BatchStats<S>)>,
}

/// Which convolution and batch-norm layers train during a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeStrategy {
    FixedAll,
    FineTuneAll,
    FixConvFixBn,
    FixConvTuneBn,
    TuneConvTuneBn,
    TuneConvFixBn,
}

impl FreezeStrategy {
    /// (convolutions trainable, batch norm trainable)
    pub fn flags(self) -> (bool, bool) {
        match self {
            FreezeStrategy::FixedAll | FreezeStrategy::FixConvFixBn => (false, false),
            FreezeStrategy::FineTuneAll | FreezeStrategy::TuneConvTuneBn => (true, true),
            FreezeStrategy::FixConvTuneBn => (false, true),
            FreezeStrategy::TuneConvFixBn => (true, false),
        }
    }
}

struct Tracer<'a, S: Scalar> {
    tape: &'a mut Tape<S>,
    mode: Mode,
    capture: bool,
    binds: Bindings,
    taps: Vec<(String, Var)>,
    updates: Vec<(String, BatchStats<S>)>,
}

impl<S: Scalar> Tracer<'_, S> {
    fn tap(&mut self, name: &str, v: Var) {
        if self.capture {
            self.taps.push((name.to_string(), v));
        }
    }

    fn conv(&mut self, c: &ConvUnit<S>, x: Var) -> Result<Var> {
        let y = c.forward(self.tape, x, &mut self.binds)?;
        self.tap(c.name(), y);
        Ok(y)
    }

    fn bn(&mut self, b: &BnLayer<S>, x: Var) -> Result<Var> {
        let y = b.record(self.tape, x, self.mode, &mut self.binds, &mut self.updates)?;
        self.tap(&b.name, y);
        Ok(y)
    }
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialisation from `seed`.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = spec.conv_bias;
        let w0 = spec.stage_widths[0];
        let stem_conv = ConvUnit::Plain(ConvLayer::new("stem.conv", spec.input_channels, w0, (3, 3), 1, bias, &mut rng)?);
        let stem_bn = BnLayer::new("stem.bn", w0)?;
        let mut blocks = Vec::new();
        let mut in_ch = w0;
        for (s, (&width, &count)) in spec.stage_widths.iter().zip(&spec.blocks_per_stage).enumerate() {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("layer{}.{}", s + 1, b);
                let conv1 = ConvLayer::new(format!("{name}.conv1"), in_ch, width, (3, 3), stride, bias, &mut rng)?;
                let conv2 = ConvLayer::new(format!("{name}.conv2"), width, width, (3, 3), 1, bias, &mut rng)?;
                let downsample = if stride != 1 || in_ch != width {
                    Some(Downsample {
                        conv: ConvUnit::Plain(ConvLayer::new(
                            format!("{name}.downsample.conv"),
                            in_ch,
                            width,
                            (1, 1),
                            stride,
                            bias,
                            &mut rng,
                        )?),
                        bn: BnLayer::new(format!("{name}.downsample.bn"), width)?,
                    })
                } else {
                    None
                };
                blocks.push(ResBlock {
                    bn1: BnLayer::new(format!("{name}.bn1"), width)?,
                    bn2: BnLayer::new(format!("{name}.bn2"), width)?,
                    conv1: ConvUnit::Plain(conv1),
                    conv2: ConvUnit::Plain(conv2),
                    downsample,
                    name,
                });
                in_ch = width;
            }
        }
        let head = if spec.has_head() {
            Some(ConvUnit::Plain(ConvLayer::new("head.conv", in_ch, spec.embed_dim, (1, 1), 1, bias, &mut rng)?))
        } else {
            None
        };
        let projector = Projector {
            fc1: Linear::new("projector.fc1", spec.embed_dim, spec.projector_hidden, 2.0, &mut rng)?,
            fc2: Linear::new("projector.fc2", spec.projector_hidden, spec.projector_out, 1.0, &mut rng)?,
        };
        Ok(Self { spec: spec.clone(), stem_conv, stem_bn, blocks, head, projector })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.spec.input_channels, self.spec.input_size, self.spec.input_size]
    }

    /// Records the forward pass on `tape`. Running statistics are not touched;
    /// pass the output to [`Model::apply_bn_updates`] after a training step.
    pub fn forward(&self, tape: &mut Tape<S>, x: Var, mode: Mode, capture: bool) -> Result<ForwardOutput<S>> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.input_shape() {
            return Err(shape_err!("model expects N×{:?}, got {shape:?}", self.input_shape()));
        }
        let mut tr = Tracer { tape, mode, capture, binds: Bindings::default(), taps: Vec::new(), updates: Vec::new() };
        let mut h = tr.conv(&self.stem_conv, x)?;
        h = tr.bn(&self.stem_bn, h)?;
        h = tr.tape.relu(h)?;
        for block in &self.blocks {
            let mut y = tr.conv(&block.conv1, h)?;
            y = tr.bn(&block.bn1, y)?;
            y = tr.tape.relu(y)?;
            y = tr.conv(&block.conv2, y)?;
            y = tr.bn(&block.bn2, y)?;
            let shortcut = match &block.downsample {
                Some(ds) => {
                    let s = tr.conv(&ds.conv, h)?;
                    tr.bn(&ds.bn, s)?
                }
                None => h,
            };
            let joined = tr.tape.add(y, shortcut)?;
            h = tr.tape.relu(joined)?;
            tr.tap(&block.name, h);
        }
        if let Some(head) = &self.head {
            h = tr.conv(head, h)?;
        }
        let embedding = tr.tape.global_avg_pool(h)?;
        let p = self.projector.fc1.record(tr.tape, embedding, &mut tr.binds)?;
        let p = tr.tape.relu(p)?;
        let projection = self.projector.fc2.record(tr.tape, p, &mut tr.binds)?;
        Ok(ForwardOutput { embedding, projection, taps: tr.taps, bindings: tr.binds, bn_updates: tr.updates })
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<S>)]) {
        let mut layers = self.bn_layers_mut();
        for (name, stats) in updates {
            if let Some(bn) = layers.iter_mut().find(|b| &b.name == name) {
                bn.update_running(stats);
            }
        }
    }

    /// Adds gradients from `grads` into every parameter bound in `binds`.
    pub fn accumulate_grads(&mut self, grads: &Gradients<S>, binds: &Bindings) -> Result<()> {
        let lookup: HashMap<&str, Var> = binds.iter().collect();
        let mut failure = None;
        self.visit_params_mut(&mut |name, t| {
            if let (Some(&v), None) = (lookup.get(name), &failure) {
                if let Some(g) = grads.get(v) {
                    if let Err(e) = t.accumulate_grad(g) {
                        failure = Some(e);
                    }
                }
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    pub fn conv_units(&self) -> Vec<&ConvUnit<S>> {
        let mut v = vec![&self.stem_conv];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
            if let Some(ds) = &b.downsample {
                v.push(&ds.conv);
            }
        }
        v.extend(self.head.as_ref());
        v
    }

    pub fn conv_units_mut(&mut self) -> Vec<&mut ConvUnit<S>> {
        let mut v = vec![&mut self.stem_conv];
        for b in &mut self.blocks {
            v.push(&mut b.conv1);
            v.push(&mut b.conv2);
            if let Some(ds) = &mut b.downsample {
                v.push(&mut ds.conv);
            }
        }
        v.extend(self.head.as_mut());
        v
    }

    pub fn bn_layers(&self) -> Vec<&BnLayer<S>> {
        let mut v = vec![&self.stem_bn];
        for b in &self.blocks {
            v.push(&b.bn1);
            v.push(&b.bn2);
            if let Some(ds) = &b.downsample {
                v.push(&ds.bn);
            }
        }
        v
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BnLayer<S>> {
        let mut v = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            v.push(&mut b.bn1);
            v.push(&mut b.bn2);
            if let Some(ds) = &mut b.downsample {
                v.push(&mut ds.bn);
            }
        }
        v
    }

    /// Tap names in forward order, as produced by a capturing forward pass.
    pub fn tap_names(&self) -> Vec<String> {
        let mut v = vec![self.stem_conv.name().to_string(), self.stem_bn.name.clone()];
        for b in &self.blocks {
            v.extend([b.conv1.name(), &b.bn1.name, b.conv2.name(), &b.bn2.name].map(str::to_string));
            if let Some(ds) = &b.downsample {
                v.push(ds.conv.name().to_string());
                v.push(ds.bn.name.clone());
            }
            v.push(b.name.clone());
        }
        if let Some(h) = &self.head {
            v.push(h.name().to_string());
        }
        v
    }

    /// Visits every trainable-eligible parameter, branches and projector included.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for c in self.conv_units_mut() {
            c.visit_mut(f);
        }
        for b in self.bn_layers_mut() {
            b.visit_mut(f);
        }
        self.projector.fc1.visit_mut(f);
        self.projector.fc2.visit_mut(f);
    }

    /// Every encoder tensor that defines the network function, in a stable
    /// order: convolution weights/biases, then BN affine parameters and
    /// running statistics. Branch tensors are not included.
    pub fn encoder_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v: Vec<(String, &Tensor<S>)> = Vec::new();
        for c in self.conv_units() {
            let base = c.base();
            v.push((format!("{}.weight", base.name), &base.weight));
            if let Some(b) = &base.bias {
                v.push((format!("{}.bias", base.name), b));
            }
        }
        for b in self.bn_layers() {
            v.push((format!("{}.gamma", b.name), &b.gamma));
            v.push((format!("{}.beta", b.name), &b.beta));
            v.push((format!("{}.running_mean", b.name), &b.running_mean));
            v.push((format!("{}.running_var", b.name), &b.running_var));
        }
        v
    }

    pub fn projector_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let p = &self.projector;
        vec![
            (format!("{}.weight", p.fc1.name), &p.fc1.weight),
            (format!("{}.bias", p.fc1.name), &p.fc1.bias),
            (format!("{}.weight", p.fc2.name), &p.fc2.weight),
            (format!("{}.bias", p.fc2.name), &p.fc2.bias),
        ]
    }

    /// Mutable counterpart of encoder and projector tensors, keyed by name.
    pub fn named_tensors_mut(&mut self) -> BTreeMap<String, &mut Tensor<S>> {
        let Model { stem_conv, stem_bn, blocks, head, projector, .. } = self;
        let mut convs = vec![stem_conv];
        let mut bns = vec![stem_bn];
        for b in blocks.iter_mut() {
            convs.push(&mut b.conv1);
            convs.push(&mut b.conv2);
            bns.push(&mut b.bn1);
            bns.push(&mut b.bn2);
            if let Some(ds) = &mut b.downsample {
                convs.push(&mut ds.conv);
                bns.push(&mut ds.bn);
            }
        }
        convs.extend(head.as_mut());
        let mut map = BTreeMap::new();
        for c in convs {
            let base = c.base_mut();
            map.insert(format!("{}.weight", base.name), &mut base.weight);
            if let Some(b) = &mut base.bias {
                map.insert(format!("{}.bias", base.name), b);
            }
        }
        for b in bns {
            map.insert(format!("{}.gamma", b.name), &mut b.gamma);
            map.insert(format!("{}.beta", b.name), &mut b.beta);
            map.insert(format!("{}.running_mean", b.name), &mut b.running_mean);
            map.insert(format!("{}.running_var", b.name), &mut b.running_var);
        }
        let Projector { fc1, fc2 } = projector;
        for fc in [fc1, fc2] {
            map.insert(format!("{}.weight", fc.name), &mut fc.weight);
            map.insert(format!("{}.bias", fc.name), &mut fc.bias);
        }
        map
    }

    pub fn set_strategy(&mut self, strategy: FreezeStrategy) {
        let (conv, bn) = strategy.flags();
        for c in self.conv_units_mut() {
            match c {
                ConvUnit::Plain(l) => l.set_trainable(conv),
                ConvUnit::Branched(b) => {
                    b.base.set_trainable(false);
                    b.branch.set_trainable(conv);
                }
            }
        }
        for b in self.bn_layers_mut() {
            b.set_frozen(!bn);
        }
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        for b in self.bn_layers_mut() {
            b.set_frozen(frozen);
        }
    }

    pub fn is_expanded(&self) -> bool {
        self.conv_units().iter().any(|c| c.is_branched())
    }

    pub fn conv_param_count(&self) -> usize {
        self.conv_units().iter().map(|c| c.base().param_count()).sum()
    }

    pub fn trainable_conv_params(&self) -> usize {
        self.conv_units().iter().map(|c| c.trainable_params()).sum()
    }

    pub fn trainable_bn_params(&self) -> usize {
        self.bn_layers().iter().filter(|b| !b.frozen()).map(|b| b.param_count()).sum()
    }

    /// Trainable encoder parameters (the projector is excluded).
    pub fn trainable_encoder_params(&self) -> usize {
        self.trainable_conv_params() + self.trainable_bn_params()
    }

    /// Learnable parameters of the encoder (convolutions and BN affine).
    pub fn encoder_param_count(&self) -> usize {
        self.conv_param_count() + self.bn_layers().iter().map(|b| b.param_count()).sum::<usize>()
    }

    pub fn projector_param_count(&self) -> usize {
        self.projector.fc1.param_count() + self.projector.fc2.param_count()
    }

    /// Encoder embeddings in eval mode, processed in chunks of `chunk` samples.
    pub fn embed(&self, images: &Tensor<S>, chunk: usize) -> Result<Tensor<S>> {
        let d = self.spec.embed_dim;
        let mut out = Vec::new();
        let n = self.for_each_chunk(images, chunk, false, |tape, fo| {
            out.extend_from_slice(tape.value(fo.embedding));
            Ok(())
        })?;
        Tensor::from_vec(&[n, d], out)
    }

    /// Per-tap activations in eval mode, one `n×d` feature matrix per tap.
    pub fn activations(&self, images: &Tensor<S>, chunk: usize, reduce: TapReduction) -> Result<Vec<(String, Tensor<S>)>> {
        let names = self.tap_names();
        let mut buffers: Vec<(Vec<S>, usize)> = vec![(Vec::new(), 0); names.len()];
        let n = self.for_each_chunk(images, chunk, true, |tape, fo| {
            for ((_, v), (buf, dim)) in fo.taps.iter().zip(buffers.iter_mut()) {
                let shape = tape.shape(*v).to_vec();
                let rows = shape[0];
                let vals = tape.value(*v);
                match reduce {
                    TapReduction::Flatten => {
                        *dim = vals.len() / rows;
                        buf.extend_from_slice(vals);
                    }
                    TapReduction::SpatialMean => {
                        let plane: usize = shape[2..].iter().product();
                        *dim = shape[1];
                        let inv = S::one() / S::from_usize_lossy(plane);
                        buf.extend(vals.chunks(plane).map(|c| c.iter().copied().sum::<S>() * inv));
                    }
                }
            }
            Ok(())
        })?;
        names
            .into_iter()
            .zip(buffers)
            .map(|(name, (buf, dim))| Ok((name, Tensor::from_vec(&[n, dim], buf)?)))
            .collect()
    }

    fn for_each_chunk(
        &self,
        images: &Tensor<S>,
        chunk: usize,
        capture: bool,
        mut f: impl FnMut(&Tape<S>, &ForwardOutput<S>) -> Result<()>,
    ) -> Result<usize> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(shape_err!("expected NCHW images, got {shape:?}"));
        }
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let chunk = chunk.max(1);
        let mut tape = Tape::new();
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            tape.clear();
            let mut s = shape.to_vec();
            s[0] = end - start;
            let x = tape.constant(&s, images.data()[start * per..end * per].to_vec())?;
            let fo = self.forward(&mut tape, x, Mode::Eval, capture)?;
            f(&tape, &fo)?;
        }
        Ok(n)
    }
}

/// Stochastic gradient descent with momentum and L2 weight decay:
/// `v ← momentum·v + grad + wd·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<S: Scalar> {
    pub lr: S,
    pub momentum: S,
    pub weight_decay: S,
    velocity: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr: S::lit(lr), momentum: S::lit(momentum), weight_decay: S::lit(weight_decay), velocity: HashMap::new() }
    }

    /// Updates one parameter. Frozen tensors and tensors without a gradient
    /// are left untouched.
    pub fn step_param(&mut self, name: &str, p: &mut Tensor<S>) {
        if !p.requires_grad() {
            return;
        }
        let Some(grad) = p.grad().map(<[S]>::to_vec) else { return };
        let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![S::zero(); grad.len()]);
        let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((val, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = mom * *vel + g + wd * *val;
            *val -= lr * *vel;
        }
    }

    pub fn step(&mut self, model: &mut Model<S>) {
        model.visit_params_mut(&mut |name, t| self.step_param(name, t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        Tensor::randn(&[n, 3, 32, 32], seed, 1.0).unwrap()
    }

    fn run(model: &Model<f32>, x: &Tensor<f32>, mode: Mode) -> (Vec<f32>, Vec<f32>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let fo = model.forward(&mut tape, xv, mode, false).unwrap();
        (tape.value(fo.embedding).to_vec(), tape.value(fo.projection).to_vec())
    }

    #[test]
    fn toy_parameter_count_matches_closed_form() {
        let spec = BackboneSpec::toy();
        let m = Model::<f32>::build(&spec, 0).unwrap();
        // stem 3→8 3×3; layer1: two 8→8 3×3; layer2: 8→16, 16→16 3×3, 8→16 1×1 shortcut; head 16→32 1×1
        let conv = 3 * 8 * 9 + 2 * (8 * 8 * 9) + 8 * 16 * 9 + 16 * 16 * 9 + 8 * 16 + 16 * 32;
        // BN affine: stem(8) + layer1 2×8 + layer2 3×16, two params per channel
        let bn = 2 * (8 + 2 * 8 + 3 * 16);
        assert_eq!(m.conv_param_count(), conv);
        assert_eq!(m.encoder_param_count(), conv + bn);
        assert_eq!(m.projector_param_count(), 32 * 64 + 64 + 64 * 32 + 32);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(&BackboneSpec::toy(), 11).unwrap();
        let b = Model::<f32>::build(&BackboneSpec::toy(), 11).unwrap();
        for ((na, ta), (nb, tb)) in a.encoder_tensors().into_iter().zip(b.encoder_tensors()) {
            assert_eq!(na, nb);
            assert!(ta.bitwise_eq(tb));
        }
        let c = Model::<f32>::build(&BackboneSpec::toy(), 12).unwrap();
        assert_ne!(a.stem_conv.base().weight, c.stem_conv.base().weight);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = BackboneSpec::toy();
        spec.blocks_per_stage = vec![1];
        assert!(matches!(Model::<f32>::build(&spec, 0), Err(Error::Build(_))));
        let mut spec = BackboneSpec::toy();
        spec.embed_dim = 0;
        assert!(Model::<f32>::build(&spec, 0).is_err());
    }

    #[test]
    fn default_frozen_bn_is_identity() {
        let mut bn = BnLayer::<f32>::new("bn", 4).unwrap();
        bn.set_frozen(true);
        let x = Tensor::<f32>::randn(&[8, 4, 3, 3], 5, 1.0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let (mut binds, mut up) = (Bindings::default(), Vec::new());
        let y = bn.record(&mut tape, xv, Mode::Train, &mut binds, &mut up).unwrap();
        assert!(up.is_empty());
        for (a, b) in tape.value(y).iter().zip(x.data()) {
            // 1/sqrt(1 + 1e-5) scaling only
            assert!((a - b).abs() <= 1e-5 * b.abs() + 1e-7);
        }
    }

    #[test]
    fn forward_shapes_and_taps() {
        let m = Model::<f32>::build(&BackboneSpec::toy(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&batch(2, 1));
        let fo = m.forward(&mut tape, x, Mode::Train, true).unwrap();
        assert_eq!(tape.shape(fo.embedding), &[2, 32]);
        assert_eq!(tape.shape(fo.projection), &[2, 32]);
        // stem conv+bn, 5 taps per block, 2 per shortcut projection, 1 head
        let expected = 2 + 2 * 5 + 2 + 1;
        assert_eq!(fo.taps.len(), expected);
        assert_eq!(m.tap_names(), fo.taps.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Model::<f32>::build(&BackboneSpec::toy(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3, 16, 16]).unwrap());
        assert!(matches!(m.forward(&mut tape, x, Mode::Eval, false), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_bn_ignores_mode() {
        let mut m = Model::<f32>::build(&BackboneSpec::toy(), 3).unwrap();
        m.set_strategy(FreezeStrategy::TuneConvFixBn);
        let x = batch(4, 2);
        assert_eq!(run(&m, &x, Mode::Train), run(&m, &x, Mode::Eval));
    }

    #[test]
    fn frozen_bn_outputs_do_not_depend_on_batch_composition() {
        let mut m = Model::<f32>::build(&BackboneSpec::toy(), 3).unwrap();
        m.set_strategy(FreezeStrategy::FixedAll);
        let x = batch(6, 9);
        let (full, _) = run(&m, &x, Mode::Train);
        let per = 3 * 32 * 32;
        let a = Tensor::from_vec(&[3, 3, 32, 32], x.data()[..3 * per].to_vec()).unwrap();
        let b = Tensor::from_vec(&[3, 3, 32, 32], x.data()[3 * per..].to_vec()).unwrap();
        let (mut halves, _) = run(&m, &a, Mode::Train);
        halves.extend(run(&m, &b, Mode::Train).0);
        for (p, q) in full.iter().zip(&halves) {
            assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
        }
    }

    #[test]
    fn strategies_set_trainable_sets() {
        let mut m = Model::<f32>::build(&BackboneSpec::toy(), 0).unwrap();
        m.set_strategy(FreezeStrategy::FixedAll);
        assert_eq!(m.trainable_encoder_params(), 0);
        m.set_strategy(FreezeStrategy::TuneConvFixBn);
        assert_eq!(m.trainable_conv_params(), m.conv_param_count());
        assert_eq!(m.trainable_bn_params(), 0);
        assert!(m.bn_layers().iter().all(|b| b.frozen()));
        m.set_strategy(FreezeStrategy::FixConvTuneBn);
        assert_eq!(m.trainable_conv_params(), 0);
        assert!(m.bn_layers().iter().all(|b| !b.frozen()));
        m.set_strategy(FreezeStrategy::FineTuneAll);
        assert_eq!(m.trainable_encoder_params(), m.encoder_param_count());
    }

    fn loss_grads(m: &mut Model<f32>, x: &Tensor<f32>) -> Bindings {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let fo = m.forward(&mut tape, xv, Mode::Train, false).unwrap();
        let sq = tape.mul(fo.projection, fo.projection).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        m.accumulate_grads(&g, &fo.bindings).unwrap();
        fo.bindings
    }

    #[test]
    fn gradient_reaches_exactly_the_trainable_set() {
        for strategy in [
            FreezeStrategy::FixedAll,
            FreezeStrategy::FineTuneAll,
            FreezeStrategy::FixConvTuneBn,
            FreezeStrategy::TuneConvFixBn,
        ] {
            let mut m = Model::<f32>::build(&BackboneSpec::toy(), 4).unwrap();
            m.set_strategy(strategy);
            loss_grads(&mut m, &batch(2, 5));
            let (conv, bn) = strategy.flags();
            for c in m.conv_units() {
                assert_eq!(c.base().weight.grad().is_some(), conv, "{strategy:?} {}", c.name());
            }
            for b in m.bn_layers() {
                assert_eq!(b.gamma.grad().is_some(), bn, "{strategy:?} {}", b.name);
                assert_eq!(b.beta.grad().is_some(), bn);
            }
        }
    }

    #[test]
    fn sgd_one_step_arithmetic() {
        let mut p = Tensor::<f32>::full(&[1], 1.0).unwrap().with_requires_grad(true);
        p.accumulate_grad(&[0.5]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        opt.step_param("p", &mut p);
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_lr_and_frozen_params_are_untouched() {
        let mut p = Tensor::<f32>::full(&[2], 1.5).unwrap().with_requires_grad(true);
        p.accumulate_grad(&[0.3, -2.0]).unwrap();
        let before = p.clone();
        Sgd::new(0.0, 0.9, 0.0).step_param("p", &mut p);
        assert!(p.bitwise_eq(&before));

        let mut q = Tensor::<f32>::full(&[2], 1.5).unwrap().with_requires_grad(true);
        q.accumulate_grad(&[1.0, 1.0]).unwrap();
        q.set_requires_grad(false);
        Sgd::new(0.5, 0.9, 0.1).step_param("q", &mut q);
        assert!(q.bitwise_eq(&before));
    }

    #[test]
    fn fine_tune_step_changes_weights() {
        let mut m = Model::<f32>::build(&BackboneSpec::toy(), 4).unwrap();
        m.set_strategy(FreezeStrategy::FineTuneAll);
        let before = m.clone();
        loss_grads(&mut m, &batch(2, 5));
        Sgd::new(0.1, 0.9, 0.0).step(&mut m);
        assert_ne!(before.stem_conv.base().weight, m.stem_conv.base().weight);
    }

    #[test]
    fn zeroed_residual_branch_leaves_shortcut() {
        // zero conv2 makes bn2 emit beta (= 0), so the block reduces to relu(shortcut)
        let mut m = Model::<f32>::build(&BackboneSpec::toy(), 8).unwrap();
        m.set_strategy(FreezeStrategy::FixedAll);
        for w in m.blocks[0].conv2.base_mut().weight.data_mut() {
            *w = 0.0;
        }
        let x = batch(2, 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let fo = m.forward(&mut tape, xv, Mode::Eval, true).unwrap();
        let tap = |name: &str| fo.taps.iter().find(|(n, _)| n == name).unwrap().1;
        let stem = tape.value(tap("stem.bn")).iter().map(|&v| v.max(0.0)).collect::<Vec<_>>();
        assert_eq!(tape.value(tap("layer1.0")), stem.as_slice());
    }
}
