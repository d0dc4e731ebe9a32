//! NODE-style and DDPM-style blocks assembled from the norm, embedding and
//! convolution primitives.
//!
//! * `NodeConcatConv`: norm, act, ConcatConv, norm, act, ConcatConv, norm.
//! * `NodeAdditive`: the same pipeline with each ConcatConv replaced by a
//!   plain convolution followed by an additive channel embedding.
//! * `DdpmStyle`: norm, act, conv, embedding, norm, act, conv, plus the
//!   residual skip `x + (...)`.
//!
//! Any of them can add a positional embedding after each convolution that
//! receives a timestep.

use serde::{Deserialize, Serialize};

use crate::embed::{kaiming_uniform, mlp_on, sinusoidal_batch, BiasInit, MlpVars, SinusoidalSpec};
use crate::error::{config_err, Error, Result};
use crate::norm::{NormKind, NormSpec, DEFAULT_EPS};
use crate::rng::{seeded, uniform_tensor, SeededRng};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{ActivationKind, Padding, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    NodeConcatConv,
    NodeAdditive,
    DdpmStyle,
}

/// Source of the per-channel embedding `v~_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelEmbedding {
    /// `t * v`. For `NodeConcatConv` this is the timestep slice of the kernel.
    #[default]
    Linear,
    /// `MLP(sinusoidal(t))`.
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    /// `t * p` with a learnable `H x W` map.
    Linear,
    /// Separate MLP branch from the shared sinusoidal features to `H * W`
    /// outputs.
    SinusoidalMlp,
}

/// Bias initialization of the operand (convolution) and timestep branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasPolicy {
    #[serde(default)]
    pub conv_bias: BiasInit,
    #[serde(default)]
    pub embed_bias: BiasInit,
}

impl Default for BiasPolicy {
    fn default() -> Self {
        Self::GUIDELINE
    }
}

impl BiasPolicy {
    pub const ZERO_BOTH: BiasPolicy = BiasPolicy {
        conv_bias: BiasInit::Zero,
        embed_bias: BiasInit::Zero,
    };
    /// Zero conv bias, default-initialized embedding bias.
    pub const GUIDELINE: BiasPolicy = BiasPolicy {
        conv_bias: BiasInit::Zero,
        embed_bias: BiasInit::Default,
    };
    pub const DEFAULT_CONV_ZERO_EMBED: BiasPolicy = BiasPolicy {
        conv_bias: BiasInit::Default,
        embed_bias: BiasInit::Zero,
    };
    pub const DEFAULT_BOTH: BiasPolicy = BiasPolicy {
        conv_bias: BiasInit::Default,
        embed_bias: BiasInit::Default,
    };

    pub fn label(&self) -> String {
        let s = |b: BiasInit| match b {
            BiasInit::Zero => "zero",
            BiasInit::Default => "default",
        };
        format!("conv_{}/embed_{}", s(self.conv_bias), s(self.embed_bias))
    }
}

fn default_channels() -> usize {
    16
}
fn default_kernel() -> usize {
    3
}
fn default_extent() -> usize {
    8
}
fn default_norm() -> NormKind {
    NormKind::Group { groups: 4 }
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_embed_dim() -> usize {
    32
}

/// Declarative description of a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub pipeline: Pipeline,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Input spatial height.
    #[serde(default = "default_extent")]
    pub height: usize,
    /// Input spatial width.
    #[serde(default = "default_extent")]
    pub width: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub embedding: ChannelEmbedding,
    /// Sinusoidal feature dimension (used by MLP embeddings).
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub positional: Option<PositionalKind>,
    #[serde(default)]
    pub bias_policy: BiasPolicy,
    /// When set, operand convolution weights are drawn with this standard
    /// deviation instead of the Kaiming-uniform default.
    #[serde(default)]
    pub weight_scale: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl BlockConfig {
    pub fn new(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            channels: default_channels(),
            kernel: default_kernel(),
            height: default_extent(),
            width: default_extent(),
            norm: default_norm(),
            eps: DEFAULT_EPS,
            activation: ActivationKind::Relu,
            padding: Padding::SameZero,
            embedding: ChannelEmbedding::Linear,
            embed_dim: default_embed_dim(),
            positional: None,
            bias_policy: BiasPolicy::GUIDELINE,
            weight_scale: None,
            seed: 0,
        }
    }

    pub fn norm_spec(&self) -> NormSpec {
        NormSpec::with_eps(self.norm, self.eps)
    }

    pub fn sinusoidal_spec(&self) -> SinusoidalSpec {
        SinusoidalSpec {
            dim: self.embed_dim,
            base: crate::embed::DEFAULT_SINUSOIDAL_BASE,
        }
    }

    fn uses_sinusoidal(&self) -> bool {
        self.embedding == ChannelEmbedding::Sinusoidal || self.positional == Some(PositionalKind::SinusoidalMlp)
    }

    /// Check every structural constraint, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return config_err("block.channels must be positive");
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return config_err(format!("block.kernel must be odd, got {}", self.kernel));
        }
        if self.height == 0 || self.width == 0 {
            return config_err("block.height and block.width must be positive");
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return config_err(format!("block.eps must be finite and non-negative, got {}", self.eps));
        }
        if let Err(Error::Config(m)) = self.norm.validate(self.channels) {
            return config_err(format!("block.norm: {m}"));
        }
        if self.pipeline == Pipeline::NodeConcatConv && self.embedding == ChannelEmbedding::Sinusoidal {
            return config_err(
                "block.embedding: node_concat_conv carries its channel embedding in the kernel; use \"linear\"",
            );
        }
        if self.uses_sinusoidal() {
            if let Err(Error::Config(m)) = self.sinusoidal_spec().validate() {
                return config_err(format!("block.embed_dim: {m}"));
            }
        }
        if let Some(s) = self.weight_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return config_err(format!("block.weight_scale must be finite and non-negative, got {s}"));
            }
        }
        let (h, w) = self.stage_extent(2);
        if h == 0 || w == 0 {
            return config_err(format!(
                "block: a {0}x{0} kernel with valid padding does not fit a {1}x{2} input twice",
                self.kernel, self.height, self.width
            ));
        }
        Ok(())
    }

    /// Spatial extent after `convs` convolutions (0 when it does not fit).
    pub fn stage_extent(&self, convs: usize) -> (usize, usize) {
        let shrink = match self.padding {
            Padding::Valid => convs * (self.kernel - 1),
            Padding::SameZero => 0,
        };
        (self.height.saturating_sub(shrink), self.width.saturating_sub(shrink))
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.channels, self.height, self.width)
    }

    pub fn output_shape(&self, batch: usize) -> Shape {
        let (h, w) = self.stage_extent(2);
        Shape::new(batch, self.channels, h, w)
    }

    /// True when the output has the input's shape, so the block can serve
    /// as an ODE vector field.
    pub fn preserves_shape(&self) -> bool {
        self.output_shape(1) == self.input_shape(1)
    }

    fn embedding_insertions(&self) -> usize {
        match self.pipeline {
            Pipeline::NodeConcatConv | Pipeline::NodeAdditive => 2,
            Pipeline::DdpmStyle => 1,
        }
    }

    fn mlp_hidden(&self) -> usize {
        let (h, w) = self.stage_extent(1);
        4 * self.channels.max(h * w)
    }
}

/// Role of a parameter tensor, used for reporting and gradient grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Norm,
    /// Operand convolution kernel.
    Conv,
    ConvBias,
    /// ConcatConv kernel: the last input channel is timestep embedding, the
    /// rest operand.
    ConcatKernel,
    /// Channel embedding `v` or its MLP weights.
    ChannelEmbed,
    /// Positional embedding `p` or its MLP weights.
    Positional,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Norm => "norm",
            ParamGroup::Conv => "conv",
            ParamGroup::ConvBias => "conv_bias",
            ParamGroup::ConcatKernel => "concat_kernel",
            ParamGroup::ChannelEmbed => "channel_embed",
            ParamGroup::Positional => "positional",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EmbedSlots {
    Linear(usize),
    Mlp([usize; 4]),
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    kernel: usize,
    bias: usize,
    channel: Option<EmbedSlots>,
    positional: Option<EmbedSlots>,
    /// Output spatial extent of this stage's convolution.
    extent: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    norms: Vec<(usize, usize)>,
    stages: Vec<Stage>,
}

/// A block with instantiated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    config: BlockConfig,
    params: Vec<Param>,
    layout: Layout,
}

struct Builder<'a> {
    rng: &'a mut SeededRng,
    params: Vec<Param>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, group: ParamGroup, value: Tensor) -> usize {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    fn norm(&mut self, name: &str, c: usize) -> (usize, usize) {
        let shape = Shape::new(1, c, 1, 1);
        let g = self.add(format!("{name}.gamma"), ParamGroup::Norm, Tensor::ones(shape));
        let b = self.add(format!("{name}.beta"), ParamGroup::Norm, Tensor::zeros(shape));
        (g, b)
    }

    fn mlp(&mut self, name: &str, group: ParamGroup, cfg: &BlockConfig, out: usize) -> EmbedSlots {
        let mlp = crate::embed::EmbedMlp::init(
            self.rng,
            cfg.embed_dim,
            cfg.mlp_hidden(),
            out,
            cfg.activation,
            cfg.bias_policy.embed_bias,
        );
        EmbedSlots::Mlp([
            self.add(format!("{name}.mlp.hidden_weight"), group, mlp.hidden_weight),
            self.add(format!("{name}.mlp.hidden_bias"), group, mlp.hidden_bias),
            self.add(format!("{name}.mlp.out_weight"), group, mlp.out_weight),
            self.add(format!("{name}.mlp.out_bias"), group, mlp.out_bias),
        ])
    }
}

/// Operand kernel: Kaiming-uniform, or uniform with standard deviation
/// `scale` when overridden.
fn operand_kernel(rng: &mut SeededRng, shape: Shape, fan_in: usize, scale: Option<f64>) -> Tensor {
    let bound = match scale {
        Some(s) => 3f64.sqrt() * s,
        None => (6.0 / fan_in as f64).sqrt(),
    };
    uniform_tensor(rng, shape, bound)
}

pub fn build_block(cfg: &BlockConfig, rng: &mut SeededRng) -> Result<Block> {
    cfg.validate()?;
    let c = cfg.channels;
    let k = cfg.kernel;
    let mut b = Builder {
        rng,
        params: Vec::new(),
    };
    let mut norms = vec![b.norm("norm0", c)];
    let mut stages = Vec::new();
    for s in 1..=2 {
        let extent = cfg.stage_extent(s);
        let stage = match cfg.pipeline {
            Pipeline::NodeConcatConv => {
                let fan_in = (c + 1) * k * k;
                let mut kernel = operand_kernel(b.rng, Shape::new(c, c + 1, k, k), fan_in, cfg.weight_scale);
                let slice = kaiming_uniform(b.rng, Shape::new(c, c + 1, k, k));
                for o in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            *kernel.at_mut(o, c, i, j) = slice.at(o, c, i, j);
                        }
                    }
                }
                let kernel = b.add(format!("conv{s}.weight"), ParamGroup::ConcatKernel, kernel);
                let bias = cfg.bias_policy.conv_bias.draw(b.rng, c, fan_in);
                let bias = b.add(format!("conv{s}.bias"), ParamGroup::ConvBias, bias);
                Stage {
                    kernel,
                    bias,
                    channel: None,
                    positional: None,
                    extent,
                }
            }
            Pipeline::NodeAdditive | Pipeline::DdpmStyle => {
                let fan_in = c * k * k;
                let kernel = operand_kernel(b.rng, Shape::new(c, c, k, k), fan_in, cfg.weight_scale);
                let kernel = b.add(format!("conv{s}.weight"), ParamGroup::Conv, kernel);
                let bias = cfg.bias_policy.conv_bias.draw(b.rng, c, fan_in);
                let bias = b.add(format!("conv{s}.bias"), ParamGroup::ConvBias, bias);
                let channel = (s <= cfg.embedding_insertions()).then(|| match cfg.embedding {
                    ChannelEmbedding::Linear => {
                        // Same statistics as the spatial sum of a ConcatConv timestep slice.
                        let bound = (6.0 / ((c + 1) * k * k) as f64).sqrt();
                        let slice = uniform_tensor(b.rng, Shape::new(c, 1, k, k), bound);
                        let v = Tensor::from_fn(Shape::new(1, c, 1, 1), |_, o, _, _| {
                            (0..k)
                                .flat_map(|i| (0..k).map(move |j| (i, j)))
                                .map(|(i, j)| slice.at(o, 0, i, j))
                                .sum()
                        });
                        EmbedSlots::Linear(b.add(format!("emb{s}.v"), ParamGroup::ChannelEmbed, v))
                    }
                    ChannelEmbedding::Sinusoidal => b.mlp(&format!("emb{s}"), ParamGroup::ChannelEmbed, cfg, c),
                });
                Stage {
                    kernel,
                    bias,
                    channel,
                    positional: None,
                    extent,
                }
            }
        };
        stages.push(stage);
        if s <= cfg.embedding_insertions() {
            if let Some(kind) = cfg.positional {
                let (h, w) = extent;
                let slots = match kind {
                    PositionalKind::Linear => {
                        let p = uniform_tensor(b.rng, Shape::new(1, 1, h, w), 1.0);
                        EmbedSlots::Linear(b.add(format!("pos{s}.p"), ParamGroup::Positional, p))
                    }
                    PositionalKind::SinusoidalMlp => b.mlp(&format!("pos{s}"), ParamGroup::Positional, cfg, h * w),
                };
                stages.last_mut().expect("just pushed").positional = Some(slots);
            }
        }
        if s == 1 || cfg.pipeline != Pipeline::DdpmStyle {
            norms.push(b.norm(&format!("norm{s}"), c));
        }
    }
    Ok(Block {
        config: cfg.clone(),
        params: b.params,
        layout: Layout { norms, stages },
    })
}

impl Block {
    /// Build with a generator seeded from `cfg.seed`.
    pub fn from_config(cfg: &BlockConfig) -> Result<Block> {
        build_block(cfg, &mut seeded(cfg.seed))
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Flat copy of every parameter value, in parameter order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return config_err(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            ));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Register every parameter as a tape leaf, in parameter order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Register every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Evaluate on a fresh tape. `times` holds one value or one per sample.
    pub fn forward(&self, x: &Tensor, times: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward_on(&mut tape, &vars, xv, times)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], x: Var, times: &[f64]) -> Result<Var> {
        let cfg = &self.config;
        let xs = tape.shape(x);
        if xs.c != cfg.channels || xs.h != cfg.height || xs.w != cfg.width {
            return config_err(format!(
                "block expects inputs of shape (N, {}, {}, {}), got {xs}",
                cfg.channels, cfg.height, cfg.width
            ));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "{} tape variables bound for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let times = crate::embed::batch_times(times, xs.n)?;
        let tvec = tape.constant(Tensor::from_vec(Shape::new(xs.n, 1, 1, 1), times.clone())?);
        let features = cfg
            .uses_sinusoidal()
            .then(|| tape.constant(sinusoidal_batch(&times, &cfg.sinusoidal_spec())));
        let spec = cfg.norm_spec();
        let norm = |tape: &mut Tape, h: Var, i: usize| {
            let (g, b) = self.layout.norms[i];
            tape.normalize(h, spec, Some(vars[g]), Some(vars[b]))
        };

        let mut h = norm(tape, x, 0)?;
        for (s, stage) in self.layout.stages.iter().enumerate() {
            h = tape.activation(h, cfg.activation);
            h = match cfg.pipeline {
                Pipeline::NodeConcatConv => {
                    let hs = tape.shape(h);
                    let plane = tape.constant(crate::embed::timestep_plane(&times, hs.h, hs.w));
                    let stacked = tape.concat_channels(h, plane)?;
                    tape.conv2d(stacked, vars[stage.kernel], Some(vars[stage.bias]), cfg.padding)?
                }
                _ => tape.conv2d(h, vars[stage.kernel], Some(vars[stage.bias]), cfg.padding)?,
            };
            if let Some(slots) = stage.channel {
                let v = embed_on(tape, vars, slots, tvec, features, cfg.activation)?;
                h = tape.add(h, v)?;
            }
            if let Some(slots) = stage.positional {
                let p = embed_on(tape, vars, slots, tvec, features, cfg.activation)?;
                let (eh, ew) = stage.extent;
                let p = tape.reshape(p, Shape::new(xs.n, 1, eh, ew))?;
                h = tape.add(h, p)?;
            }
            if s + 1 < self.layout.norms.len() {
                h = norm(tape, h, s + 1)?;
            }
        }
        if cfg.pipeline == Pipeline::DdpmStyle {
            let hs = tape.shape(h);
            let skip = if hs == xs {
                x
            } else {
                tape.crop(x, (xs.h - hs.h) / 2, (xs.w - hs.w) / 2, hs.h, hs.w)?
            };
            h = tape.add(skip, h)?;
        }
        Ok(h)
    }

    /// Euclidean norm of the gradient restricted to embedding parameters:
    /// channel embeddings, positional embeddings and the timestep slices of
    /// ConcatConv kernels.
    pub fn embedding_grad_norm(&self, grads: &Gradients, vars: &[Var]) -> f64 {
        self.embedding_grad_sq(|i| grads.wrt(vars[i])).sqrt()
    }

    /// Same as [`Block::embedding_grad_norm`] for gradients given per parameter.
    pub fn embedding_grad_norm_of(&self, grads: &[Tensor]) -> f64 {
        self.embedding_grad_sq(|i| grads[i].clone()).sqrt()
    }

    fn embedding_grad_sq(&self, grad: impl Fn(usize) -> Tensor) -> f64 {
        let c = self.config.channels;
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| match p.group {
                ParamGroup::ChannelEmbed | ParamGroup::Positional => grad(i).data().iter().map(|v| v * v).sum(),
                ParamGroup::ConcatKernel => {
                    let g = grad(i);
                    let s = g.shape();
                    let mut acc = 0.0;
                    for o in 0..s.n {
                        for a in 0..s.h {
                            for b in 0..s.w {
                                acc += g.at(o, c, a, b).powi(2);
                            }
                        }
                    }
                    acc
                }
                _ => 0.0,
            })
            .sum()
    }

    /// Multiply every operand convolution weight by `factor`. ConcatConv
    /// timestep slices are left untouched.
    pub fn scale_operand_weights(&mut self, factor: f64) {
        let c = self.config.channels;
        for p in &mut self.params {
            match p.group {
                ParamGroup::Conv => p.value.data_mut().iter_mut().for_each(|v| *v *= factor),
                ParamGroup::ConcatKernel => {
                    let s = p.value.shape();
                    for o in 0..s.n {
                        for i in 0..c {
                            for a in 0..s.h {
                                for b in 0..s.w {
                                    *p.value.at_mut(o, i, a, b) *= factor;
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }

    /// Zero the timestep-channel slices of ConcatConv kernels.
    pub fn zero_timestep_slices(&mut self) {
        let c = self.config.channels;
        for p in &mut self.params {
            if p.group == ParamGroup::ConcatKernel {
                let s = p.value.shape();
                for o in 0..s.n {
                    for a in 0..s.h {
                        for b in 0..s.w {
                            *p.value.at_mut(o, c, a, b) = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// Re-express a `NodeConcatConv` block as the equivalent `NodeAdditive`
    /// block with linear channel embeddings `v = sum(timestep slice)`.
    /// Exact under valid padding.
    pub fn to_additive(&self) -> Result<Block> {
        if self.config.pipeline != Pipeline::NodeConcatConv {
            return config_err("to_additive needs a node_concat_conv block");
        }
        let c = self.config.channels;
        let mut config = self.config.clone();
        config.pipeline = Pipeline::NodeAdditive;
        config.embedding = ChannelEmbedding::Linear;
        let mut params = Vec::with_capacity(self.params.len() + 2);
        let mut remap = vec![0; self.params.len()];
        let mut stages = self.layout.stages.clone();
        for (i, p) in self.params.iter().enumerate() {
            if p.group == ParamGroup::ConcatKernel {
                let decomposed = crate::embed::decompose_concat_conv(&crate::embed::ConcatConvParams {
                    kernel: p.value.clone(),
                    bias: None,
                    padding: self.config.padding,
                });
                remap[i] = params.len();
                params.push(Param {
                    name: p.name.clone(),
                    group: ParamGroup::Conv,
                    value: decomposed.reduced_kernel,
                });
                let stage_name = p.name.trim_end_matches(".weight").trim_start_matches("conv");
                let v = Tensor::from_vec(Shape::new(1, c, 1, 1), decomposed.offset)?;
                let slot = params.len();
                params.push(Param {
                    name: format!("emb{stage_name}.v"),
                    group: ParamGroup::ChannelEmbed,
                    value: v,
                });
                let stage = stages
                    .iter_mut()
                    .find(|s| s.kernel == i)
                    .expect("every ConcatConv kernel belongs to a stage");
                stage.channel = Some(EmbedSlots::Linear(slot));
            } else {
                remap[i] = params.len();
                params.push(p.clone());
            }
        }
        let fix = |slots: &mut EmbedSlots| match slots {
            EmbedSlots::Linear(i) => *i = remap[*i],
            EmbedSlots::Mlp(ix) => ix.iter_mut().for_each(|i| *i = remap[*i]),
        };
        for (orig, stage) in self.layout.stages.iter().zip(stages.iter_mut()) {
            stage.kernel = remap[orig.kernel];
            stage.bias = remap[orig.bias];
            if let Some(p) = stage.positional.as_mut() {
                fix(p);
            }
        }
        let norms = self.layout.norms.iter().map(|&(g, b)| (remap[g], remap[b])).collect();
        Ok(Block {
            config,
            params,
            layout: Layout { norms, stages },
        })
    }
}

fn embed_on(
    tape: &mut Tape,
    vars: &[Var],
    slots: EmbedSlots,
    tvec: Var,
    features: Option<Var>,
    act: ActivationKind,
) -> Result<Var> {
    match slots {
        // (N,1,1,1) * (1,C,1,1) or (1,1,H,W)
        EmbedSlots::Linear(i) => tape.mul(tvec, vars[i]),
        EmbedSlots::Mlp([hw, hb, ow, ob]) => {
            let features = features.expect("sinusoidal features computed for MLP embeddings");
            let mlp = MlpVars {
                hidden_weight: vars[hw],
                hidden_bias: vars[hb],
                out_weight: vars[ow],
                out_bias: vars[ob],
            };
            mlp_on(tape, features, &mlp, act)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn cfg(pipeline: Pipeline) -> BlockConfig {
        let mut c = BlockConfig::new(pipeline);
        c.channels = 4;
        c.height = 6;
        c.width = 6;
        c.norm = NormKind::Group { groups: 2 };
        c.embed_dim = 8;
        c.seed = 11;
        c
    }

    fn probe(c: &BlockConfig, seed: u64) -> Tensor {
        normal_tensor(&mut seeded(seed), c.input_shape(2))
    }

    #[test]
    fn same_seed_same_parameters() {
        for p in [Pipeline::NodeConcatConv, Pipeline::NodeAdditive, Pipeline::DdpmStyle] {
            let mut c = cfg(p);
            c.positional = Some(PositionalKind::SinusoidalMlp);
            if p != Pipeline::NodeConcatConv {
                c.embedding = ChannelEmbedding::Sinusoidal;
            }
            let a = Block::from_config(&c).unwrap();
            let b = Block::from_config(&c).unwrap();
            assert_eq!(a, b);
            c.seed += 1;
            assert_ne!(a.flat_params(), Block::from_config(&c).unwrap().flat_params());
        }
    }

    #[test]
    fn zero_bias_policy() {
        let mut c = cfg(Pipeline::NodeAdditive);
        c.embedding = ChannelEmbedding::Sinusoidal;
        c.bias_policy = BiasPolicy::ZERO_BOTH;
        let b = Block::from_config(&c).unwrap();
        let biases: Vec<_> = b
            .params()
            .iter()
            .filter(|p| p.name.ends_with("bias") && p.group != ParamGroup::Norm)
            .collect();
        assert_eq!(biases.len(), 6);
        assert!(biases.iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn weight_scale_override_sets_std() {
        let mut c = cfg(Pipeline::NodeAdditive);
        c.channels = 32;
        c.norm = NormKind::Group { groups: 8 };
        c.weight_scale = Some(100.0);
        let b = Block::from_config(&c).unwrap();
        for p in b.params().iter().filter(|p| p.group == ParamGroup::Conv) {
            let d = p.value.data();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
            assert!((sd / 100.0 - 1.0).abs() < 0.05, "std {sd}");
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut c = cfg(Pipeline::NodeAdditive);
        c.norm = NormKind::Group { groups: 3 };
        let e = Block::from_config(&c).unwrap_err().to_string();
        assert!(e.contains("block.norm"), "{e}");
        let mut c = cfg(Pipeline::NodeConcatConv);
        c.embedding = ChannelEmbedding::Sinusoidal;
        assert!(Block::from_config(&c)
            .unwrap_err()
            .to_string()
            .contains("block.embedding"));
        let mut c = cfg(Pipeline::NodeAdditive);
        c.padding = Padding::Valid;
        c.height = 4;
        assert!(Block::from_config(&c).is_err());
        let mut c = cfg(Pipeline::DdpmStyle);
        c.embedding = ChannelEmbedding::Sinusoidal;
        c.embed_dim = 7;
        assert!(Block::from_config(&c)
            .unwrap_err()
            .to_string()
            .contains("block.embed_dim"));
    }

    #[test]
    fn zeroed_timestep_slice_removes_time() {
        let mut c = cfg(Pipeline::NodeConcatConv);
        c.norm = NormKind::Layer;
        let mut b = Block::from_config(&c).unwrap();
        b.zero_timestep_slices();
        let x = probe(&c, 1);
        assert_eq!(b.forward(&x, &[0.1]).unwrap(), b.forward(&x, &[0.8]).unwrap());
    }

    #[test]
    fn instance_valid_additive_is_time_blind() {
        let mut c = cfg(Pipeline::NodeAdditive);
        c.norm = NormKind::Instance;
        c.padding = Padding::Valid;
        let b = Block::from_config(&c).unwrap();
        let x = probe(&c, 2);
        let d = b
            .forward(&x, &[0.1])
            .unwrap()
            .max_abs_diff(&b.forward(&x, &[0.9]).unwrap());
        assert!(d < 1e-10, "{d}");

        c.norm = NormKind::Group { groups: 1 };
        let b = Block::from_config(&c).unwrap();
        let d = b
            .forward(&x, &[0.1])
            .unwrap()
            .max_abs_diff(&b.forward(&x, &[0.9]).unwrap());
        assert!(d > 1e-4, "{d}");
    }

    #[test]
    fn concat_and_additive_pipelines_agree() {
        let mut c = cfg(Pipeline::NodeConcatConv);
        c.padding = Padding::Valid;
        c.height = 7;
        c.width = 8;
        c.positional = Some(PositionalKind::Linear);
        let b = Block::from_config(&c).unwrap();
        let a = b.to_additive().unwrap();
        let x = probe(&c, 3);
        for t in [0.0, 0.35, 1.0] {
            let d = b.forward(&x, &[t]).unwrap().max_abs_diff(&a.forward(&x, &[t]).unwrap());
            assert!(d < 1e-12, "t={t}: {d}");
        }
    }

    #[test]
    fn ddpm_with_zero_weights_is_identity() {
        let mut c = cfg(Pipeline::DdpmStyle);
        c.embedding = ChannelEmbedding::Sinusoidal;
        c.bias_policy = BiasPolicy::ZERO_BOTH;
        let mut b = Block::from_config(&c).unwrap();
        for p in b.params_mut() {
            if matches!(p.group, ParamGroup::Conv | ParamGroup::ChannelEmbed) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = probe(&c, 4);
        assert_eq!(b.forward(&x, &[0.4]).unwrap(), x);
    }

    #[test]
    fn per_sample_times() {
        let mut c = cfg(Pipeline::DdpmStyle);
        c.norm = NormKind::Group { groups: 1 };
        let b = Block::from_config(&c).unwrap();
        let x = probe(&c, 5);
        let both = b.forward(&x, &[0.2, 0.7]).unwrap();
        let first = b.forward(&x, &[0.2]).unwrap();
        let second = b.forward(&x, &[0.7]).unwrap();
        let plane = 4 * 36;
        assert_eq!(&both.data()[..plane], &first.data()[..plane]);
        assert_eq!(&both.data()[plane..], &second.data()[plane..]);
        assert!(b.forward(&x, &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn valid_ddpm_crops_skip() {
        let mut c = cfg(Pipeline::DdpmStyle);
        c.padding = Padding::Valid;
        let b = Block::from_config(&c).unwrap();
        let y = b.forward(&probe(&c, 6), &[0.5]).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 2, 2));
        assert!(!c.preserves_shape());
    }
}
