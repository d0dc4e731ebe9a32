//! Timestep embeddings: ConcatConv and its additive decomposition,
//! sinusoidal features with MLP branches, and positional embeddings that
//! carry `H x W` spatially distinct values shared across channels.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::{uniform_tensor, SeededRng};
use crate::tape::{Tape, Var};
use crate::tensor::{self, ActivationKind, Padding, Shape, Tensor};

pub const DEFAULT_SINUSOIDAL_BASE: f64 = 10_000.0;

/// A convolution whose last input channel is the constant plane `t * J`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatConvParams {
    /// (C_out, C_in + 1, k, k); input channel `C_in` is the timestep channel.
    pub kernel: Tensor,
    /// One entry per output channel.
    pub bias: Option<Tensor>,
    pub padding: Padding,
}

impl ConcatConvParams {
    pub fn input_channels(&self) -> usize {
        self.kernel.shape().c - 1
    }
}

/// Plain convolution plus a per-output-channel offset `t * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedParams {
    /// Kernel restricted to the feature channels, (C_out, C_in, k, k).
    pub reduced_kernel: Tensor,
    /// `v[k]`: sum of output channel `k`'s timestep-channel taps.
    pub offset: Vec<f64>,
    pub bias: Option<Tensor>,
}

/// Plane of shape (N, 1, H, W) holding `times[n]` at every position.
pub fn timestep_plane(times: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(times.len(), 1, h, w), |n, _, _, _| times[n])
}

/// Per-sample times broadcast to a batch of `n`: a single value is
/// repeated, otherwise the length must match.
pub fn batch_times(times: &[f64], n: usize) -> Result<Vec<f64>> {
    match times.len() {
        1 => Ok(vec![times[0]; n]),
        len if len == n => Ok(times.to_vec()),
        len => config_err(format!("{len} timesteps given for a batch of {n}")),
    }
}

/// `conv2d([x ; t J], W)` with the timestep plane as the last channel.
pub fn concat_conv(x: &Tensor, t: f64, params: &ConcatConvParams) -> Result<Tensor> {
    let s = x.shape();
    if s.c != params.input_channels() {
        return config_err(format!(
            "concat_conv kernel expects {} feature channels, input has {}",
            params.input_channels(),
            s.c
        ));
    }
    let plane = timestep_plane(&vec![t; s.n], s.h, s.w);
    let stacked = tensor::concat_channels(x, &plane)?;
    tensor::conv2d(&stacked, &params.kernel, params.bias.as_ref(), params.padding)
}

/// Split a ConcatConv kernel into its feature part and the spatial sums of
/// its timestep-channel slices.
pub fn decompose_concat_conv(params: &ConcatConvParams) -> DecomposedParams {
    let ks = params.kernel.shape();
    let cin = ks.c - 1;
    let reduced_kernel = Tensor::from_fn(Shape::new(ks.n, cin, ks.h, ks.w), |o, i, a, b| {
        params.kernel.at(o, i, a, b)
    });
    let offset = (0..ks.n)
        .map(|o| {
            let mut s = 0.0;
            for a in 0..ks.h {
                for b in 0..ks.w {
                    s += params.kernel.at(o, cin, a, b);
                }
            }
            s
        })
        .collect();
    DecomposedParams {
        reduced_kernel,
        offset,
        bias: params.bias.clone(),
    }
}

/// `conv2d(x, W~) + t * v`, the additive form of [`concat_conv`]. Equal to
/// it exactly under valid padding; under zero padding the border taps that
/// fall outside the input make the two differ.
pub fn decomposed_forward(x: &Tensor, t: f64, params: &DecomposedParams, padding: Padding) -> Result<Tensor> {
    let y = tensor::conv2d(x, &params.reduced_kernel, params.bias.as_ref(), padding)?;
    let c = params.offset.len();
    let v = Tensor::from_vec(Shape::new(1, c, 1, 1), params.offset.iter().map(|o| t * o).collect())?;
    y.add(&v)
}

/// Sinusoidal feature layout: `[sin(w_0 t) .. sin(w_{d/2-1} t), cos(w_0 t) ..]`
/// with `w_i = base^(-i / (d/2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidalSpec {
    pub dim: usize,
    #[serde(default = "default_base")]
    pub base: f64,
}

fn default_base() -> f64 {
    DEFAULT_SINUSOIDAL_BASE
}

impl SinusoidalSpec {
    pub fn new(dim: usize) -> Result<Self> {
        let spec = Self {
            dim,
            base: DEFAULT_SINUSOIDAL_BASE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return config_err(format!(
                "sinusoidal dimension must be even and positive, got {}",
                self.dim
            ));
        }
        if !(self.base > 0.0) {
            return config_err(format!("sinusoidal base must be positive, got {}", self.base));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        (0..half).map(|i| self.base.powf(-(i as f64) / half as f64)).collect()
    }
}

pub fn sinusoidal(t: f64, spec: &SinusoidalSpec) -> Vec<f64> {
    let freqs = spec.frequencies();
    let mut out: Vec<f64> = freqs.iter().map(|w| (w * t).sin()).collect();
    out.extend(freqs.iter().map(|w| (w * t).cos()));
    out
}

/// Sinusoidal features of a batch of times as an (N, d, 1, 1) tensor.
pub fn sinusoidal_batch(times: &[f64], spec: &SinusoidalSpec) -> Tensor {
    let d = spec.dim;
    let data = times.iter().flat_map(|&t| sinusoidal(t, spec)).collect();
    Tensor::from_vec(Shape::new(times.len(), d, 1, 1), data).expect("length is N * d")
}

/// Two affine layers with one activation between, mapping sinusoidal
/// features to `out` values. Weights are stored as 1x1 convolution kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedMlp {
    /// (hidden, d, 1, 1)
    pub hidden_weight: Tensor,
    /// (1, hidden, 1, 1)
    pub hidden_bias: Tensor,
    /// (out, hidden, 1, 1)
    pub out_weight: Tensor,
    /// (1, out, 1, 1)
    pub out_bias: Tensor,
    pub activation: ActivationKind,
}

/// How MLP bias vectors are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasInit {
    Zero,
    /// Uniform in `±1/sqrt(fan_in)`.
    #[default]
    Default,
}

impl BiasInit {
    pub fn draw(self, rng: &mut SeededRng, len: usize, fan_in: usize) -> Tensor {
        // Zero still consumes the draw so other parameters do not depend on the policy.
        let drawn = uniform_tensor(rng, Shape::new(1, len, 1, 1), 1.0 / (fan_in as f64).sqrt());
        match self {
            BiasInit::Zero => Tensor::zeros(drawn.shape()),
            BiasInit::Default => drawn,
        }
    }
}

/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform(rng: &mut SeededRng, shape: Shape) -> Tensor {
    let fan_in = shape.c * shape.h * shape.w;
    uniform_tensor(rng, shape, (6.0 / fan_in as f64).sqrt())
}

impl EmbedMlp {
    pub fn init(
        rng: &mut SeededRng,
        input: usize,
        hidden: usize,
        out: usize,
        activation: ActivationKind,
        bias: BiasInit,
    ) -> Self {
        let hidden_weight = kaiming_uniform(rng, Shape::new(hidden, input, 1, 1));
        let hidden_bias = bias.draw(rng, hidden, input);
        let out_weight = kaiming_uniform(rng, Shape::new(out, hidden, 1, 1));
        let out_bias = bias.draw(rng, out, hidden);
        Self {
            hidden_weight,
            hidden_bias,
            out_weight,
            out_bias,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden_weight.shape().c
    }

    pub fn output_dim(&self) -> usize {
        self.out_weight.shape().n
    }

    /// Evaluate on a batch of (N, d, 1, 1) features.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let vars = MlpVars {
            hidden_weight: tape.constant(self.hidden_weight.clone()),
            hidden_bias: tape.constant(self.hidden_bias.clone()),
            out_weight: tape.constant(self.out_weight.clone()),
            out_bias: tape.constant(self.out_bias.clone()),
        };
        let y = mlp_on(&mut tape, x, &vars, self.activation)?;
        Ok(tape.value(y).clone())
    }
}

/// Tape handles for the four tensors of an [`EmbedMlp`].
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// MLP evaluation on the tape; `input` is (N, d, 1, 1).
pub fn mlp_on(tape: &mut Tape, input: Var, mlp: &MlpVars, act: ActivationKind) -> Result<Var> {
    let h = tape.conv2d(input, mlp.hidden_weight, Some(mlp.hidden_bias), Padding::Valid)?;
    let h = tape.activation(h, act);
    tape.conv2d(h, mlp.out_weight, Some(mlp.out_bias), Padding::Valid)
}

/// Channel embedding `v~_t = MLP(sinusoidal(t))`, one value per channel.
pub fn embed_channel(t: f64, mlp: &EmbedMlp, spec: &SinusoidalSpec) -> Result<Vec<f64>> {
    if mlp.input_dim() != spec.dim {
        return config_err(format!(
            "embedding MLP reads {} features, sinusoidal spec has {}",
            mlp.input_dim(),
            spec.dim
        ));
    }
    Ok(mlp.forward(&sinusoidal_batch(&[t], spec))?.into_vec())
}

/// Linear-in-time positional embedding `p~_t = t * p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalLinearParams {
    /// (1, 1, H, W)
    pub p: Tensor,
}

pub enum PositionalSource<'a> {
    Linear(&'a PositionalLinearParams),
    SinusoidalMlp(&'a EmbedMlp),
}

/// Positional embedding as a (1, 1, H, W) map, to be broadcast over
/// channels.
pub fn embed_positional(
    t: f64,
    which: PositionalSource<'_>,
    spec: &SinusoidalSpec,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let geometry = Shape::new(1, 1, h, w);
    match which {
        PositionalSource::Linear(params) => {
            if params.p.shape() != geometry {
                return config_err(format!(
                    "positional map {} does not match geometry {h}x{w}",
                    params.p.shape()
                ));
            }
            Ok(params.p.scale(t))
        }
        PositionalSource::SinusoidalMlp(mlp) => {
            if mlp.output_dim() != h * w {
                return config_err(format!(
                    "positional MLP produces {} values for a {h}x{w} map",
                    mlp.output_dim()
                ));
            }
            Tensor::from_vec(geometry, embed_channel(t, mlp, spec)?)
        }
    }
}
