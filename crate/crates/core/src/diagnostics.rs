//! Detectors for blocks whose output does not depend on time.
//!
//! The certificate thresholds are artifact-level definitions of "no
//! dependence", set an order below the accumulation noise of f64 forward
//! passes at these sizes.

use serde::{Deserialize, Serialize};

use crate::blocks::{BiasPolicy, Block, BlockConfig};
use crate::error::{config_err, Result};
use crate::rng::{derive_seed, normal_tensor, seeded, SeededRng};
use crate::tape::Tape;
use crate::tensor::{Padding, Tensor};

fn default_probes() -> usize {
    8
}
fn default_t_grid() -> usize {
    32
}
fn default_probe_batch() -> usize {
    2
}
fn default_seed() -> u64 {
    2024
}
fn default_sensitivity_threshold() -> f64 {
    1e-9
}
fn default_embed_grad_threshold() -> f64 {
    1e-12
}
fn default_fd_step() -> f64 {
    1e-4
}
fn default_embed_times() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Number of independent probe inputs.
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Uniform grid points on `[0, 1]`, endpoints included.
    #[serde(default = "default_t_grid")]
    pub t_grid: usize,
    /// Samples per probe input; every sample of a probe shares one `t`.
    #[serde(default = "default_probe_batch")]
    pub probe_batch: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_sensitivity_threshold")]
    pub sensitivity_threshold: f64,
    #[serde(default = "default_embed_grad_threshold")]
    pub embed_grad_threshold: f64,
    /// Step of the central difference in `t`.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Times at which the embedding-gradient probe loss is evaluated.
    #[serde(default = "default_embed_times")]
    pub embed_times: Vec<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            probes: default_probes(),
            t_grid: default_t_grid(),
            probe_batch: default_probe_batch(),
            seed: default_seed(),
            sensitivity_threshold: default_sensitivity_threshold(),
            embed_grad_threshold: default_embed_grad_threshold(),
            fd_step: default_fd_step(),
            embed_times: default_embed_times(),
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probes < 2 || self.t_grid < 2 {
            return config_err(format!(
                "diagnostics.probes and diagnostics.t_grid must be at least 2, got {} and {}",
                self.probes, self.t_grid
            ));
        }
        if self.probe_batch == 0 {
            return config_err("diagnostics.probe_batch must be positive");
        }
        if !(self.fd_step > 0.0) {
            return config_err(format!("diagnostics.fd_step must be positive, got {}", self.fd_step));
        }
        if !(self.sensitivity_threshold > 0.0 && self.embed_grad_threshold > 0.0) {
            return config_err("diagnostics thresholds must be positive");
        }
        if self.embed_times.is_empty() || self.embed_times.iter().any(|t| !t.is_finite()) {
            return config_err("diagnostics.embed_times must be a non-empty list of finite times");
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.t_grid)
    }
}

/// `m` evenly spaced points on `[0, 1]` including both ends.
pub fn uniform_grid(m: usize) -> Vec<f64> {
    (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    TimeBlind,
    EdgeOnly,
    TimeAware,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::TimeBlind => "TimeBlind",
            Verdict::EdgeOnly => "EdgeOnly",
            Verdict::TimeAware => "TimeAware",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Output difference between two grid times for one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub probe: usize,
    pub i: usize,
    pub j: usize,
    pub t_i: f64,
    pub t_j: f64,
    pub linf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityStats {
    /// Max over probes of the max pairwise infinity-norm difference.
    pub max: f64,
    /// Mean over probes of the same quantity.
    pub mean: f64,
    pub per_probe: Vec<f64>,
    /// Per output position, the largest change over `t`, row-major.
    pub spatial_map: Vec<f64>,
    pub map_height: usize,
    pub map_width: usize,
    pub pairs: Vec<PairRecord>,
}

impl SensitivityStats {
    /// Mean of the spatial map over (border, interior) positions, where
    /// the border is a ring of width `ring`.
    pub fn border_interior(&self, ring: usize) -> (f64, f64) {
        let (h, w) = (self.map_height, self.map_width);
        let (mut b, mut nb, mut i, mut ni) = (0.0, 0, 0.0, 0);
        for y in 0..h {
            for x in 0..w {
                let v = self.spatial_map[y * w + x];
                if y < ring || x < ring || y + ring >= h || x + ring >= w {
                    b += v;
                    nb += 1;
                } else {
                    i += v;
                    ni += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        (mean(b, nb), mean(i, ni))
    }
}

/// Standard normal probe inputs, `probes` tensors of `batch` samples.
pub fn probe_inputs(cfg: &BlockConfig, probes: usize, batch: usize, rng: &mut SeededRng) -> Vec<Tensor> {
    (0..probes)
        .map(|_| normal_tensor(rng, cfg.input_shape(batch)))
        .collect()
}

/// Sensitivity of the block output to `t` over a uniform grid.
pub fn time_sensitivity(block: &Block, probes: usize, t_grid: usize, rng: &mut SeededRng) -> Result<SensitivityStats> {
    if probes < 2 || t_grid < 2 {
        return config_err("time sensitivity needs at least 2 probes and 2 grid points");
    }
    let inputs = probe_inputs(block.config(), probes, default_probe_batch(), rng);
    sensitivity_of(block, &inputs, &uniform_grid(t_grid))
}

pub fn sensitivity_of(block: &Block, inputs: &[Tensor], grid: &[f64]) -> Result<SensitivityStats> {
    let out_shape = block.config().output_shape(1);
    let (mh, mw) = (out_shape.h, out_shape.w);
    let mut spatial = vec![0.0f64; mh * mw];
    let mut per_probe = Vec::with_capacity(inputs.len());
    let mut pairs = Vec::new();
    for (p, x) in inputs.iter().enumerate() {
        let outs = grid
            .iter()
            .map(|&t| block.forward(x, &[t]))
            .collect::<Result<Vec<_>>>()?;
        let mut probe_max = 0.0f64;
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                let linf = outs[i].max_abs_diff(&outs[j]);
                probe_max = probe_max.max(linf);
                pairs.push(PairRecord {
                    probe: p,
                    i,
                    j,
                    t_i: grid[i],
                    t_j: grid[j],
                    linf,
                });
            }
        }
        per_probe.push(probe_max);
        let s = outs[0].shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let (lo, hi) = outs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
                            let v = o.at(n, c, y, xx);
                            (lo.min(v), hi.max(v))
                        });
                        let cell = &mut spatial[y * mw + xx];
                        *cell = cell.max(hi - lo);
                    }
                }
            }
        }
    }
    Ok(SensitivityStats {
        max: per_probe.iter().copied().fold(0.0, f64::max),
        mean: per_probe.iter().sum::<f64>() / per_probe.len() as f64,
        per_probe,
        spatial_map: spatial,
        map_height: mh,
        map_width: mw,
        pairs,
    })
}

/// Largest central-difference `||d forward / dt||_2` over the grid, per probe.
pub fn dt_grad_norms(block: &Block, inputs: &[Tensor], grid: &[f64], step: f64) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|x| {
            let mut best = 0.0f64;
            for &t in grid {
                let up = block.forward(x, &[t + step])?;
                let down = block.forward(x, &[t - step])?;
                let d = up.sub(&down)?;
                best = best.max(d.norm_l2() / (2.0 * step));
            }
            Ok(best)
        })
        .collect()
}

/// Fixed projection directions for the probe loss `<R, forward(x, t)>`.
fn projections(block: &Block, inputs: &[Tensor], seed: u64) -> Vec<Tensor> {
    let mut rng = seeded(derive_seed(seed, 0x5052_4f4a));
    inputs
        .iter()
        .map(|x| normal_tensor(&mut rng, block.config().output_shape(x.shape().n)))
        .collect()
}

/// Embedding-parameter gradient norm of the probe loss
/// `sum_t <R_p, forward(x_p, t)> / numel` for each probe.
pub fn embed_grad_norms(block: &Block, inputs: &[Tensor], times: &[f64], seed: u64) -> Result<Vec<f64>> {
    let dirs = projections(block, inputs, seed);
    inputs
        .iter()
        .zip(&dirs)
        .map(|(x, r)| {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let rv = tape.constant(r.clone());
            let mut total = None;
            for &t in times {
                let y = block.forward_on(&mut tape, &vars, xv, &[t])?;
                let prod = tape.mul(y, rv)?;
                let l = tape.mean(prod);
                total = Some(match total {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let grads = tape.backward(total.expect("validated: non-empty times"))?;
            Ok(block.embedding_grad_norm(&grads, &vars))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub probe: usize,
    pub sensitivity: f64,
    pub dt_grad_norm: f64,
    pub embed_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub block: BlockConfig,
    pub settings: DiagnosticsConfig,
    pub verdict: Verdict,
    pub sensitivity: f64,
    pub sensitivity_mean: f64,
    pub dt_grad_norm: f64,
    pub embed_grad_norm: f64,
    pub channels_per_unit: usize,
    pub border_sensitivity: f64,
    pub interior_sensitivity: f64,
    pub spatial_map: Vec<f64>,
    pub map_height: usize,
    pub map_width: usize,
    pub probes: Vec<ProbeStats>,
    pub pairs: Vec<PairRecord>,
}

/// Width of the ring of output positions reached by zero padding.
fn border_ring(cfg: &BlockConfig) -> usize {
    let pad = cfg.kernel / 2;
    let (h, w) = cfg.stage_extent(2);
    let reach = 2 * pad;
    if 2 * reach < h.min(w) {
        reach
    } else {
        pad
    }
}

/// Full certificate for one block.
pub fn diagnose(block: &Block, cfg: &DiagnosticsConfig) -> Result<DiagnosticsReport> {
    cfg.validate()?;
    let bc = block.config();
    let mut rng = seeded(cfg.seed);
    let inputs = probe_inputs(bc, cfg.probes, cfg.probe_batch, &mut rng);
    let grid = cfg.grid();
    let stats = sensitivity_of(block, &inputs, &grid)?;
    let dt = dt_grad_norms(block, &inputs, &grid, cfg.fd_step)?;
    let eg = embed_grad_norms(block, &inputs, &cfg.embed_times, cfg.seed)?;
    let (border, interior) = stats.border_interior(border_ring(bc));
    let dt_grad_norm = dt.iter().copied().fold(0.0, f64::max);
    let embed_grad_norm = eg.iter().copied().fold(0.0, f64::max);
    let channels_per_unit = bc.norm.channels_per_unit(bc.channels)?;

    let verdict = if stats.max < cfg.sensitivity_threshold && embed_grad_norm < cfg.embed_grad_threshold {
        Verdict::TimeBlind
    } else if bc.padding == Padding::SameZero
        && bc.positional.is_none()
        && bc.norm.is_per_channel(bc.channels)
        && border > interior
    {
        Verdict::EdgeOnly
    } else {
        Verdict::TimeAware
    };

    let probes = (0..inputs.len())
        .map(|p| ProbeStats {
            probe: p,
            sensitivity: stats.per_probe[p],
            dt_grad_norm: dt[p],
            embed_grad_norm: eg[p],
        })
        .collect();
    Ok(DiagnosticsReport {
        block: bc.clone(),
        settings: cfg.clone(),
        verdict,
        sensitivity: stats.max,
        sensitivity_mean: stats.mean,
        dt_grad_norm,
        embed_grad_norm,
        channels_per_unit,
        border_sensitivity: border,
        interior_sensitivity: interior,
        spatial_map: stats.spatial_map,
        map_height: stats.map_height,
        map_width: stats.map_width,
        probes,
        pairs: stats.pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatioReport {
    pub scales: Vec<f64>,
    /// Mean over probes of the embedding gradient norm at each scale.
    pub embed_grad_norms: Vec<f64>,
    /// `embed_grad_norms[i] / embed_grad_norms[0]`.
    pub ratios: Vec<f64>,
}

impl VarianceRatioReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.embed_grad_norms.windows(2).all(|w| w[1] < w[0])
    }
}

/// Embedding gradient norm as the operand convolution weights are
/// multiplied by each scale. The template's seed fixes every other draw.
pub fn variance_ratio_probe(
    template: &BlockConfig,
    scales: &[f64],
    cfg: &DiagnosticsConfig,
) -> Result<VarianceRatioReport> {
    cfg.validate()?;
    if scales.len() < 3 {
        return config_err(format!(
            "variance ratio probe needs at least 3 scales, got {}",
            scales.len()
        ));
    }
    if let Some(s) = scales.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return config_err(format!("operand scales must be finite and non-negative, got {s}"));
    }
    let base = Block::from_config(template)?;
    let mut rng = seeded(cfg.seed);
    let inputs = probe_inputs(template, cfg.probes, cfg.probe_batch, &mut rng);
    let mut norms = Vec::with_capacity(scales.len());
    for &s in scales {
        let mut block = base.clone();
        block.scale_operand_weights(s);
        let g = embed_grad_norms(&block, &inputs, &cfg.embed_times, cfg.seed)?;
        norms.push(g.iter().sum::<f64>() / g.len() as f64);
    }
    let ratios = norms.iter().map(|n| n / norms[0]).collect();
    Ok(VarianceRatioReport {
        scales: scales.to_vec(),
        embed_grad_norms: norms,
        ratios,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPolicyRow {
    pub policy: BiasPolicy,
    pub label: String,
    pub embed_grad_norm: f64,
}

/// Embedding gradient norm at initialization under each bias policy. Only
/// bias values differ between the compared blocks.
pub fn bias_policy_probe(
    template: &BlockConfig,
    policies: &[BiasPolicy],
    cfg: &DiagnosticsConfig,
) -> Result<Vec<BiasPolicyRow>> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let inputs = probe_inputs(template, cfg.probes, cfg.probe_batch, &mut rng);
    policies
        .iter()
        .map(|&policy| {
            let block = Block::from_config(&BlockConfig {
                bias_policy: policy,
                ..template.clone()
            })?;
            let g = embed_grad_norms(&block, &inputs, &cfg.embed_times, cfg.seed)?;
            Ok(BiasPolicyRow {
                policy,
                label: policy.label(),
                embed_grad_norm: g.iter().sum::<f64>() / g.len() as f64,
            })
        })
        .collect()
}
