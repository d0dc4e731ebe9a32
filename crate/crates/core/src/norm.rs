//! Batch, layer, instance and group normalization as one operation over
//! "normalization units": the sets of elements sharing a mean and variance.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which axes a normalization pools over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormKind {
    /// One unit per channel over (N, H, W). Training-mode statistics only.
    Batch,
    /// One unit per sample over (C, H, W).
    Layer,
    /// One unit per (sample, channel) over (H, W).
    Instance,
    /// One unit per (sample, group) over (C / G channels, H, W).
    Group { groups: usize },
}

impl NormKind {
    /// Number of channels sharing one normalization unit.
    pub fn channels_per_unit(self, channels: usize) -> Result<usize> {
        self.validate(channels)?;
        Ok(match self {
            NormKind::Batch | NormKind::Instance => 1,
            NormKind::Layer => channels,
            NormKind::Group { groups } => channels / groups,
        })
    }

    pub fn validate(self, channels: usize) -> Result<()> {
        if let NormKind::Group { groups } = self {
            if groups == 0 || channels % groups != 0 {
                return config_err(format!(
                    "group count {groups} must be positive and divide channel count {channels}"
                ));
            }
        }
        Ok(())
    }

    /// True when every unit is confined to a single channel, so that a
    /// per-channel constant offset is removed exactly.
    pub fn is_per_channel(self, channels: usize) -> bool {
        matches!(self.channels_per_unit(channels), Ok(1))
    }

    /// `min(C / 4, 32)`, floored at one group.
    pub fn conventional_groups(channels: usize) -> usize {
        (channels / 4).clamp(1, 32)
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Batch => f.write_str("batch"),
            NormKind::Layer => f.write_str("layer"),
            NormKind::Instance => f.write_str("instance"),
            NormKind::Group { groups } => write!(f, "group({groups})"),
        }
    }
}

/// Normalization kind plus the variance floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    pub kind: NormKind,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        Self { kind, eps: DEFAULT_EPS }
    }

    pub fn with_eps(kind: NormKind, eps: f64) -> Self {
        Self { kind, eps }
    }
}

/// Assignment of (n, c) pairs to normalization units.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UnitLayout {
    kind: NormKind,
    shape: Shape,
    pub(crate) count: usize,
    pub(crate) size: usize,
}

impl UnitLayout {
    pub(crate) fn new(kind: NormKind, shape: Shape) -> Result<Self> {
        kind.validate(shape.c)?;
        let plane = shape.h * shape.w;
        let (count, size) = match kind {
            NormKind::Batch => (shape.c, shape.n * plane),
            NormKind::Layer => (shape.n, shape.c * plane),
            NormKind::Instance => (shape.n * shape.c, plane),
            NormKind::Group { groups } => (shape.n * groups, shape.c / groups * plane),
        };
        if size == 0 {
            return config_err(format!("{kind} normalization of {shape} has empty units"));
        }
        Ok(Self {
            kind,
            shape,
            count,
            size,
        })
    }

    #[inline]
    pub(crate) fn unit(&self, n: usize, c: usize) -> usize {
        match self.kind {
            NormKind::Batch => c,
            NormKind::Layer => n,
            NormKind::Instance => n * self.shape.c + c,
            NormKind::Group { groups } => n * groups + c / (self.shape.c / groups),
        }
    }
}

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub(crate) xhat: Tensor,
    pub(crate) inv_std: Vec<f64>,
}

/// Mean-variance normalization without affine parameters. Returns the
/// normalized tensor and the per-unit inverse standard deviations.
pub(crate) fn normalize_raw(x: &Tensor, spec: NormSpec) -> Result<NormCache> {
    let s = x.shape();
    let layout = UnitLayout::new(spec.kind, s)?;
    let plane = s.h * s.w;
    let data = x.data();
    let mut mean = vec![0.0; layout.count];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            mean[layout.unit(n, c)] += data[base..base + plane].iter().sum::<f64>();
        }
    }
    let inv_size = 1.0 / layout.size as f64;
    mean.iter_mut().for_each(|m| *m *= inv_size);
    let mut var = vec![0.0; layout.count];
    for n in 0..s.n {
        for c in 0..s.c {
            let u = layout.unit(n, c);
            let base = s.index(n, c, 0, 0);
            var[u] += data[base..base + plane]
                .iter()
                .map(|v| (v - mean[u]) * (v - mean[u]))
                .sum::<f64>();
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v * inv_size + spec.eps).sqrt()).collect();
    let mut xhat = x.clone();
    let out = xhat.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let u = layout.unit(n, c);
            let base = s.index(n, c, 0, 0);
            for v in &mut out[base..base + plane] {
                *v = (*v - mean[u]) * inv_std[u];
            }
        }
    }
    xhat.ensure_finite("normalization")?;
    Ok(NormCache { xhat, inv_std })
}

/// Gradient of the unit normalization with respect to its input, given the
/// gradient with respect to `xhat`.
pub(crate) fn normalize_backward(cache: &NormCache, kind: NormKind, grad_xhat: &Tensor) -> Tensor {
    let s = grad_xhat.shape();
    let layout = UnitLayout::new(kind, s).expect("layout validated in forward");
    let plane = s.h * s.w;
    let g = grad_xhat.data();
    let xh = cache.xhat.data();
    let mut sum_g = vec![0.0; layout.count];
    let mut sum_gx = vec![0.0; layout.count];
    for n in 0..s.n {
        for c in 0..s.c {
            let u = layout.unit(n, c);
            let base = s.index(n, c, 0, 0);
            for i in base..base + plane {
                sum_g[u] += g[i];
                sum_gx[u] += g[i] * xh[i];
            }
        }
    }
    let inv_size = 1.0 / layout.size as f64;
    let mut out = Tensor::zeros(s);
    let o = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let u = layout.unit(n, c);
            let (mg, mgx, is) = (sum_g[u] * inv_size, sum_gx[u] * inv_size, cache.inv_std[u]);
            let base = s.index(n, c, 0, 0);
            for i in base..base + plane {
                o[i] = is * (g[i] - mg - xh[i] * mgx);
            }
        }
    }
    out
}

/// `(x - mean_u) / sqrt(var_u + eps)` per normalization unit, with the
/// population variance. No affine transform.
pub fn normalize(x: &Tensor, spec: NormSpec) -> Result<Tensor> {
    Ok(normalize_raw(x, spec)?.xhat)
}

/// Normalization followed by a per-channel affine map `gamma * y + beta`.
pub fn normalize_affine(x: &Tensor, spec: NormSpec, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.shape().c;
    if gamma.len() != c || beta.len() != c {
        return config_err(format!(
            "affine parameters need {c} entries, got gamma {} and beta {}",
            gamma.len(),
            beta.len()
        ));
    }
    let y = normalize(x, spec)?;
    let per_channel = Shape::new(1, c, 1, 1);
    y.mul(&gamma.reshape(per_channel)?)?.add(&beta.reshape(per_channel)?)
}

/// Number of channels in each normalization unit.
pub fn channels_per_unit(spec: NormSpec, channels: usize) -> Result<usize> {
    spec.kind.channels_per_unit(channels)
}
