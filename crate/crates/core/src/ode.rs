//! Integration of `dh/dt = f(h, t)`: adaptive Dormand-Prince 5(4) with
//! evaluation counting, and fixed-step RK4 recorded on the tape.

use serde::{Deserialize, Serialize};

use crate::blocks::Block;
use crate::error::{config_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Nodes of the Dormand-Prince tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

/// Stage coefficients `a[i][j]`, lower triangular; row 6 equals the
/// fifth-order weights (first-same-as-last).
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// Fifth-order solution weights.
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];

/// Embedded fourth-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Evaluations made outside the per-attempt stages: the initial `f(t0, y0)`.
pub const NFE_OVERHEAD: usize = 1;
/// Evaluations per attempted step (stages 2..7; stage 1 is reused).
pub const NFE_PER_STEP: usize = 6;

fn default_tol() -> f64 {
    1e-3
}
fn default_max_steps() -> usize {
    10_000
}
fn default_safety() -> f64 {
    0.9
}
fn default_min_factor() -> f64 {
    0.2
}
fn default_max_factor() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_tol")]
    pub atol: f64,
    /// First trial step; `0.1 * (t1 - t0)` when absent.
    #[serde(default)]
    pub initial_step: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default = "default_min_factor")]
    pub min_factor: f64,
    #[serde(default = "default_max_factor")]
    pub max_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::with_tolerances(default_tol(), default_tol())
    }
}

impl SolverConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            initial_step: None,
            max_steps: default_max_steps(),
            safety: default_safety(),
            min_factor: default_min_factor(),
            max_factor: default_max_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0) || !self.rtol.is_finite() {
            return config_err(format!("solver.rtol must be positive, got {}", self.rtol));
        }
        if !(self.atol > 0.0) || !self.atol.is_finite() {
            return config_err(format!("solver.atol must be positive, got {}", self.atol));
        }
        if self.max_steps == 0 {
            return config_err("solver.max_steps must be positive");
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return config_err(format!("solver.initial_step must be positive, got {h}"));
            }
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return config_err(format!("solver.safety must lie in (0, 1], got {}", self.safety));
        }
        if !(self.min_factor > 0.0 && self.min_factor < 1.0 && self.max_factor > 1.0) {
            return config_err("solver step factors need 0 < min_factor < 1 < max_factor");
        }
        Ok(())
    }
}

/// State sampled at a requested time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub y_final: Vec<f64>,
    /// Time reached; equals `t1` on success.
    pub t_final: f64,
    pub nfe: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub trajectory: Vec<Sample>,
}

impl SolveResult {
    /// The evaluation count implied by the step counts.
    pub fn expected_nfe(&self) -> usize {
        NFE_OVERHEAD + NFE_PER_STEP * (self.steps_accepted + self.steps_rejected)
    }
}

/// Adaptive Dormand-Prince 5(4) with first-same-as-last reuse.
///
/// A step is accepted when the RMS over components of
/// `e_i / (atol + rtol * max(|y_i|, |y_new_i|))` is at most one. The next
/// step is `h * clamp(safety * err^(-1/5), min_factor, max_factor)`, with
/// growth capped at 1 after a rejection. States at `sample_times` (inside
/// `(t0, t1]`) are hit exactly by shortening steps.
pub fn dopri5_solve<F>(
    mut f: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    sample_times: &[f64],
) -> Result<SolveResult>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    cfg.validate()?;
    if !(t1 > t0) {
        return config_err(format!("integration interval needs t1 > t0, got [{t0}, {t1}]"));
    }
    let mut stops: Vec<f64> = sample_times.to_vec();
    if stops.iter().any(|&s| !(s > t0 && s <= t1)) {
        return config_err(format!("sample times must lie in ({t0}, {t1}]"));
    }
    stops.sort_by(f64::total_cmp);
    stops.dedup();

    let dim = y0.len();
    let span = t1 - t0;
    let min_step = 1e-12 * span;
    let mut result = SolveResult {
        y_final: y0.to_vec(),
        t_final: t0,
        nfe: 0,
        steps_accepted: 0,
        steps_rejected: 0,
        trajectory: Vec::new(),
    };
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: [Vec<f64>; 7] = Default::default();
    k[0] = f(t, &y);
    result.nfe += 1;
    let mut h = cfg.initial_step.unwrap_or(0.1 * span);
    let mut next_stop = 0;
    let mut stage = vec![0.0; dim];

    while t < t1 {
        if result.steps_accepted + result.steps_rejected >= cfg.max_steps {
            return Err(stiff(
                format!("max_steps = {} exceeded at t = {t}", cfg.max_steps),
                result,
                t,
                &y,
            ));
        }
        if h < min_step {
            return Err(stiff(format!("step size underflow ({h:e}) at t = {t}"), result, t, &y));
        }
        let target = stops.get(next_stop).copied().unwrap_or(t1);
        let mut step = h;
        let mut lands = false;
        if t + step >= target - 1e-14 * span {
            step = target - t;
            lands = true;
        }

        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                stage[i] = y[i] + step * acc;
            }
            k[s] = f(t + C[s] * step, &stage);
            result.nfe += 1;
        }
        // Stage 7 was evaluated at the fifth-order solution.
        let y_new = stage.clone();
        let mut sq = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for j in 0..7 {
                e += (B5[j] - B4[j]) * k[j][i];
            }
            let scale = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            sq += (step * e / scale).powi(2);
        }
        let err = if dim == 0 { 0.0 } else { (sq / dim as f64).sqrt() };

        if err <= 1.0 {
            result.steps_accepted += 1;
            t = if lands { target } else { t + step };
            y = y_new;
            k.swap(0, 6);
            if lands && next_stop < stops.len() && t == stops[next_stop] {
                result.trajectory.push(Sample { t, y: y.clone() });
                next_stop += 1;
            }
            let factor = if err == 0.0 {
                cfg.max_factor
            } else {
                (cfg.safety * err.powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor)
            };
            // A shortened landing step says nothing about the natural step size.
            h = if lands { h.max(step * factor) } else { step * factor };
        } else {
            result.steps_rejected += 1;
            let factor = if err.is_finite() {
                (cfg.safety * err.powf(-0.2)).clamp(cfg.min_factor, 1.0)
            } else {
                cfg.min_factor
            };
            h = step * factor;
        }
    }
    result.y_final = y;
    result.t_final = t;
    Ok(result)
}

fn stiff(reason: String, mut partial: SolveResult, t: f64, y: &[f64]) -> Error {
    partial.t_final = t;
    partial.y_final = y.to_vec();
    Error::Stiffness {
        reason,
        partial: Box::new(partial),
    }
}

/// Classical fixed-step RK4 with every operation recorded on the tape, so
/// gradients flow through the unrolled steps to `y0` and to anything `f`
/// reads.
pub fn rk4_solve<F>(tape: &mut Tape, mut f: F, y0: Var, t0: f64, t1: f64, n_steps: usize) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var>,
{
    if n_steps == 0 {
        return config_err("rk4 needs at least one step");
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut y = y0;
    for i in 0..n_steps {
        let t = t0 + i as f64 * h;
        let k1 = f(tape, y, t)?;
        let y2 = tape.axpy(y, 0.5 * h, k1)?;
        let k2 = f(tape, y2, t + 0.5 * h)?;
        let y3 = tape.axpy(y, 0.5 * h, k2)?;
        let k3 = f(tape, y3, t + 0.5 * h)?;
        let y4 = tape.axpy(y, h, k3)?;
        let k4 = f(tape, y4, t + h)?;
        let s = tape.axpy(k1, 2.0, k2)?;
        let s = tape.axpy(s, 2.0, k3)?;
        let s = tape.add(s, k4)?;
        y = tape.axpy(y, h / 6.0, s)?;
    }
    Ok(y)
}

/// Vector field `h -> block(h, t)` over flattened states of a batch of
/// `batch` samples. Evaluation failures surface as NaN so the adaptive
/// solver rejects the step.
pub fn block_field(block: &Block, batch: usize) -> Result<impl FnMut(f64, &[f64]) -> Vec<f64> + '_> {
    let shape = field_shape(block, batch)?;
    Ok(move |t: f64, y: &[f64]| eval_field(block, shape, t, y))
}

/// The block with time frozen at `t_frozen`: an autonomous field.
pub fn frozen_block_field(
    block: &Block,
    batch: usize,
    t_frozen: f64,
) -> Result<impl FnMut(f64, &[f64]) -> Vec<f64> + '_> {
    let shape = field_shape(block, batch)?;
    Ok(move |_t: f64, y: &[f64]| eval_field(block, shape, t_frozen, y))
}

fn field_shape(block: &Block, batch: usize) -> Result<Shape> {
    let cfg = block.config();
    if !cfg.preserves_shape() {
        return config_err(format!(
            "block output {} differs from its input {}; it cannot serve as a vector field",
            cfg.output_shape(batch),
            cfg.input_shape(batch)
        ));
    }
    Ok(cfg.input_shape(batch))
}

fn eval_field(block: &Block, shape: Shape, t: f64, y: &[f64]) -> Vec<f64> {
    let eval = Tensor::from_vec(shape, y.to_vec()).and_then(|x| block.forward(&x, &[t]));
    match eval {
        Ok(v) if v.all_finite() => v.into_vec(),
        _ => vec![f64::NAN; y.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    #[test]
    fn tableau_is_consistent() {
        for s in 0..7 {
            let row: f64 = A[s].iter().sum();
            assert!((row - C[s]).abs() < 1e-14, "row {s}");
        }
        assert!((B5.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((B4.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for j in 0..6 {
            assert_eq!(A[6][j], B5[j]);
        }
    }

    #[test]
    fn exponential() {
        let cfg = SolverConfig::with_tolerances(1e-8, 1e-8);
        let r = dopri5_solve(|_, y| y.to_vec(), &[1.0], 0.0, 1.0, &cfg, &[]).unwrap();
        assert!((r.y_final[0] - E).abs() < 1e-7, "{}", r.y_final[0]);
        assert_eq!(r.t_final, 1.0);
        assert_eq!(r.nfe, r.expected_nfe());
        assert!(r.nfe >= 6 * r.steps_accepted);
    }

    #[test]
    fn zero_field() {
        let r = dopri5_solve(
            |_, y| vec![0.0; y.len()],
            &[1.5, -2.0],
            0.0,
            1.0,
            &SolverConfig::default(),
            &[],
        )
        .unwrap();
        assert_eq!(r.y_final, vec![1.5, -2.0]);
        assert_eq!(r.steps_rejected, 0);
        // 0.1 then 1.0 capped by the interval end.
        assert_eq!(r.steps_accepted, 2);
    }

    #[test]
    fn oscillator_period() {
        let cfg = SolverConfig::with_tolerances(1e-9, 1e-9);
        let r = dopri5_solve(|_, y| vec![y[1], -y[0]], &[1.0, 0.0], 0.0, 2.0 * PI, &cfg, &[PI]).unwrap();
        assert!((r.y_final[0] - 1.0).abs() < 1e-6);
        assert!(r.y_final[1].abs() < 1e-6);
        assert_eq!(r.trajectory.len(), 1);
        assert_eq!(r.trajectory[0].t, PI);
        assert!((r.trajectory[0].y[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        let f = |_: f64, y: &[f64]| y.to_vec();
        let bad = SolverConfig::with_tolerances(0.0, 1e-3);
        assert!(matches!(
            dopri5_solve(f, &[1.0], 0.0, 1.0, &bad, &[]),
            Err(Error::Config(_))
        ));
        assert!(dopri5_solve(f, &[1.0], 1.0, 1.0, &SolverConfig::default(), &[]).is_err());
        assert!(dopri5_solve(f, &[1.0], 0.0, 1.0, &SolverConfig::default(), &[2.0]).is_err());
    }

    #[test]
    fn blow_up_reports_stiffness_with_partial_result() {
        // A field that stops producing finite values past t = 0.5.
        let cfg = SolverConfig::with_tolerances(1e-6, 1e-6);
        let f = |t: f64, y: &[f64]| if t > 0.5 { vec![f64::NAN] } else { y.to_vec() };
        match dopri5_solve(f, &[1.0], 0.0, 1.0, &cfg, &[]) {
            Err(Error::Stiffness { partial, .. }) => {
                assert!(partial.t_final <= 0.5 && partial.t_final > 0.49, "{partial:?}");
                assert_eq!(partial.nfe, partial.expected_nfe());
            }
            other => panic!("expected stiffness failure, got {other:?}"),
        }
        let mut few = SolverConfig::with_tolerances(1e-10, 1e-10);
        few.max_steps = 3;
        assert!(matches!(
            dopri5_solve(|_, y| y.to_vec(), &[1.0], 0.0, 1.0, &few, &[]),
            Err(Error::Stiffness { .. })
        ));
    }

    fn rk4_exp(n: usize) -> f64 {
        let mut tape = Tape::new();
        let y0 = tape.leaf(Tensor::scalar(1.0));
        let y = rk4_solve(&mut tape, |_, y, _| Ok(y), y0, 0.0, 1.0, n).unwrap();
        tape.value(y).item().unwrap()
    }

    #[test]
    fn rk4_exponential_and_order() {
        assert!((rk4_exp(100) - E).abs() < 1e-8);
        let e1 = (rk4_exp(10) - E).abs();
        let e2 = (rk4_exp(20) - E).abs();
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk4_gradient_wrt_initial_state() {
        let a = 0.7;
        let mut tape = Tape::new();
        let y0 = tape.leaf(Tensor::scalar(1.3));
        let y = rk4_solve(&mut tape, |tp, y, _| Ok(tp.scale(y, a)), y0, 0.0, 1.0, 50).unwrap();
        let g = tape.backward(y).unwrap().wrt(y0).item().unwrap();
        assert!((g - a.exp()).abs() < 1e-6);
    }
}
