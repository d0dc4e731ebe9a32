use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use tembed_core::blocks::{BiasPolicy, Block};
use tembed_core::diagnostics::{self, DiagnosticsReport};
use tembed_core::norm::NormKind;
use tembed_core::ode::{dopri5_solve, SolveResult, SolverConfig};
use tembed_core::rng::{derive_seed, normal_tensor, seeded};
use tembed_core::tasks::{self, NfeReport, Objective, TaskKind, TrainReport};
use tembed_core::{ActivationKind, Error};

use crate::config::RunConfig;
use crate::output::{ensure_dir, fmt_f64, fmt_opt, write_json, Csv};
use crate::{CliError, CliResult, EXIT_NUMERIC, EXIT_STIFFNESS};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const DIAGNOSTICS_JSON: &str = "diagnostics.json";
pub const PAIRS_CSV: &str = "pairs.csv";
pub const SPATIAL_CSV: &str = "spatial_map.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_RUNS_CSV: &str = "sweep_runs.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SOLVE_JSON: &str = "solve.json";

pub const METRICS_HEADER: [&str; 5] = ["step", "loss", "loss_over_floor", "embed_grad_norm", "time_elapsed_s"];
pub const SWEEP_HEADER: [&str; 4] = ["value", "mean_metric", "std_metric", "mean_nfe"];

/// Certify one block and write the report, the pairwise table and the
/// spatial sensitivity map.
pub fn diagnose(cfg: &RunConfig, out: &Path) -> CliResult<DiagnosticsReport> {
    ensure_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let block = Block::from_config(&cfg.block)?;
    let report = diagnostics::diagnose(&block, &cfg.diagnostics)?;
    let scalars = [report.sensitivity, report.dt_grad_norm, report.embed_grad_norm];
    if scalars.iter().any(|v| !v.is_finite()) {
        return Err(CliError::new(
            EXIT_NUMERIC,
            "diagnostics produced non-finite statistics",
        ));
    }
    write_json(&out.join(DIAGNOSTICS_JSON), &report)?;

    let mut pairs = Csv::create(&out.join(PAIRS_CSV), &["probe", "i", "j", "t_i", "t_j", "linf"])?;
    for p in &report.pairs {
        pairs.row([
            p.probe.to_string(),
            p.i.to_string(),
            p.j.to_string(),
            fmt_f64(p.t_i),
            fmt_f64(p.t_j),
            fmt_f64(p.linf),
        ])?;
    }
    pairs.finish()?;

    let mut map = Csv::create(&out.join(SPATIAL_CSV), &["row", "col", "sensitivity"])?;
    for r in 0..report.map_height {
        for c in 0..report.map_width {
            map.row([
                r.to_string(),
                c.to_string(),
                fmt_f64(report.spatial_map[r * report.map_width + c]),
            ])?;
        }
    }
    map.finish()?;
    Ok(report)
}

/// The summary written next to `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: TaskKind,
    pub objective: Objective,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub floor: Option<f64>,
    pub final_loss_over_floor: Option<f64>,
    pub final_train_loss: f64,
    pub initial_embed_grad_norm: f64,
    pub final_embed_grad_norm: f64,
    pub group_grad_norms: BTreeMap<String, f64>,
    pub dopri5: Option<NfeReport>,
    pub wall_clock_s: Option<f64>,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        let first = r.records.first().map_or(f64::NAN, |m| m.embed_grad_norm);
        let last = r.records.last().map_or(f64::NAN, |m| m.embed_grad_norm);
        Self {
            task: r.task,
            objective: r.objective,
            steps: r.steps,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            floor: r.floor,
            final_loss_over_floor: r.final_loss_over_floor,
            final_train_loss: r.final_train_loss,
            initial_embed_grad_norm: first,
            final_embed_grad_norm: last,
            group_grad_norms: r.group_grad_norms.clone(),
            dopri5: r.dopri5.clone(),
            wall_clock_s: r.wall_clock_s,
        }
    }
}

/// Train the configured block on the configured task.
pub fn train(cfg: &RunConfig, out: &Path) -> CliResult<TrainReport> {
    let task = cfg
        .task
        .as_ref()
        .ok_or_else(|| CliError::config("task: required by train"))?;
    ensure_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let mut block = Block::from_config(&cfg.block)?;
    let report = tasks::train_task(&mut block, task, &cfg.train, &cfg.solver)?;

    let mut csv = Csv::create(&out.join(METRICS_CSV), &METRICS_HEADER)?;
    for m in &report.records {
        csv.row([
            m.step.to_string(),
            fmt_f64(m.loss),
            fmt_opt(m.loss_over_floor),
            fmt_f64(m.embed_grad_norm),
            fmt_opt(m.time_elapsed_s),
        ])?;
    }
    csv.finish()?;
    write_json(&out.join(SUMMARY_JSON), &TrainSummary::from(&report))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    Groups,
    Activation,
    WeightScale,
    BiasPolicy,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Groups => "groups",
            SweepParam::Activation => "activation",
            SweepParam::WeightScale => "weight_scale",
            SweepParam::BiasPolicy => "bias_policy",
        }
    }

    /// Write `value` into the config.
    pub fn apply(self, value: &str, cfg: &mut RunConfig) -> CliResult<()> {
        let bad = |what: &str| CliError::config(format!("--values: {value:?} is not {what}"));
        match self {
            SweepParam::Groups => {
                let groups = value.parse().map_err(|_| bad("a group count"))?;
                cfg.block.norm = NormKind::Group { groups };
            }
            SweepParam::Activation => {
                cfg.block.activation = ActivationKind::parse(value).ok_or_else(|| {
                    let names: Vec<_> = ActivationKind::ALL.iter().map(|a| a.name()).collect();
                    bad(&format!("one of {}", names.join(", ")))
                })?;
            }
            SweepParam::WeightScale => {
                let s: f64 = value.parse().map_err(|_| bad("a number"))?;
                if !(s > 0.0 && s.is_finite()) {
                    return Err(bad("a positive weight scale"));
                }
                cfg.block.weight_scale = Some(s);
            }
            SweepParam::BiasPolicy => {
                cfg.block.bias_policy = parse_bias_policy(value)
                    .ok_or_else(|| bad("one of zero_both, zero_conv, zero_embed, default_both"))?;
            }
        }
        Ok(())
    }
}

/// `zero_conv` is zero convolution bias with default embedding bias;
/// `zero_embed` the reverse.
pub fn parse_bias_policy(s: &str) -> Option<BiasPolicy> {
    match s {
        "zero_both" => Some(BiasPolicy::ZERO_BOTH),
        "zero_conv" => Some(BiasPolicy::GUIDELINE),
        "zero_embed" => Some(BiasPolicy::DEFAULT_CONV_ZERO_EMBED),
        "default_both" => Some(BiasPolicy::DEFAULT_BOTH),
        _ => None,
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub param: SweepParam,
    pub values: Vec<String>,
    /// Seeds per value, offset from the config seed.
    pub seeds: usize,
    /// Worker threads.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub mean_metric: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_metric: f64,
    pub mean_nfe: Option<f64>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<f64>,
    pub nfe: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param: SweepParam,
    /// What `mean_metric` averages.
    pub metric: String,
    pub rows: Vec<SweepRow>,
}

struct SweepPoint {
    value: usize,
    seed: u64,
    cfg: RunConfig,
    dir: PathBuf,
}

fn metric_name(cfg: &RunConfig) -> &'static str {
    match &cfg.task {
        Some(t) if t.objective() == Objective::FieldRegression => "loss_over_floor",
        Some(_) => "final_loss",
        None => "embed_grad_norm",
    }
}

/// Train (or, without a task, probe) once per value and seed.
fn run_point(p: &SweepPoint) -> CliResult<(f64, Option<usize>)> {
    if p.cfg.task.is_some() {
        let r = train(&p.cfg, &p.dir)?;
        let metric = r.final_loss_over_floor.unwrap_or(r.final_loss);
        return Ok((metric, r.dopri5.map(|d| d.nfe)));
    }
    let report = diagnose(&p.cfg, &p.dir)?;
    let metric = report.probes.iter().map(|s| s.embed_grad_norm).sum::<f64>() / report.probes.len() as f64;
    let block = Block::from_config(&p.cfg.block)?;
    let mut rng = seeded(p.cfg.diagnostics.seed);
    let states = normal_tensor(&mut rng, p.cfg.block.input_shape(p.cfg.diagnostics.probe_batch));
    let nfe = tasks::solve_nfe(&block, &states, 1.0, &p.cfg.solver)?;
    Ok((metric, nfe.map(|d| d.nfe)))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every (value, seed) point on a pool of `jobs` workers, then merge
/// the per-run outputs into `sweep.csv`, `sweep_runs.csv` and `sweep.json`.
pub fn sweep(cfg: &RunConfig, opts: &SweepOptions, out: &Path) -> CliResult<SweepSummary> {
    if opts.values.is_empty() {
        return Err(CliError::config("--values: at least one value is required"));
    }
    if opts.seeds == 0 || opts.jobs == 0 {
        return Err(CliError::config("--seeds and --jobs must be positive"));
    }
    ensure_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let base = cfg.seed.unwrap_or(cfg.block.seed);
    let mut points = Vec::new();
    for (vi, value) in opts.values.iter().enumerate() {
        let mut point_cfg = cfg.clone();
        opts.param.apply(value, &mut point_cfg)?;
        for k in 0..opts.seeds {
            let seed = base.wrapping_add(k as u64);
            let run = point_cfg.clone().resolve(Some(seed))?;
            let dir = out
                .join("runs")
                .join(format!("{}_{}", opts.param.name(), value))
                .join(format!("seed_{seed}"));
            points.push(SweepPoint {
                value: vi,
                seed,
                cfg: run,
                dir,
            });
        }
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..opts.jobs.min(points.len()) {
            let tx = tx.clone();
            let (next, points) = (&next, &points);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = points.get(i) else { break };
                if tx.send((i, run_point(p))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut results: Vec<Option<CliResult<(f64, Option<usize>)>>> = (0..points.len()).map(|_| None).collect();
    for (i, r) in rx {
        results[i] = Some(r);
    }

    let mut rows: Vec<SweepRow> = opts
        .values
        .iter()
        .map(|v| SweepRow {
            value: v.clone(),
            mean_metric: 0.0,
            std_metric: 0.0,
            mean_nfe: None,
            seeds: Vec::new(),
            metrics: Vec::new(),
            nfe: Vec::new(),
        })
        .collect();
    for (p, r) in points.iter().zip(results) {
        let (metric, nfe) = r.expect("every point reports")?;
        let row = &mut rows[p.value];
        row.seeds.push(p.seed);
        row.metrics.push(metric);
        row.nfe.push(nfe);
    }
    for row in &mut rows {
        (row.mean_metric, row.std_metric) = mean_std(&row.metrics);
        let nfes: Option<Vec<f64>> = row.nfe.iter().map(|n| n.map(|n| n as f64)).collect();
        row.mean_nfe = nfes.map(|n| mean_std(&n).0);
    }

    let mut agg = Csv::create(&out.join(SWEEP_CSV), &SWEEP_HEADER)?;
    let mut runs = Csv::create(&out.join(SWEEP_RUNS_CSV), &["value", "seed", "metric", "nfe"])?;
    for row in &rows {
        agg.row([
            row.value.clone(),
            fmt_f64(row.mean_metric),
            fmt_f64(row.std_metric),
            fmt_opt(row.mean_nfe),
        ])?;
        for ((seed, m), n) in row.seeds.iter().zip(&row.metrics).zip(&row.nfe) {
            runs.row([
                row.value.clone(),
                seed.to_string(),
                fmt_f64(*m),
                n.map(|n| n.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    agg.finish()?;
    runs.finish()?;
    let summary = SweepSummary {
        param: opts.param,
        metric: metric_name(cfg).to_string(),
        rows,
    };
    write_json(&out.join(SWEEP_JSON), &summary)?;
    Ok(summary)
}

/// Built-in initial value problems, or a block used as a vector field.
#[derive(Clone, Debug, PartialEq)]
pub enum SolveCase {
    /// `y' = y`, `y(0) = 1` on `[0, 1]`.
    Exp,
    /// `x'' = -x`, `(x, x') = (1, 0)` over one period.
    Oscillator,
    /// The block of a run config from a standard-normal state on `[0, 1]`.
    Block(PathBuf),
}

impl FromStr for SolveCase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exp" => Ok(SolveCase::Exp),
            "oscillator" => Ok(SolveCase::Oscillator),
            _ => match s.strip_prefix("block:") {
                Some(path) if !path.is_empty() => Ok(SolveCase::Block(PathBuf::from(path))),
                _ => Err(format!(
                    "unknown testcase {s:?}; expected exp, oscillator or block:<config>"
                )),
            },
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolveOptions {
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub max_steps: Option<usize>,
    pub seed_override: Option<u64>,
}

/// Integrate the test case and write `solve.json`. A stiffness failure
/// still writes the partial result before returning exit code 5.
pub fn solve(case: &SolveCase, opts: &SolveOptions, out: &Path) -> CliResult<SolveResult> {
    let mut solver = SolverConfig::default();
    let block_cfg = match case {
        SolveCase::Block(path) => {
            let cfg = RunConfig::load(path)?.resolve(opts.seed_override)?;
            solver = cfg.solver.clone();
            Some(cfg)
        }
        _ => None,
    };
    if let Some(r) = opts.rtol {
        solver.rtol = r;
    }
    if let Some(a) = opts.atol {
        solver.atol = a;
    }
    if let Some(m) = opts.max_steps {
        solver.max_steps = m;
    }
    solver.validate()?;
    ensure_dir(out)?;

    let result = match (case, &block_cfg) {
        (SolveCase::Exp, _) => dopri5_solve(|_, y| vec![y[0]], &[1.0], 0.0, 1.0, &solver, &[]),
        (SolveCase::Oscillator, _) => dopri5_solve(
            |_, y| vec![y[1], -y[0]],
            &[1.0, 0.0],
            0.0,
            2.0 * std::f64::consts::PI,
            &solver,
            &[],
        ),
        (SolveCase::Block(_), Some(cfg)) => {
            write_json(&out.join(RESOLVED_CONFIG), cfg)?;
            let block = Block::from_config(&cfg.block)?;
            let mut rng = seeded(derive_seed(cfg.block.seed, 0x736f_6c76_65));
            let y0 = normal_tensor(&mut rng, cfg.block.input_shape(1));
            let field = tembed_core::ode::block_field(&block, 1)?;
            dopri5_solve(field, y0.data(), 0.0, 1.0, &solver, &[])
        }
        (SolveCase::Block(_), None) => unreachable!("block configs are loaded above"),
    };
    match result {
        Ok(r) => {
            write_json(&out.join(SOLVE_JSON), &r)?;
            Ok(r)
        }
        Err(Error::Stiffness { reason, partial }) => {
            write_json(&out.join(SOLVE_JSON), &*partial)?;
            Err(CliError::new(
                EXIT_STIFFNESS,
                format!("solver failed: {reason}; partial result written to {SOLVE_JSON}"),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

/// `y_final=<...> nfe=<n> accepted=<a> rejected=<r>`
pub fn solve_line(r: &SolveResult) -> String {
    let ys: Vec<String> = r.y_final.iter().map(|v| format!("{v:.12}")).collect();
    format!(
        "y_final={} nfe={} accepted={} rejected={}",
        ys.join(","),
        r.nfe,
        r.steps_accepted,
        r.steps_rejected
    )
}

/// `verdict=<...> sensitivity=<val> embed_grad=<val>`
pub fn verdict_line(r: &DiagnosticsReport) -> String {
    format!(
        "verdict={} sensitivity={:.6e} embed_grad={:.6e}",
        r.verdict, r.sensitivity, r.embed_grad_norm
    )
}

pub fn train_line(r: &TrainReport) -> String {
    format!(
        "final_loss={:.6e} loss_over_floor={} nfe={}",
        r.final_loss,
        r.final_loss_over_floor
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        r.dopri5
            .as_ref()
            .map(|d| d.nfe.to_string())
            .unwrap_or_else(|| "n/a".into())
    )
}

pub fn sweep_line(row: &SweepRow) -> String {
    format!(
        "value={} mean_metric={:.6e} std_metric={:.6e} mean_nfe={}",
        row.value,
        row.mean_metric,
        row.std_metric,
        row.mean_nfe.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into())
    )
}
