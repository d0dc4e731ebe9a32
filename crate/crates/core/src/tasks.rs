//! Small regression tasks with an explicitly time-varying teacher, and the
//! training loops that fit blocks to them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Block;
use crate::error::{config_err, Error, Result};
use crate::ode::{block_field, dopri5_solve, rk4_solve, SolverConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{derive_seed, normal_tensor, seeded, standard_normal, SeededRng};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `g = sin(2 pi t) A h`.
    SineGate,
    /// `g = kappa cos(pi t) h`.
    PulseReverse,
    /// `g = A h`, no time dependence.
    StaticLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Regress the block output on `g(h, t)` at random `(h, t)`.
    #[default]
    FieldRegression,
    /// Integrate the block with RK4 and match the teacher flow at snapshots.
    Trajectory,
}

fn default_kappa() -> f64 {
    2.0
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_teacher_seed() -> u64 {
    1234
}
fn default_snapshots() -> Vec<f64> {
    vec![0.5, 1.0]
}
fn default_eval_samples() -> usize {
    32
}
fn default_nodes() -> usize {
    16
}
fn default_rk4_steps() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: TaskKind,
    /// Defaults to trajectory for `pulse_reverse`, field regression otherwise.
    #[serde(default)]
    pub objective: Option<Objective>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Multiplies the unit-spectral-norm teacher matrix.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Seeds the teacher matrix and the fixed evaluation set.
    #[serde(default = "default_teacher_seed")]
    pub teacher_seed: u64,
    /// Trajectory snapshot times in `(0, 1]`.
    #[serde(default = "default_snapshots")]
    pub snapshots: Vec<f64>,
    /// Number of evaluation states.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Midpoint nodes in `t` for the evaluation grid and the floor.
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    /// RK4 steps per unit time in trajectory training.
    #[serde(default = "default_rk4_steps")]
    pub rk4_steps_per_unit: usize,
}

impl TaskConfig {
    pub fn new(name: TaskKind) -> Self {
        Self {
            name,
            objective: None,
            kappa: default_kappa(),
            amplitude: default_amplitude(),
            teacher_seed: default_teacher_seed(),
            snapshots: default_snapshots(),
            eval_samples: default_eval_samples(),
            quadrature_nodes: default_nodes(),
            rk4_steps_per_unit: default_rk4_steps(),
        }
    }

    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(match self.name {
            TaskKind::PulseReverse => Objective::Trajectory,
            _ => Objective::FieldRegression,
        })
    }

    /// Copy with every defaulted choice made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            objective: Some(self.objective()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kappa.is_finite() || !self.amplitude.is_finite() {
            return config_err("task.kappa and task.amplitude must be finite");
        }
        if self.eval_samples == 0 || self.quadrature_nodes == 0 || self.rk4_steps_per_unit == 0 {
            return config_err("task.eval_samples, task.quadrature_nodes and task.rk4_steps_per_unit must be positive");
        }
        if self.objective() == Objective::Trajectory {
            if self.name != TaskKind::PulseReverse {
                return config_err("task.name: trajectory training needs the closed-form pulse_reverse flow");
            }
            if self.snapshots.is_empty() {
                return config_err("task.snapshots must not be empty");
            }
            let mut prev = 0.0;
            for &s in &self.snapshots {
                if !(s > prev && s <= 1.0) {
                    return config_err(format!(
                        "task.snapshots must increase within (0, 1], got {:?}",
                        self.snapshots
                    ));
                }
                prev = s;
            }
        }
        Ok(())
    }
}

/// Random Gaussian matrix rescaled to unit spectral norm.
pub fn teacher_matrix(channels: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let c = channels;
    let mut a: Vec<f64> = (0..c * c).map(|_| standard_normal(&mut rng)).collect();
    // Power iteration on A^T A.
    let mut v = vec![1.0; c];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = (0..c).map(|i| (0..c).map(|j| a[i * c + j] * v[j]).sum()).collect();
        let atav: Vec<f64> = (0..c).map(|j| (0..c).map(|i| a[i * c + j] * av[i]).sum()).collect();
        let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma = av.iter().map(|x| x * x).sum::<f64>().sqrt() / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = atav.into_iter().map(|x| x / norm).collect();
    }
    a.iter_mut().for_each(|x| *x /= sigma);
    a
}

/// An analytic vector field `g(h, t)` acting on channels at every position.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherField {
    SineGate { a: Vec<f64>, channels: usize },
    PulseReverse { kappa: f64 },
    StaticLinear { a: Vec<f64>, channels: usize },
}

impl TeacherField {
    pub fn from_config(cfg: &TaskConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let matrix = || {
            let mut a = teacher_matrix(channels, cfg.teacher_seed);
            a.iter_mut().for_each(|x| *x *= cfg.amplitude);
            a
        };
        Ok(match cfg.name {
            TaskKind::SineGate => TeacherField::SineGate { a: matrix(), channels },
            TaskKind::PulseReverse => TeacherField::PulseReverse { kappa: cfg.kappa },
            TaskKind::StaticLinear => TeacherField::StaticLinear { a: matrix(), channels },
        })
    }

    fn check(&self, h: &Tensor) -> Result<()> {
        match self {
            TeacherField::SineGate { channels, .. } | TeacherField::StaticLinear { channels, .. }
                if h.shape().c != *channels =>
            {
                config_err(format!(
                    "teacher acts on {channels} channels, state has {}",
                    h.shape().c
                ))
            }
            _ => Ok(()),
        }
    }

    /// `g(h_n, t_n)` for each sample; `times` has length 1 or N.
    pub fn eval(&self, h: &Tensor, times: &[f64]) -> Result<Tensor> {
        self.check(h)?;
        let s = h.shape();
        let times = crate::embed::batch_times(times, s.n)?;
        let gate: Vec<f64> = match self {
            TeacherField::SineGate { .. } => times.iter().map(|t| (2.0 * PI * t).sin()).collect(),
            TeacherField::PulseReverse { kappa } => times.iter().map(|t| kappa * (PI * t).cos()).collect(),
            TeacherField::StaticLinear { .. } => vec![1.0; s.n],
        };
        let mut out = Tensor::zeros(s);
        let plane = s.h * s.w;
        let per = s.c * plane;
        for (n, &g) in gate.iter().enumerate() {
            let src = &h.data()[n * per..(n + 1) * per];
            let dst = &mut out.data_mut()[n * per..(n + 1) * per];
            match self {
                TeacherField::SineGate { a, .. } | TeacherField::StaticLinear { a, .. } => {
                    for o in 0..s.c {
                        let row = &mut dst[o * plane..(o + 1) * plane];
                        for j in 0..s.c {
                            let w = g * a[o * s.c + j];
                            for (d, x) in row.iter_mut().zip(&src[j * plane..(j + 1) * plane]) {
                                *d += w * x;
                            }
                        }
                    }
                }
                TeacherField::PulseReverse { .. } => {
                    for (d, x) in dst.iter_mut().zip(src) {
                        *d = g * x;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Closed-form flow `h(t)` from `h(0) = h0`, where one exists.
    pub fn flow(&self, h0: &Tensor, t: f64) -> Option<Tensor> {
        match self {
            TeacherField::PulseReverse { kappa } => Some(h0.scale((kappa / PI * (PI * t).sin()).exp())),
            _ => None,
        }
    }
}

/// Inputs, times and targets of a field-regression set.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDataset {
    pub h: Tensor,
    pub times: Vec<f64>,
    pub target: Tensor,
}

/// `n` triples with standard normal states and uniform times.
pub fn gen_field_dataset(teacher: &TeacherField, n: usize, state: Shape, rng: &mut SeededRng) -> Result<FieldDataset> {
    if n == 0 {
        return config_err("dataset size must be at least 1");
    }
    let h = normal_tensor(rng, Shape::new(n, state.c, state.h, state.w));
    let times: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let target = teacher.eval(&h, &times)?;
    Ok(FieldDataset { h, times, target })
}

/// Midpoint nodes `(j + 1/2) / m` on `[0, 1]`.
pub fn midpoint_nodes(m: usize) -> Vec<f64> {
    (0..m).map(|j| (j as f64 + 0.5) / m as f64).collect()
}

/// Every state of `h` paired with every quadrature node, sample-major.
pub fn quadrature_grid(teacher: &TeacherField, h: &Tensor, nodes: usize) -> Result<FieldDataset> {
    let s = h.shape();
    let m = nodes;
    let t = midpoint_nodes(m);
    let big = Shape::new(s.n * m, s.c, s.h, s.w);
    let reps = Tensor::from_fn(big, |r, c, y, x| h.at(r / m, c, y, x));
    let times: Vec<f64> = (0..s.n * m).map(|r| t[r % m]).collect();
    let target = teacher.eval(&reps, &times)?;
    Ok(FieldDataset { h: reps, times, target })
}

/// Smallest per-element MSE reachable by any map of `h` alone,
/// `E ||g(h, t) - E_t g(h, t)||^2`, by midpoint quadrature in `t` over the
/// states of `dataset`.
pub fn time_blind_floor(teacher: &TeacherField, dataset: &FieldDataset, nodes: usize) -> Result<f64> {
    let grid = quadrature_grid(teacher, &dataset.h, nodes)?;
    Ok(floor_of_grid(&grid, nodes))
}

fn floor_of_grid(grid: &FieldDataset, m: usize) -> f64 {
    let s = grid.target.shape();
    let per = s.c * s.h * s.w;
    let data = grid.target.data();
    let samples = s.n / m;
    let mut acc = 0.0;
    for n in 0..samples {
        for e in 0..per {
            let vals = (0..m).map(|j| data[(n * m + j) * per + e]);
            let mean = vals.clone().sum::<f64>() / m as f64;
            acc += vals.map(|v| (v - mean).powi(2)).sum::<f64>();
        }
    }
    // A time-independent target leaves only rounding residue.
    let energy = data.iter().map(|v| v * v).sum::<f64>();
    if acc <= 1e-20 * energy {
        return 0.0;
    }
    acc / (samples * m * per) as f64
}

fn default_lr() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    64
}
fn default_log_every() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Seeds the training batches.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Record wall-clock time in the metrics. Off by default so that
    /// outputs are reproducible byte for byte.
    #[serde(default)]
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::default(),
            lr: default_lr(),
            steps: default_steps(),
            batch: default_batch(),
            seed: 0,
            log_every: default_log_every(),
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return config_err(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 || self.log_every == 0 {
            return config_err("train.batch and train.log_every must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Loss on the fixed evaluation set.
    pub loss: f64,
    pub loss_over_floor: Option<f64>,
    /// Embedding gradient norm on the training batch of this step.
    pub embed_grad_norm: f64,
    pub time_elapsed_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfeReport {
    pub nfe: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: TaskKind,
    pub objective: Objective,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Time-blind floor of the evaluation set (field regression only).
    pub floor: Option<f64>,
    pub final_loss_over_floor: Option<f64>,
    pub final_train_loss: f64,
    /// Gradient norm per parameter group on the last training batch.
    pub group_grad_norms: BTreeMap<String, f64>,
    /// Adaptive solve of the trained block over the task interval.
    pub dopri5: Option<NfeReport>,
    pub wall_clock_s: Option<f64>,
    pub records: Vec<MetricRecord>,
}

/// How one batch loss is built on a tape.
trait Objectives {
    fn batch_loss(
        &self,
        tape: &mut Tape,
        block: &Block,
        vars: &[Var],
        rng: &mut SeededRng,
        batch: usize,
    ) -> Result<Var>;
    fn eval_loss(&self, block: &Block) -> Result<f64>;
    fn floor(&self) -> Option<f64>;
    fn eval_states(&self) -> &Tensor;
    fn interval_end(&self) -> f64;
}

struct FieldObjective<'a> {
    teacher: &'a TeacherField,
    state: Shape,
    eval: FieldDataset,
    eval_h: Tensor,
    floor: f64,
}

impl Objectives for FieldObjective<'_> {
    fn batch_loss(
        &self,
        tape: &mut Tape,
        block: &Block,
        vars: &[Var],
        rng: &mut SeededRng,
        batch: usize,
    ) -> Result<Var> {
        let data = gen_field_dataset(self.teacher, batch, self.state, rng)?;
        let x = tape.constant(data.h);
        let y = block.forward_on(tape, vars, x, &data.times)?;
        let target = tape.constant(data.target);
        tape.mse(y, target)
    }

    fn eval_loss(&self, block: &Block) -> Result<f64> {
        let y = block.forward(&self.eval.h, &self.eval.times)?;
        let diff = y.sub(&self.eval.target)?;
        Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
    }

    fn floor(&self) -> Option<f64> {
        Some(self.floor)
    }

    fn eval_states(&self) -> &Tensor {
        &self.eval_h
    }

    fn interval_end(&self) -> f64 {
        1.0
    }
}

struct TrajectoryObjective<'a> {
    teacher: &'a TeacherField,
    state: Shape,
    snapshots: Vec<f64>,
    steps_per_unit: usize,
    eval_h: Tensor,
}

impl TrajectoryObjective<'_> {
    fn loss_on(&self, tape: &mut Tape, block: &Block, vars: &[Var], h0: &Tensor) -> Result<Var> {
        let mut y = tape.constant(h0.clone());
        let mut t_prev = 0.0;
        let mut total: Option<Var> = None;
        for &s in &self.snapshots {
            let n = ((s - t_prev) * self.steps_per_unit as f64).ceil().max(1.0) as usize;
            y = rk4_solve(tape, |tp, y, t| block.forward_on(tp, vars, y, &[t]), y, t_prev, s, n)?;
            let target = self.teacher.flow(h0, s).expect("validated: closed-form flow");
            let target = tape.constant(target);
            let l = tape.mse(y, target)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
            t_prev = s;
        }
        Ok(total.expect("at least one snapshot"))
    }
}

impl Objectives for TrajectoryObjective<'_> {
    fn batch_loss(
        &self,
        tape: &mut Tape,
        block: &Block,
        vars: &[Var],
        rng: &mut SeededRng,
        batch: usize,
    ) -> Result<Var> {
        let s = self.state;
        let h0 = normal_tensor(rng, Shape::new(batch, s.c, s.h, s.w));
        self.loss_on(tape, block, vars, &h0)
    }

    fn eval_loss(&self, block: &Block) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = block.bind_frozen(&mut tape);
        let l = self.loss_on(&mut tape, block, &vars, &self.eval_h)?;
        tape.value(l).item()
    }

    fn floor(&self) -> Option<f64> {
        None
    }

    fn eval_states(&self) -> &Tensor {
        &self.eval_h
    }

    fn interval_end(&self) -> f64 {
        *self.snapshots.last().expect("validated")
    }
}

fn state_shape(block: &Block) -> Shape {
    let c = block.config();
    Shape::new(1, c.channels, c.height, c.width)
}

fn eval_states(task: &TaskConfig, state: Shape) -> Tensor {
    let mut rng = seeded(derive_seed(task.teacher_seed, 1));
    normal_tensor(&mut rng, Shape::new(task.eval_samples, state.c, state.h, state.w))
}

/// Fit the block output to `g(h, t)`. Loss is per-element MSE; the fixed
/// evaluation set pairs `task.eval_samples` states with the midpoint
/// `t`-grid, so any time-blind block scores at least the reported floor.
pub fn train_field_regression(
    block: &mut Block,
    teacher: &TeacherField,
    task: &TaskConfig,
    train: &TrainConfig,
    solver: &SolverConfig,
) -> Result<TrainReport> {
    task.validate()?;
    let state = state_shape(block);
    if block.config().output_shape(1) != state {
        return config_err("field regression needs a block whose output shape equals its input shape");
    }
    let eval_h = eval_states(task, state);
    let eval = quadrature_grid(teacher, &eval_h, task.quadrature_nodes)?;
    let floor = floor_of_grid(&eval, task.quadrature_nodes);
    let objective = FieldObjective {
        teacher,
        state,
        eval,
        eval_h,
        floor,
    };
    run_training(block, task, train, solver, &objective)
}

/// Fit the RK4 flow of the block to the teacher flow at the snapshot times
/// (sum over snapshots of per-element MSE), backpropagating through the
/// unrolled steps.
pub fn train_trajectory(
    block: &mut Block,
    teacher: &TeacherField,
    task: &TaskConfig,
    train: &TrainConfig,
    solver: &SolverConfig,
) -> Result<TrainReport> {
    task.validate()?;
    if task.objective() != Objective::Trajectory || teacher.flow(&Tensor::scalar(0.0), 0.0).is_none() {
        return config_err("task.objective: trajectory training needs a teacher with a closed-form flow");
    }
    let state = state_shape(block);
    if !block.config().preserves_shape() {
        return config_err("trajectory training needs a shape-preserving block");
    }
    let objective = TrajectoryObjective {
        teacher,
        state,
        snapshots: task.snapshots.clone(),
        steps_per_unit: task.rk4_steps_per_unit,
        eval_h: eval_states(task, state),
    };
    run_training(block, task, train, solver, &objective)
}

/// Dispatch on `task.objective`.
pub fn train_task(
    block: &mut Block,
    task: &TaskConfig,
    train: &TrainConfig,
    solver: &SolverConfig,
) -> Result<TrainReport> {
    let teacher = TeacherField::from_config(task, block.config().channels)?;
    match task.objective() {
        Objective::FieldRegression => train_field_regression(block, &teacher, task, train, solver),
        Objective::Trajectory => train_trajectory(block, &teacher, task, train, solver),
    }
}

fn run_training(
    block: &mut Block,
    task: &TaskConfig,
    train: &TrainConfig,
    solver: &SolverConfig,
    objective: &dyn Objectives,
) -> Result<TrainReport> {
    train.validate()?;
    solver.validate()?;
    let start = train.wall_clock.then(Instant::now);
    let elapsed = || start.map(|s| s.elapsed().as_secs_f64());
    let mut rng = seeded(derive_seed(train.seed, 0x7472_6169_6e));
    let mut opt = Optimizer::new(train.optimizer, train.lr, block.params())?;
    let floor = objective.floor();
    let mut records = Vec::new();
    let mut last_grads = Vec::new();
    let mut last_train = f64::NAN;

    for step in 0..=train.steps {
        let mut tape = Tape::new();
        let vars = block.bind(&mut tape);
        let diverged = |e: Error| match e {
            Error::Numeric(_) => Error::Divergence { step, loss: f64::NAN },
            e => e,
        };
        let loss = objective
            .batch_loss(&mut tape, block, &vars, &mut rng, train.batch)
            .map_err(diverged)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { step, loss: value });
        }
        if step % train.log_every == 0 || step == train.steps {
            let eval = objective.eval_loss(block).map_err(diverged)?;
            if !eval.is_finite() {
                return Err(Error::Divergence { step, loss: eval });
            }
            records.push(MetricRecord {
                step,
                loss: eval,
                loss_over_floor: floor.filter(|f| *f > 0.0).map(|f| eval / f),
                embed_grad_norm: block.embedding_grad_norm_of(&grads),
                time_elapsed_s: elapsed(),
            });
        }
        last_train = value;
        if step < train.steps {
            opt.update(block.params_mut(), &grads);
        }
        last_grads = grads;
    }

    let mut group_grad_norms = BTreeMap::new();
    for (p, g) in block.params().iter().zip(&last_grads) {
        *group_grad_norms.entry(p.group.name().to_string()).or_insert(0.0) +=
            g.data().iter().map(|v| v * v).sum::<f64>();
    }
    group_grad_norms.values_mut().for_each(|v| *v = v.sqrt());

    let dopri5 = solve_nfe(block, objective.eval_states(), objective.interval_end(), solver)?;
    let first = records.first().expect("step 0 is logged");
    let last = records.last().expect("final step is logged");
    Ok(TrainReport {
        task: task.name,
        objective: task.objective(),
        steps: train.steps,
        initial_loss: first.loss,
        final_loss: last.loss,
        floor,
        final_loss_over_floor: last.loss_over_floor,
        final_train_loss: last_train,
        group_grad_norms,
        dopri5,
        wall_clock_s: elapsed(),
        records,
    })
}

/// Adaptive solve of the block from the evaluation states, when the block
/// can serve as a vector field.
pub fn solve_nfe(block: &Block, states: &Tensor, t_end: f64, solver: &SolverConfig) -> Result<Option<NfeReport>> {
    if !block.config().preserves_shape() {
        return Ok(None);
    }
    let field = block_field(block, states.shape().n)?;
    let r = dopri5_solve(field, states.data(), 0.0, t_end, solver, &[])?;
    Ok(Some(NfeReport {
        nfe: r.nfe,
        steps_accepted: r.steps_accepted,
        steps_rejected: r.steps_rejected,
    }))
}
