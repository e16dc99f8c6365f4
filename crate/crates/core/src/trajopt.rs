//! Open-loop trajectory optimization through the simulator.
//!
//! Plain gradient descent over backprop-through-time gradients: the
//! decision variables are either entries of the initial state or the full
//! per-step action sequence, the loss is any scalar functional of the
//! rolled-out trajectory, and the contact stiffness of the smoothed model
//! can follow a per-epoch curriculum. Divergent descents — the expected
//! failure mode of stiff penalty contact — stop early with a diagnostic
//! instead of crashing.

use thiserror::Error;

use crate::autodiff::{DVar, Tape};
use crate::config::{default_armature, ContactModel, SimConfig, TaskKind};
use crate::dynamics::{
    rollout, scenario_by_name, GeneralizedState, RolloutOptions, Scenario, ScenarioError,
    Trajectory,
};

/// Gradient-norm threshold past which [`gd_optimize`] declares the
/// descent divergent and stops.
pub const GRAD_NORM_LIMIT: f64 = 1e8;

#[derive(Debug, Error)]
pub enum TrajOptError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("decision point has {got} entries, the problem needs {need}")]
    DimensionMismatch { need: usize, got: usize },
    #[error("initial-state slot {slot:?} is out of range for a {dof}-DoF system")]
    BadSlot { slot: StateSlot, dof: usize },
    #[error("truncation window {window} exceeds the horizon of {horizon} steps")]
    BadTruncation { window: usize, horizon: usize },
    #[error("rollout failed at step {step}: {detail}")]
    Rollout { step: usize, detail: String },
    #[error("loss is not finite at the evaluation point (got {0})")]
    NonFiniteLoss(f64),
    #[error(
        "gradient has {bad_coords} non-finite entries (norm of the finite part {finite_norm:.3e})"
    )]
    NonFiniteGradient { finite_norm: f64, bad_coords: usize },
    #[error("kappa schedule needs 0 < start <= end, got {start} -> {end}")]
    BadSchedule { start: f64, end: f64 },
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
}

/// One coordinate of the initial state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateSlot {
    /// Position entry `q[i]`.
    Q(usize),
    /// Velocity entry `u[i]`.
    U(usize),
}

impl StateSlot {
    fn index(self) -> usize {
        match self {
            StateSlot::Q(i) | StateSlot::U(i) => i,
        }
    }
}

/// What the optimizer is allowed to change.
#[derive(Clone, Debug)]
pub enum Decision {
    /// Selected initial-state coordinates, in the order given. Actions
    /// replay as constants (zero for unactuated rollouts).
    InitialState(Vec<StateSlot>),
    /// The whole action sequence, row-major: step `s` owns entries
    /// `[s * action_dim, (s + 1) * action_dim)`.
    Actions,
}

/// Scalar loss over a completed trajectory. It receives whatever tape the
/// rollout ran on through the trajectory's variables, so anything built
/// from them backpropagates.
pub type LossFn = Box<dyn Fn(&Trajectory) -> DVar + Send + Sync>;

/// A trajectory-optimization problem: scenario, loss, decision structure,
/// horizon, and the point descent starts from.
pub struct OptimizationProblem {
    pub scenario: Scenario,
    pub cfg: SimConfig,
    pub decision: Decision,
    /// Rollout length in steps.
    pub horizon: usize,
    /// Backprop truncation window in steps; `None` backpropagates through
    /// the whole horizon. Gradients across window boundaries are zero, so
    /// with an initial-state decision any window shorter than the horizon
    /// zeroes the whole gradient.
    pub trunc_window: Option<usize>,
    pub loss: LossFn,
    /// Where descent starts; length must equal [`Self::decision_dim`].
    pub initial_point: Vec<f64>,
}

impl OptimizationProblem {
    pub fn new(
        scenario: Scenario,
        cfg: SimConfig,
        decision: Decision,
        horizon: usize,
        trunc_window: Option<usize>,
        initial_point: Vec<f64>,
        loss: LossFn,
    ) -> Result<Self, TrajOptError> {
        if let Some(window) = trunc_window {
            if window > horizon {
                return Err(TrajOptError::BadTruncation { window, horizon });
            }
        }
        if let Decision::InitialState(slots) = &decision {
            let dof = scenario.system.dof();
            for &slot in slots {
                if slot.index() >= dof {
                    return Err(TrajOptError::BadSlot { slot, dof });
                }
            }
        }
        let prob = OptimizationProblem {
            scenario,
            cfg,
            decision,
            horizon,
            trunc_window,
            loss,
            initial_point,
        };
        let need = prob.decision_dim();
        if prob.initial_point.len() != need {
            return Err(TrajOptError::DimensionMismatch {
                need,
                got: prob.initial_point.len(),
            });
        }
        Ok(prob)
    }

    /// Number of decision variables.
    pub fn decision_dim(&self) -> usize {
        match &self.decision {
            Decision::InitialState(slots) => slots.len(),
            Decision::Actions => self.horizon * self.scenario.system.action_dim(),
        }
    }
}

impl std::fmt::Debug for OptimizationProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OptimizationProblem")
            .field("scenario", &self.scenario.name)
            .field("decision", &self.decision)
            .field("horizon", &self.horizon)
            .field("trunc_window", &self.trunc_window)
            .finish_non_exhaustive()
    }
}

/// Roll the problem out at `point`. With a tape, the decision variables
/// are recorded on it and returned as gradient handles; without one,
/// everything replays as constants.
fn run_at(
    prob: &OptimizationProblem,
    cfg: &SimConfig,
    point: &[f64],
    tape: Option<Tape>,
) -> Result<(Trajectory, Vec<DVar>), TrajOptError> {
    let need = prob.decision_dim();
    if point.len() != need {
        return Err(TrajOptError::DimensionMismatch {
            need,
            got: point.len(),
        });
    }

    let scenario = &prob.scenario;
    let mut q: Vec<DVar> = scenario
        .initial_q
        .iter()
        .map(|&v| DVar::constant(v))
        .collect();
    let mut u: Vec<DVar> = scenario
        .initial_u
        .iter()
        .map(|&v| DVar::constant(v))
        .collect();

    let mut handles = Vec::new();
    let mut actions: Vec<Vec<f64>> = Vec::new();
    match &prob.decision {
        Decision::InitialState(slots) => {
            for (&slot, &val) in slots.iter().zip(point) {
                let var = match &tape {
                    Some(t) => t.var(val),
                    None => DVar::constant(val),
                };
                match slot {
                    StateSlot::Q(i) => q[i] = var.clone(),
                    StateSlot::U(i) => u[i] = var.clone(),
                }
                handles.push(var);
            }
        }
        Decision::Actions => {
            let dim = scenario.system.action_dim();
            if dim > 0 {
                actions = point.chunks(dim).map(<[f64]>::to_vec).collect();
            }
        }
    }

    let opts = RolloutOptions {
        steps: prob.horizon,
        tape,
        trunc_window: prob.trunc_window,
    };
    let traj = rollout(
        scenario.system.as_ref(),
        GeneralizedState::new(q, u),
        &actions,
        cfg,
        &opts,
    );
    if let Some(failure) = &traj.failure {
        return Err(TrajOptError::Rollout {
            step: failure.step,
            detail: failure.error.to_string(),
        });
    }
    if matches!(prob.decision, Decision::Actions) {
        handles = traj.action_vars.iter().flatten().cloned().collect();
    }
    Ok((traj, handles))
}

/// Loss value and gradient at one decision point.
#[derive(Clone, Debug)]
pub struct BpttGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

impl BpttGradient {
    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Differentiate the problem's loss at `point` by one taped rollout and a
/// reverse sweep. Honors the problem's truncation window: gradients of
/// decisions recorded before the last window boundary come back zero.
pub fn bptt_gradient(
    prob: &OptimizationProblem,
    point: &[f64],
) -> Result<BpttGradient, TrajOptError> {
    bptt_gradient_with(prob, &prob.cfg, point)
}

fn bptt_gradient_with(
    prob: &OptimizationProblem,
    cfg: &SimConfig,
    point: &[f64],
) -> Result<BpttGradient, TrajOptError> {
    let (traj, handles) = run_at(prob, cfg, point, Some(Tape::new()))?;
    let loss = (prob.loss)(&traj);
    let value = loss.value();
    if !value.is_finite() {
        return Err(TrajOptError::NonFiniteLoss(value));
    }
    let adjoints = loss.backward();
    let gradient = adjoints.get_all(&handles);
    let bad_coords = gradient.iter().filter(|g| !g.is_finite()).count();
    if bad_coords > 0 {
        let finite_norm = gradient
            .iter()
            .filter(|g| g.is_finite())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        return Err(TrajOptError::NonFiniteGradient {
            finite_norm,
            bad_coords,
        });
    }
    Ok(BpttGradient {
        loss: value,
        gradient,
    })
}

/// Loss at `point` from a plain, untaped rollout.
pub fn evaluate_loss(prob: &OptimizationProblem, point: &[f64]) -> Result<f64, TrajOptError> {
    evaluate_loss_with(prob, &prob.cfg, point)
}

fn evaluate_loss_with(
    prob: &OptimizationProblem,
    cfg: &SimConfig,
    point: &[f64],
) -> Result<f64, TrajOptError> {
    let (traj, _) = run_at(prob, cfg, point, None)?;
    let value = (prob.loss)(&traj).value();
    if !value.is_finite() {
        return Err(TrajOptError::NonFiniteLoss(value));
    }
    Ok(value)
}

/// How kappa evolves over the epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Constant,
    /// Geometric interpolation from start to end across the epochs.
    Geometric,
}

/// Per-epoch contact stiffness for the smoothed model's curriculum. The
/// other contact models ignore kappa, so a schedule is harmless there.
#[derive(Clone, Copy, Debug)]
pub struct KappaSchedule {
    pub start: f64,
    pub end: f64,
    pub mode: ScheduleMode,
    pub epochs: usize,
}

impl KappaSchedule {
    pub fn new(
        start: f64,
        end: f64,
        mode: ScheduleMode,
        epochs: usize,
    ) -> Result<Self, TrajOptError> {
        if !(start > 0.0 && end >= start && start.is_finite() && end.is_finite()) {
            return Err(TrajOptError::BadSchedule { start, end });
        }
        Ok(KappaSchedule {
            start,
            end,
            mode,
            epochs,
        })
    }

    pub fn constant(kappa: f64, epochs: usize) -> Result<Self, TrajOptError> {
        Self::new(kappa, kappa, ScheduleMode::Constant, epochs)
    }

    pub fn geometric(start: f64, end: f64, epochs: usize) -> Result<Self, TrajOptError> {
        Self::new(start, end, ScheduleMode::Geometric, epochs)
    }

    /// Schedule implied by a config: geometric `kappa -> kappa_end` when
    /// the endpoint is higher, constant otherwise.
    pub fn from_config(cfg: &SimConfig) -> Result<Self, TrajOptError> {
        if cfg.kappa_end > cfg.kappa {
            Self::geometric(cfg.kappa, cfg.kappa_end, cfg.epochs)
        } else {
            Self::constant(cfg.kappa, cfg.epochs)
        }
    }

    /// Kappa applied at a 0-based epoch.
    pub fn at(&self, epoch: usize) -> f64 {
        match self.mode {
            ScheduleMode::Constant => self.start,
            ScheduleMode::Geometric => {
                if self.epochs <= 1 {
                    return self.end;
                }
                let t = epoch as f64 / (self.epochs - 1) as f64;
                self.start * (self.end / self.start).powf(t)
            }
        }
    }
}

/// One row of the optimization trace.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub kappa: f64,
}

/// Why descent ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    /// Cut short: gradient norm past [`GRAD_NORM_LIMIT`], a non-finite
    /// loss or gradient, or a rollout that blew up mid-descent.
    Diverged { epoch: usize, detail: String },
}

impl StopReason {
    pub fn diverged(&self) -> bool {
        matches!(self, StopReason::Diverged { .. })
    }
}

/// The full descent record: per-epoch measurements, the final decision,
/// and how it ended.
#[derive(Clone, Debug)]
pub struct OptimizationTrace {
    pub records: Vec<EpochRecord>,
    /// Decision point after the last completed update.
    pub decision: Vec<f64>,
    pub stop: StopReason,
    pub seed: u64,
    /// Kappa of the last epoch that ran — what the decision was last
    /// tuned against, and the right stiffness for replaying it.
    pub final_kappa: f64,
}

/// Descent options. Plain fixed-step gradient descent is the default so
/// loss curves reflect gradient quality directly; the backtracking
/// variant halves the step (up to 8 times) whenever a step would raise
/// the loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct GdOptions {
    pub backtracking: bool,
}

/// Plain gradient descent from the problem's initial point.
///
/// Per epoch: kappa from the schedule, one BPTT gradient, one fixed-size
/// step. A gradient norm beyond [`GRAD_NORM_LIMIT`], or any loss,
/// gradient, or rollout failure after the first epoch, stops the descent
/// early with the reason recorded — divergence is an expected
/// experimental outcome, not a crash. First-epoch failures still error:
/// the problem is unsolvable as posed.
///
/// Fully deterministic; `seed` is carried into the trace for provenance
/// only.
pub fn gd_optimize(
    prob: &OptimizationProblem,
    schedule: &KappaSchedule,
    lr: f64,
    seed: u64,
) -> Result<OptimizationTrace, TrajOptError> {
    gd_optimize_with(prob, schedule, lr, seed, GdOptions::default())
}

/// [`gd_optimize`] with explicit options.
pub fn gd_optimize_with(
    prob: &OptimizationProblem,
    schedule: &KappaSchedule,
    lr: f64,
    seed: u64,
    options: GdOptions,
) -> Result<OptimizationTrace, TrajOptError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrajOptError::BadLearningRate(lr));
    }
    let mut cfg = prob.cfg.clone();
    let mut point = prob.initial_point.clone();
    let mut records = Vec::with_capacity(schedule.epochs);
    let mut stop = StopReason::Completed;
    let mut final_kappa = cfg.kappa;

    for epoch in 0..schedule.epochs {
        cfg.kappa = schedule.at(epoch);
        final_kappa = cfg.kappa;
        let grad = match bptt_gradient_with(prob, &cfg, &point) {
            Ok(grad) => grad,
            Err(err) if epoch > 0 => {
                stop = StopReason::Diverged {
                    epoch,
                    detail: err.to_string(),
                };
                break;
            }
            Err(err) => return Err(err),
        };
        let norm = grad.norm();
        records.push(EpochRecord {
            epoch,
            loss: grad.loss,
            grad_norm: norm,
            kappa: cfg.kappa,
        });
        if norm > GRAD_NORM_LIMIT {
            stop = StopReason::Diverged {
                epoch,
                detail: format!(
                    "gradient norm {norm:.3e} crossed the {GRAD_NORM_LIMIT:.0e} divergence limit"
                ),
            };
            break;
        }

        let mut step = lr;
        loop {
            let candidate: Vec<f64> = point
                .iter()
                .zip(&grad.gradient)
                .map(|(p, g)| p - step * g)
                .collect();
            if options.backtracking {
                let improved = matches!(
                    evaluate_loss_with(prob, &cfg, &candidate),
                    Ok(l) if l <= grad.loss
                );
                if !improved && step > lr / 256.0 {
                    step *= 0.5;
                    continue;
                }
                if !improved {
                    break; // keep the current point; descent has stalled
                }
            }
            point = candidate;
            break;
        }
    }

    Ok(OptimizationTrace {
        records,
        decision: point,
        stop,
        seed,
        final_kappa,
    })
}

/// How a decision tuned under one contact model fares under another.
#[derive(Clone, Debug)]
pub struct TransferReport {
    pub train_model: ContactModel,
    pub eval_model: ContactModel,
    /// Loss replayed under the training configuration at `train_kappa`.
    pub train_loss: f64,
    /// Loss replayed under the evaluation model.
    pub eval_loss: f64,
    /// `|eval − train|`; infinite when either replay failed.
    pub gap: f64,
}

/// Replay `decision` under the training model (at the stiffness it was
/// last tuned against — pass the trace's `final_kappa`) and under
/// `eval_model`, and report both losses and their gap. Never errors:
/// failed replays score an infinite loss.
///
/// When the evaluation model differs, it runs with its own default
/// armature so it behaves exactly like a from-scratch run of that model.
pub fn transfer_evaluate(
    prob: &OptimizationProblem,
    decision: &[f64],
    train_kappa: f64,
    eval_model: ContactModel,
) -> TransferReport {
    let mut train_cfg = prob.cfg.clone();
    train_cfg.kappa = train_kappa;
    let train_loss =
        evaluate_loss_with(prob, &train_cfg, decision).unwrap_or(f64::INFINITY);

    let eval_cfg = if eval_model == prob.cfg.model {
        train_cfg.clone()
    } else {
        let mut c = train_cfg.clone();
        c.model = eval_model;
        c.armature = default_armature(eval_model);
        c
    };
    let eval_loss = evaluate_loss_with(prob, &eval_cfg, decision).unwrap_or(f64::INFINITY);

    let gap = if train_loss.is_finite() && eval_loss.is_finite() {
        (eval_loss - train_loss).abs()
    } else {
        f64::INFINITY
    };
    TransferReport {
        train_model: prob.cfg.model,
        eval_model,
        train_loss,
        eval_loss,
        gap,
    }
}

/// `(max_t q[coord] − target)²`: squared miss of the highest value a
/// position coordinate reaches. The maximum is a chain of one-sided max
/// nodes, so the gradient routes through the step that attains it.
pub fn apex_target_loss(coord: usize, target: f64) -> LossFn {
    apex_target_loss_after(coord, target, 0)
}

/// [`apex_target_loss`] restricted to steps at or past `skip`. Skipping
/// an initial settle-in window matters when the start is the highest
/// point the passive system visits: the maximum would stick to that
/// constant and every gradient would vanish.
pub fn apex_target_loss_after(coord: usize, target: f64, skip: usize) -> LossFn {
    Box::new(move |traj: &Trajectory| {
        let first = skip.min(traj.states.len() - 1);
        let mut apex = traj.states[first].q[coord].clone();
        for state in &traj.states[first + 1..] {
            apex = apex.max(&state.q[coord]);
        }
        (&apex - target).square()
    })
}

/// A named task: the problem plus the step size it descends well with.
pub struct TaskSetup {
    pub problem: OptimizationProblem,
    pub default_lr: f64,
}

/// Target apex of the throw task (meters above the ground).
pub const THROW_TARGET_APEX: f64 = 1.5;
/// Target body apex of the hop task (meters above the ground).
pub const HOP_TARGET_APEX: f64 = 1.0;

/// Build one of the named optimization tasks on top of `cfg` (model,
/// solver, and integration parameters come from it; the scenario and the
/// loss are fixed by the task).
pub fn build_task(kind: TaskKind, cfg: &SimConfig) -> Result<TaskSetup, TrajOptError> {
    match kind {
        TaskKind::SphereThrow => sphere_throw(cfg),
        TaskKind::HopperHop => hopper_hop(cfg),
    }
}

/// Throw task: pick the initial upward velocity of the disk so its apex
/// lands on [`THROW_TARGET_APEX`]. One decision variable, smooth
/// ballistic landscape, closed-form optimum to check against.
fn sphere_throw(cfg: &SimConfig) -> Result<TaskSetup, TrajOptError> {
    let mut cfg = cfg.clone();
    cfg.scenario = "bouncing-sphere-3d".into();
    let scenario = scenario_by_name(&cfg.scenario, &cfg)?;
    let horizon = scenario.steps_for(&cfg);
    let problem = OptimizationProblem::new(
        scenario,
        cfg,
        Decision::InitialState(vec![StateSlot::U(1)]),
        horizon,
        None,
        // From a standstill the apex is the launch state itself and its
        // gradient vanishes; starting with some upward speed keeps the
        // apex in the interior where descent can move it.
        vec![1.0],
        apex_target_loss(1, THROW_TARGET_APEX),
    )?;
    Ok(TaskSetup {
        problem,
        default_lr: 2.0,
    })
}

/// Hop task: shape the per-step leg push so the hopper's body apex lands
/// on [`HOP_TARGET_APEX`]. The push saturates at the actuator limit, so
/// the optimizer has to recruit the leg spring.
fn hopper_hop(cfg: &SimConfig) -> Result<TaskSetup, TrajOptError> {
    let mut cfg = cfg.clone();
    cfg.scenario = "hopper-2d".into();
    let scenario = scenario_by_name(&cfg.scenario, &cfg)?;
    let horizon = scenario.steps_for(&cfg);
    let trunc_window = cfg.trunc_window;
    // The hopper starts at the stand-still equilibrium, which is also the
    // highest point it visits until it learns to jump; the apex is scored
    // after a settle-in fifth of the horizon so its gradient stays alive
    // from the first epoch.
    let settle = horizon / 5;
    let problem = OptimizationProblem::new(
        scenario,
        cfg,
        Decision::Actions,
        horizon,
        trunc_window,
        vec![0.0; horizon],
        apex_target_loss_after(0, HOP_TARGET_APEX, settle),
    )?;
    Ok(TaskSetup {
        problem,
        // A single 10 ms force pulse barely moves the 45 kg body, so the
        // per-action gradients sit around 1e-6 and the step size has to be
        // large for descent to make headway inside a few hundred epochs.
        default_lr: 1.0e7,
    })
}
