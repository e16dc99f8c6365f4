//! Multi-step rollouts with per-step contact diagnostics.

use crate::autodiff::{DVar, Tape};
use crate::config::SimConfig;
use crate::dynamics::{
    step, ContactDiag, GeneralizedState, StepError, SystemModel, WarmStartCache,
};

/// How a rollout executes: step count, and optionally a tape for lifting
/// per-step actions into decision variables and truncating backprop.
#[derive(Clone, Default)]
pub struct RolloutOptions {
    pub steps: usize,
    /// When set, each step's action row is recorded as fresh variables on
    /// this tape (read their gradients back through
    /// [`Trajectory::action_vars`]), and truncation checkpoints are
    /// placed on it. When `None`, actions replay as plain constants.
    pub tape: Option<Tape>,
    /// Backprop truncation window in steps. At every window boundary the
    /// tape checkpoint advances, so gradients of anything recorded before
    /// the last boundary are zeroed. `None` (or a window >= the step
    /// count) backpropagates through the whole rollout.
    pub trunc_window: Option<usize>,
}

impl RolloutOptions {
    pub fn values_only(steps: usize) -> Self {
        RolloutOptions {
            steps,
            tape: None,
            trunc_window: None,
        }
    }
}

/// Why and where a rollout stopped early.
#[derive(Debug)]
pub struct StepFailure {
    /// Index of the step that failed (0-based).
    pub step: usize,
    pub error: StepError,
}

impl std::fmt::Display for StepFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {}: {}", self.step, self.error)
    }
}

/// A simulated trajectory: the initial state plus one state per completed
/// step, with matching per-step contact records.
pub struct Trajectory {
    pub states: Vec<GeneralizedState>,
    /// `diags[s]` records the contact candidates seen while stepping from
    /// `states[s]` to `states[s + 1]`.
    pub diags: Vec<Vec<ContactDiag>>,
    /// The action variables each step actually consumed; when lifted onto
    /// a tape these are the handles to differentiate against.
    pub action_vars: Vec<Vec<DVar>>,
    /// Set when the rollout stopped before completing its steps.
    pub failure: Option<StepFailure>,
}

impl Trajectory {
    /// Steps actually completed (states run one longer).
    pub fn steps_completed(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &GeneralizedState {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Roll the system forward from `initial`.
///
/// `actions` holds one row per step; missing rows (an empty or short
/// slice) replay as zero action. A step error does not panic: the
/// trajectory keeps everything up to the failing step and carries the
/// error in [`Trajectory::failure`].
pub fn rollout(
    system: &dyn SystemModel,
    initial: GeneralizedState,
    actions: &[Vec<f64>],
    cfg: &SimConfig,
    opts: &RolloutOptions,
) -> Trajectory {
    let mut states = Vec::with_capacity(opts.steps + 1);
    let mut diags = Vec::with_capacity(opts.steps);
    let mut action_vars = Vec::with_capacity(opts.steps);
    states.push(initial);

    let mut warm = cfg.warm_start.then(WarmStartCache::new);
    let zero_row = vec![0.0; system.action_dim()];

    let mut failure = None;
    for s in 0..opts.steps {
        if let (Some(tape), Some(window)) = (&opts.tape, opts.trunc_window) {
            if s > 0 && window > 0 && s % window == 0 {
                tape.set_checkpoint();
            }
        }

        let row: &[f64] = actions.get(s).map_or(&zero_row, Vec::as_slice);
        let action: Vec<DVar> = match &opts.tape {
            Some(tape) => row.iter().map(|&a| tape.var(a)).collect(),
            None => row.iter().map(|&a| DVar::constant(a)).collect(),
        };

        let current = states.last().expect("states never empty");
        match step(system, current, &action, cfg, warm.as_ref()) {
            Ok(result) => {
                if let Some(cache) = warm.as_mut() {
                    cache.store(&result.impulses);
                }
                states.push(result.state);
                diags.push(result.diags);
                action_vars.push(action);
            }
            Err(error) => {
                failure = Some(StepFailure { step: s, error });
                break;
            }
        }
    }

    Trajectory {
        states,
        diags,
        action_vars,
        failure,
    }
}
