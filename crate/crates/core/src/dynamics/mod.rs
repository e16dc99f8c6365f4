//! Generalized-coordinate rigid-body systems and their time steppers.
//!
//! A [`SystemModel`] supplies the mass matrix, bias forces, and contact
//! candidates of one mechanical system, all expressed in [`DVar`]
//! arithmetic so that stepping stays differentiable end to end. The
//! steppers in [`steppers`] advance a [`GeneralizedState`] under one of
//! the three contact formulations; [`rollout`] chains steps into a
//! trajectory with per-step contact diagnostics.

mod rollout;
mod scenarios;
mod steppers;

pub use rollout::{rollout, RolloutOptions, StepFailure, Trajectory};
pub use scenarios::{
    builtin_scenarios, scenario_by_name, AnalyticOracle, BouncingSphere3d, FallingSphere1d,
    Hopper2d, Scenario, ScenarioError, SlidingBox2d, TwoSpheres1d,
};
pub use steppers::{step, step_moreau, step_semi_implicit, StepResult, WarmStartCache};

use crate::autodiff::DVar;
use crate::config::SimConfig;
use crate::linalg::{self, DMat};
use thiserror::Error;

/// Positions and velocities in generalized coordinates, tracked on a tape
/// or plain constants.
#[derive(Clone, Debug)]
pub struct GeneralizedState {
    pub q: Vec<DVar>,
    pub u: Vec<DVar>,
}

impl GeneralizedState {
    pub fn new(q: Vec<DVar>, u: Vec<DVar>) -> Self {
        assert_eq!(q.len(), u.len(), "q and u must have equal dimension");
        GeneralizedState { q, u }
    }

    pub fn from_values(q: &[f64], u: &[f64]) -> Self {
        Self::new(
            q.iter().map(|&v| DVar::constant(v)).collect(),
            u.iter().map(|&v| DVar::constant(v)).collect(),
        )
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn q_values(&self) -> Vec<f64> {
        self.q.iter().map(|v| v.value()).collect()
    }

    pub fn u_values(&self) -> Vec<f64> {
        self.u.iter().map(|v| v.value()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.u).all(|v| v.value().is_finite())
    }
}

/// One contact candidate at the current configuration.
///
/// `gap` is the penetration depth: positive inside the obstacle, negative
/// with clearance. The Jacobian rows map generalized velocity to contact
/// velocity, normal row first (positive = separating), then 0..=2
/// tangential rows.
#[derive(Clone, Debug)]
pub struct ContactPoint {
    /// Stable identity; candidate lists keep tag order across steps.
    pub tag: &'static str,
    pub gap: DVar,
    /// World direction of the contact normal (y-up plane), diagnostic.
    pub normal_dir: [f64; 2],
    pub normal_row: Vec<DVar>,
    pub tangent_rows: Vec<Vec<DVar>>,
    pub mu: f64,
}

impl ContactPoint {
    /// Constraint dimension: normal plus tangents.
    pub fn dim(&self) -> usize {
        1 + self.tangent_rows.len()
    }

    /// Normal separation velocity `J_n u`.
    pub fn normal_velocity(&self, u: &[DVar]) -> DVar {
        linalg::dot(&self.normal_row, u)
    }

    /// Tangential velocity components `J_t u`.
    pub fn tangential_velocity(&self, u: &[DVar]) -> Vec<DVar> {
        self.tangent_rows.iter().map(|r| linalg::dot(r, u)).collect()
    }

    /// Generalized-coordinate indices the normal row actually touches.
    pub fn support(&self) -> Vec<usize> {
        self.normal_row
            .iter()
            .enumerate()
            .filter(|(_, v)| v.value() != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A mechanical system in generalized coordinates.
///
/// Implementations must be pure functions of their inputs: candidate lists
/// keep a stable order and stable tags across calls so steps can be
/// matched up, and everything returned participates in differentiation.
pub trait SystemModel {
    fn dof(&self) -> usize;

    fn action_dim(&self) -> usize {
        0
    }

    /// Symmetric positive semi-definite mass matrix at `q`; the stepper
    /// adds the configured armature to the diagonal before factorizing.
    fn mass_matrix(&self, q: &[DVar]) -> DMat;

    /// Generalized bias force: gravity, springs, damping, and the mapped
    /// (clamped) actuation.
    fn bias_force(&self, q: &[DVar], u: &[DVar], action: &[DVar]) -> Vec<DVar>;

    /// All contact candidates at `(q, u)`, active or not; activation is
    /// the stepper's decision.
    fn contact_candidates(&self, q: &[DVar], u: &[DVar]) -> Vec<ContactPoint>;

    /// Potential energy (gravity plus any springs), used by energy
    /// accounting.
    fn potential_energy(&self, q: &[DVar]) -> DVar;
}

/// Per-contact record attached to every executed step: gap plus the
/// normal/tangential contact intensity. Under the velocity-level models
/// the intensity is an impulse; under the penalty model it is a force.
#[derive(Clone, Debug)]
pub struct ContactDiag {
    pub tag: &'static str,
    pub gap: DVar,
    pub normal: DVar,
    pub tangent: Vec<DVar>,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Contact(#[from] crate::contact::ContactError),
    #[error("state became non-finite")]
    NonFiniteState,
    #[error("action has dimension {got}, system expects {expected}")]
    ActionDim { got: usize, expected: usize },
}

/// Total mechanical energy `u^T (M + armature I) u / 2 + V(q)`, with the
/// same inertia the steppers integrate.
pub fn total_energy(system: &dyn SystemModel, state: &GeneralizedState, cfg: &SimConfig) -> f64 {
    let m = linalg::add_diag(&system.mass_matrix(&state.q), cfg.armature);
    let mu = linalg::mat_vec(&m, &state.u);
    let ke = 0.5 * linalg::dot(&state.u, &mu).value();
    ke + system.potential_energy(&state.q).value()
}
