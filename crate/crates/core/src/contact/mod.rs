//! Contact force laws and the impulse-level contact problem.
//!
//! Three formulations of the same physical constraint set:
//!
//! * penalty forces ([`soft_normal_force`], [`soft_friction_force`]) used
//!   by the semi-implicit stepper;
//! * a hard velocity-level problem solved by fixed-sweep projected
//!   Gauss-Seidel with unit-step activation;
//! * the smoothed variant of that solve, which swaps the unit step for
//!   [`sigmoid_weight`] on the off-diagonal coupling terms and on the
//!   final impulses, and activates candidates up to a meter away so that
//!   near contacts stay connected to the gradient.

mod problem;
mod solver;
mod toi;

pub use problem::{assemble_contact_problem, post_velocity, ContactProblem, ContactWeighting};
pub use solver::{prox_friction_cone, solve_contacts, ContactImpulse};
pub use toi::toi_correct;

use crate::autodiff::DVar;
use crate::config::SimConfig;
use crate::linalg;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("mass matrix is not positive definite even with armature: {0}")]
    MassNotSpd(#[from] linalg::LinalgError),
    #[error("impulse became non-finite at sweep {iteration}, contact `{tag}`")]
    NonFiniteImpulse { iteration: usize, tag: String },
}

/// Penalty contact parameters, lifted from the run configuration.
#[derive(Clone, Copy, Debug)]
pub struct SoftContactParams {
    /// Normal spring stiffness.
    pub kp: f64,
    /// Normal damping against approach velocity.
    pub kd: f64,
    /// Tangential velocity gain before Coulomb saturation.
    pub kf: f64,
    /// Friction coefficient.
    pub mu: f64,
}

impl SoftContactParams {
    pub fn from_config(cfg: &SimConfig) -> Self {
        SoftContactParams {
            kp: cfg.kp,
            kd: cfg.kd,
            kf: cfg.kf,
            mu: cfg.mu,
        }
    }
}

/// Spring-damper normal force:
/// `f_n = kp d - kd min(v_n, 0)` while penetrating, zero otherwise.
/// The damper only resists approach, so separating contacts release
/// cleanly; the activation branch is recorded with one-sided partials.
pub fn soft_normal_force(d: &DVar, v_n: &DVar, p: &SoftContactParams) -> DVar {
    let active = d * p.kp - v_n.min_const(0.0) * p.kd;
    DVar::select(d.value() >= 0.0, &active, &DVar::constant(0.0))
}

/// Velocity-proportional friction capped by the Coulomb cone:
/// `f_t = -(v_t / |v_t|) min(kf |v_t|, mu f_n)`, the zero vector at
/// `|v_t| = 0`.
pub fn soft_friction_force(v_t: &[DVar], f_n: &DVar, p: &SoftContactParams) -> Vec<DVar> {
    if v_t.is_empty() {
        return Vec::new();
    }
    let speed = linalg::norm(v_t);
    if speed.value() == 0.0 {
        return vec![DVar::constant(0.0); v_t.len()];
    }
    let magnitude = (&speed * p.kf).min(&(f_n * p.mu));
    let scale = -(&magnitude / &speed);
    v_t.iter().map(|v| v * &scale).collect()
}

/// Logistic activation weight `1 / (1 + exp(-d kappa))`: 0.5 at touch,
/// saturating to the unit step as kappa grows.
pub fn sigmoid_weight(d: &DVar, kappa: f64) -> DVar {
    (d * kappa).sigmoid()
}

/// The hard activation: a unit step on the gap. Constant by construction,
/// which is precisely why hard contact hides its switching from gradients.
pub fn step_weight(d: &DVar) -> f64 {
    if d.value() >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn params() -> SoftContactParams {
        SoftContactParams {
            kp: 12.0e3,
            kd: 3.0,
            kf: 9.0e2,
            mu: 0.8,
        }
    }

    #[test]
    fn normal_force_spring_plus_damping() {
        let p = params();
        // Penetrating 1 cm while approaching at 0.5 m/s.
        let f = soft_normal_force(&DVar::constant(0.01), &DVar::constant(-0.5), &p);
        assert!((f.value() - (120.0 + 1.5)).abs() < 1e-12);
        // Separating: damper off.
        let f = soft_normal_force(&DVar::constant(0.01), &DVar::constant(0.5), &p);
        assert!((f.value() - 120.0).abs() < 1e-12);
        // Clear of the ground: no force regardless of velocity.
        let f = soft_normal_force(&DVar::constant(-0.001), &DVar::constant(-2.0), &p);
        assert_eq!(f.value(), 0.0);
    }

    #[test]
    fn normal_force_gradient_inside_active_branch() {
        let p = params();
        let tape = Tape::new();
        let d = tape.var(0.01);
        let vn = tape.var(-0.5);
        let f = soft_normal_force(&d, &vn, &p);
        let g = f.backward();
        assert_eq!(g.get(&d), 12.0e3);
        assert_eq!(g.get(&vn), -3.0);
    }

    #[test]
    fn friction_below_and_at_saturation() {
        let p = params();
        // Slow slide: kf |v| = 90 < mu f_n = 96 -> viscous branch.
        let f_n = DVar::constant(120.0);
        let vt = [DVar::constant(0.1)];
        let ft = soft_friction_force(&vt, &f_n, &p);
        assert!((ft[0].value() + 90.0).abs() < 1e-12);
        // Fast slide: capped at mu f_n.
        let vt = [DVar::constant(0.2)];
        let ft = soft_friction_force(&vt, &f_n, &p);
        assert!((ft[0].value() + 96.0).abs() < 1e-12);
    }

    #[test]
    fn friction_zero_velocity_returns_zero_vector() {
        let p = params();
        let ft = soft_friction_force(
            &[DVar::constant(0.0), DVar::constant(0.0)],
            &DVar::constant(120.0),
            &p,
        );
        assert!(ft.iter().all(|f| f.value() == 0.0));
    }

    #[test]
    fn friction_two_component_direction() {
        let p = params();
        // |v| = 0.5 along (0.6, 0.8): capped branch, direction preserved.
        let f_n = DVar::constant(120.0);
        let vt = [DVar::constant(0.3), DVar::constant(0.4)];
        let ft = soft_friction_force(&vt, &f_n, &p);
        assert!((ft[0].value() + 96.0 * 0.6).abs() < 1e-9);
        assert!((ft[1].value() + 96.0 * 0.8).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_weight_reference_points() {
        let half = sigmoid_weight(&DVar::constant(0.0), 100.0);
        assert_eq!(half.value(), 0.5);
        let above = sigmoid_weight(&DVar::constant(0.01), 100.0);
        assert!((above.value() - 0.7310585786300049).abs() < 1e-15);
        let sat = sigmoid_weight(&DVar::constant(0.5), 100.0);
        assert!((sat.value() - 1.0).abs() < 1e-12);
        let deep = sigmoid_weight(&DVar::constant(-0.5), 100.0);
        assert!(deep.value() < 1e-21);
    }

    #[test]
    fn sigmoid_weight_slope_at_touch_scales_with_kappa() {
        for kappa in [1.0, 100.0, 1.0e4] {
            let tape = Tape::new();
            let d = tape.var(0.0);
            let w = sigmoid_weight(&d, kappa);
            let g = w.backward();
            assert!((g.get(&d) - 0.25 * kappa).abs() < 1e-9 * kappa);
        }
    }

    #[test]
    fn step_weight_is_the_kappa_limit() {
        for d in [-0.3, -1e-9, 0.0, 1e-9, 0.2] {
            let w_step = step_weight(&DVar::constant(d));
            let w_sig = sigmoid_weight(&DVar::constant(d), 1.0e12).value();
            if d == 0.0 {
                // The logistic sits at 1/2 exactly on the surface; the step
                // commits to the active side.
                assert_eq!(w_step, 1.0);
                assert_eq!(w_sig, 0.5);
            } else {
                assert!((w_step - w_sig).abs() < 1e-9);
            }
        }
    }
}
