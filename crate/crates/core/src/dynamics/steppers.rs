//! One-step integrators for the three contact formulations.
//!
//! * [`step_semi_implicit`]: symplectic Euler with penalty contact
//!   forces evaluated at the step-start state.
//! * [`step_moreau`]: midpoint time stepping with a velocity-level
//!   impulse solve — contact candidates and dynamics are evaluated at
//!   `q + (dt/2) u`, impulses resolve penetration at the velocity level,
//!   and positions advance with the corrected velocity. Both the hard
//!   and smoothed models run through it; they differ only in candidate
//!   activation.
//!
//! Every step is recorded on whatever tape its inputs live on, so
//! gradients flow through entire trajectories.

use crate::autodiff::DVar;
use crate::config::{ContactModel, SimConfig};
use crate::contact::{
    assemble_contact_problem, post_velocity, soft_friction_force, soft_normal_force,
    solve_contacts, toi_correct, ContactError, ContactImpulse, SoftContactParams,
};
use crate::dynamics::{ContactDiag, GeneralizedState, StepError, SystemModel};
use crate::linalg;

/// The state after one step plus per-contact records.
#[derive(Debug)]
pub struct StepResult {
    pub state: GeneralizedState,
    /// One entry per contact candidate at the step's evaluation point,
    /// in the system's stable order, active or not.
    pub diags: Vec<ContactDiag>,
    /// Solved impulses (velocity-level models only; empty under the
    /// penalty model).
    pub impulses: Vec<ContactImpulse>,
}

/// Previous-step impulses by contact tag, used to seed the solver sweep.
#[derive(Clone, Debug, Default)]
pub struct WarmStartCache {
    entries: Vec<(&'static str, Vec<f64>)>,
}

impl WarmStartCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, tag: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn store(&mut self, impulses: &[ContactImpulse]) {
        for imp in impulses {
            match self.entries.iter_mut().find(|(t, _)| *t == imp.tag) {
                Some((_, p)) => p.clone_from(&imp.raw),
                None => self.entries.push((imp.tag, imp.raw.clone())),
            }
        }
    }
}

/// Advance one step under the configured contact model.
pub fn step(
    system: &dyn SystemModel,
    state: &GeneralizedState,
    action: &[DVar],
    cfg: &SimConfig,
    warm: Option<&WarmStartCache>,
) -> Result<StepResult, StepError> {
    match cfg.model {
        ContactModel::Soft => step_semi_implicit(system, state, action, cfg),
        ContactModel::Hard | ContactModel::Smoothed => {
            step_moreau(system, state, action, cfg, warm)
        }
    }
}

fn check_action(system: &dyn SystemModel, action: &[DVar]) -> Result<(), StepError> {
    if action.len() != system.action_dim() {
        return Err(StepError::ActionDim {
            got: action.len(),
            expected: system.action_dim(),
        });
    }
    Ok(())
}

fn finish(
    state: GeneralizedState,
    diags: Vec<ContactDiag>,
    impulses: Vec<ContactImpulse>,
) -> Result<StepResult, StepError> {
    if !state.is_finite() {
        return Err(StepError::NonFiniteState);
    }
    Ok(StepResult {
        state,
        diags,
        impulses,
    })
}

/// Symplectic Euler with penalty contact: forces from the step-start
/// state, velocity update, then position update with the new velocity.
pub fn step_semi_implicit(
    system: &dyn SystemModel,
    state: &GeneralizedState,
    action: &[DVar],
    cfg: &SimConfig,
) -> Result<StepResult, StepError> {
    check_action(system, action)?;
    let dt = cfg.dt;
    let base = SoftContactParams::from_config(cfg);
    let candidates = system.contact_candidates(&state.q, &state.u);

    let mut contact_force = vec![DVar::constant(0.0); system.dof()];
    let mut diags = Vec::with_capacity(candidates.len());
    for contact in &candidates {
        let v_n = contact.normal_velocity(&state.u);
        let v_t = contact.tangential_velocity(&state.u);
        let params = SoftContactParams {
            mu: contact.mu,
            ..base
        };
        let f_n = soft_normal_force(&contact.gap, &v_n, &params);
        let f_t = soft_friction_force(&v_t, &f_n, &params);
        for (i, accum) in contact_force.iter_mut().enumerate() {
            *accum = &*accum + &(&contact.normal_row[i] * &f_n);
            for (row, ft) in contact.tangent_rows.iter().zip(f_t.iter()) {
                *accum = &*accum + &(&row[i] * ft);
            }
        }
        diags.push(ContactDiag {
            tag: contact.tag,
            gap: contact.gap.clone(),
            normal: f_n,
            tangent: f_t,
        });
    }

    let bias = system.bias_force(&state.q, &state.u, action);
    let mass = linalg::add_diag(&system.mass_matrix(&state.q), cfg.armature);
    let factor = linalg::cholesky(&mass).map_err(ContactError::from)?;
    let rhs: Vec<DVar> = bias
        .iter()
        .zip(contact_force.iter())
        .map(|(b, f)| &(b + f) * dt)
        .collect();
    let du = linalg::cholesky_solve(&factor, &rhs);
    let u_next: Vec<DVar> = state.u.iter().zip(du.iter()).map(|(u, d)| u + d).collect();
    let q_next: Vec<DVar> = state
        .q
        .iter()
        .zip(u_next.iter())
        .map(|(q, u)| q + &(u * dt))
        .collect();

    finish(GeneralizedState::new(q_next, u_next), diags, Vec::new())
}

/// Midpoint time stepping with a contact impulse solve.
pub fn step_moreau(
    system: &dyn SystemModel,
    state: &GeneralizedState,
    action: &[DVar],
    cfg: &SimConfig,
    warm: Option<&WarmStartCache>,
) -> Result<StepResult, StepError> {
    check_action(system, action)?;
    let dt = cfg.dt;
    let half = dt / 2.0;

    let q_mid: Vec<DVar> = state
        .q
        .iter()
        .zip(state.u.iter())
        .map(|(q, u)| q + &(u * half))
        .collect();
    let bias = system.bias_force(&q_mid, &state.u, action);
    let candidates = system.contact_candidates(&q_mid, &state.u);
    let diag_seed: Vec<(&'static str, DVar, usize)> = candidates
        .iter()
        .map(|c| (c.tag, c.gap.clone(), c.tangent_rows.len()))
        .collect();

    let problem =
        assemble_contact_problem(system, candidates, &q_mid, &state.u, &bias, dt, cfg)?;

    let seeds: Option<Vec<Vec<f64>>> = match (cfg.warm_start, warm) {
        (true, Some(cache)) => Some(
            problem
                .contacts
                .iter()
                .map(|c| cache.lookup(c.tag).map(<[f64]>::to_vec).unwrap_or_default())
                .collect(),
        ),
        _ => None,
    };
    let impulses = solve_contacts(&problem, cfg, seeds.as_deref())?;

    let impulse_vecs: Vec<Vec<DVar>> = impulses.iter().map(|imp| imp.p.clone()).collect();
    let u_next = post_velocity(&problem, &impulse_vecs);
    let mut q_next: Vec<DVar> = q_mid
        .iter()
        .zip(u_next.iter())
        .map(|(q, u)| q + &(u * half))
        .collect();
    if cfg.toi {
        q_next = toi_correct(system, &state.q, &state.u, &q_next, &u_next, dt);
    }

    let diags = diag_seed
        .into_iter()
        .map(|(tag, gap, n_tangent)| {
            match impulses.iter().find(|imp| imp.tag == tag) {
                Some(imp) => ContactDiag {
                    tag,
                    gap,
                    normal: imp.p[0].clone(),
                    tangent: imp.p[1..].to_vec(),
                },
                None => ContactDiag {
                    tag,
                    gap,
                    normal: DVar::constant(0.0),
                    tangent: vec![DVar::constant(0.0); n_tangent],
                },
            }
        })
        .collect();

    finish(GeneralizedState::new(q_next, u_next), diags, impulses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Relaxation;
    use crate::dynamics::{total_energy, ContactPoint};
    use crate::linalg::DMat;

    /// Unit point mass on a vertical line under gravity, ground at the
    /// origin: penetration is `-q`.
    struct DropProbe {
        gravity: f64,
    }

    impl SystemModel for DropProbe {
        fn dof(&self) -> usize {
            1
        }

        fn mass_matrix(&self, _q: &[DVar]) -> DMat {
            vec![vec![DVar::constant(1.0)]]
        }

        fn bias_force(&self, _q: &[DVar], _u: &[DVar], _action: &[DVar]) -> Vec<DVar> {
            vec![DVar::constant(-self.gravity)]
        }

        fn contact_candidates(&self, q: &[DVar], _u: &[DVar]) -> Vec<ContactPoint> {
            vec![ContactPoint {
                tag: "ground",
                gap: -&q[0],
                normal_dir: [0.0, 1.0],
                normal_row: vec![DVar::constant(1.0)],
                tangent_rows: vec![],
                mu: 0.0,
            }]
        }

        fn potential_energy(&self, q: &[DVar]) -> DVar {
            &q[0] * self.gravity
        }
    }

    fn cfg(model: ContactModel) -> SimConfig {
        let mut cfg = SimConfig::for_model(model);
        cfg.armature = 0.0;
        cfg
    }

    #[test]
    fn semi_implicit_free_fall_matches_closed_form() {
        let system = DropProbe { gravity: 9.81 };
        let cfg = cfg(ContactModel::Soft);
        let state = GeneralizedState::from_values(&[1.0], &[0.0]);
        let next = step_semi_implicit(&system, &state, &[], &cfg).unwrap();
        let dt = cfg.dt;
        assert!((next.state.u[0].value() + 9.81 * dt).abs() < 1e-15);
        assert!((next.state.q[0].value() - (1.0 - 9.81 * dt * dt)).abs() < 1e-15);
        // One candidate diag, inactive.
        assert_eq!(next.diags.len(), 1);
        assert_eq!(next.diags[0].normal.value(), 0.0);
    }

    #[test]
    fn semi_implicit_static_penetration_is_a_fixed_point() {
        // Penetrated exactly to where the spring balances gravity, at
        // rest: the step must not move.
        let system = DropProbe { gravity: 9.81 };
        let cfg = cfg(ContactModel::Soft);
        let q_eq = -9.81 / cfg.kp;
        let state = GeneralizedState::from_values(&[q_eq], &[0.0]);
        let next = step_semi_implicit(&system, &state, &[], &cfg).unwrap();
        assert!(next.state.u[0].value().abs() < 1e-15);
        assert!((next.state.q[0].value() - q_eq).abs() < 1e-15);
        assert!((next.diags[0].normal.value() - 9.81).abs() < 1e-12);
    }

    #[test]
    fn moreau_free_fall_is_exact_and_conserves_energy() {
        let system = DropProbe { gravity: 9.81 };
        let cfg = cfg(ContactModel::Hard);
        let dt = cfg.dt;
        let state = GeneralizedState::from_values(&[10.0], &[-1.0]);
        let e0 = total_energy(&system, &state, &cfg);
        let next = step_moreau(&system, &state, &[], &cfg, None).unwrap();
        // Midpoint integration of a constant force is exact.
        assert!((next.state.u[0].value() - (-1.0 - 9.81 * dt)).abs() < 1e-15);
        let expected_q = 10.0 - dt - 9.81 * dt * dt / 2.0;
        assert!((next.state.q[0].value() - expected_q).abs() < 1e-14);
        let e1 = total_energy(&system, &next.state, &cfg);
        assert!((e1 - e0).abs() < 1e-12);
    }

    #[test]
    fn moreau_resting_contact_holds_exactly_with_spectral_relaxation() {
        let system = DropProbe { gravity: 9.81 };
        let mut cfg = cfg(ContactModel::Hard);
        cfg.relaxation = Relaxation::Spectral;
        let state = GeneralizedState::from_values(&[0.0], &[0.0]);
        let next = step_moreau(&system, &state, &[], &cfg, None).unwrap();
        assert_eq!(next.state.u[0].value(), 0.0);
        assert_eq!(next.state.q[0].value(), 0.0);
        // The impulse exactly cancels the gravity kick.
        assert!((next.impulses[0].p[0].value() - 9.81 * cfg.dt).abs() < 1e-15);
    }

    #[test]
    fn moreau_resting_contact_leaks_geometrically_with_default_relaxation() {
        // The default relaxation contracts the residual by half per
        // sweep, so a truncated solve leaves a 2^-N creep. This is the
        // documented cost of the fixed-sweep solver.
        let system = DropProbe { gravity: 9.81 };
        let cfg = cfg(ContactModel::Hard);
        let state = GeneralizedState::from_values(&[0.0], &[0.0]);
        let next = step_moreau(&system, &state, &[], &cfg, None).unwrap();
        let residual = 9.81 * cfg.dt * 0.5f64.powi(cfg.solver_iters as i32);
        assert!((next.state.u[0].value() + residual).abs() < 1e-15);
    }

    #[test]
    fn moreau_impact_with_toi_lands_on_the_surface() {
        // Drop at 1 m/s from 4 mm: the midpoint detects the contact, the
        // impulse stops the fall, and the time-of-impact pass places the
        // body exactly on the ground.
        let system = DropProbe { gravity: 9.81 };
        let mut cfg = cfg(ContactModel::Hard);
        cfg.relaxation = Relaxation::Spectral;
        cfg.toi = true;
        let state = GeneralizedState::from_values(&[0.004], &[-1.0]);
        let next = step_moreau(&system, &state, &[], &cfg, None).unwrap();
        // Free velocity -1.0981 is fully absorbed by the impulse.
        assert!((next.impulses[0].p[0].value() - 1.0981).abs() < 1e-12);
        assert!(next.state.u[0].value().abs() < 1e-12);
        assert!(next.state.q[0].value().abs() < 1e-15);
    }

    #[test]
    fn moreau_impact_without_toi_keeps_midpoint_depth() {
        let system = DropProbe { gravity: 9.81 };
        let mut cfg = cfg(ContactModel::Hard);
        cfg.relaxation = Relaxation::Spectral;
        cfg.toi = false;
        let state = GeneralizedState::from_values(&[0.004], &[-1.0]);
        let next = step_moreau(&system, &state, &[], &cfg, None).unwrap();
        assert!((next.state.q[0].value() + 0.001).abs() < 1e-15);
    }

    #[test]
    fn smoothed_saturates_to_hard_when_sharp() {
        // With kappa so large the logistic saturates in double precision,
        // the smoothed step reproduces the hard step bit for bit.
        let system = DropProbe { gravity: 9.81 };
        let hard_cfg = cfg(ContactModel::Hard);
        let mut smooth_cfg = cfg(ContactModel::Smoothed);
        smooth_cfg.kappa = 1.0e6;
        // Representative states off the exact-touch point, where the
        // logistic is saturated in f64. (At a gap of exactly zero the
        // smoothed weight is 1/2 at any kappa — the one measure-zero
        // point where the limit is approached, not attained.)
        for (q0, u0) in [(-0.0005, 0.0), (-0.003, -0.2), (0.5, -1.0), (0.02, 0.3)] {
            let state = GeneralizedState::from_values(&[q0], &[u0]);
            let hard = step_moreau(&system, &state, &[], &hard_cfg, None).unwrap();
            let smooth = step_moreau(&system, &state, &[], &smooth_cfg, None).unwrap();
            assert_eq!(
                hard.state.q[0].value(),
                smooth.state.q[0].value(),
                "q from ({q0}, {u0})"
            );
            assert_eq!(
                hard.state.u[0].value(),
                smooth.state.u[0].value(),
                "u from ({q0}, {u0})"
            );
        }
    }

    #[test]
    fn action_dimension_is_checked() {
        let system = DropProbe { gravity: 9.81 };
        let cfg = cfg(ContactModel::Hard);
        let state = GeneralizedState::from_values(&[1.0], &[0.0]);
        let err = step_moreau(&system, &state, &[DVar::constant(1.0)], &cfg, None).unwrap_err();
        assert!(matches!(
            err,
            StepError::ActionDim {
                got: 1,
                expected: 0
            }
        ));
    }

    #[test]
    fn warm_start_cache_round_trips_impulses() {
        let system = DropProbe { gravity: 9.81 };
        let mut cfg = cfg(ContactModel::Hard);
        cfg.warm_start = true;
        cfg.relaxation = Relaxation::Spectral;
        let state = GeneralizedState::from_values(&[0.0], &[0.0]);
        let mut cache = WarmStartCache::new();
        let first = step_moreau(&system, &state, &[], &cfg, Some(&cache)).unwrap();
        cache.store(&first.impulses);
        assert_eq!(cache.lookup("ground").unwrap(), first.impulses[0].raw);
        // Seeded with the exact fixed point, one sweep keeps it.
        cfg.solver_iters = 1;
        let second = step_moreau(&system, &state, &[], &cfg, Some(&cache)).unwrap();
        assert_eq!(second.state.u[0].value(), 0.0);
    }
}
