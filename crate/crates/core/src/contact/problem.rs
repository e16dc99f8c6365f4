//! Assembly of the velocity-level contact problem.
//!
//! Given a configuration `q_mid`, velocity `u`, and bias force `h`, the
//! impulse problem couples candidate contacts through the Delassus
//! operator `G = J M^-1 J^T`. Everything is recorded on the tape so that
//! impulses stay differentiable with respect to state and parameters.

use crate::autodiff::DVar;
use crate::config::{ContactModel, SimConfig};
use crate::contact::ContactError;
use crate::dynamics::{ContactPoint, SystemModel};
use crate::linalg::{self, DMat};

/// How candidate activation enters the solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContactWeighting {
    /// Unit-step activation: candidates either participate fully or were
    /// never assembled. Gradients see nothing of the switching.
    Hard,
    /// Logistic activation with the given sharpness. Off-diagonal coupling
    /// and the final impulses are scaled by `sigmoid(kappa * gap)`, so
    /// nearby inactive contacts still leak gradient.
    Smoothed { kappa: f64 },
}

/// The assembled impulse problem for one step.
pub struct ContactProblem {
    /// Candidates that passed the activation gate, in the system's
    /// stable candidate order.
    pub contacts: Vec<ContactPoint>,
    /// Delassus blocks: `blocks[j][k] = J_j M^-1 J_k^T`, sized
    /// `dim_j x dim_k`.
    pub blocks: Vec<Vec<DMat>>,
    /// Free-velocity terms `c_j = J_j (u + M^-1 h dt)`.
    pub c: Vec<Vec<DVar>>,
    /// Per-contact `M^-1 J_j^T`, stored column-wise:
    /// `minv_jt[j][r]` is the dof-vector `M^-1 (row r of J_j)^T`.
    pub minv_jt: Vec<Vec<Vec<DVar>>>,
    /// `u + M^-1 h dt`: where the velocity goes if no impulse acts.
    pub u_free: Vec<DVar>,
    pub weighting: ContactWeighting,
}

impl ContactProblem {
    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }
}

fn jacobian_rows(contact: &ContactPoint) -> Vec<&Vec<DVar>> {
    let mut rows = Vec::with_capacity(contact.dim());
    rows.push(&contact.normal_row);
    rows.extend(contact.tangent_rows.iter());
    rows
}

/// Slack subtracted from the activation threshold when filtering
/// candidates. A resting contact's gap hovers within rounding error of
/// zero; without slack it can fall out of the active set for one step
/// and inject a free-fall glitch. Including a near-touching candidate is
/// harmless: if it is separating, the cone projection drives its impulse
/// to zero.
const ACTIVATION_SLACK: f64 = 1e-7;

/// Build the impulse problem at `q_mid` with velocity `u` and bias force
/// `h`. `candidates` is the system's candidate list at `(q_mid, u)`;
/// candidates with a gap below the model's activation threshold are
/// dropped, and the rest keep their order.
pub fn assemble_contact_problem(
    system: &dyn SystemModel,
    candidates: Vec<ContactPoint>,
    q_mid: &[DVar],
    u: &[DVar],
    h: &[DVar],
    dt: f64,
    cfg: &SimConfig,
) -> Result<ContactProblem, ContactError> {
    let mass = linalg::add_diag(&system.mass_matrix(q_mid), cfg.armature);
    let factor = linalg::cholesky(&mass)?;

    let impulse_rhs: Vec<DVar> = h.iter().map(|hi| hi * dt).collect();
    let minv_h_dt = linalg::cholesky_solve(&factor, &impulse_rhs);
    let u_free: Vec<DVar> = u
        .iter()
        .zip(minv_h_dt.iter())
        .map(|(ui, di)| ui + di)
        .collect();

    let threshold = cfg.activation_threshold() - ACTIVATION_SLACK;
    let contacts: Vec<ContactPoint> = candidates
        .into_iter()
        .filter(|cp| cp.gap.value() >= threshold)
        .collect();

    let mut minv_jt: Vec<Vec<Vec<DVar>>> = Vec::with_capacity(contacts.len());
    for contact in &contacts {
        let cols = jacobian_rows(contact)
            .into_iter()
            .map(|row| linalg::cholesky_solve(&factor, row))
            .collect();
        minv_jt.push(cols);
    }

    let mut blocks: Vec<Vec<DMat>> = Vec::with_capacity(contacts.len());
    let mut c: Vec<Vec<DVar>> = Vec::with_capacity(contacts.len());
    for contact_j in &contacts {
        let rows_j = jacobian_rows(contact_j);
        let mut row_blocks = Vec::with_capacity(contacts.len());
        for minv_k in &minv_jt {
            let block: DMat = rows_j
                .iter()
                .map(|row| minv_k.iter().map(|col| linalg::dot(row, col)).collect())
                .collect();
            row_blocks.push(block);
        }
        blocks.push(row_blocks);
        c.push(rows_j.iter().map(|row| linalg::dot(row, &u_free)).collect());
    }

    let weighting = match cfg.model {
        ContactModel::Smoothed => ContactWeighting::Smoothed { kappa: cfg.kappa },
        _ => ContactWeighting::Hard,
    };

    Ok(ContactProblem {
        contacts,
        blocks,
        c,
        minv_jt,
        u_free,
        weighting,
    })
}

/// Apply solved impulses: `u' = u_free + sum_j M^-1 J_j^T p_j`.
pub fn post_velocity(problem: &ContactProblem, impulses: &[Vec<DVar>]) -> Vec<DVar> {
    let mut u_next = problem.u_free.clone();
    for (cols, p) in problem.minv_jt.iter().zip(impulses.iter()) {
        for (col, p_r) in cols.iter().zip(p.iter()) {
            for (ui, col_i) in u_next.iter_mut().zip(col.iter()) {
                *ui = &*ui + &(col_i * p_r);
            }
        }
    }
    u_next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::ContactModel;
    use crate::dynamics::GeneralizedState;

    /// A point mass on a line with the ground at the origin: penetration
    /// is `-q`, and the normal points along +q.
    struct LinePointMass {
        mass: f64,
        gravity: f64,
    }

    impl SystemModel for LinePointMass {
        fn dof(&self) -> usize {
            1
        }

        fn mass_matrix(&self, _q: &[DVar]) -> DMat {
            vec![vec![DVar::constant(self.mass)]]
        }

        fn bias_force(&self, _q: &[DVar], _u: &[DVar], _action: &[DVar]) -> Vec<DVar> {
            vec![DVar::constant(-self.mass * self.gravity)]
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
            &q[0] * (self.mass * self.gravity)
        }
    }

    fn config(model: ContactModel) -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.model = model;
        cfg.armature = 0.0;
        cfg
    }

    fn assemble(
        system: &LinePointMass,
        q: &[DVar],
        u: &[DVar],
        h: &[DVar],
        cfg: &SimConfig,
    ) -> ContactProblem {
        let candidates = system.contact_candidates(q, u);
        assemble_contact_problem(system, candidates, q, u, h, 0.01, cfg).unwrap()
    }

    #[test]
    fn free_velocity_includes_bias_impulse() {
        let system = LinePointMass {
            mass: 2.0,
            gravity: 10.0,
        };
        let cfg = config(ContactModel::Hard);
        let state = GeneralizedState::from_values(&[1.0], &[0.0]);
        let h = system.bias_force(&state.q, &state.u, &[]);
        let problem = assemble(&system, &state.q, &state.u, &h, &cfg);
        // u_free = 0 + (1/2)(-20)(0.01) = -0.1
        assert!((problem.u_free[0].value() + 0.1).abs() < 1e-12);
        // Above ground, hard threshold: no candidate assembled.
        assert!(problem.is_empty());
    }

    #[test]
    fn hard_activation_requires_penetration() {
        let system = LinePointMass {
            mass: 1.0,
            gravity: 9.81,
        };
        let cfg = config(ContactModel::Hard);
        let touching = GeneralizedState::from_values(&[0.0], &[-1.0]);
        let h = system.bias_force(&touching.q, &touching.u, &[]);
        let problem = assemble(&system, &touching.q, &touching.u, &h, &cfg);
        assert_eq!(problem.contacts.len(), 1);
        assert_eq!(problem.weighting, ContactWeighting::Hard);
        // G = J M^-1 J^T = 1 for a unit mass and unit row.
        assert!((problem.blocks[0][0][0][0].value() - 1.0).abs() < 1e-12);
        // c = J u_free = u - g dt.
        assert!((problem.c[0][0].value() - (-1.0 - 9.81 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn smoothed_activation_reaches_below_the_surface() {
        let system = LinePointMass {
            mass: 1.0,
            gravity: 9.81,
        };
        let cfg = config(ContactModel::Smoothed);
        // Half a meter above ground: gap -0.5, inside the smoothed
        // activation band.
        let state = GeneralizedState::from_values(&[0.5], &[0.0]);
        let h = system.bias_force(&state.q, &state.u, &[]);
        let problem = assemble(&system, &state.q, &state.u, &h, &cfg);
        assert_eq!(problem.contacts.len(), 1);
        assert_eq!(
            problem.weighting,
            ContactWeighting::Smoothed { kappa: cfg.kappa }
        );
        // A full meter away sits exactly on the activation threshold.
        let state = GeneralizedState::from_values(&[1.0], &[0.0]);
        let problem = assemble(&system, &state.q, &state.u, &h, &cfg);
        assert_eq!(problem.contacts.len(), 1);
        // Beyond it the candidate is dropped.
        let state = GeneralizedState::from_values(&[1.01], &[0.0]);
        let problem = assemble(&system, &state.q, &state.u, &h, &cfg);
        assert!(problem.is_empty());
    }

    #[test]
    fn armature_enters_the_effective_mass() {
        let system = LinePointMass {
            mass: 1.0,
            gravity: 0.0,
        };
        let mut cfg = config(ContactModel::Hard);
        cfg.armature = 1.0;
        let state = GeneralizedState::from_values(&[-0.01], &[0.0]);
        let h = system.bias_force(&state.q, &state.u, &[]);
        let problem = assemble(&system, &state.q, &state.u, &h, &cfg);
        // Effective mass 2 halves the Delassus entry.
        assert!((problem.blocks[0][0][0][0].value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn post_velocity_applies_impulse_through_inverse_mass() {
        let system = LinePointMass {
            mass: 2.0,
            gravity: 0.0,
        };
        let cfg = config(ContactModel::Hard);
        let state = GeneralizedState::from_values(&[-0.01], &[-1.0]);
        let h = system.bias_force(&state.q, &state.u, &[]);
        let problem = assemble(&system, &state.q, &state.u, &h, &cfg);
        let u_next = post_velocity(&problem, &[vec![DVar::constant(2.0)]]);
        // -1 + (1/2) * 2 = 0.
        assert!(u_next[0].value().abs() < 1e-12);
    }

    #[test]
    fn assembly_is_differentiable_through_the_gap() {
        let system = LinePointMass {
            mass: 1.0,
            gravity: 9.81,
        };
        let cfg = config(ContactModel::Hard);
        let tape = Tape::new();
        let q = vec![tape.var(-0.01)];
        let u = vec![tape.var(-1.0)];
        let h = system.bias_force(&q, &u, &[]);
        let problem = assemble(&system, &q, &u, &h, &cfg);
        let g = problem.c[0][0].backward();
        // c = u - g dt, so dc/du = 1 and dc/dq = 0 for this system.
        assert_eq!(g.get(&u[0]), 1.0);
        assert_eq!(g.get(&q[0]), 0.0);
    }
}
