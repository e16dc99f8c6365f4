//! Fixed-sweep projected Gauss-Seidel over contact impulses.
//!
//! The solver runs a fixed number of sweeps so that the recorded tape has
//! a static shape: differentiating through it is just backpropagation
//! through an unrolled iteration. Under hard weighting this is the
//! classical projected Gauss-Seidel on the active set. Under smoothed
//! weighting, off-diagonal coupling terms are scaled by each source
//! contact's logistic activation, and the final impulses are scaled by
//! their own, so impulses fade in continuously as candidates approach
//! the surface instead of switching on.

use crate::autodiff::DVar;
use crate::config::{Relaxation, SimConfig};
use crate::contact::problem::{ContactProblem, ContactWeighting};
use crate::contact::{sigmoid_weight, ContactError};
use crate::linalg::{self, DMat};

/// One contact's solved impulse, normal component first.
#[derive(Clone, Debug)]
pub struct ContactImpulse {
    pub tag: &'static str,
    /// Final impulse, including the activation scaling in smoothed mode.
    pub p: Vec<DVar>,
    /// Sweep result before activation scaling, as plain values; this is
    /// the fixed point worth feeding back as the next warm start.
    pub raw: Vec<f64>,
    /// Value of the activation weight that scaled it (1 in hard mode).
    pub weight: f64,
}

/// Project an impulse onto the friction cone: clamp the normal component
/// nonnegative, then cap the tangential magnitude at `mu` times it. The
/// branches are taken on values; the scaling itself stays on the tape, so
/// a capped impulse keeps its sensitivity to the normal force.
pub fn prox_friction_cone(p: &[DVar], mu: f64) -> Vec<DVar> {
    let p_n = p[0].max_const(0.0);
    if p.len() == 1 {
        return vec![p_n];
    }
    let p_t = &p[1..];
    let speed = linalg::norm(p_t);
    let cap = &p_n * mu;
    if speed.value() > cap.value() {
        // Outside the cone: shrink the tangential part onto it. The
        // guard also covers speed > 0, since cap >= 0.
        let scale = &cap / &speed;
        let mut out = vec![p_n];
        out.extend(p_t.iter().map(|pt| pt * &scale));
        out
    } else {
        let mut out = vec![p_n];
        out.extend_from_slice(p_t);
        out
    }
}

/// Largest eigenvalue of a small symmetric PSD block, from values only.
/// Power iteration with a deterministic start; falls back to the largest
/// diagonal entry if the iterate collapses.
fn lambda_max(block: &DMat) -> f64 {
    let n = block.len();
    if n == 0 {
        return 1.0;
    }
    let a: Vec<Vec<f64>> = block
        .iter()
        .map(|row| row.iter().map(|x| x.value()).collect())
        .collect();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lam = 0.0;
    for _ in 0..100 {
        let w: Vec<f64> = a
            .iter()
            .map(|row| row.iter().zip(v.iter()).map(|(x, y)| x * y).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            lam = 0.0;
            break;
        }
        lam = v.iter().zip(w.iter()).map(|(x, y)| x * y).sum();
        for (vi, wi) in v.iter_mut().zip(w.iter()) {
            *vi = wi / norm;
        }
    }
    if lam <= 1e-12 {
        lam = a
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .fold(1e-12, f64::max);
    }
    lam
}

/// Solve the assembled problem with `cfg.solver_iters` sweeps.
///
/// `warm_start`, when given, must align with `problem.contacts` and is
/// consumed as plain values: a previous step's impulses are a hint, not
/// part of this step's derivative.
pub fn solve_contacts(
    problem: &ContactProblem,
    cfg: &SimConfig,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<Vec<ContactImpulse>, ContactError> {
    let n = problem.contacts.len();
    if n == 0 {
        return Ok(Vec::new());
    }

    let weights: Vec<Option<DVar>> = problem
        .contacts
        .iter()
        .map(|contact| match problem.weighting {
            ContactWeighting::Hard => None,
            ContactWeighting::Smoothed { kappa } => Some(sigmoid_weight(&contact.gap, kappa)),
        })
        .collect();

    // Per-contact relaxation, fixed before the sweeps begin.
    let relaxation: Vec<DVar> = (0..n)
        .map(|j| match cfg.relaxation {
            Relaxation::Paper => {
                let mut denom = DVar::constant(1.0);
                for block in &problem.blocks[j] {
                    denom = &denom + &linalg::det_small(block);
                }
                denom.recip()
            }
            Relaxation::Spectral => DVar::constant(1.0 / lambda_max(&problem.blocks[j][j])),
        })
        .collect();

    let mut p: Vec<Vec<DVar>> = (0..n)
        .map(|j| {
            let dim = problem.contacts[j].dim();
            match warm_start {
                Some(ws) if ws[j].len() == dim => {
                    ws[j].iter().map(|&x| DVar::constant(x)).collect()
                }
                _ => vec![DVar::constant(0.0); dim],
            }
        })
        .collect();

    for iteration in 0..cfg.solver_iters {
        for j in 0..n {
            let dim = problem.contacts[j].dim();
            let mut s: Vec<DVar> = problem.c[j].clone();
            for k in 0..n {
                let coupled = linalg::mat_vec(&problem.blocks[j][k], &p[k]);
                match (&weights[k], k == j) {
                    (Some(w), false) => {
                        for (si, ci) in s.iter_mut().zip(coupled.iter()) {
                            *si = &*si + &(ci * w);
                        }
                    }
                    _ => {
                        for (si, ci) in s.iter_mut().zip(coupled.iter()) {
                            *si = &*si + ci;
                        }
                    }
                }
            }
            let candidate: Vec<DVar> = (0..dim)
                .map(|a| &p[j][a] - &(&relaxation[j] * &s[a]))
                .collect();
            p[j] = prox_friction_cone(&candidate, problem.contacts[j].mu);
            for component in &p[j] {
                if !component.value().is_finite() {
                    return Err(ContactError::NonFiniteImpulse {
                        iteration,
                        tag: problem.contacts[j].tag.to_string(),
                    });
                }
            }
        }
    }

    Ok((0..n)
        .map(|j| {
            let raw: Vec<f64> = p[j].iter().map(|pi| pi.value()).collect();
            match &weights[j] {
                Some(w) => ContactImpulse {
                    tag: problem.contacts[j].tag,
                    p: p[j].iter().map(|pi| pi * w).collect(),
                    raw,
                    weight: w.value(),
                },
                None => ContactImpulse {
                    tag: problem.contacts[j].tag,
                    p: p[j].clone(),
                    raw,
                    weight: 1.0,
                },
            }
        })
        .collect())
}
