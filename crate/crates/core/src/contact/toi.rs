//! Differentiable time-of-impact correction for positions.
//!
//! A fixed-step integrator lands impacting bodies at a depth that depends
//! on where the surface fell inside the step — a sawtooth in the initial
//! conditions that shows up as gradient noise and parks resting contacts
//! at an arbitrary penetration. This pass estimates, per freshly
//! impacting contact, the fraction of the step that elapsed before
//! impact, then replays the step as that fraction at the incoming
//! velocity plus the remainder at the post-impulse velocity. The fraction
//! is ordinary tape arithmetic, so the correction is differentiable like
//! everything else.

use crate::autodiff::DVar;
use crate::dynamics::SystemModel;

/// Correct `q_post` for contacts that crossed the surface during this
/// step.
///
/// The crossing fraction `alpha = gap_prev / (gap_prev - gap_free)`
/// interpolates the gap linearly along the incoming motion, so
/// `gap_free` is measured at the free endpoint `q_prev + dt u_prev` —
/// where the step would have ended had no impulse acted. Measuring it at
/// the actual endpoint would fold the impulse's deceleration into the
/// estimate and systematically overshoot the impact point.
///
/// A contact qualifies when it was separated at the step start
/// (`gap_prev < 0`), its free endpoint has crossed (`gap_free >= 0`),
/// and it was approaching (`v_n < 0`) at the step start. Its support
/// coordinates are re-integrated as
/// `q_prev + alpha dt u_prev + (1 - alpha) dt u_post`; everything else
/// keeps `q_post`. A flat gap (`gap_prev == gap_free`) leaves `alpha`
/// undefined and the contact uncorrected. When supports overlap, later
/// candidates in the system's stable order win.
pub fn toi_correct(
    system: &dyn SystemModel,
    q_prev: &[DVar],
    u_prev: &[DVar],
    q_post: &[DVar],
    u_post: &[DVar],
    dt: f64,
) -> Vec<DVar> {
    let q_free: Vec<DVar> = q_prev
        .iter()
        .zip(u_prev.iter())
        .map(|(qi, ui)| qi + &(ui * dt))
        .collect();
    let before = system.contact_candidates(q_prev, u_prev);
    let free = system.contact_candidates(&q_free, u_prev);

    let mut q_new: Vec<DVar> = q_post.to_vec();
    for (prev, end) in before.iter().zip(free.iter()) {
        debug_assert_eq!(prev.tag, end.tag, "candidate order must be stable");
        let crossed = prev.gap.value() < 0.0 && end.gap.value() >= 0.0;
        let approaching = prev.normal_velocity(u_prev).value() < 0.0;
        let resolvable = prev.gap.value() != end.gap.value();
        if !(crossed && approaching && resolvable) {
            continue;
        }
        let alpha = &prev.gap / &(&prev.gap - &end.gap);
        let remainder = -&alpha + 1.0;
        for i in prev.support() {
            q_new[i] = &q_prev[i] + &(&(&alpha * dt) * &u_prev[i])
                + &(&remainder * dt) * &u_post[i];
        }
    }
    q_new
}
