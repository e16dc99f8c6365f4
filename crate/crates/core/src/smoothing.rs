//! Gradient estimators for losses routed through contact, and the
//! drop-height sweep that exposes how each contact model shapes them.
//!
//! Three estimators are compared throughout:
//!
//! * **zeroth-order** ([`zog_estimate`]): Gaussian-smoothing Monte Carlo,
//!   `(1/N) Σ [loss(θ+w) − loss(θ)] w/σ²`. Sees through discontinuities
//!   (it differentiates the noise-convolved loss) at the price of
//!   variance.
//! * **bundled first-order** ([`bundled_fog_estimate`]): the mean of
//!   analytic tape gradients at perturbed points,
//!   `(1/N) Σ ∇loss(θ+w)`. Cheap and low-variance, but on a
//!   piecewise-constant loss every sample lands on a flat piece and the
//!   average is zero — the estimator never sees the jump.
//! * **analytic** ([`analytic_fog_estimate`]): the plain tape gradient at
//!   θ itself.
//!
//! [`sweep_final_state`] runs all three along a grid of initial drop
//! heights, and [`empirical_bias_report`] flags grid points where the
//! zeroth- and first-order estimates disagree beyond their combined
//! sampling noise — the signature of a discontinuity (or of stiffness
//! masquerading as one).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{DVar, Tape};
use crate::config::SimConfig;
use crate::dynamics::{rollout, GeneralizedState, RolloutOptions, Scenario};

#[derive(Debug, Error)]
pub enum SmoothingError {
    #[error("noise std must be positive and finite, got {0}")]
    BadNoise(f64),
    #[error("estimator needs at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("all {tried} samples produced non-finite values")]
    AllSamplesNonFinite { tried: usize },
    #[error("loss at the expansion point is non-finite ({0})")]
    NonFiniteBaseline(f64),
    #[error("analytic gradient at the expansion point is non-finite")]
    NonFiniteGradient,
    #[error("sweep grid must be non-empty and strictly increasing (violated at index {0})")]
    BadGrid(usize),
    #[error("sweep horizon must cover at least one step, got {0} s at dt {1} s")]
    TooShortHorizon(f64, f64),
}

/// Which estimator produced a [`GradientEstimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Zeroth-order Gaussian smoothing.
    Zog,
    /// Mean of analytic gradients at noise-perturbed points.
    BundledFog,
    /// Analytic tape gradient at the point itself.
    AnalyticFog,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Zog => "zog",
            EstimatorKind::BundledFog => "bundled_fog",
            EstimatorKind::AnalyticFog => "analytic_fog",
        }
    }
}

/// A gradient estimate together with the evidence behind it.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub kind: EstimatorKind,
    /// The estimate itself, one entry per parameter coordinate.
    pub value: Vec<f64>,
    /// Samples requested (not the retained count; see `excluded`).
    pub n_samples: usize,
    /// Perturbation scale σ; zero for the analytic kind.
    pub noise_std: f64,
    /// Per-sample contributions actually retained. `value` is their
    /// componentwise mean. Empty for the analytic kind.
    pub samples: Vec<Vec<f64>>,
    /// Samples dropped for producing a non-finite loss or gradient.
    pub excluded: usize,
}

impl GradientEstimate {
    /// Standard error of the mean, per coordinate; zeros when fewer than
    /// two samples were retained.
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        self.std_sample().iter().map(|s| s / n.sqrt()).collect()
    }

    /// Per-sample standard deviation, per coordinate: how much the
    /// gradient varies inside the noise ball. Zeros when fewer than two
    /// samples were retained.
    pub fn std_sample(&self) -> Vec<f64> {
        let dim = self.value.len();
        let n = self.samples.len();
        if n < 2 {
            return vec![0.0; dim];
        }
        (0..dim)
            .map(|i| {
                let mean = self.value[i];
                let ss: f64 = self.samples.iter().map(|s| (s[i] - mean).powi(2)).sum();
                (ss / (n - 1) as f64).sqrt()
            })
            .collect()
    }
}

/// Zeroth-order estimator options. The default is the plain
/// baseline-subtracted single-point form; `antithetic` draws
/// perturbations in ± pairs instead, which cancels the odd error terms on
/// near-linear losses.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZogOptions {
    pub antithetic: bool,
}

/// Derive a child seed from a root seed and a stream index by splitmix64
/// mixing. Fixed function of its inputs, so parallel workers seeded per
/// index reproduce exactly regardless of scheduling.
pub fn split_seed(root: u64, stream: u64) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix64(root ^ splitmix64(stream.wrapping_add(1)))
}

fn sample_noise(rng: &mut ChaCha8Rng, normal: &Normal<f64>, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// Zeroth-order Gaussian-smoothing gradient estimate at `theta0`:
/// `(1/N) Σ [loss(θ0 + w) − loss(θ0)] w/σ²` with `w ~ N(0, σ²I)`.
///
/// Deterministic for a given seed. Samples whose loss comes back
/// non-finite are dropped and counted in
/// [`GradientEstimate::excluded`]; the estimate averages the rest.
pub fn zog_estimate<F>(
    loss: F,
    theta0: &[f64],
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradientEstimate, SmoothingError>
where
    F: FnMut(&[f64]) -> f64,
{
    zog_estimate_with(loss, theta0, sigma, n_samples, seed, ZogOptions::default())
}

/// [`zog_estimate`] with explicit options.
pub fn zog_estimate_with<F>(
    mut loss: F,
    theta0: &[f64],
    sigma: f64,
    n_samples: usize,
    seed: u64,
    options: ZogOptions,
) -> Result<GradientEstimate, SmoothingError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SmoothingError::BadNoise(sigma));
    }
    if n_samples < 2 {
        return Err(SmoothingError::TooFewSamples {
            need: 2,
            got: n_samples,
        });
    }
    let dim = theta0.len();
    let base = loss(theta0);
    if !options.antithetic && !base.is_finite() {
        return Err(SmoothingError::NonFiniteBaseline(base));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
    let inv_var = 1.0 / (sigma * sigma);

    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    let mut excluded = 0usize;
    let mut probe = vec![0.0; dim];

    for _ in 0..n_samples {
        let w = sample_noise(&mut rng, &normal, dim);
        let weight = if options.antithetic {
            // Central form: [loss(θ+w) − loss(θ−w)] / 2, same estimator in
            // expectation, with the even part of the loss cancelled.
            for i in 0..dim {
                probe[i] = theta0[i] + w[i];
            }
            let plus = loss(&probe);
            for i in 0..dim {
                probe[i] = theta0[i] - w[i];
            }
            let minus = loss(&probe);
            (plus - minus) * 0.5
        } else {
            for i in 0..dim {
                probe[i] = theta0[i] + w[i];
            }
            loss(&probe) - base
        };
        if !weight.is_finite() {
            excluded += 1;
            continue;
        }
        samples.push(w.iter().map(|wi| weight * wi * inv_var).collect());
    }

    if samples.is_empty() {
        return Err(SmoothingError::AllSamplesNonFinite { tried: n_samples });
    }
    Ok(GradientEstimate {
        kind: EstimatorKind::Zog,
        value: mean_of(&samples, dim),
        n_samples,
        noise_std: sigma,
        samples,
        excluded,
    })
}

/// Bundled first-order estimate: `(1/N) Σ ∇loss(θ0 + w)` with analytic
/// per-sample gradients. Each sample runs on its own tape; the closure
/// receives the perturbed parameters as tracked variables and returns the
/// loss head.
///
/// Samples with a non-finite loss or gradient are dropped and counted, as
/// in [`zog_estimate`].
pub fn bundled_fog_estimate<F>(
    mut loss: F,
    theta0: &[f64],
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradientEstimate, SmoothingError>
where
    F: FnMut(&Tape, &[DVar]) -> DVar,
{
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SmoothingError::BadNoise(sigma));
    }
    if n_samples < 1 {
        return Err(SmoothingError::TooFewSamples {
            need: 1,
            got: n_samples,
        });
    }
    let dim = theta0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma checked positive");

    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    let mut excluded = 0usize;

    for _ in 0..n_samples {
        let w = sample_noise(&mut rng, &normal, dim);
        match gradient_at(&mut loss, theta0, Some(&w)) {
            Some(g) => samples.push(g),
            None => excluded += 1,
        }
    }

    if samples.is_empty() {
        return Err(SmoothingError::AllSamplesNonFinite { tried: n_samples });
    }
    Ok(GradientEstimate {
        kind: EstimatorKind::BundledFog,
        value: mean_of(&samples, dim),
        n_samples,
        noise_std: sigma,
        samples,
        excluded,
    })
}

/// The analytic tape gradient of `loss` at `theta0`, packaged as an
/// estimate for uniform reporting.
pub fn analytic_fog_estimate<F>(
    mut loss: F,
    theta0: &[f64],
) -> Result<GradientEstimate, SmoothingError>
where
    F: FnMut(&Tape, &[DVar]) -> DVar,
{
    let value =
        gradient_at(&mut loss, theta0, None).ok_or(SmoothingError::NonFiniteGradient)?;
    Ok(GradientEstimate {
        kind: EstimatorKind::AnalyticFog,
        value,
        n_samples: 1,
        noise_std: 0.0,
        samples: Vec::new(),
        excluded: 0,
    })
}

/// Evaluate the loss on a fresh tape at `theta0` (+ optional offset) and
/// pull back the gradient. `None` when the loss or any component is
/// non-finite.
fn gradient_at<F>(loss: &mut F, theta0: &[f64], offset: Option<&[f64]>) -> Option<Vec<f64>>
where
    F: FnMut(&Tape, &[DVar]) -> DVar,
{
    let tape = Tape::new();
    let vars: Vec<DVar> = theta0
        .iter()
        .enumerate()
        .map(|(i, &v)| tape.var(v + offset.map_or(0.0, |w| w[i])))
        .collect();
    let out = loss(&tape, &vars);
    if !out.value().is_finite() {
        return None;
    }
    let grads = out.backward();
    let g: Vec<f64> = vars.iter().map(|v| grads.get(v)).collect();
    if g.iter().all(|x| x.is_finite()) {
        Some(g)
    } else {
        None
    }
}

fn mean_of(samples: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// The three estimates of one scalar loss channel at one sweep point.
#[derive(Clone, Debug)]
pub struct EstimateSet {
    pub zog: GradientEstimate,
    pub bundled: GradientEstimate,
    pub analytic: GradientEstimate,
}

/// Gradient estimates of both sweep channels.
#[derive(Clone, Debug)]
pub struct SweepEstimates {
    /// d(final height)/d(initial height).
    pub height: EstimateSet,
    /// d(final velocity)/d(initial height).
    pub velocity: EstimateSet,
}

/// One grid point of a drop-height sweep.
#[derive(Debug)]
pub struct SweepPoint {
    /// Initial height this point simulates from.
    pub theta: f64,
    /// Vertical position at the horizon.
    pub final_height: f64,
    /// Vertical velocity at the horizon.
    pub final_velocity: f64,
    /// `None` exactly when `error` is set.
    pub estimates: Option<SweepEstimates>,
    /// Rollout failure annotation; the point stays in the grid.
    pub error: Option<String>,
}

/// A completed sweep: the grid, one record per point, and the metadata
/// needed to reproduce it.
#[derive(Debug)]
pub struct SweepResult {
    pub scenario: String,
    pub cfg: SimConfig,
    pub seed: u64,
    pub horizon_steps: usize,
    pub points: Vec<SweepPoint>,
}

/// Evenly spaced grid over `[lo, hi]` with `n` points, as used by the
/// sweep subcommand.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

/// Sweep the initial height of a one-coordinate drop scenario across
/// `grid`, simulating `horizon` seconds per point and recording the final
/// height, the final vertical velocity, and all three gradient estimates
/// of each with respect to the initial height.
///
/// The grid overrides `q[0]`; the remaining initial conditions come from
/// the scenario. Grid points run in parallel; every random stream is
/// derived from `cfg.seed` and the point index by fixed splitting, so the
/// result does not depend on thread count.
pub fn sweep_final_state(
    scenario: &Scenario,
    cfg: &SimConfig,
    grid: &[f64],
    horizon: f64,
) -> Result<SweepResult, SmoothingError> {
    if grid.is_empty() {
        return Err(SmoothingError::BadGrid(0));
    }
    if let Some(i) = (1..grid.len()).find(|&i| grid[i] <= grid[i - 1]) {
        return Err(SmoothingError::BadGrid(i));
    }
    let steps = (horizon / cfg.dt).round() as usize;
    if horizon <= 0.0 || steps == 0 {
        return Err(SmoothingError::TooShortHorizon(horizon, cfg.dt));
    }

    let points: Vec<SweepPoint> = grid
        .par_iter()
        .enumerate()
        .map(|(idx, &theta)| {
            sweep_point(scenario, cfg, theta, steps, split_seed(cfg.seed, idx as u64))
        })
        .collect();

    Ok(SweepResult {
        scenario: scenario.name.to_string(),
        cfg: cfg.clone(),
        seed: cfg.seed,
        horizon_steps: steps,
        points,
    })
}

/// Terminal `(height, velocity)` of a value-only rollout from `h0`;
/// NaNs when the rollout fails so estimator plumbing drops the sample.
fn terminal_values(scenario: &Scenario, cfg: &SimConfig, steps: usize, h0: f64) -> (f64, f64) {
    let mut q = scenario.initial_q.clone();
    q[0] = h0;
    let initial = GeneralizedState::from_values(&q, &scenario.initial_u);
    let traj = rollout(
        scenario.system.as_ref(),
        initial,
        &[],
        cfg,
        &RolloutOptions::values_only(steps),
    );
    if !traj.completed() {
        return (f64::NAN, f64::NAN);
    }
    let last = traj.final_state();
    (last.q[0].value(), last.u[0].value())
}

/// Terminal `(height, velocity)` heads of a taped rollout whose initial
/// height is the tracked variable `h0`.
fn terminal_vars(
    scenario: &Scenario,
    cfg: &SimConfig,
    steps: usize,
    tape: &Tape,
    h0: &DVar,
) -> Option<(DVar, DVar)> {
    let mut q: Vec<DVar> = scenario
        .initial_q
        .iter()
        .map(|&v| DVar::constant(v))
        .collect();
    q[0] = h0.clone();
    let u: Vec<DVar> = scenario
        .initial_u
        .iter()
        .map(|&v| DVar::constant(v))
        .collect();
    let traj = rollout(
        scenario.system.as_ref(),
        GeneralizedState::new(q, u),
        &[],
        cfg,
        &RolloutOptions {
            steps,
            tape: Some(tape.clone()),
            trunc_window: None,
        },
    );
    if !traj.completed() {
        return None;
    }
    let last = traj.final_state();
    Some((last.q[0].clone(), last.u[0].clone()))
}

fn sweep_point(
    scenario: &Scenario,
    cfg: &SimConfig,
    theta: f64,
    steps: usize,
    point_seed: u64,
) -> SweepPoint {
    let (final_height, final_velocity) = terminal_values(scenario, cfg, steps, theta);
    if !(final_height.is_finite() && final_velocity.is_finite()) {
        return SweepPoint {
            theta,
            final_height,
            final_velocity,
            estimates: None,
            error: Some(format!("rollout from h0 = {theta} diverged")),
        };
    }

    let sigma = cfg.zog_sigma;
    let n = cfg.zog_samples;
    let zog_seed = split_seed(point_seed, 1);
    let fog_seed = split_seed(point_seed, 2);
    let theta0 = [theta];

    let channel = |height_channel: bool| -> Result<EstimateSet, SmoothingError> {
        let pick_value = move |pair: (f64, f64)| if height_channel { pair.0 } else { pair.1 };
        let zog = zog_estimate(
            |t: &[f64]| pick_value(terminal_values(scenario, cfg, steps, t[0])),
            &theta0,
            sigma,
            n,
            zog_seed,
        )?;
        let tape_loss = |tape: &Tape, vars: &[DVar]| -> DVar {
            match terminal_vars(scenario, cfg, steps, tape, &vars[0]) {
                Some((h, v)) => {
                    if height_channel {
                        h
                    } else {
                        v
                    }
                }
                None => DVar::constant(f64::NAN),
            }
        };
        let bundled = bundled_fog_estimate(tape_loss, &theta0, sigma, n, fog_seed)?;
        let analytic = analytic_fog_estimate(tape_loss, &theta0)?;
        Ok(EstimateSet {
            zog,
            bundled,
            analytic,
        })
    };

    match (channel(true), channel(false)) {
        (Ok(height), Ok(velocity)) => SweepPoint {
            theta,
            final_height,
            final_velocity,
            estimates: Some(SweepEstimates { height, velocity }),
            error: None,
        },
        (h, v) => {
            let err = h.err().or(v.err()).expect("one channel failed");
            SweepPoint {
                theta,
                final_height,
                final_velocity,
                estimates: None,
                error: Some(err.to_string()),
            }
        }
    }
}

/// One row of the bias report: a grid point, a loss channel, and how far
/// the bundled first-order estimate sits from the zeroth-order one.
#[derive(Clone, Debug)]
pub struct BiasRow {
    pub theta: f64,
    /// `"final_height"` or `"final_velocity"`.
    pub channel: &'static str,
    pub zog: f64,
    pub bundled: f64,
    /// `|bundled − zog|`.
    pub diff: f64,
    /// Per-sample standard deviations: gradient spread inside the noise
    /// ball.
    pub zog_sd: f64,
    pub bundled_sd: f64,
    /// Standard errors of the two means.
    pub zog_se: f64,
    pub bundled_se: f64,
    /// Set when `diff` exceeds three combined standard errors: the
    /// estimators disagree beyond their sampling noise. The yardstick for
    /// the flag is the error of the means, not the per-sample spread — a
    /// real bias stays fixed as samples accumulate while the standard
    /// errors shrink, so it always surfaces at high enough sample counts.
    pub flagged: bool,
}

/// Per-point comparison of the stochastic and bundled estimators over a
/// sweep. Failed grid points are skipped.
#[derive(Debug, Default)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    pub fn flagged(&self) -> impl Iterator<Item = &BiasRow> {
        self.rows.iter().filter(|r| r.flagged)
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged().count()
    }
}

pub fn empirical_bias_report(sweep: &SweepResult) -> BiasReport {
    let mut rows = Vec::new();
    for point in &sweep.points {
        let Some(est) = &point.estimates else { continue };
        for (channel, set) in [
            ("final_height", &est.height),
            ("final_velocity", &est.velocity),
        ] {
            let zog = set.zog.value[0];
            let bundled = set.bundled.value[0];
            let zog_sd = set.zog.std_sample()[0];
            let bundled_sd = set.bundled.std_sample()[0];
            let zog_se = set.zog.std_error()[0];
            let bundled_se = set.bundled.std_error()[0];
            let diff = (bundled - zog).abs();
            let combined = (zog_se * zog_se + bundled_se * bundled_se).sqrt();
            rows.push(BiasRow {
                theta: point.theta,
                channel,
                zog,
                bundled,
                diff,
                zog_sd,
                bundled_sd,
                zog_se,
                bundled_se,
                flagged: diff > 3.0 * combined,
            });
        }
    }
    BiasReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ContactModel, Relaxation};
    use crate::dynamics::scenario_by_name;

    fn sphere_cfg(model: ContactModel) -> SimConfig {
        let mut cfg = SimConfig::for_model(model);
        cfg.scenario = "falling-sphere-1d".into();
        // Zeroed so hand-computed ballistics (−g·T, ½gT(T−Δt)) hold exactly;
        // the default armature rescales every acceleration by m/(m+arm).
        cfg.armature = 0.0;
        cfg
    }

    #[test]
    fn zog_recovers_a_linear_slope() {
        let est = zog_estimate(|t| 3.0 * t[0], &[0.7], 0.1, 1000, 7).unwrap();
        assert!((est.value[0] - 3.0).abs() < 0.3, "got {}", est.value[0]);
        assert_eq!(est.excluded, 0);
        assert_eq!(est.samples.len(), 1000);
    }

    #[test]
    fn zog_on_a_constant_loss_is_exactly_zero() {
        let est = zog_estimate(|_| 4.25, &[1.0, -2.0], 0.05, 64, 3).unwrap();
        assert_eq!(est.value, vec![0.0, 0.0]);
        assert!(est.samples.iter().all(|s| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn zog_sees_a_step_as_the_gaussian_density() {
        // d/dθ of the σ-smoothed unit step at its riser is the density
        // value 1/(σ√2π) ≈ 3.989 for σ = 0.1.
        let est = zog_estimate(
            |t| if t[0] > 0.0 { 1.0 } else { 0.0 },
            &[0.0],
            0.1,
            10_000,
            11,
        )
        .unwrap();
        let expect = 1.0 / (0.1 * (2.0 * std::f64::consts::PI).sqrt());
        assert!(
            (est.value[0] - expect).abs() < 0.1 * expect,
            "got {} want {expect}",
            est.value[0]
        );
    }

    #[test]
    fn zog_is_deterministic_per_seed() {
        let run = || zog_estimate(|t| t[0] * t[0] - t[0], &[0.4], 0.02, 50, 99).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.value, b.value);
        assert_eq!(a.samples, b.samples);
        let c = zog_estimate(|t| t[0] * t[0] - t[0], &[0.4], 0.02, 50, 100).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn zog_rejects_bad_parameters() {
        assert!(matches!(
            zog_estimate(|_| 0.0, &[0.0], 0.0, 10, 0),
            Err(SmoothingError::BadNoise(_))
        ));
        assert!(matches!(
            zog_estimate(|_| 0.0, &[0.0], 0.1, 1, 0),
            Err(SmoothingError::TooFewSamples { need: 2, got: 1 })
        ));
    }

    #[test]
    fn zog_excludes_non_finite_samples_and_errors_when_none_remain() {
        // NaN on the positive side: roughly half the draws are dropped.
        let est = zog_estimate(
            |t| if t[0] > 0.0 { f64::NAN } else { t[0] },
            &[0.0],
            0.1,
            200,
            5,
        )
        .unwrap();
        assert!(est.excluded > 50 && est.excluded < 150, "{}", est.excluded);
        assert_eq!(est.samples.len() + est.excluded, 200);

        let all_bad = zog_estimate(|t| if t[0] == 0.0 { 0.0 } else { f64::NAN }, &[0.0], 0.1, 20, 5);
        assert!(matches!(
            all_bad,
            Err(SmoothingError::AllSamplesNonFinite { tried: 20 })
        ));

        let bad_base = zog_estimate(|_| f64::INFINITY, &[0.0], 0.1, 20, 5);
        assert!(matches!(bad_base, Err(SmoothingError::NonFiniteBaseline(_))));
    }

    #[test]
    fn antithetic_pairs_cancel_the_even_part_of_the_loss() {
        // The central form [f(θ+w) − f(θ−w)]/2 removes everything even in
        // w. A pure parabola probed at its vertex is all even part, so
        // every paired sample is literally zero while the one-sided form
        // sees the full f″ noise.
        let parabola = |t: &[f64]| 5.0 * t[0] * t[0];
        let paired = zog_estimate_with(
            parabola,
            &[0.0],
            0.1,
            64,
            21,
            ZogOptions { antithetic: true },
        )
        .unwrap();
        assert_eq!(paired.value[0], 0.0);
        assert!(paired.samples.iter().all(|s| s[0] == 0.0));
        let plain = zog_estimate(parabola, &[0.0], 0.1, 64, 21).unwrap();
        assert!(plain.std_error()[0] > 0.0);

        // An odd loss has no even part to cancel: both forms reduce to the
        // same per-sample weights, so pairing costs nothing there.
        let linear = |t: &[f64]| 3.0 * t[0];
        let one_sided = zog_estimate(linear, &[0.0], 0.1, 64, 9).unwrap();
        let central = zog_estimate_with(
            linear,
            &[0.0],
            0.1,
            64,
            9,
            ZogOptions { antithetic: true },
        )
        .unwrap();
        assert_eq!(one_sided.value, central.value);
        assert_eq!(one_sided.samples, central.samples);
    }

    #[test]
    fn zog_is_unbiased_on_random_affine_functions() {
        // Twenty seeded affine losses; each estimate must sit within three
        // standard errors of the true slope.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20u64 {
            let a: f64 = rng.gen_range(-5.0..5.0);
            let b: f64 = rng.gen_range(-4.0..4.0);
            let theta0: f64 = rng.gen_range(-2.0..2.0);
            let est =
                zog_estimate(|t| a + b * t[0], &[theta0], 0.05, 400, split_seed(13, trial))
                    .unwrap();
            let se = est.std_error()[0];
            assert!(
                (est.value[0] - b).abs() <= 3.0 * se,
                "trial {trial}: slope {b}, estimate {} ± {se}",
                est.value[0]
            );
        }
    }

    #[test]
    fn bundled_estimates_a_smooth_gradient() {
        let est = bundled_fog_estimate(
            |_tape, v| &v[0] * &v[0],
            &[1.0],
            0.01,
            100,
            17,
        )
        .unwrap();
        assert!((est.value[0] - 2.0).abs() < 0.01, "got {}", est.value[0]);
    }

    #[test]
    fn bundled_is_blind_to_a_step() {
        // A piecewise-constant loss has zero gradient almost everywhere,
        // so every per-sample analytic gradient is zero and so is the mean.
        let est = bundled_fog_estimate(
            |_tape, v| {
                let one = DVar::constant(1.0);
                let zero = DVar::constant(0.0);
                DVar::select(v[0].value() > 0.0, &one, &zero)
            },
            &[0.0],
            0.1,
            50,
            23,
        )
        .unwrap();
        assert_eq!(est.value[0], 0.0);
        assert!(est.samples.iter().all(|s| s[0] == 0.0));
    }

    #[test]
    fn bundled_matches_analytic_in_the_zero_noise_limit() {
        // f(θ) = θ·exp(θ), f'(θ) = (1 + θ)·exp(θ).
        let loss = |_t: &Tape, v: &[DVar]| &v[0] * &v[0].exp();
        let bundled = bundled_fog_estimate(loss, &[0.3], 1e-8, 20, 31).unwrap();
        let analytic = analytic_fog_estimate(loss, &[0.3]).unwrap();
        assert!((bundled.value[0] - analytic.value[0]).abs() < 1e-6);
        let expect = (1.0 + 0.3) * 0.3f64.exp();
        assert!((analytic.value[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn bundled_is_deterministic_per_seed() {
        let loss = |_t: &Tape, v: &[DVar]| v[0].sigmoid();
        let a = bundled_fog_estimate(loss, &[0.2], 0.05, 40, 8).unwrap();
        let b = bundled_fog_estimate(loss, &[0.2], 0.05, 40, 8).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn split_seed_separates_streams() {
        let s0 = split_seed(0, 0);
        let s1 = split_seed(0, 1);
        let s2 = split_seed(1, 0);
        assert_ne!(s0, s1);
        assert_ne!(s0, s2);
        assert_eq!(s0, split_seed(0, 0));
    }

    #[test]
    fn sweep_far_above_critical_is_free_fall() {
        // From 2 m the sphere cannot reach the ground in 0.5 s, so the
        // horizon state is ballistic: velocity −g·T and d(height)/dh0 = 1.
        let cfg = sphere_cfg(ContactModel::Hard);
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        let sweep = sweep_final_state(&scenario, &cfg, &[2.0], 0.5).unwrap();
        let p = &sweep.points[0];
        assert!(p.error.is_none());
        assert!((p.final_velocity - (-9.81 * 0.5)).abs() < 1e-12);
        let est = p.estimates.as_ref().unwrap();
        assert_eq!(est.height.analytic.value[0], 1.0);
        assert_eq!(est.velocity.analytic.value[0], 0.0);
    }

    #[test]
    fn sweep_below_critical_rests_on_the_ground() {
        let cfg = sphere_cfg(ContactModel::Hard);
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        let sweep = sweep_final_state(&scenario, &cfg, &[0.3], 0.5).unwrap();
        let p = &sweep.points[0];
        assert!(p.final_velocity.abs() < 1e-2, "{}", p.final_velocity);
        assert!(p.final_height.abs() < 0.05, "{}", p.final_height);
    }

    #[test]
    fn sweep_grid_straddling_critical_shows_the_velocity_jump() {
        // The critical height separates starts that touch down within the
        // horizon (inelastic impact leaves the sphere at rest, velocity
        // ≈ 0) from starts that stay ballistic all the way (velocity
        // −g·T). Final velocity therefore jumps by ≈ g·T across one grid
        // step. Under the fixed step the deepest reachable midpoint fixes
        // the boundary at ½gT(T − Δt).
        let cfg = sphere_cfg(ContactModel::Hard);
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        let grid = linear_grid(1.15, 1.25, 11);
        let sweep = sweep_final_state(&scenario, &cfg, &grid, 0.5).unwrap();
        let velocities: Vec<f64> = sweep.points.iter().map(|p| p.final_velocity).collect();
        let (mut jump_at, mut jump) = (0, 0.0);
        for i in 1..velocities.len() {
            let d = (velocities[i] - velocities[i - 1]).abs();
            if d > jump {
                jump = d;
                jump_at = i;
            }
        }
        let expect = 9.81 * 0.5;
        assert!(
            (jump - expect).abs() < 0.05 * expect,
            "jump {jump}, rest-to-ballistic gap {expect}"
        );
        let critical = 0.5 * 9.81 * 0.5 * (0.5 - cfg.dt);
        let (lo, hi) = (
            sweep.points[jump_at - 1].theta,
            sweep.points[jump_at].theta,
        );
        assert!(
            lo < critical && critical < hi,
            "jump between {lo} and {hi}, predicted at {critical}"
        );
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let cfg = sphere_cfg(ContactModel::Hard);
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        assert!(matches!(
            sweep_final_state(&scenario, &cfg, &[], 0.5),
            Err(SmoothingError::BadGrid(0))
        ));
        assert!(matches!(
            sweep_final_state(&scenario, &cfg, &[0.5, 0.5], 0.5),
            Err(SmoothingError::BadGrid(1))
        ));
        assert!(matches!(
            sweep_final_state(&scenario, &cfg, &[0.5], 0.0),
            Err(SmoothingError::TooShortHorizon(..))
        ));
    }

    #[test]
    fn sweep_is_deterministic_across_runs() {
        let mut cfg = sphere_cfg(ContactModel::Smoothed);
        cfg.zog_samples = 20;
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        let grid = linear_grid(0.4, 1.6, 7);
        let a = sweep_final_state(&scenario, &cfg, &grid, 0.5).unwrap();
        let b = sweep_final_state(&scenario, &cfg, &grid, 0.5).unwrap();
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_eq!(pa.final_height.to_bits(), pb.final_height.to_bits());
            let (ea, eb) = (
                pa.estimates.as_ref().unwrap(),
                pb.estimates.as_ref().unwrap(),
            );
            assert_eq!(ea.height.zog.value, eb.height.zog.value);
            assert_eq!(ea.velocity.bundled.value, eb.velocity.bundled.value);
            assert_eq!(ea.height.analytic.value, eb.height.analytic.value);
        }
    }

    #[test]
    fn smoothed_model_analytic_gradient_agrees_with_zog() {
        // The smoothed model is differentiable, so the tape gradient and
        // the zeroth-order estimate target the same landscape. The
        // yardstick is the per-sample spread, not the error of the mean:
        // the analytic value is a point evaluation while the estimate
        // averages the σ-ball, and which step the sphere lands on shifts
        // inside that ball, so the two differ by a genuine in-ball
        // variation that more samples never shrink.
        let mut cfg = sphere_cfg(ContactModel::Smoothed);
        cfg.relaxation = Relaxation::Spectral;
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        let sweep = sweep_final_state(&scenario, &cfg, &[0.45], 0.5).unwrap();
        let est = sweep.points[0].estimates.as_ref().unwrap();
        for set in [&est.height, &est.velocity] {
            let spread = set.zog.std_sample()[0];
            assert!(
                (set.analytic.value[0] - set.zog.value[0]).abs() <= 2.0 * spread,
                "analytic {} zog {} spread {spread}",
                set.analytic.value[0],
                set.zog.value[0],
            );
        }
    }

    #[test]
    fn smoothed_model_gradients_stay_sign_consistent_near_critical() {
        // Near the smeared critical height the final velocity slides from
        // rest toward free fall as the start rises, so pointwise and
        // ball-averaged slopes must both come out strongly negative and
        // agree within the in-ball spread.
        let cfg = sphere_cfg(ContactModel::Smoothed);
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        let sweep = sweep_final_state(&scenario, &cfg, &[1.19], 0.5).unwrap();
        let set = &sweep.points[0].estimates.as_ref().unwrap().velocity;
        let (an, zog) = (set.analytic.value[0], set.zog.value[0]);
        assert!(an < -10.0, "analytic slope {an}");
        assert!(zog < -10.0, "zog slope {zog}");
        assert!(
            (an - zog).abs() <= 2.0 * set.zog.std_sample()[0],
            "analytic {an} zog {zog} spread {}",
            set.zog.std_sample()[0]
        );
    }

    #[test]
    fn smoothed_model_bundled_gradient_agrees_with_analytic() {
        // Same yardstick as the zeroth-order comparison: bundling averages
        // per-sample tape gradients over the σ-ball, so it sits within the
        // in-ball spread of the point evaluation.
        let mut cfg = sphere_cfg(ContactModel::Smoothed);
        cfg.zog_samples = 200;
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        let sweep = sweep_final_state(&scenario, &cfg, &[0.7], 0.5).unwrap();
        let set = &sweep.points[0].estimates.as_ref().unwrap().height;
        let spread = set.bundled.std_sample()[0];
        assert!(
            (set.bundled.value[0] - set.analytic.value[0]).abs() <= 2.0 * spread,
            "bundled {} analytic {} spread {spread}",
            set.bundled.value[0],
            set.analytic.value[0],
        );
    }

    #[test]
    fn hard_contact_bundled_gradient_misses_the_jump_zog_sees() {
        // At the critical height the final velocity steps from rest to
        // −g·T but is flat on either side: the bundled estimator averages
        // flat pieces while the zeroth-order one integrates the jump.
        let cfg = sphere_cfg(ContactModel::Hard);
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();

        // Locate the jump by bisecting on "touched down within T".
        let steps = (0.5 / cfg.dt).round() as usize;
        let touched = |h0: f64| terminal_values(&scenario, &cfg, steps, h0).1.abs() < 1.0;
        let (mut lo, mut hi) = (1.0, 1.4);
        assert!(touched(lo) && !touched(hi));
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if touched(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let critical = 0.5 * (lo + hi);

        let velocity_loss = |t: &[f64]| terminal_values(&scenario, &cfg, steps, t[0]).1;
        let zog = zog_estimate(velocity_loss, &[critical], 0.02, 100, 77).unwrap();
        let bundled = bundled_fog_estimate(
            |tape, vars| match terminal_vars(&scenario, &cfg, steps, tape, &vars[0]) {
                Some((_, v)) => v,
                None => DVar::constant(f64::NAN),
            },
            &[critical],
            0.02,
            100,
            78,
        )
        .unwrap();
        assert!(
            bundled.value[0].abs() < 0.1 * zog.value[0].abs(),
            "bundled {} vs zog {}",
            bundled.value[0],
            zog.value[0]
        );
    }

    #[test]
    fn bias_report_flags_the_discontinuity_and_only_it() {
        let mut cfg = sphere_cfg(ContactModel::Hard);
        cfg.zog_samples = 100;
        let scenario = scenario_by_name("falling-sphere-1d", &cfg).unwrap();
        // Three points well below, near, and well above the critical
        // height ≈ 1.2 m.
        let grid = [0.5, 1.2, 1.9];
        let sweep = sweep_final_state(&scenario, &cfg, &grid, 0.5).unwrap();
        let report = empirical_bias_report(&sweep);
        assert_eq!(report.rows.len(), 6);

        let near: Vec<&BiasRow> = report
            .rows
            .iter()
            .filter(|r| r.theta == 1.2 && r.channel == "final_velocity")
            .collect();
        assert!(near[0].flagged, "velocity estimators should clash at the jump");

        // Far above: free fall, velocity constant in h0 — both estimators
        // are exactly zero and nothing is flagged.
        let far: Vec<&BiasRow> = report.rows.iter().filter(|r| r.theta == 1.9).collect();
        for row in far {
            assert!(!row.flagged, "unexpected flag at {} / {}", row.theta, row.channel);
            if row.channel == "final_velocity" {
                assert_eq!(row.zog, 0.0);
                assert_eq!(row.bundled, 0.0);
            }
        }
    }
}
