//! Built-in desk-scale scenarios.
//!
//! Each scenario packages a [`SystemModel`] with default initial
//! conditions and, where the continuous-time solution is simple, an
//! analytic oracle for cross-checking rollouts. All systems live in a
//! y-up world with the ground plane at zero; mass matrices are
//! closed-form and contacts are analytic point-plane gaps.

use crate::autodiff::DVar;
use crate::config::SimConfig;
use crate::dynamics::{ContactPoint, GeneralizedState, SystemModel};
use crate::linalg::DMat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{got}`; available: {available}")]
    Unknown { got: String, available: String },
    #[error("initial {field} has dimension {got}, scenario `{name}` has {expected} DoF")]
    BadInitial {
        name: &'static str,
        field: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Closed-form ballistic reference for a point mass dropped onto the
/// ground with inelastic contact: free fall until impact, rest after.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticOracle {
    pub gravity: f64,
}

impl AnalyticOracle {
    /// Time to fall from rest at height `h0` to the ground (0 when
    /// already touching or below).
    pub fn impact_time(&self, h0: f64) -> f64 {
        if h0 <= 0.0 {
            0.0
        } else {
            (2.0 * h0 / self.gravity).sqrt()
        }
    }

    /// Speed at impact when dropped from rest at `h0`.
    pub fn impact_speed(&self, h0: f64) -> f64 {
        if h0 <= 0.0 {
            0.0
        } else {
            (2.0 * self.gravity * h0).sqrt()
        }
    }

    /// Height at time `t`, resting on the ground after impact.
    pub fn height_at(&self, h0: f64, t: f64) -> f64 {
        if t >= self.impact_time(h0) {
            0.0
        } else {
            h0 - 0.5 * self.gravity * t * t
        }
    }

    /// Vertical velocity at time `t` (zero after the inelastic impact).
    pub fn velocity_at(&self, h0: f64, t: f64) -> f64 {
        if t >= self.impact_time(h0) {
            0.0
        } else {
            -self.gravity * t
        }
    }
}

/// A named system plus its default initial conditions.
pub struct Scenario {
    pub name: &'static str,
    pub summary: &'static str,
    pub system: Box<dyn SystemModel + Send + Sync>,
    pub initial_q: Vec<f64>,
    pub initial_u: Vec<f64>,
    /// Episode length used when the config does not specify one.
    pub default_episode: f64,
    pub oracle: Option<AnalyticOracle>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("dof", &self.system.dof())
            .field("initial_q", &self.initial_q)
            .field("initial_u", &self.initial_u)
            .finish_non_exhaustive()
    }
}

impl Scenario {
    pub fn initial_state(&self) -> GeneralizedState {
        GeneralizedState::from_values(&self.initial_q, &self.initial_u)
    }

    /// Step count for this scenario under `cfg` (config episode length
    /// wins over the scenario default).
    pub fn steps_for(&self, cfg: &SimConfig) -> usize {
        let episode = cfg.episode_seconds.unwrap_or(self.default_episode);
        (episode / cfg.dt).round().max(0.0) as usize
    }
}

/// One point mass on a vertical axis over the ground: the minimal
/// contact system, and the sweep workhorse.
pub struct FallingSphere1d {
    pub mass: f64,
    pub gravity: f64,
    pub mu: f64,
}

impl SystemModel for FallingSphere1d {
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
            mu: self.mu,
        }]
    }

    fn potential_energy(&self, q: &[DVar]) -> DVar {
        &q[0] * (self.mass * self.gravity)
    }
}

/// Two independent point masses dropped side by side — released at
/// slightly different heights they land inside the same detection
/// interval, the classic fixed-step discretization artifact.
pub struct TwoSpheres1d {
    pub mass: f64,
    pub gravity: f64,
    pub mu: f64,
}

impl SystemModel for TwoSpheres1d {
    fn dof(&self) -> usize {
        2
    }

    fn mass_matrix(&self, _q: &[DVar]) -> DMat {
        vec![
            vec![DVar::constant(self.mass), DVar::constant(0.0)],
            vec![DVar::constant(0.0), DVar::constant(self.mass)],
        ]
    }

    fn bias_force(&self, _q: &[DVar], _u: &[DVar], _action: &[DVar]) -> Vec<DVar> {
        let w = -self.mass * self.gravity;
        vec![DVar::constant(w), DVar::constant(w)]
    }

    fn contact_candidates(&self, q: &[DVar], _u: &[DVar]) -> Vec<ContactPoint> {
        vec![
            ContactPoint {
                tag: "sphere-a",
                gap: -&q[0],
                normal_dir: [0.0, 1.0],
                normal_row: vec![DVar::constant(1.0), DVar::constant(0.0)],
                tangent_rows: vec![],
                mu: self.mu,
            },
            ContactPoint {
                tag: "sphere-b",
                gap: -&q[1],
                normal_dir: [0.0, 1.0],
                normal_row: vec![DVar::constant(0.0), DVar::constant(1.0)],
                tangent_rows: vec![],
                mu: self.mu,
            },
        ]
    }

    fn potential_energy(&self, q: &[DVar]) -> DVar {
        &(&q[0] + &q[1]) * (self.mass * self.gravity)
    }
}

/// A box on the ground with one horizontal and one vertical coordinate:
/// Coulomb stick-slip in its simplest form.
pub struct SlidingBox2d {
    pub mass: f64,
    pub gravity: f64,
    pub mu: f64,
}

impl SystemModel for SlidingBox2d {
    fn dof(&self) -> usize {
        2
    }

    fn mass_matrix(&self, _q: &[DVar]) -> DMat {
        vec![
            vec![DVar::constant(self.mass), DVar::constant(0.0)],
            vec![DVar::constant(0.0), DVar::constant(self.mass)],
        ]
    }

    fn bias_force(&self, _q: &[DVar], _u: &[DVar], _action: &[DVar]) -> Vec<DVar> {
        vec![
            DVar::constant(0.0),
            DVar::constant(-self.mass * self.gravity),
        ]
    }

    fn contact_candidates(&self, q: &[DVar], _u: &[DVar]) -> Vec<ContactPoint> {
        vec![ContactPoint {
            tag: "ground",
            gap: -&q[1],
            normal_dir: [0.0, 1.0],
            normal_row: vec![DVar::constant(0.0), DVar::constant(1.0)],
            tangent_rows: vec![vec![DVar::constant(1.0), DVar::constant(0.0)]],
            mu: self.mu,
        }]
    }

    fn potential_energy(&self, q: &[DVar]) -> DVar {
        &q[1] * (self.mass * self.gravity)
    }
}

/// A one-legged vertical hopper: a heavy body rides a sprung, damped,
/// actuated leg above a light foot. The single action channel adds a
/// clamped push along the leg.
pub struct Hopper2d {
    pub body_mass: f64,
    pub foot_mass: f64,
    pub gravity: f64,
    pub mu: f64,
    pub leg_stiffness: f64,
    pub leg_damping: f64,
    pub rest_length: f64,
    pub force_limit: f64,
}

impl Hopper2d {
    /// Body height at which the leg spring carries the body's weight.
    pub fn standing_body_height(&self) -> f64 {
        self.rest_length - self.body_mass * self.gravity / self.leg_stiffness
    }
}

impl SystemModel for Hopper2d {
    fn dof(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn mass_matrix(&self, _q: &[DVar]) -> DMat {
        vec![
            vec![DVar::constant(self.body_mass), DVar::constant(0.0)],
            vec![DVar::constant(0.0), DVar::constant(self.foot_mass)],
        ]
    }

    fn bias_force(&self, q: &[DVar], u: &[DVar], action: &[DVar]) -> Vec<DVar> {
        let extension = &q[0] - &q[1];
        let rate = &u[0] - &u[1];
        let push = action[0]
            .max_const(-self.force_limit)
            .min_const(self.force_limit);
        // Positive leg force pushes the body up and the foot down.
        let leg = &(&(-&(&extension - self.rest_length) * self.leg_stiffness)
            - &(&rate * self.leg_damping))
            + &push;
        vec![
            &leg - self.body_mass * self.gravity,
            &(-&leg) - self.foot_mass * self.gravity,
        ]
    }

    fn contact_candidates(&self, q: &[DVar], _u: &[DVar]) -> Vec<ContactPoint> {
        vec![ContactPoint {
            tag: "foot",
            gap: -&q[1],
            normal_dir: [0.0, 1.0],
            normal_row: vec![DVar::constant(0.0), DVar::constant(1.0)],
            tangent_rows: vec![],
            mu: self.mu,
        }]
    }

    fn potential_energy(&self, q: &[DVar]) -> DVar {
        let extension = &q[0] - &q[1];
        let stretch = &extension - self.rest_length;
        let spring = &(&stretch * &stretch) * (0.5 * self.leg_stiffness);
        let gravity =
            &(&q[0] * (self.body_mass * self.gravity)) + &(&q[1] * (self.foot_mass * self.gravity));
        &gravity + &spring
    }
}

/// A planar disk with a spin coordinate: friction at the ground couples
/// slide and spin, so an impulsive landing transfers linear momentum
/// into rotation until the contact point stops slipping.
pub struct BouncingSphere3d {
    pub mass: f64,
    pub gravity: f64,
    pub mu: f64,
    pub radius: f64,
}

impl BouncingSphere3d {
    fn inertia(&self) -> f64 {
        0.4 * self.mass * self.radius * self.radius
    }
}

impl SystemModel for BouncingSphere3d {
    fn dof(&self) -> usize {
        3
    }

    fn mass_matrix(&self, _q: &[DVar]) -> DMat {
        let mut m = vec![vec![DVar::constant(0.0); 3]; 3];
        m[0][0] = DVar::constant(self.mass);
        m[1][1] = DVar::constant(self.mass);
        m[2][2] = DVar::constant(self.inertia());
        m
    }

    fn bias_force(&self, _q: &[DVar], _u: &[DVar], _action: &[DVar]) -> Vec<DVar> {
        vec![
            DVar::constant(0.0),
            DVar::constant(-self.mass * self.gravity),
            DVar::constant(0.0),
        ]
    }

    fn contact_candidates(&self, q: &[DVar], _u: &[DVar]) -> Vec<ContactPoint> {
        // Contact-point slip is u_x + r * omega; rolling makes it zero.
        vec![ContactPoint {
            tag: "ground",
            gap: -&q[1],
            normal_dir: [0.0, 1.0],
            normal_row: vec![
                DVar::constant(0.0),
                DVar::constant(1.0),
                DVar::constant(0.0),
            ],
            tangent_rows: vec![vec![
                DVar::constant(1.0),
                DVar::constant(0.0),
                DVar::constant(self.radius),
            ]],
            mu: self.mu,
        }]
    }

    fn potential_energy(&self, q: &[DVar]) -> DVar {
        &q[1] * (self.mass * self.gravity)
    }
}

/// All built-in scenarios with their default initial conditions.
/// Gravity and friction come from the configuration; masses and scenario
/// geometry are fixed, documented constants.
pub fn builtin_scenarios(cfg: &SimConfig) -> Vec<Scenario> {
    let g = cfg.gravity;
    let mu = cfg.mu;

    let hopper = Hopper2d {
        body_mass: 45.0,
        foot_mass: 5.0,
        gravity: g,
        mu,
        leg_stiffness: 2.0e4,
        leg_damping: 100.0,
        rest_length: 0.5,
        force_limit: 400.0,
    };
    let hopper_stand = hopper.standing_body_height();

    vec![
        Scenario {
            name: "falling-sphere-1d",
            summary: "one point mass dropped onto the ground",
            system: Box::new(FallingSphere1d {
                mass: 1.0,
                gravity: g,
                mu,
            }),
            initial_q: vec![1.0],
            initial_u: vec![0.0],
            default_episode: 2.0,
            oracle: Some(AnalyticOracle { gravity: g }),
        },
        Scenario {
            name: "two-spheres-1d",
            summary: "two independent masses released a hair apart land in the same step",
            system: Box::new(TwoSpheres1d {
                mass: 1.0,
                gravity: g,
                mu,
            }),
            initial_q: vec![1.0, 1.01],
            initial_u: vec![0.0, 0.0],
            default_episode: 2.0,
            oracle: Some(AnalyticOracle { gravity: g }),
        },
        Scenario {
            name: "sliding-box-2d",
            summary: "a box sliding on the ground until friction sticks it",
            system: Box::new(SlidingBox2d {
                mass: 1.0,
                gravity: g,
                mu,
            }),
            initial_q: vec![0.0, 0.0],
            initial_u: vec![0.5, 0.0],
            default_episode: 1.0,
            oracle: None,
        },
        Scenario {
            name: "hopper-2d",
            summary: "a heavy body on a sprung actuated leg over a light foot",
            system: Box::new(hopper),
            initial_q: vec![hopper_stand, 0.0],
            initial_u: vec![0.0, 0.0],
            default_episode: 2.5,
            oracle: None,
        },
        Scenario {
            name: "bouncing-sphere-3d",
            summary: "a disk with spin: landing converts slide into roll through friction",
            system: Box::new(BouncingSphere3d {
                mass: 1.0,
                gravity: g,
                mu,
                radius: 0.1,
            }),
            initial_q: vec![0.0, 1.0, 0.0],
            initial_u: vec![1.0, 0.0, 0.0],
            default_episode: 2.0,
            oracle: None,
        },
    ]
}

/// Fetch a scenario by name, applying the config's initial-condition
/// overrides.
pub fn scenario_by_name(name: &str, cfg: &SimConfig) -> Result<Scenario, ScenarioError> {
    let mut scenarios = builtin_scenarios(cfg);
    let position = scenarios.iter().position(|s| s.name == name);
    let Some(idx) = position else {
        let available = scenarios
            .iter()
            .map(|s| s.name)
            .collect::<Vec<_>>()
            .join(", ");
        return Err(ScenarioError::Unknown {
            got: name.to_string(),
            available,
        });
    };
    let mut scenario = scenarios.swap_remove(idx);

    if let Some(q) = &cfg.initial_q {
        if q.len() != scenario.system.dof() {
            return Err(ScenarioError::BadInitial {
                name: scenario.name,
                field: "q",
                got: q.len(),
                expected: scenario.system.dof(),
            });
        }
        scenario.initial_q.clone_from(q);
    }
    if let Some(u) = &cfg.initial_u {
        if u.len() != scenario.system.dof() {
            return Err(ScenarioError::BadInitial {
                name: scenario.name,
                field: "u",
                got: u.len(),
                expected: scenario.system.dof(),
            });
        }
        scenario.initial_u.clone_from(u);
    }
    Ok(scenario)
}
