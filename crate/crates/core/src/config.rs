//! Run configuration shared by the library and the command-line tools.
//!
//! Config files are line-oriented `key = value` pairs with `#` comments.
//! Unknown keys and out-of-range values are hard errors, reported with the
//! line they came from. Every output file echoes the parsed config in its
//! metadata header (`# cfg: key = value`), and re-parsing that echo yields
//! an identical [`SimConfig`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Which contact formulation a step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContactModel {
    /// Penalty spring-damper forces with explicit friction saturation.
    Soft,
    /// Midpoint time-stepping with an impulse solve and a unit-step
    /// activation weight.
    Hard,
    /// Same time-stepping, with the step replaced by a logistic weight of
    /// stiffness kappa and a widened activation band.
    Smoothed,
}

impl ContactModel {
    pub fn as_str(self) -> &'static str {
        match self {
            ContactModel::Soft => "soft",
            ContactModel::Hard => "hard",
            ContactModel::Smoothed => "smoothed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft" => Some(ContactModel::Soft),
            "hard" => Some(ContactModel::Hard),
            "smoothed" => Some(ContactModel::Smoothed),
            _ => None,
        }
    }
}

impl fmt::Display for ContactModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relaxation factor rule for the impulse iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// `r_j = 1 / (1 + sum_k det(G_jk))` — the published rule, determinant
    /// accumulation included.
    Paper,
    /// `r_j = 1 / lambda_max(G_jj)` — the textbook per-block step size,
    /// kept as an ablation switch.
    Spectral,
}

impl Relaxation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relaxation::Paper => "paper",
            Relaxation::Spectral => "spectral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Relaxation::Paper),
            "spectral" => Some(Relaxation::Spectral),
            _ => None,
        }
    }
}

/// Built-in optimization task for `optimize`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    SphereThrow,
    HopperHop,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SphereThrow => "sphere-throw",
            TaskKind::HopperHop => "hopper-hop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sphere-throw" => Some(TaskKind::SphereThrow),
            "hopper-hop" => Some(TaskKind::HopperHop),
            _ => None,
        }
    }
}

/// Complete, validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub scenario: String,
    pub task: TaskKind,
    pub model: ContactModel,
    /// Step size in seconds.
    pub dt: f64,
    /// Gravitational acceleration, applied along -y.
    pub gravity: f64,
    /// Episode length override; scenarios carry their own default.
    pub episode_seconds: Option<f64>,
    /// Initial-state overrides, validated against the scenario dimension
    /// at use.
    pub initial_q: Option<Vec<f64>>,
    pub initial_u: Option<Vec<f64>>,
    /// Penalty normal stiffness.
    pub kp: f64,
    /// Penalty normal damping.
    pub kd: f64,
    /// Tangential velocity gain of the penalty friction law.
    pub kf: f64,
    /// Friction coefficient stamped onto contacts.
    pub mu: f64,
    /// Logistic stiffness of the smoothed activation.
    pub kappa: f64,
    /// Final kappa of the optimization curriculum (equal to `kappa` means
    /// a constant schedule).
    pub kappa_end: f64,
    /// Fixed impulse-solver sweep count.
    pub solver_iters: usize,
    /// Extra diagonal inertia; keeps assembled mass matrices comfortably
    /// positive definite.
    pub armature: f64,
    pub relaxation: Relaxation,
    /// Reuse the previous step's impulses as the solver starting point.
    pub warm_start: bool,
    /// Time-of-impact position correction for newly activated contacts.
    pub toi: bool,
    pub seed: u64,
    pub sweep_min: f64,
    pub sweep_max: f64,
    pub sweep_points: usize,
    /// Perturbation scale of the zeroth-order estimator.
    pub zog_sigma: f64,
    /// Sample count of the stochastic estimators.
    pub zog_samples: usize,
    /// Gradient-descent step size; tasks carry their own default.
    pub lr: Option<f64>,
    pub epochs: usize,
    /// Replay the optimized decision under this model after training; a
    /// transfer report is produced when it differs from `model`.
    pub eval_model: Option<ContactModel>,
    /// Backprop-through-time truncation window in steps; absent means the
    /// full horizon.
    pub trunc_window: Option<usize>,
}

/// Armature default when the key is absent: the velocity-level models get
/// a small regularizing inertia, the penalty model none.
pub fn default_armature(model: ContactModel) -> f64 {
    match model {
        ContactModel::Soft => 0.0,
        ContactModel::Hard | ContactModel::Smoothed => 0.01,
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scenario: "falling-sphere-1d".to_string(),
            task: TaskKind::SphereThrow,
            model: ContactModel::Smoothed,
            dt: 0.01,
            gravity: 9.81,
            episode_seconds: None,
            initial_q: None,
            initial_u: None,
            kp: 12.0e3,
            kd: 3.0,
            kf: 9.0e2,
            mu: 0.8,
            kappa: 100.0,
            kappa_end: 100.0,
            solver_iters: 8,
            armature: default_armature(ContactModel::Smoothed),
            relaxation: Relaxation::Paper,
            warm_start: false,
            toi: false,
            seed: 0,
            sweep_min: 0.1,
            sweep_max: 2.0,
            sweep_points: 200,
            zog_sigma: 0.02,
            zog_samples: 100,
            lr: None,
            epochs: 200,
            eval_model: None,
            trunc_window: None,
        }
    }
}

impl SimConfig {
    /// Default configuration for one contact model, armature resolved.
    pub fn for_model(model: ContactModel) -> Self {
        SimConfig {
            model,
            armature: default_armature(model),
            ..SimConfig::default()
        }
    }

    /// Activation band: hard contact only considers touching candidates,
    /// the smoothed model pulls in everything within a meter of contact so
    /// near-misses keep a gradient path.
    pub fn activation_threshold(&self) -> f64 {
        match self.model {
            ContactModel::Smoothed => -1.0,
            _ => 0.0,
        }
    }

    /// Range and sanity checks; every constructor funnels through this.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let chk = |ok: bool, msg: &str| -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invariant(msg.to_string()))
            }
        };
        chk(self.dt > 0.0 && self.dt.is_finite(), "dt must be positive and finite")?;
        chk(self.gravity >= 0.0 && self.gravity.is_finite(), "gravity must be >= 0")?;
        chk(self.kp > 0.0, "kp must be > 0")?;
        chk(self.kd >= 0.0, "kd must be >= 0")?;
        chk(self.kf >= 0.0, "kf must be >= 0")?;
        chk(self.mu >= 0.0, "mu must be >= 0")?;
        chk(self.kappa > 0.0, "kappa must be > 0")?;
        chk(self.kappa_end > 0.0, "kappa_end must be > 0")?;
        chk(self.solver_iters >= 1, "solver_iters must be >= 1")?;
        chk(self.armature >= 0.0, "armature must be >= 0")?;
        chk(
            self.sweep_min < self.sweep_max,
            "sweep_min must be below sweep_max",
        )?;
        chk(self.sweep_points >= 2, "sweep_points must be >= 2")?;
        chk(self.zog_sigma > 0.0, "zog_sigma must be > 0")?;
        chk(self.zog_samples >= 1, "zog_samples must be >= 1")?;
        chk(self.epochs >= 1, "epochs must be >= 1")?;
        if let Some(t) = self.episode_seconds {
            chk(t > 0.0 && t.is_finite(), "episode_seconds must be positive")?;
        }
        if let Some(lr) = self.lr {
            chk(lr > 0.0 && lr.is_finite(), "lr must be positive")?;
        }
        if let Some(w) = self.trunc_window {
            chk(w >= 1, "trunc_window must be >= 1")?;
        }
        Ok(())
    }

    /// Serialize as `key = value` lines, in a fixed order, such that
    /// parsing them back reproduces `self` exactly. Optional fields are
    /// written only when set.
    pub fn echo_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut kv = |k: &str, v: String| out.push(format!("{k} = {v}"));
        kv("scenario", self.scenario.clone());
        kv("task", self.task.as_str().to_string());
        kv("model", self.model.to_string());
        kv("dt", fmt_f64(self.dt));
        kv("gravity", fmt_f64(self.gravity));
        if let Some(t) = self.episode_seconds {
            kv("episode_seconds", fmt_f64(t));
        }
        if let Some(q) = &self.initial_q {
            kv("initial_q", fmt_f64_list(q));
        }
        if let Some(u) = &self.initial_u {
            kv("initial_u", fmt_f64_list(u));
        }
        kv("kp", fmt_f64(self.kp));
        kv("kd", fmt_f64(self.kd));
        kv("kf", fmt_f64(self.kf));
        kv("mu", fmt_f64(self.mu));
        kv("kappa", fmt_f64(self.kappa));
        kv("kappa_end", fmt_f64(self.kappa_end));
        kv("solver_iters", self.solver_iters.to_string());
        kv("armature", fmt_f64(self.armature));
        kv("relaxation", self.relaxation.as_str().to_string());
        kv("warm_start", fmt_bool(self.warm_start));
        kv("toi", fmt_bool(self.toi));
        kv("seed", self.seed.to_string());
        kv("sweep_min", fmt_f64(self.sweep_min));
        kv("sweep_max", fmt_f64(self.sweep_max));
        kv("sweep_points", self.sweep_points.to_string());
        kv("zog_sigma", fmt_f64(self.zog_sigma));
        kv("zog_samples", self.zog_samples.to_string());
        if let Some(lr) = self.lr {
            kv("lr", fmt_f64(lr));
        }
        kv("epochs", self.epochs.to_string());
        if let Some(m) = self.eval_model {
            kv("eval_model", m.to_string());
        }
        if let Some(w) = self.trunc_window {
            kv("trunc_window", w.to_string());
        }
        out
    }
}

fn fmt_f64(v: f64) -> String {
    // `{}` prints the shortest digits that round-trip, which keeps echoed
    // configs exact.
    format!("{v}")
}

fn fmt_f64_list(vs: &[f64]) -> String {
    vs.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", ")
}

fn fmt_bool(b: bool) -> String {
    (if b { "on" } else { "off" }).to_string()
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config invariant violated: {0}")]
    Invariant(String),
    #[error("line {line}: config invariant violated: {msg}")]
    InvariantAt { line: usize, msg: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parse config text. Later assignments win; keys never seen keep their
/// defaults. The armature default tracks the final model unless the key
/// was given explicitly.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut cfg = SimConfig::default();
    let mut armature_set = false;
    let mut kappa_end_set = false;
    let mut assigned_at: HashMap<String, usize> = HashMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => {
                return Err(ConfigError::Malformed {
                    line: line_no,
                    text: line.to_string(),
                })
            }
        };
        let bad = |msg: String| ConfigError::BadValue {
            line: line_no,
            key: key.to_string(),
            msg,
        };
        let parse_f64 = |v: &str| -> Result<f64, ConfigError> {
            v.parse::<f64>()
                .map_err(|_| bad(format!("`{v}` is not a number")))
        };
        let parse_usize = |v: &str| -> Result<usize, ConfigError> {
            v.parse::<usize>()
                .map_err(|_| bad(format!("`{v}` is not a non-negative integer")))
        };
        let parse_bool = |v: &str| -> Result<bool, ConfigError> {
            match v {
                "on" | "true" => Ok(true),
                "off" | "false" => Ok(false),
                _ => Err(bad(format!("`{v}` is not on/off"))),
            }
        };
        let parse_list = |v: &str| -> Result<Vec<f64>, ConfigError> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("`{}` is not a number", s.trim())))
                })
                .collect()
        };

        match key {
            "scenario" => cfg.scenario = value.to_string(),
            "task" => {
                cfg.task = TaskKind::parse(value)
                    .ok_or_else(|| bad(format!("`{value}` is not sphere-throw/hopper-hop")))?
            }
            "model" => {
                cfg.model = ContactModel::parse(value)
                    .ok_or_else(|| bad(format!("`{value}` is not soft/hard/smoothed")))?
            }
            "dt" => cfg.dt = parse_f64(value)?,
            "gravity" => cfg.gravity = parse_f64(value)?,
            "episode_seconds" => cfg.episode_seconds = Some(parse_f64(value)?),
            "initial_q" => cfg.initial_q = Some(parse_list(value)?),
            "initial_u" => cfg.initial_u = Some(parse_list(value)?),
            "kp" => cfg.kp = parse_f64(value)?,
            "kd" => cfg.kd = parse_f64(value)?,
            "kf" => cfg.kf = parse_f64(value)?,
            "mu" => cfg.mu = parse_f64(value)?,
            "kappa" => cfg.kappa = parse_f64(value)?,
            "kappa_end" => {
                cfg.kappa_end = parse_f64(value)?;
                kappa_end_set = true;
            }
            "solver_iters" => cfg.solver_iters = parse_usize(value)?,
            "armature" => {
                cfg.armature = parse_f64(value)?;
                armature_set = true;
            }
            "relaxation" => {
                cfg.relaxation = Relaxation::parse(value)
                    .ok_or_else(|| bad(format!("`{value}` is not paper/spectral")))?
            }
            "warm_start" => cfg.warm_start = parse_bool(value)?,
            "toi" => cfg.toi = parse_bool(value)?,
            "seed" => {
                cfg.seed = value
                    .parse::<u64>()
                    .map_err(|_| bad(format!("`{value}` is not a u64 seed")))?
            }
            "sweep_min" => cfg.sweep_min = parse_f64(value)?,
            "sweep_max" => cfg.sweep_max = parse_f64(value)?,
            "sweep_points" => cfg.sweep_points = parse_usize(value)?,
            "zog_sigma" => cfg.zog_sigma = parse_f64(value)?,
            "zog_samples" => cfg.zog_samples = parse_usize(value)?,
            "lr" => cfg.lr = Some(parse_f64(value)?),
            "epochs" => cfg.epochs = parse_usize(value)?,
            "eval_model" => {
                cfg.eval_model = Some(
                    ContactModel::parse(value)
                        .ok_or_else(|| bad(format!("`{value}` is not soft/hard/smoothed")))?,
                )
            }
            "trunc_window" => cfg.trunc_window = Some(parse_usize(value)?),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.to_string(),
                })
            }
        }
        assigned_at.insert(key.to_string(), line_no);
    }

    if !armature_set {
        cfg.armature = default_armature(cfg.model);
    }
    if !kappa_end_set {
        cfg.kappa_end = cfg.kappa;
    }
    match cfg.validate() {
        Ok(()) => Ok(cfg),
        // Point the error at the latest assignment of a key the message
        // names; invariants can only break when a line touched them.
        Err(ConfigError::Invariant(msg)) => {
            let line = msg
                .split_whitespace()
                .filter_map(|tok| assigned_at.get(tok))
                .max()
                .copied();
            Err(match line {
                Some(line) => ConfigError::InvariantAt { line, msg },
                None => ConfigError::Invariant(msg),
            })
        }
        Err(other) => Err(other),
    }
}

pub fn parse_config_file(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}
