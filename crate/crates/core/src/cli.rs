//! Command-line front end: flag and config handling, the five experiment
//! subcommands, and deterministic CSV/SVG emission.
//!
//! Every subcommand writes its artifacts into `--out` and echoes the
//! effective configuration into each file's header, so a result can be
//! reproduced from the file alone. All randomness is derived from the
//! config seed; with a fixed seed every command produces byte-identical
//! output across runs. Thread count is controlled by `RAYON_NUM_THREADS`
//! alone and never changes results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{finite_diff_gradient, DVar, Tape};
use crate::config::{
    default_armature, parse_config, ConfigError, ContactModel, SimConfig,
};
use crate::dynamics::{
    rollout, scenario_by_name, GeneralizedState, RolloutOptions, Scenario, ScenarioError,
    Trajectory,
};
use crate::smoothing::{linear_grid, split_seed, sweep_final_state, SmoothingError, SweepPoint};
use crate::trajopt::{
    build_task, gd_optimize, transfer_evaluate, KappaSchedule, StateSlot, StopReason,
    TrajOptError,
};

/// Sweep horizon when the config gives no episode length: short enough
/// that the ballistic touch-down threshold of the default scenario falls
/// inside the default `0.1..2.0` grid.
const SWEEP_DEFAULT_HORIZON: f64 = 0.5;

/// Minimum solver sweep count of the penetration comparison. The relaxed
/// impulse iteration converges geometrically, and at the small default
/// sweep count a mass-heavy stack still carries a visible impulse deficit
/// that would be measured as penetration; the comparison is about the
/// contact models, so it solves to convergence instead.
const PENETRATION_SOLVER_ITERS: usize = 64;

/// Stored action schedule of the penetration comparison: a pumping gait
/// that takes the hopper through repeated flight and landing phases.
const HOPPER_ACTIONS: &str = include_str!("../data/hopper_actions.csv");

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Opt(#[from] TrajOptError),
}

impl CliError {
    /// Exit-code contract: 1 for usage and configuration problems, 2 for
    /// numerical failures. Success — including an expected divergence
    /// early-stop — exits 0.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 2,
            CliError::Opt(e) => match e {
                TrajOptError::Rollout { .. }
                | TrajOptError::NonFiniteLoss(_)
                | TrajOptError::NonFiniteGradient { .. } => 2,
                _ => 1,
            },
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "diffcontact",
    about = "Contact-model experiments on a differentiable rigid-body simulator"
)]
pub struct Cli {
    /// Configuration file (`key = value` lines, `#` comments); defaults
    /// apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory the output files are written into.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// RNG seed override.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Contact model override.
    #[arg(long, global = true, value_name = "soft|hard|smoothed")]
    model: Option<String>,
    /// Smoothing stiffness override.
    #[arg(long, global = true, value_name = "F64")]
    kappa: Option<f64>,
    /// Time-of-impact correction override.
    #[arg(long, global = true, value_name = "on|off")]
    toi: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Roll the configured scenario forward and write the trajectory CSV.
    Simulate,
    /// Sweep the initial height and record final state plus all gradient
    /// estimates per grid point.
    Sweep,
    /// Compare mean penetration depth across contact models on one
    /// scenario.
    Penetration,
    /// Check analytic gradients against finite differences, primitives
    /// and full rollouts alike.
    Gradcheck,
    /// Run gradient descent on the configured task and write the trace.
    Optimize,
}

/// Parse the command line and run; the binary's whole `main`.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run_command(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run_command(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|source| CliError::Io {
        path: cli.out.clone(),
        source,
    })?;
    match cli.command {
        Cmd::Simulate => cmd_simulate(&cfg, &cli.out),
        Cmd::Sweep => cmd_sweep(&cfg, &cli.out),
        Cmd::Penetration => cmd_penetration(&cfg, &cli.out),
        Cmd::Gradcheck => cmd_gradcheck(&cfg, &cli.out),
        Cmd::Optimize => cmd_optimize(&cfg, &cli.out),
    }
}

/// Resolve the configuration: the file (or defaults), then the override
/// flags. Overrides are appended as config lines and the whole text is
/// re-parsed, so they follow exactly the file semantics — in particular a
/// `--model` override re-resolves the armature default and `--kappa`
/// moves `kappa_end` along unless the file pinned either explicitly.
fn effective_config(cli: &Cli) -> Result<SimConfig, CliError> {
    let mut text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|source| {
            CliError::Config(ConfigError::Io {
                path: path.display().to_string(),
                source,
            })
        })?,
        None => String::new(),
    };
    if let Some(raw) = &cli.model {
        let model = ContactModel::parse(raw).ok_or_else(|| {
            CliError::Usage(format!("--model: `{raw}` is not soft/hard/smoothed"))
        })?;
        text.push_str(&format!("\nmodel = {}", model.as_str()));
    }
    if let Some(kappa) = cli.kappa {
        text.push_str(&format!("\nkappa = {kappa}"));
    }
    if let Some(raw) = &cli.toi {
        match raw.as_str() {
            "on" | "off" => text.push_str(&format!("\ntoi = {raw}")),
            _ => return Err(CliError::Usage(format!("--toi: `{raw}` is not on/off"))),
        }
    }
    if let Some(seed) = cli.seed {
        text.push_str(&format!("\nseed = {seed}"));
    }
    Ok(parse_config(&text)?)
}

// ---------------------------------------------------------------------
// output plumbing

/// `# cfg:` header lines placed at the top of every CSV.
fn cfg_header(cfg: &SimConfig) -> String {
    let mut out = String::new();
    for line in cfg.echo_lines() {
        out.push_str("# cfg: ");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Recover the configuration a CSV was produced with from its `# cfg:`
/// header; the round-trip is exact.
pub fn parse_echoed_config(text: &str) -> Result<SimConfig, ConfigError> {
    let body: String = text
        .lines()
        .filter_map(|l| l.strip_prefix("# cfg: "))
        .map(|l| format!("{l}\n"))
        .collect();
    parse_config(&body)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------
// simulate

pub fn cmd_simulate(cfg: &SimConfig, out: &Path) -> Result<(), CliError> {
    let scenario = scenario_by_name(&cfg.scenario, cfg)?;
    let steps = scenario.steps_for(cfg);
    let traj = rollout(
        scenario.system.as_ref(),
        scenario.initial_state(),
        &[],
        cfg,
        &RolloutOptions::values_only(steps),
    );

    let mut csv = cfg_header(cfg);
    csv.push_str(
        "# one row per step: the post-step state and the contact data of the step producing it\n",
    );
    csv.push_str(
        "# d_<tag> = penetration depth (m, positive into the ground); n_<tag>/t<i>_<tag> = \
         normal/tangential contact force (N) under the soft model, impulse (N*s) otherwise\n",
    );
    let dof = scenario.system.dof();
    let mut header = String::from("step,time");
    for i in 0..dof {
        header.push_str(&format!(",q{i}"));
    }
    for i in 0..dof {
        header.push_str(&format!(",u{i}"));
    }
    let layout: Vec<(&str, usize)> = traj
        .diags
        .first()
        .map(|row| row.iter().map(|d| (d.tag, d.tangent.len())).collect())
        .unwrap_or_default();
    for (tag, n_tan) in &layout {
        header.push_str(&format!(",d_{tag},n_{tag}"));
        for i in 0..*n_tan {
            header.push_str(&format!(",t{i}_{tag}"));
        }
    }
    csv.push_str(&header);
    csv.push('\n');

    for (s, diag_row) in traj.diags.iter().enumerate() {
        let state = &traj.states[s + 1];
        let time = (s + 1) as f64 * cfg.dt;
        let mut row = format!("{},{}", s + 1, time);
        for v in state.q.iter().chain(state.u.iter()) {
            row.push_str(&format!(",{}", v.value()));
        }
        for d in diag_row {
            row.push_str(&format!(",{},{}", d.gap.value(), d.normal.value()));
            for t in &d.tangent {
                row.push_str(&format!(",{}", t.value()));
            }
        }
        csv.push_str(&row);
        csv.push('\n');
    }

    if let Some(failure) = &traj.failure {
        csv.push_str(&format!("# rollout failed: {failure}\n"));
        write_file(&out.join("simulate.csv"), &csv)?;
        return Err(CliError::Numerical(format!(
            "rollout failed: {failure} (partial trajectory written)"
        )));
    }
    write_file(&out.join("simulate.csv"), &csv)?;
    println!(
        "simulated {} for {} steps ({} s)",
        scenario.name,
        steps,
        steps as f64 * cfg.dt
    );
    Ok(())
}

// ---------------------------------------------------------------------
// sweep

pub fn cmd_sweep(cfg: &SimConfig, out: &Path) -> Result<(), CliError> {
    let scenario = scenario_by_name(&cfg.scenario, cfg)?;
    let grid = linear_grid(cfg.sweep_min, cfg.sweep_max, cfg.sweep_points);
    let horizon = cfg.episode_seconds.unwrap_or(SWEEP_DEFAULT_HORIZON);
    let result = sweep_final_state(&scenario, cfg, &grid, horizon)?;

    // One CSV per gradient channel; both carry the full documented column
    // set so each file stands alone.
    for (file, channel) in [("sweep_height.csv", 0usize), ("sweep_velocity.csv", 1usize)] {
        let mut csv = cfg_header(cfg);
        csv.push_str(&format!(
            "# gradients of the final {} with respect to the initial height h0\n",
            if channel == 0 { "height" } else { "velocity" }
        ));
        csv.push_str("h0,final_h,final_v,grad_analytic,grad_bundled,grad_zog,zog_std,fog_std\n");
        for point in &result.points {
            csv.push_str(&sweep_row(point, channel));
            if let Some(err) = &point.error {
                csv.push_str(&format!("# error at h0 = {}: {err}\n", point.theta));
            }
        }
        write_file(&out.join(file), &csv)?;
    }

    let values = [
        Series {
            label: "final height (m)".into(),
            points: result
                .points
                .iter()
                .map(|p| (p.theta, p.final_height))
                .collect(),
        },
        Series {
            label: "final velocity (m/s)".into(),
            points: result
                .points
                .iter()
                .map(|p| (p.theta, p.final_velocity))
                .collect(),
        },
    ];
    emit_svg(
        &values,
        &ChartSpec {
            title: format!("{}: final state vs initial height", scenario.name),
            x_label: "initial height h0 (m)".into(),
            y_label: "final state".into(),
        },
        cfg,
        &out.join("sweep_values.svg"),
    )?;

    for (file, channel, title) in [
        ("sweep_grad_height.svg", 0usize, "final height"),
        ("sweep_grad_velocity.svg", 1usize, "final velocity"),
    ] {
        let pick = |f: &dyn Fn(&SweepPoint) -> f64| -> Vec<(f64, f64)> {
            result.points.iter().map(|p| (p.theta, f(p))).collect()
        };
        let est = |p: &SweepPoint, which: usize| -> f64 {
            p.estimates
                .as_ref()
                .map(|e| {
                    let set = if channel == 0 { &e.height } else { &e.velocity };
                    match which {
                        0 => set.analytic.value[0],
                        1 => set.bundled.value[0],
                        _ => set.zog.value[0],
                    }
                })
                .unwrap_or(f64::NAN)
        };
        let series = [
            Series {
                label: "analytic".into(),
                points: pick(&|p| est(p, 0)),
            },
            Series {
                label: "bundled".into(),
                points: pick(&|p| est(p, 1)),
            },
            Series {
                label: "zeroth-order".into(),
                points: pick(&|p| est(p, 2)),
            },
        ];
        emit_svg(
            &series,
            &ChartSpec {
                title: format!("{}: d({title})/dh0", scenario.name),
                x_label: "initial height h0 (m)".into(),
                y_label: format!("d({title})/dh0"),
            },
            cfg,
            &out.join(file),
        )?;
    }

    let failed = result.points.iter().filter(|p| p.error.is_some()).count();
    println!(
        "swept {} over {} points ({} s horizon), {failed} failed",
        scenario.name, cfg.sweep_points, horizon
    );
    Ok(())
}

fn sweep_row(point: &SweepPoint, channel: usize) -> String {
    let (ga, gb, gz, zs, fs) = match &point.estimates {
        Some(e) => {
            let set = if channel == 0 { &e.height } else { &e.velocity };
            (
                set.analytic.value[0],
                set.bundled.value[0],
                set.zog.value[0],
                set.zog.std_error()[0],
                set.bundled.std_error()[0],
            )
        }
        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };
    format!(
        "{},{},{},{},{},{},{},{}\n",
        point.theta, point.final_height, point.final_velocity, ga, gb, gz, zs, fs
    )
}

// ---------------------------------------------------------------------
// penetration

/// One contact-model variant of the penetration comparison.
pub struct PenetrationRow {
    pub label: &'static str,
    pub model: ContactModel,
    pub kappa: f64,
    pub toi: bool,
    /// Mean depth over steps with at least one active contact; 0 when the
    /// rollout never touches.
    pub mean_depth: f64,
    pub contact_steps: usize,
    pub flight_steps: usize,
    /// Per-step mean depth over active contacts, 0 on contact-free steps.
    pub series: Vec<f64>,
}

pub struct PenetrationReport {
    pub scenario: String,
    pub steps: usize,
    pub solver_iters: usize,
    pub rows: Vec<PenetrationRow>,
}

/// Run the five-variant penetration comparison on the configured
/// scenario: penalty, smoothed at kappa 100 and 1000, hard, and hard with
/// the time-of-impact correction. The hopper replays the stored pumping
/// schedule; every other scenario rolls out unactuated.
pub fn penetration_report(cfg: &SimConfig) -> Result<PenetrationReport, CliError> {
    let solver_iters = cfg.solver_iters.max(PENETRATION_SOLVER_ITERS);
    // An armature differing from the model default was set deliberately;
    // carry it across variants, otherwise resolve per variant model.
    let explicit_armature =
        (cfg.armature != default_armature(cfg.model)).then_some(cfg.armature);
    let actions: Vec<Vec<f64>> = if cfg.scenario == "hopper-2d" {
        parse_action_rows(HOPPER_ACTIONS)?
    } else {
        Vec::new()
    };

    let variants: [(&'static str, ContactModel, f64, bool); 5] = [
        ("soft", ContactModel::Soft, cfg.kappa, false),
        ("smoothed-k100", ContactModel::Smoothed, 100.0, false),
        ("smoothed-k1000", ContactModel::Smoothed, 1000.0, false),
        ("hard", ContactModel::Hard, cfg.kappa, false),
        ("hard-toi", ContactModel::Hard, cfg.kappa, true),
    ];

    let mut rows = Vec::with_capacity(variants.len());
    let mut steps_out = 0;
    for (label, model, kappa, toi) in variants {
        let mut vcfg = cfg.clone();
        vcfg.model = model;
        vcfg.kappa = kappa;
        vcfg.kappa_end = kappa;
        vcfg.toi = toi;
        vcfg.solver_iters = solver_iters;
        vcfg.armature = explicit_armature.unwrap_or_else(|| default_armature(model));
        let scenario = scenario_by_name(&vcfg.scenario, &vcfg)?;
        let steps = scenario.steps_for(&vcfg);
        steps_out = steps;
        let traj = rollout(
            scenario.system.as_ref(),
            scenario.initial_state(),
            &actions,
            &vcfg,
            &RolloutOptions::values_only(steps),
        );
        if let Some(failure) = &traj.failure {
            return Err(CliError::Numerical(format!(
                "penetration variant {label}: {failure}"
            )));
        }
        let mut series = Vec::with_capacity(traj.diags.len());
        let mut sum = 0.0;
        let mut contact_steps = 0usize;
        for row in &traj.diags {
            let active: Vec<f64> = row
                .iter()
                .filter(|d| d.normal.value() > 1e-12)
                .map(|d| d.gap.value().max(0.0))
                .collect();
            if active.is_empty() {
                series.push(0.0);
            } else {
                let depth = active.iter().sum::<f64>() / active.len() as f64;
                series.push(depth);
                sum += depth;
                contact_steps += 1;
            }
        }
        rows.push(PenetrationRow {
            label,
            model,
            kappa,
            toi,
            mean_depth: if contact_steps == 0 {
                0.0
            } else {
                sum / contact_steps as f64
            },
            contact_steps,
            flight_steps: series.len() - contact_steps,
            series,
        });
    }

    Ok(PenetrationReport {
        scenario: cfg.scenario.clone(),
        steps: steps_out,
        solver_iters,
        rows,
    })
}

pub fn cmd_penetration(cfg: &SimConfig, out: &Path) -> Result<(), CliError> {
    let report = penetration_report(cfg)?;

    let mut csv = cfg_header(cfg);
    csv.push_str(&format!(
        "# comparison solves contacts at solver_iters = {} so depths reflect the models, \
         not solver residual\n",
        report.solver_iters
    ));
    csv.push_str("label,model,kappa,toi,mean_penetration_m,contact_steps,flight_steps\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.label,
            row.model.as_str(),
            row.kappa,
            if row.toi { "on" } else { "off" },
            row.mean_depth,
            row.contact_steps,
            row.flight_steps
        ));
    }
    write_file(&out.join("penetration.csv"), &csv)?;

    let mut series_csv = cfg_header(cfg);
    series_csv.push_str("# per-step mean penetration depth (m) over active contacts\n");
    let mut header = String::from("step,time");
    for row in &report.rows {
        header.push_str(&format!(",{}", row.label));
    }
    series_csv.push_str(&header);
    series_csv.push('\n');
    for s in 0..report.steps {
        let mut line = format!("{},{}", s + 1, (s + 1) as f64 * cfg.dt);
        for row in &report.rows {
            line.push_str(&format!(",{}", row.series[s]));
        }
        series_csv.push_str(&line);
        series_csv.push('\n');
    }
    write_file(&out.join("penetration_series.csv"), &series_csv)?;

    let mut order: Vec<&PenetrationRow> = report.rows.iter().collect();
    order.sort_by(|a, b| b.mean_depth.total_cmp(&a.mean_depth));
    println!(
        "penetration ordering on {} ({} steps), deepest first:",
        report.scenario, report.steps
    );
    for row in order {
        println!(
            "  {:>14}  mean {:.6e} m over {} contact steps ({} in flight)",
            row.label, row.mean_depth, row.contact_steps, row.flight_steps
        );
    }
    Ok(())
}

fn parse_action_rows(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|_| {
            CliError::Usage(format!("action file line {}: `{line}` is not numeric", idx + 1))
        })?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------
// gradcheck

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradStatus {
    Pass,
    Fail,
    /// The two finite-difference probes straddle a contact event of a
    /// non-smooth model; the analytic/numeric comparison is undefined
    /// there and skipped by design.
    Excluded,
}

impl GradStatus {
    fn as_str(self) -> &'static str {
        match self {
            GradStatus::Pass => "pass",
            GradStatus::Fail => "fail",
            GradStatus::Excluded => "excluded-by-design",
        }
    }
}

pub struct GradcheckRow {
    pub check: String,
    pub scenario: String,
    pub model: String,
    pub theta: f64,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
    pub status: GradStatus,
}

pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub failures: usize,
    pub excluded: usize,
    /// Largest relative error over the non-excluded rows.
    pub max_rel_err: f64,
}

const BPTT_RTOL: f64 = 1e-3;
const BPTT_ATOL: f64 = 1e-8;
const PRIM_TOL: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Scalar probe functions exercising every differentiable primitive.
fn primitive_battery() -> Vec<(&'static str, Box<dyn Fn(&DVar) -> DVar>, f64)> {
    vec![
        ("add_mul", Box::new(|x: &DVar| &(x + 2.0) * x), 0.7),
        ("sub_div", Box::new(|x: &DVar| &(x - 3.0) / &(x + 1.5)), 0.7),
        ("neg_square", Box::new(|x: &DVar| -&x.square()), 1.3),
        ("abs_pos", Box::new(|x: &DVar| x.abs()), 0.8),
        ("abs_neg", Box::new(|x: &DVar| x.abs()), -0.6),
        ("exp", Box::new(|x: &DVar| (x * 0.5).exp()), 1.1),
        ("sqrt", Box::new(|x: &DVar| (x + 2.0).sqrt()), 1.7),
        ("recip", Box::new(|x: &DVar| x.recip()), 0.8),
        ("sigmoid", Box::new(|x: &DVar| x.sigmoid()), 0.3),
        ("square", Box::new(|x: &DVar| x.square()), -1.2),
        ("min_var", Box::new(|x: &DVar| x.min(&(-x + 2.0))), 0.7),
        ("max_var", Box::new(|x: &DVar| x.max(&(-x + 2.0))), 0.7),
        ("min_const", Box::new(|x: &DVar| x.min_const(0.5)), 0.2),
        ("max_const", Box::new(|x: &DVar| x.max_const(0.0)), -0.4),
        (
            "chain",
            Box::new(|x: &DVar| &(x.square() + 1.0).sqrt() * &x.sigmoid()),
            0.9,
        ),
        (
            "poly",
            Box::new(|x: &DVar| &(&(x - 1.0) * &(x + 2.0)) * x),
            0.9,
        ),
        (
            "rational",
            Box::new(|x: &DVar| x / &(x.square() + 1.0)),
            -0.7,
        ),
    ]
}

/// One full-rollout probe: which coordinate is perturbed and over what
/// range; the objective is always the final `q[0]`.
struct BpttProbe {
    check: &'static str,
    scenario: &'static str,
    slot: StateSlot,
    lo: f64,
    hi: f64,
    episode: Option<f64>,
}

fn bptt_probes() -> Vec<BpttProbe> {
    vec![
        BpttProbe {
            check: "bptt",
            scenario: "falling-sphere-1d",
            slot: StateSlot::Q(0),
            lo: 0.6,
            hi: 1.9,
            episode: Some(0.5),
        },
        BpttProbe {
            check: "bptt",
            scenario: "two-spheres-1d",
            slot: StateSlot::Q(0),
            lo: 0.6,
            hi: 1.0,
            episode: Some(0.5),
        },
        BpttProbe {
            check: "bptt",
            scenario: "sliding-box-2d",
            slot: StateSlot::U(0),
            lo: 0.4,
            hi: 1.5,
            episode: None,
        },
        // Short enough that the box is still in the clean sliding regime
        // at the end for every initial speed in the range; the penalty
        // friction law is smooth there.
        BpttProbe {
            check: "bptt-slide",
            scenario: "sliding-box-2d",
            slot: StateSlot::U(0),
            lo: 0.9,
            hi: 1.5,
            episode: Some(0.1),
        },
        BpttProbe {
            check: "bptt",
            scenario: "hopper-2d",
            slot: StateSlot::U(0),
            lo: 0.5,
            hi: 2.5,
            episode: None,
        },
        BpttProbe {
            check: "bptt",
            scenario: "bouncing-sphere-3d",
            slot: StateSlot::U(0),
            lo: 0.5,
            hi: 2.0,
            episode: None,
        },
    ]
}

/// Differentiate the final `q[0]` with respect to `slot` through a taped
/// rollout.
fn bptt_scalar(
    scenario: &Scenario,
    cfg: &SimConfig,
    slot: StateSlot,
    theta: f64,
    steps: usize,
) -> Result<f64, String> {
    let tape = Tape::new();
    let var = tape.var(theta);
    let mut q: Vec<DVar> = scenario.initial_q.iter().map(|&v| DVar::constant(v)).collect();
    let mut u: Vec<DVar> = scenario.initial_u.iter().map(|&v| DVar::constant(v)).collect();
    match slot {
        StateSlot::Q(i) => q[i] = var.clone(),
        StateSlot::U(i) => u[i] = var.clone(),
    }
    let traj = rollout(
        scenario.system.as_ref(),
        GeneralizedState::new(q, u),
        &[],
        cfg,
        &RolloutOptions {
            steps,
            tape: Some(tape),
            trunc_window: None,
        },
    );
    if let Some(failure) = &traj.failure {
        return Err(failure.to_string());
    }
    let loss = traj.final_state().q[0].clone();
    Ok(loss.backward().get(&var))
}

/// Value-only rollout: final `q[0]` plus the trajectory's per-step event
/// signature. The low byte counts active contacts; for the penalty model
/// the high byte counts contacts on the viscous side of the Coulomb cap,
/// so stick-slip regime changes register as events too — the friction
/// law has a kink there just like the activation has at touch-down.
fn value_and_signature(
    scenario: &Scenario,
    cfg: &SimConfig,
    slot: StateSlot,
    theta: f64,
    steps: usize,
) -> (f64, Vec<u16>) {
    let mut q = scenario.initial_q.clone();
    let mut u = scenario.initial_u.clone();
    match slot {
        StateSlot::Q(i) => q[i] = theta,
        StateSlot::U(i) => u[i] = theta,
    }
    let traj = rollout(
        scenario.system.as_ref(),
        GeneralizedState::from_values(&q, &u),
        &[],
        cfg,
        &RolloutOptions::values_only(steps),
    );
    let signature = traj
        .diags
        .iter()
        .map(|row| {
            let active = row.iter().filter(|d| d.normal.value() > 1e-12).count() as u16;
            let mut viscous = 0u16;
            if cfg.model == ContactModel::Soft {
                for d in row {
                    if d.tangent.is_empty() || d.normal.value() <= 1e-12 {
                        continue;
                    }
                    let f_t: f64 = d.tangent.iter().map(|t| t.value() * t.value()).sum::<f64>();
                    if f_t.sqrt() < 0.999 * cfg.mu * d.normal.value() {
                        viscous += 1;
                    }
                }
            }
            active | (viscous << 8)
        })
        .collect();
    let value = if traj.completed() {
        traj.final_state().q[0].value()
    } else {
        f64::NAN
    };
    (value, signature)
}

fn bptt_row(
    check: &str,
    probe: &BpttProbe,
    cfg: &SimConfig,
    model: ContactModel,
    theta: f64,
) -> Result<GradcheckRow, CliError> {
    let mut mcfg = cfg.clone();
    mcfg.model = model;
    mcfg.armature = default_armature(model);
    mcfg.episode_seconds = probe.episode.or(cfg.episode_seconds);
    mcfg.scenario = probe.scenario.to_string();
    let scenario = scenario_by_name(probe.scenario, &mcfg)?;
    let steps = scenario.steps_for(&mcfg);

    let h = 1e-5 * theta.abs().max(1.0);
    let (f_plus, sig_plus) = value_and_signature(&scenario, &mcfg, probe.slot, theta + h, steps);
    let (f_minus, sig_minus) = value_and_signature(&scenario, &mcfg, probe.slot, theta - h, steps);
    let fd = (f_plus - f_minus) / (2.0 * h);

    // The penalty and hard models are non-smooth across contact events;
    // when the two probes see different event patterns the comparison is
    // excluded by design. The smoothed model must pass everywhere.
    let excludable = matches!(model, ContactModel::Soft | ContactModel::Hard);
    if excludable && sig_plus != sig_minus {
        return Ok(GradcheckRow {
            check: check.to_string(),
            scenario: probe.scenario.to_string(),
            model: model.as_str().to_string(),
            theta,
            analytic: f64::NAN,
            fd,
            rel_err: f64::NAN,
            status: GradStatus::Excluded,
        });
    }

    let analytic = bptt_scalar(&scenario, &mcfg, probe.slot, theta, steps)
        .map_err(CliError::Numerical)?;
    let err = rel_err(analytic, fd);
    let pass = (analytic - fd).abs() <= BPTT_ATOL || err <= BPTT_RTOL;
    Ok(GradcheckRow {
        check: check.to_string(),
        scenario: probe.scenario.to_string(),
        model: model.as_str().to_string(),
        theta,
        analytic,
        fd,
        rel_err: err,
        status: if pass { GradStatus::Pass } else { GradStatus::Fail },
    })
}

/// Initial height at which the hard falling sphere transitions between
/// touching and missing the ground within the horizon — a guaranteed
/// event straddle for the demonstration row.
fn straddle_height(cfg: &SimConfig) -> Result<f64, CliError> {
    let mut mcfg = cfg.clone();
    mcfg.model = ContactModel::Hard;
    mcfg.armature = default_armature(ContactModel::Hard);
    mcfg.episode_seconds = Some(0.5);
    mcfg.scenario = "falling-sphere-1d".to_string();
    let scenario = scenario_by_name("falling-sphere-1d", &mcfg)?;
    let steps = scenario.steps_for(&mcfg);
    let touches = |h0: f64| -> bool {
        let (_, sig) = value_and_signature(&scenario, &mcfg, StateSlot::Q(0), h0, steps);
        sig.iter().any(|&c| c > 0)
    };
    let (mut lo, mut hi) = (0.8, 2.0);
    debug_assert!(touches(lo) && !touches(hi));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if touches(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn gradcheck_report(cfg: &SimConfig) -> Result<GradcheckReport, CliError> {
    let mut rows = Vec::new();

    for (name, f, x0) in primitive_battery() {
        let tape = Tape::new();
        let var = tape.var(x0);
        let analytic = f(&var).backward().get(&var);
        let fd = finite_diff_gradient(|xs| f(&DVar::constant(xs[0])).value(), &[x0], 1e-6)
            .map_err(|e| CliError::Numerical(format!("primitive {name}: {e}")))?[0];
        let err = rel_err(analytic, fd);
        let pass = (analytic - fd).abs() <= PRIM_TOL * analytic.abs().max(1.0);
        rows.push(GradcheckRow {
            check: format!("primitive:{name}"),
            scenario: "-".to_string(),
            model: "-".to_string(),
            theta: x0,
            analytic,
            fd,
            rel_err: err,
            status: if pass { GradStatus::Pass } else { GradStatus::Fail },
        });
    }

    let models = [ContactModel::Soft, ContactModel::Hard, ContactModel::Smoothed];
    for (p_idx, probe) in bptt_probes().iter().enumerate() {
        for (m_idx, &model) in models.iter().enumerate() {
            let cell = (p_idx * models.len() + m_idx) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, cell));
            for _ in 0..5 {
                let theta = rng.gen_range(probe.lo..probe.hi);
                rows.push(bptt_row(probe.check, probe, cfg, model, theta)?);
            }
        }
    }

    // Demonstration row pinned to an event boundary of the hard model.
    let theta = straddle_height(cfg)?;
    let straddle_probe = BpttProbe {
        check: "bptt-straddle",
        scenario: "falling-sphere-1d",
        slot: StateSlot::Q(0),
        lo: 0.0,
        hi: 0.0,
        episode: Some(0.5),
    };
    rows.push(bptt_row(
        "bptt-straddle",
        &straddle_probe,
        cfg,
        ContactModel::Hard,
        theta,
    )?);

    let failures = rows.iter().filter(|r| r.status == GradStatus::Fail).count();
    let excluded = rows.iter().filter(|r| r.status == GradStatus::Excluded).count();
    let max_rel_err = rows
        .iter()
        .filter(|r| r.status != GradStatus::Excluded)
        .map(|r| r.rel_err)
        .fold(0.0, f64::max);
    Ok(GradcheckReport {
        rows,
        failures,
        excluded,
        max_rel_err,
    })
}

pub fn cmd_gradcheck(cfg: &SimConfig, out: &Path) -> Result<(), CliError> {
    let report = gradcheck_report(cfg)?;

    let mut csv = cfg_header(cfg);
    csv.push_str("check,scenario,model,theta,analytic,fd,rel_err,status\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.check,
            row.scenario,
            row.model,
            row.theta,
            row.analytic,
            row.fd,
            row.rel_err,
            row.status.as_str()
        ));
    }
    write_file(&out.join("gradcheck.csv"), &csv)?;

    let prim = report
        .rows
        .iter()
        .filter(|r| r.check.starts_with("primitive:"))
        .count();
    let prim_pass = report
        .rows
        .iter()
        .filter(|r| r.check.starts_with("primitive:") && r.status == GradStatus::Pass)
        .count();
    println!("primitive gradients: {prim_pass}/{prim} pass");
    for probe in bptt_probes() {
        for model in ["soft", "hard", "smoothed"] {
            let cell: Vec<&GradcheckRow> = report
                .rows
                .iter()
                .filter(|r| {
                    r.check == probe.check && r.scenario == probe.scenario && r.model == model
                })
                .collect();
            let pass = cell.iter().filter(|r| r.status == GradStatus::Pass).count();
            let excl = cell.iter().filter(|r| r.status == GradStatus::Excluded).count();
            let max = cell
                .iter()
                .filter(|r| r.status != GradStatus::Excluded)
                .map(|r| r.rel_err)
                .fold(0.0, f64::max);
            println!(
                "{:>12} {:>18} {:>8}: {pass} pass, {excl} excluded-by-design, max rel err {max:.3e}",
                probe.check, probe.scenario, model
            );
        }
    }
    if report.failures == 0 {
        println!(
            "gradcheck: PASS ({} checks, {} excluded-by-design, max rel err {:.3e})",
            report.rows.len(),
            report.excluded,
            report.max_rel_err
        );
        Ok(())
    } else {
        println!(
            "gradcheck: FAIL ({} of {} checks, max rel err {:.3e})",
            report.failures,
            report.rows.len(),
            report.max_rel_err
        );
        Err(CliError::Numerical(format!(
            "gradcheck: {} checks failed (max rel err {:.3e})",
            report.failures, report.max_rel_err
        )))
    }
}

// ---------------------------------------------------------------------
// optimize

pub fn cmd_optimize(cfg: &SimConfig, out: &Path) -> Result<(), CliError> {
    let setup = build_task(cfg.task, cfg)?;
    let schedule = KappaSchedule::from_config(cfg)?;
    let lr = cfg.lr.unwrap_or(setup.default_lr);
    let trace = gd_optimize(&setup.problem, &schedule, lr, cfg.seed)?;

    let mut csv = cfg_header(cfg);
    csv.push_str(&format!("# task = {}\n", cfg.task.as_str()));
    csv.push_str(&format!("# lr = {lr}\n"));
    match &trace.stop {
        StopReason::Completed => csv.push_str("# stop = completed\n"),
        StopReason::Diverged { epoch, detail } => {
            csv.push_str(&format!("# stop = diverged at epoch {epoch}: {detail}\n"))
        }
    }
    let decision: Vec<String> = trace.decision.iter().map(|v| v.to_string()).collect();
    csv.push_str(&format!("# decision = {}\n", decision.join(",")));

    let transfer = cfg.eval_model.map(|eval_model| {
        transfer_evaluate(&setup.problem, &trace.decision, trace.final_kappa, eval_model)
    });
    if let Some(report) = &transfer {
        csv.push_str(&format!(
            "# transfer: train_model = {}, eval_model = {}, train_loss = {}, eval_loss = {}, \
             gap = {}\n",
            report.train_model.as_str(),
            report.eval_model.as_str(),
            report.train_loss,
            report.eval_loss,
            report.gap
        ));
    }

    csv.push_str("epoch,loss,grad_norm,kappa\n");
    for rec in &trace.records {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            rec.epoch, rec.loss, rec.grad_norm, rec.kappa
        ));
    }
    write_file(&out.join("trace.csv"), &csv)?;

    let loss_series = [Series {
        label: "loss".into(),
        points: trace
            .records
            .iter()
            .map(|r| (r.epoch as f64, r.loss))
            .collect(),
    }];
    emit_svg(
        &loss_series,
        &ChartSpec {
            title: format!("{}: gradient descent", cfg.task.as_str()),
            x_label: "epoch".into(),
            y_label: "loss".into(),
        },
        cfg,
        &out.join("loss_curve.svg"),
    )?;

    match &trace.stop {
        StopReason::Completed => {
            let last = trace.records.last();
            println!(
                "optimize {}: completed {} epochs, final loss {}",
                cfg.task.as_str(),
                trace.records.len(),
                last.map(|r| r.loss).unwrap_or(f64::NAN)
            );
        }
        StopReason::Diverged { epoch, detail } => {
            // An expected experimental outcome, reported and exiting 0.
            println!(
                "optimize {}: diverged at epoch {epoch} ({detail})",
                cfg.task.as_str()
            );
        }
    }
    if let Some(report) = &transfer {
        println!(
            "transfer: trained under {} -> evaluated under {}: train_loss {}, eval_loss {}, \
             gap {}",
            report.train_model.as_str(),
            report.eval_model.as_str(),
            report.train_loss,
            report.eval_loss,
            report.gap
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------
// svg

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 44.0;
const MARGIN_B: f64 = 56.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Render a deterministic, self-contained line chart. All series must be
/// non-empty and equally long; non-finite points split a line into
/// segments and lone points render as dots.
pub fn render_svg(
    series: &[Series],
    spec: &ChartSpec,
    cfg: &SimConfig,
) -> Result<String, CliError> {
    if series.is_empty() {
        return Err(CliError::Usage("chart needs at least one series".into()));
    }
    let len = series[0].points.len();
    if len == 0 {
        return Err(CliError::Usage(format!(
            "series `{}` is empty",
            series[0].label
        )));
    }
    for s in series {
        if s.points.len() != len {
            return Err(CliError::Usage(format!(
                "series lengths differ: `{}` has {} points, `{}` has {}",
                series[0].label,
                len,
                s.label,
                s.points.len()
            )));
        }
    }
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        return Err(CliError::Usage("chart has no finite data points".into()));
    }
    let (mut x_lo, mut x_hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (mut y_lo, mut y_hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    if x_lo == x_hi {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_lo == y_hi {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let y_pad = 0.05 * (y_hi - y_lo);
    y_lo -= y_pad;
    y_hi += y_pad;

    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
         font-family=\"sans-serif\">\n"
    );
    for line in cfg.echo_lines() {
        svg.push_str(&format!("<!-- cfg: {line} -->\n"));
    }
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"#ffffff\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"26\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        SVG_W / 2.0,
        xml_escape(&spec.title)
    ));

    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333333\"/>\n",
        SVG_H - MARGIN_B,
        SVG_W - MARGIN_R,
        SVG_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" \
         stroke=\"#333333\"/>\n",
        SVG_H - MARGIN_B
    ));
    for k in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * k as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let tx = px(fx);
        let ty = py(fy);
        svg.push_str(&format!(
            "<line x1=\"{tx:.2}\" y1=\"{:.1}\" x2=\"{tx:.2}\" y2=\"{:.1}\" stroke=\"#333333\"/>\n",
            SVG_H - MARGIN_B,
            SVG_H - MARGIN_B + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{tx:.2}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            SVG_H - MARGIN_B + 18.0,
            fmt_tick(fx)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ty:.2}\" x2=\"{MARGIN_L}\" y2=\"{ty:.2}\" \
             stroke=\"#333333\"/>\n",
            MARGIN_L - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            MARGIN_L - 8.0,
            ty + 4.0,
            fmt_tick(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        SVG_H - 14.0,
        xml_escape(&spec.x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        xml_escape(&spec.y_label)
    ));

    // data
    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let mut segment: Vec<(f64, f64)> = Vec::new();
        let flush = |seg: &mut Vec<(f64, f64)>, svg: &mut String| {
            match seg.len() {
                0 => {}
                1 => svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    seg[0].0, seg[0].1
                )),
                _ => {
                    let pts: Vec<String> =
                        seg.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    svg.push_str(&format!(
                        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                         points=\"{}\"/>\n",
                        pts.join(" ")
                    ));
                }
            }
            seg.clear();
        };
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                segment.push((px(x), py(y)));
            } else {
                flush(&mut segment, &mut svg);
            }
        }
        flush(&mut segment, &mut svg);
    }

    // legend for multi-series charts
    if series.len() >= 2 {
        let lx = SVG_W - MARGIN_R - 170.0;
        let mut ly = MARGIN_T + 10.0;
        for (idx, s) in series.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            svg.push_str(&format!(
                "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
                 stroke=\"{color}\" stroke-width=\"2\"/>\n",
                lx + 24.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
                lx + 30.0,
                ly + 4.0,
                xml_escape(&s.label)
            ));
            ly += 18.0;
        }
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_svg(
    series: &[Series],
    spec: &ChartSpec,
    cfg: &SimConfig,
    path: &Path,
) -> Result<(), CliError> {
    let svg = render_svg(series, spec, cfg)?;
    write_file(path, &svg)
}

// ---------------------------------------------------------------------

#[allow(dead_code)]
fn trajectory_summary(traj: &Trajectory) -> String {
    format!(
        "{} states, {} diag rows, completed: {}",
        traj.states.len(),
        traj.diags.len(),
        traj.completed()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn chart() -> ChartSpec {
        ChartSpec {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
        }
    }

    #[test]
    fn action_file_parses_and_matches_horizon() {
        let rows = parse_action_rows(HOPPER_ACTIONS).unwrap();
        assert_eq!(rows.len(), 250);
        assert!(rows.iter().all(|r| r.len() == 1));
        assert_eq!(rows[0][0], 0.0);
        assert!(rows.iter().all(|r| r[0].abs() <= 400.0));
    }

    #[test]
    fn action_rows_reject_garbage() {
        let err = parse_action_rows("1.0\nnope\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn echoed_header_round_trips() {
        let mut cfg = SimConfig::for_model(ContactModel::Hard);
        cfg.kappa = 250.0;
        cfg.initial_q = Some(vec![0.3, 0.0]);
        cfg.lr = Some(2.5e-2);
        cfg.eval_model = Some(ContactModel::Soft);
        cfg.trunc_window = Some(16);
        let csv = format!("{}h0,final_h\n0.1,0.2\n", cfg_header(&cfg));
        let back = parse_echoed_config(&csv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn model_flag_resolves_armature_like_a_config_line() {
        let cli = Cli::try_parse_from(["diffcontact", "simulate", "--model", "soft"]).unwrap();
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.model, ContactModel::Soft);
        assert_eq!(cfg.armature, 0.0);
    }

    #[test]
    fn kappa_flag_moves_kappa_end_unless_pinned() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cfg");
        std::fs::write(&path, "kappa = 50\n").unwrap();
        let cli = Cli::try_parse_from([
            "diffcontact",
            "sweep",
            "--config",
            path.to_str().unwrap(),
            "--kappa",
            "700",
        ])
        .unwrap();
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.kappa, 700.0);
        assert_eq!(cfg.kappa_end, 700.0);

        std::fs::write(&path, "kappa = 50\nkappa_end = 90\n").unwrap();
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.kappa, 700.0);
        assert_eq!(cfg.kappa_end, 90.0);
    }

    #[test]
    fn bad_flag_values_are_usage_errors() {
        let cli = Cli::try_parse_from(["diffcontact", "simulate", "--model", "rigid"]).unwrap();
        let err = effective_config(&cli).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("--model"));

        let cli = Cli::try_parse_from(["diffcontact", "simulate", "--toi", "maybe"]).unwrap();
        let err = effective_config(&cli).unwrap_err();
        assert!(err.to_string().contains("--toi"));
    }

    #[test]
    fn svg_single_point_renders_a_dot() {
        let cfg = SimConfig::default();
        let s = [Series {
            label: "p".into(),
            points: vec![(1.0, 2.0)],
        }];
        let svg = render_svg(&s, &chart(), &cfg).unwrap();
        assert!(svg.contains("<circle"), "{svg}");
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn svg_empty_series_is_an_error() {
        let cfg = SimConfig::default();
        let s = [Series {
            label: "p".into(),
            points: vec![],
        }];
        assert!(render_svg(&s, &chart(), &cfg).is_err());
        assert!(render_svg(&[], &chart(), &cfg).is_err());
    }

    #[test]
    fn svg_two_series_get_a_legend() {
        let cfg = SimConfig::default();
        let s = [
            Series {
                label: "alpha".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            },
            Series {
                label: "beta".into(),
                points: vec![(0.0, 2.0), (1.0, 1.0)],
            },
        ];
        let svg = render_svg(&s, &chart(), &cfg).unwrap();
        assert!(svg.contains(">alpha</text>"));
        assert!(svg.contains(">beta</text>"));
    }

    #[test]
    fn svg_rejects_unequal_lengths() {
        let cfg = SimConfig::default();
        let s = [
            Series {
                label: "a".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            },
            Series {
                label: "b".into(),
                points: vec![(0.0, 2.0)],
            },
        ];
        let err = render_svg(&s, &chart(), &cfg).unwrap_err();
        assert!(err.to_string().contains("lengths differ"));
    }

    #[test]
    fn svg_bytes_are_deterministic_and_nan_splits_lines() {
        let cfg = SimConfig::default();
        let s = [Series {
            label: "a".into(),
            points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0), (3.0, 4.0)],
        }];
        let one = render_svg(&s, &chart(), &cfg).unwrap();
        let two = render_svg(&s, &chart(), &cfg).unwrap();
        assert_eq!(one, two);
        // the NaN leaves an isolated first point (dot) plus one 2-point line
        assert!(one.contains("<circle"));
        assert!(one.contains("<polyline"));
    }

    #[test]
    fn resting_sphere_penetration_matches_static_oracles() {
        let mut cfg = SimConfig::for_model(ContactModel::Soft);
        cfg.scenario = "falling-sphere-1d".into();
        cfg.initial_q = Some(vec![0.0]);
        cfg.initial_u = Some(vec![0.0]);
        let report = penetration_report(&cfg).unwrap();
        let soft = &report.rows[0];
        assert_eq!(soft.label, "soft");
        // static balance: depth settles around m g / k_p
        let d_ss = 9.81 / 12.0e3;
        assert!(
            (soft.mean_depth - d_ss).abs() < 0.3 * d_ss,
            "soft mean {} vs static {}",
            soft.mean_depth,
            d_ss
        );
        let hard = report.rows.iter().find(|r| r.label == "hard").unwrap();
        assert!(hard.mean_depth < 1e-6, "hard mean {}", hard.mean_depth);
        let k100 = report
            .rows
            .iter()
            .find(|r| r.label == "smoothed-k100")
            .unwrap();
        let k1000 = report
            .rows
            .iter()
            .find(|r| r.label == "smoothed-k1000")
            .unwrap();
        assert!(k1000.mean_depth <= k100.mean_depth);
    }

    #[test]
    fn simulate_writes_config_echo_and_contact_columns() {
        let dir = tempdir().unwrap();
        let mut cfg = SimConfig::for_model(ContactModel::Hard);
        cfg.scenario = "falling-sphere-1d".into();
        cfg.episode_seconds = Some(0.2);
        cmd_simulate(&cfg, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
        let back = parse_echoed_config(&text).unwrap();
        assert_eq!(back, cfg);
        let header = text
            .lines()
            .find(|l| l.starts_with("step,"))
            .expect("header row");
        assert_eq!(header, "step,time,q0,u0,d_ground,n_ground");
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 21);
    }

    #[test]
    fn gradcheck_straddle_row_is_excluded_by_design() {
        let cfg = SimConfig::default();
        let theta = straddle_height(&cfg).unwrap();
        let probe = BpttProbe {
            check: "bptt-straddle",
            scenario: "falling-sphere-1d",
            slot: StateSlot::Q(0),
            lo: 0.0,
            hi: 0.0,
            episode: Some(0.5),
        };
        let row = bptt_row("bptt-straddle", &probe, &cfg, ContactModel::Hard, theta).unwrap();
        assert_eq!(row.status, GradStatus::Excluded);
    }

    #[test]
    fn primitive_battery_all_pass() {
        for (name, f, x0) in primitive_battery() {
            let tape = Tape::new();
            let var = tape.var(x0);
            let analytic = f(&var).backward().get(&var);
            let fd =
                finite_diff_gradient(|xs| f(&DVar::constant(xs[0])).value(), &[x0], 1e-6).unwrap()
                    [0];
            assert!(
                (analytic - fd).abs() <= PRIM_TOL * analytic.abs().max(1.0),
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }
    }
}
