//! Differentiable rigid-body contact on a scalar reverse-mode tape.
//!
//! Three contact formulations over one set of small benchmark systems:
//!
//! * **soft** — spring-damper penalty forces with velocity-capped Coulomb
//!   friction, integrated semi-implicitly;
//! * **hard** — midpoint time-stepping with a projected Gauss-Seidel
//!   impulse solve and unit-step contact activation;
//! * **smoothed** — the same solve with the unit step replaced by a
//!   logistic weight of stiffness kappa, applied to the off-diagonal
//!   coupling terms and the final impulses, plus a widened activation band
//!   so near contacts keep a gradient path.
//!
//! Every step runs on [`autodiff::DVar`]s, so any scalar functional of a
//! trajectory can be differentiated with one reverse sweep. The
//! [`smoothing`] module adds zeroth-order and bundled first-order gradient
//! estimators for contrast, and [`trajopt`] performs plain gradient descent
//! with an optional kappa curriculum. The `diffcontact` binary exposes all
//! of it as deterministic, file-producing subcommands.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod contact;
pub mod dynamics;
pub mod linalg;
pub mod smoothing;
pub mod trajopt;

pub use autodiff::{finite_diff_gradient, Adjoints, DVar, Tape};
pub use config::{parse_config, parse_config_file, ConfigError, ContactModel, Relaxation, SimConfig, TaskKind};
