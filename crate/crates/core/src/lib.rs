//! Two-timescale stochastic approximation with set-valued mean fields.
//!
//! The crate runs the coupled recursion
//!
//! ```text
//! x_{n+1} = x_n + a(n) [u_n + M1_{n+1}],   u_n ∈ h(x_n, y_n)
//! y_{n+1} = y_n + b(n) [v_n + M2_{n+1}],   v_n ∈ g(x_n, y_n)
//! ```
//!
//! and ships the pieces needed to check its hypotheses and observe its
//! asymptotics numerically:
//!
//! - [`schedules`]: step-size sequences and their summability checks.
//! - [`setvalued`]: polytope-valued maps, distances, Marchaud and upper
//!   semi-continuity probes.
//! - [`noise`]: reproducible martingale-difference noise and the weighted
//!   noise-sum diagnostic.
//! - [`engine`]: the recursion itself, traces and stability monitoring.
//! - [`trajectories`]: interpolated paths on both clocks and tracking errors.
//! - [`flows`]: an Euler integrator for differential inclusions, attractor
//!   probes, the slow drift `G(y)` and a registry of test systems.
//! - [`lagrangian`]: convex QPs, their dual, a brute-force KKT oracle and the
//!   primal/dual two-timescale solvers.
//! - [`batch`]: seed and instance sweeps, parallel when the `parallel`
//!   feature is on.

pub mod batch;
pub mod engine;
pub mod flows;
pub mod lagrangian;
pub mod noise;
pub mod schedules;
pub mod setvalued;
pub mod trajectories;

mod vecops;

/// Tolerance used wherever a real-arithmetic set membership is asserted.
pub const MEMBERSHIP_TOL: f64 = 1e-8;
