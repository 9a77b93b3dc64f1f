//! Differential inclusions `ẋ ∈ H(x)`: explicit Euler integration with a
//! selection rule, attractor reach times, Lyapunov stability probes, the slow
//! drift `G(y)`, and the registry of predefined coupled systems.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::batch::{map_items, Execution};
use crate::engine::CoupledSystem;
use crate::lagrangian::{self, MinimumSet, QuadraticProgram};
use crate::setvalued::{
    convex_hull_union, distance, least_norm, neg_subdiff_flat_box, AffineSetRep, BoundViolation, ConvexCompactSet, SetError, SetValuedMap,
};
use crate::vecops::{all_finite, lerp, norm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("initial state has dimension {got}, flow expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("lambda(y) is not compact ({0}); G(y) needs a compact fast attractor")]
    NonCompactLambda(&'static str),
    #[error(transparent)]
    Set(#[from] SetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSelection {
    LeastNorm,
    RandomVertex { seed: u64 },
}

/// `ẋ ∈ H(x)` discretized with uniform step `Δ`.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub map: SetValuedMap,
    pub selection: FlowSelection,
    step: f64,
}

impl FlowProblem {
    pub fn new(map: SetValuedMap, step: f64) -> Result<Self, FlowError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(FlowError::BadStep(step));
        }
        Ok(FlowProblem {
            map,
            selection: FlowSelection::LeastNorm,
            step,
        })
    }

    pub fn with_selection(mut self, selection: FlowSelection) -> Self {
        self.selection = selection;
        self
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn dimension(&self) -> usize {
        self.map.domain_dim()
    }

    fn select(&self, x: &[f64], k: u64) -> Vec<f64> {
        let value = self.map.evaluate(x);
        match self.selection {
            FlowSelection::LeastNorm => least_norm(&value),
            FlowSelection::RandomVertex { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k);
                let vs = value.vertices();
                vs[rng.random_range(0..vs.len())].clone()
            }
        }
    }
}

/// States on the uniform grid `t_k = k Δ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSolution {
    pub step: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl FlowSolution {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("non-empty solution")
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty solution")
    }

    /// Linear interpolation between grid states, which is exactly the Euler
    /// polygon. Times past the horizon clamp to the last state.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let k = (t / self.step).floor();
        if k < 0.0 {
            return self.states[0].clone();
        }
        let k = k as usize;
        if k + 1 >= self.states.len() {
            return self.final_state().to_vec();
        }
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        lerp(&self.states[k], &self.states[k + 1], w)
    }

    /// CSV with header `t,x_0,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.states.first().map_or(0, Vec::len);
        let cols: Vec<String> = std::iter::once("t".to_string())
            .chain((0..d).map(|i| format!("x_{i}")))
            .collect();
        writeln!(w, "{}", cols.join(","))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let row: Vec<String> = std::iter::once(t.to_string()).chain(x.iter().map(|v| v.to_string())).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Explicit Euler `x_{k+1} = x_k + Δ sel(H(x_k))` over a grid covering `[0, T]`.
pub fn integrate_di(problem: &FlowProblem, x0: &[f64], horizon: f64) -> Result<FlowSolution, FlowError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(FlowError::BadHorizon(horizon));
    }
    if x0.len() != problem.dimension() {
        return Err(FlowError::Dimension {
            expected: problem.dimension(),
            got: x0.len(),
        });
    }
    let dt = problem.step;
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    times.push(0.0);
    states.push(x.clone());
    for k in 0..steps {
        let w = problem.select(&x, k as u64);
        x = x.iter().zip(&w).map(|(xi, wi)| xi + dt * wi).collect();
        let t = (k + 1) as f64 * dt;
        if !all_finite(&x) {
            return Err(FlowError::NonFinite(t));
        }
        times.push(t);
        states.push(x.clone());
    }
    Ok(FlowSolution {
        step: dt,
        times,
        states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basin {
    Global,
}

/// A compact set claimed to attract the flow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttractorSpec {
    pub set: ConvexCompactSet,
    pub basin: Basin,
    pub tolerance: f64,
}

impl AttractorSpec {
    pub fn global(set: ConvexCompactSet) -> Self {
        AttractorSpec {
            set,
            basin: Basin::Global,
            tolerance: crate::MEMBERSHIP_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachOutcome {
    pub start: Vec<f64>,
    /// First grid time with `d(x, A) < ε`, if reached by the horizon.
    pub time: Option<f64>,
    /// Whether the trajectory stayed in the ε-neighborhood after entering.
    pub stayed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachReport {
    pub epsilon: f64,
    pub outcomes: Vec<ReachOutcome>,
}

impl ReachReport {
    /// Largest reach time over the starts, `None` if any start never arrived.
    pub fn max_time(&self) -> Option<f64> {
        self.outcomes
            .iter()
            .try_fold(0.0f64, |acc, o| o.time.map(|t| acc.max(t)))
    }

    pub fn all_reached_and_stayed(&self) -> bool {
        self.outcomes.iter().all(|o| o.time.is_some() && o.stayed)
    }
}

fn reach_one(problem: &FlowProblem, start: &[f64], set: &ConvexCompactSet, eps: f64, t_max: f64) -> Result<ReachOutcome, FlowError> {
    let sol = integrate_di(problem, start, t_max)?;
    let mut time = None;
    let mut stayed = true;
    for (t, x) in sol.times.iter().zip(&sol.states) {
        let d = distance(x, set)?;
        match time {
            None if d < eps => time = Some(*t),
            Some(_) if d >= eps => stayed = false,
            _ => {}
        }
    }
    Ok(ReachOutcome {
        start: start.to_vec(),
        time,
        stayed: time.is_some() && stayed,
    })
}

/// Per-start first entry time into `N^ε(A)`.
pub fn reach_time(
    problem: &FlowProblem,
    starts: &[Vec<f64>],
    attractor: &AttractorSpec,
    eps: f64,
    t_max: f64,
) -> Result<ReachReport, FlowError> {
    let outcomes = map_items(Execution::default(), starts, |s| reach_one(problem, s, &attractor.set, eps, t_max))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReachReport { epsilon: eps, outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub delta: f64,
    pub epsilon: f64,
    pub starts_checked: usize,
    /// Largest distance to `A` seen on any trajectory.
    pub max_distance: f64,
    pub escapes: Vec<Vec<f64>>,
}

impl LyapunovReport {
    pub fn passed(&self) -> bool {
        self.escapes.is_empty()
    }
}

/// Starts at each vertex of `A` and at radii `0`, `ε/2` and just under `ε`
/// along `per_shell` directions (coordinate axes first, then seeded random
/// unit vectors).
fn probe_starts(set: &ConvexCompactSet, eps: f64, per_shell: usize) -> Vec<Vec<f64>> {
    let d = set.dimension();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[i] = sign;
            dirs.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    while dirs.len() < per_shell {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            dirs.push(v.into_iter().map(|c| c / n).collect());
        }
    }
    dirs.truncate(per_shell.max(1));
    let mut starts = Vec::new();
    for v in set.vertices() {
        starts.push(v.clone());
        for r in [0.5 * eps, eps * (1.0 - 1e-9)] {
            for e in &dirs {
                starts.push(v.iter().zip(e).map(|(vi, ei)| vi + r * ei).collect());
            }
        }
    }
    starts
}

/// Passes when every trajectory from `N^ε(A)` stays in `N^δ(A)` on `[0, T]`.
pub fn lyapunov_probe(
    problem: &FlowProblem,
    attractor: &AttractorSpec,
    delta: f64,
    eps: f64,
    per_shell: usize,
    horizon: f64,
) -> Result<LyapunovReport, FlowError> {
    let starts = probe_starts(&attractor.set, eps, per_shell);
    let worst = map_items(Execution::default(), &starts, |s| -> Result<f64, FlowError> {
        let sol = integrate_di(problem, s, horizon)?;
        let mut m: f64 = 0.0;
        for x in &sol.states {
            m = m.max(distance(x, &attractor.set)?);
        }
        Ok(m)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let escapes = starts
        .iter()
        .zip(&worst)
        .filter(|(_, &m)| m > delta)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(LyapunovReport {
        delta,
        epsilon: eps,
        starts_checked: starts.len(),
        max_distance: worst.iter().cloned().fold(0.0, f64::max),
        escapes,
    })
}

/// Hull of flow endpoints after a long horizon. Approximate: attractor
/// estimation from finitely many flows is ill-posed in general.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproximateAttractor {
    pub set: ConvexCompactSet,
    pub starts: usize,
    pub horizon: f64,
    pub approximate: bool,
}

pub fn estimate_attractor(problem: &FlowProblem, starts: &[Vec<f64>], horizon: f64) -> Result<ApproximateAttractor, FlowError> {
    let ends = map_items(Execution::default(), starts, |s| {
        integrate_di(problem, s, horizon).map(|sol| ConvexCompactSet::singleton(sol.final_state().to_vec()))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(ApproximateAttractor {
        set: convex_hull_union(&ends)?,
        starts: starts.len(),
        horizon,
        approximate: true,
    })
}

/// The fast attractor `λ(y)` in whatever form is known for it.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaRep {
    Compact(ConvexCompactSet),
    /// A finite sample of a compact set; the hull is taken as given.
    Samples(Vec<Vec<f64>>),
    Affine(AffineSetRep),
    /// The fast flow has no minimizer to converge to.
    Unbounded,
}

impl LambdaRep {
    pub fn from_minimum_set(m: MinimumSet) -> Self {
        match m {
            MinimumSet::Singleton(p) => LambdaRep::Compact(ConvexCompactSet::singleton(p)),
            MinimumSet::Affine(a) if a.is_point() => LambdaRep::Compact(ConvexCompactSet::singleton(a.anchor().to_vec())),
            MinimumSet::Affine(a) => LambdaRep::Affine(a),
            MinimumSet::UnboundedBelow => LambdaRep::Unbounded,
        }
    }

    /// Points at which `g(·, y)` is sampled: every vertex plus 17 interior
    /// points on each segment between two vertices.
    fn sample_points(&self) -> Result<Vec<Vec<f64>>, FlowError> {
        match self {
            LambdaRep::Compact(set) => {
                let vs = set.vertices();
                let mut pts: Vec<Vec<f64>> = vs.to_vec();
                for i in 0..vs.len() {
                    for j in i + 1..vs.len() {
                        for m in 1..=G_INTERIOR_POINTS {
                            let w = m as f64 / (G_INTERIOR_POINTS + 1) as f64;
                            pts.push(lerp(&vs[i], &vs[j], w));
                        }
                    }
                }
                Ok(pts)
            }
            LambdaRep::Samples(pts) if !pts.is_empty() => Ok(pts.clone()),
            LambdaRep::Samples(_) => Err(FlowError::Set(SetError::NoVertices)),
            LambdaRep::Affine(_) => Err(FlowError::NonCompactLambda("affine")),
            LambdaRep::Unbounded => Err(FlowError::NonCompactLambda("unbounded below")),
        }
    }

    /// `sup_{x ∈ λ(y)} ||x||`, infinite for non-compact representations.
    pub fn max_norm(&self) -> f64 {
        match self {
            LambdaRep::Compact(s) => s.max_norm(),
            LambdaRep::Samples(p) => p.iter().map(|x| norm(x)).fold(0.0, f64::max),
            LambdaRep::Affine(a) if a.is_point() => norm(a.anchor()),
            _ => f64::INFINITY,
        }
    }
}

pub const G_INTERIOR_POINTS: usize = 17;

/// `G(y)` together with the number of `λ(y)` points it was built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GValue {
    pub set: ConvexCompactSet,
    pub resolution: usize,
}

/// `G(y) = conv ∪_{x ∈ λ(y)} g(x, y)`, sampled on the points of `λ(y)`.
pub fn build_g(lambda: &LambdaRep, g: &SetValuedMap, y: &[f64]) -> Result<GValue, FlowError> {
    let pts = lambda.sample_points()?;
    let values: Vec<ConvexCompactSet> = pts
        .iter()
        .map(|x| {
            let mut z = x.clone();
            z.extend_from_slice(y);
            g.evaluate(&z)
        })
        .collect();
    Ok(GValue {
        set: convex_hull_union(&values)?,
        resolution: pts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GBoundReport {
    pub constant: f64,
    pub samples_checked: usize,
    /// Samples where `sup_{x ∈ λ(y)} ||x|| <= K (1 + ||y||)` fails.
    pub precondition_violations: Vec<Vec<f64>>,
    /// Samples where `sup ||G(y)|| <= K (K + 1)(1 + ||y||)` fails.
    pub violations: Vec<BoundViolation>,
}

impl GBoundReport {
    pub fn passed(&self) -> bool {
        self.precondition_violations.is_empty() && self.violations.is_empty()
    }
}

pub fn check_g_pointwise_bound<L>(lambda: L, g: &SetValuedMap, y_samples: &[Vec<f64>], k: f64) -> Result<GBoundReport, FlowError>
where
    L: Fn(&[f64]) -> LambdaRep,
{
    let mut pre = Vec::new();
    let mut violations = Vec::new();
    for y in y_samples {
        let rep = lambda(y);
        let scale = 1.0 + norm(y);
        if rep.max_norm() > k * scale {
            pre.push(y.clone());
            continue;
        }
        let gv = build_g(&rep, g, y)?;
        let bound = k * (k + 1.0) * scale;
        let max_norm = gv.set.max_norm();
        if max_norm > bound {
            violations.push(BoundViolation {
                point: y.clone(),
                max_norm,
                bound,
            });
        }
    }
    Ok(GBoundReport {
        constant: k,
        samples_checked: y_samples.len(),
        precondition_violations: pre,
        violations,
    })
}

type LambdaFn = dyn Fn(&[f64]) -> LambdaRep + Send + Sync;

/// A coupled system with analytically known attractors.
#[derive(Clone)]
pub struct PredefinedSystem {
    pub name: &'static str,
    pub system: CoupledSystem,
    /// `λ(y)`; `None` when the fast flow has no attractor.
    pub lambda: Option<Arc<LambdaFn>>,
    /// Global attractor `A₀` of `ẏ ∈ G(y)`.
    pub slow_attractor: Option<ConvexCompactSet>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub notes: &'static str,
}

impl fmt::Debug for PredefinedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PredefinedSystem")
            .field("name", &self.name)
            .field("slow_attractor", &self.slow_attractor)
            .field("notes", &self.notes)
            .finish()
    }
}

impl PredefinedSystem {
    pub fn lambda_at(&self, y: &[f64]) -> Option<LambdaRep> {
        self.lambda.as_ref().map(|l| l(y))
    }

    /// `ẋ ∈ h(x, y)` with `y` frozen.
    pub fn fast_flow(&self, y: &[f64], step: f64) -> Result<FlowProblem, FlowError> {
        let h = self.system.h.clone();
        let y = y.to_vec();
        let d = self.system.fast_dim();
        let map = SetValuedMap::new(format!("{}|y", h.name()), d, d, h.growth_constant(), move |x| {
            let mut z = x.to_vec();
            z.extend_from_slice(&y);
            h.evaluate(&z)
        });
        FlowProblem::new(map, step)
    }

    /// `G` as a set-valued map of `y`, if `λ` is known.
    pub fn g_map(&self) -> Option<SetValuedMap> {
        let lambda = self.lambda.clone()?;
        let g = self.system.g.clone();
        let k = self.system.slow_dim();
        let growth = g.growth_constant();
        Some(SetValuedMap::new("G", k, k, growth, move |y| {
            build_g(&lambda(y), &g, y)
                .map(|v| v.set)
                .unwrap_or_else(|e| panic!("G(y) undefined at {y:?}: {e}"))
        }))
    }

    /// `ẏ ∈ G(y)`.
    pub fn slow_flow(&self, step: f64) -> Option<Result<FlowProblem, FlowError>> {
        self.g_map().map(|m| FlowProblem::new(m, step))
    }
}

fn contraction() -> PredefinedSystem {
    let h = SetValuedMap::single_valued("-x", 2, 1, 1.0, |z| vec![-z[0]]);
    let g = SetValuedMap::single_valued("-y", 2, 1, 1.0, |z| vec![-z[1]]);
    PredefinedSystem {
        name: "contraction",
        system: CoupledSystem::new(h, g, 1, 1).expect("shapes"),
        lambda: Some(Arc::new(|_| LambdaRep::Compact(ConvexCompactSet::singleton(vec![0.0])))),
        slow_attractor: Some(ConvexCompactSet::singleton(vec![0.0])),
        x0: vec![1.0],
        y0: vec![1.0],
        notes: "h = {-x}, g = {-y}; lambda(y) = {0}, A0 = {0}",
    }
}

fn flat_box() -> PredefinedSystem {
    let h = SetValuedMap::new("-d max(|x|-1,0)", 2, 1, 1.0, |z| neg_subdiff_flat_box(z[0]));
    let g = SetValuedMap::single_valued("x-y", 2, 1, 2.0, |z| vec![z[0] - z[1]]);
    PredefinedSystem {
        name: "flat-box",
        system: CoupledSystem::new(h, g, 1, 1).expect("shapes"),
        lambda: Some(Arc::new(|_| LambdaRep::Compact(ConvexCompactSet::interval(-1.0, 1.0)))),
        slow_attractor: Some(ConvexCompactSet::interval(-1.0, 1.0)),
        x0: vec![3.0],
        y0: vec![4.0],
        notes: "h = -d max(|x|-1, 0), g = {x - y}; lambda(y) = [-1, 1] (not a singleton), \
                G(y) = [-1-y, 1-y], A0 = [-1, 1]",
    }
}

/// Dual scheme on `qp`. `A₀` is recorded when every optimal multiplier
/// component is positive, where the unprojected slow flow `μ̇ = ∇H(μ)` has
/// `μ*` as its global attractor.
pub fn dual_qp_system(qp: &QuadraticProgram, project: bool) -> PredefinedSystem {
    let lam_qp = qp.clone();
    let slow_attractor = lagrangian::kkt_oracle(qp)
        .ok()
        .filter(|s| s.mu_star.iter().all(|&m| m > 1e-9))
        .map(|s| ConvexCompactSet::singleton(s.mu_star));
    PredefinedSystem {
        name: "dual-qp",
        system: lagrangian::dual_system(qp, project),
        lambda: Some(Arc::new(move |mu| LambdaRep::from_minimum_set(lagrangian::minimum_set(&lam_qp, mu)))),
        slow_attractor,
        x0: vec![0.0; qp.dim()],
        y0: vec![0.0; qp.constraints()],
        notes: "x fast with -grad_x L, mu slow with +grad_mu L = Ax; lambda(mu) = argmin_x L(x, mu)",
    }
}

/// Primal scheme on `qp`: `μ` fast, `x` slow, no projection.
pub fn primal_qp_system(qp: &QuadraticProgram) -> PredefinedSystem {
    PredefinedSystem {
        name: "primal-qp",
        system: lagrangian::primal_system(qp),
        lambda: None,
        slow_attractor: None,
        x0: vec![0.0; qp.constraints()],
        y0: vec![0.0; qp.dim()],
        notes: "mu fast with +grad_mu L = Ax, x slow; the fast flow mu' = Ax has no attractor for frozen x with Ax != 0",
    }
}

/// `min (x-1)² s.t. x <= 0` with `μ >= 0` projection: `λ(μ) = {(2-μ)/2}`, `A₀ = {2}`.
fn dual_qp() -> PredefinedSystem {
    dual_qp_system(&QuadraticProgram::example_active(), true)
}

/// `min (x+1)² s.t. x <= 0` started from `x₀ = 1`.
fn primal_qp() -> PredefinedSystem {
    PredefinedSystem {
        y0: vec![1.0],
        ..primal_qp_system(&QuadraticProgram::example_inactive())
    }
}

pub fn registry() -> Vec<PredefinedSystem> {
    vec![contraction(), flat_box(), dual_qp(), primal_qp()]
}

pub fn lookup(name: &str) -> Option<PredefinedSystem> {
    registry().into_iter().find(|s| s.name == name)
}
