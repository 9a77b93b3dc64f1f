//! Continuous-time views of a trace and the tracking diagnostics built on them.
//!
//! On the fast clock `t(n)` the iterates give the polygon `x̄` with knots
//! `(t(n), x_n)` and the right-open step control `ū(t) = u_n` on
//! `[t(n), t(n+1))`. The slow clock `s(n)` gives `ỹ` and `ṽ` the same way.
//! Comparing `x̄(s + ·)` with the exact integral of `ū` isolates the
//! weighted noise sums, and comparing `ỹ` with a flow of `ẏ ∈ G(y)` measures
//! slow tracking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Trace, TraceRecord};
use crate::flows::{integrate_di, FlowError, FlowProblem};
use crate::schedules::StepSchedule;
use crate::setvalued::{distance, SetError};
use crate::vecops::{dist, norm, sub};

/// Minimum number of uniform grid intervals used for sup norms over a window.
pub const GRID_INTERVALS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("a path needs at least two knots, got {0}")]
    TooShort(usize),
    #[error("knot times and values differ in length ({times} vs {values})")]
    LengthMismatch { times: usize, values: usize },
    #[error("knot times must increase strictly (index {0})")]
    NotIncreasing(usize),
    #[error("steps {from}..{to} are not logged with stride 1")]
    SparseLogging { from: u64, to: u64 },
    #[error("window [{start}, {end}] lies outside the logged range [{lo}, {hi}]")]
    WindowOutOfRange { start: f64, end: f64, lo: f64, hi: f64 },
    #[error("window needs a finite start and positive finite length, got s = {start}, T = {length}")]
    BadWindow { start: f64, length: f64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Set(#[from] SetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Timescale {
    /// Clock `t(n)` built from `a(n)`.
    Fast,
    /// Clock `s(n)` built from `b(n)`.
    Slow,
}

impl Timescale {
    fn time(self, r: &TraceRecord) -> f64 {
        match self {
            Timescale::Fast => r.t,
            Timescale::Slow => r.s,
        }
    }
}

/// Piecewise-linear path through `(knot_times[n], knot_values[n])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedPath {
    knot_times: Vec<f64>,
    knot_values: Vec<Vec<f64>>,
}

fn check_knots(times: &[f64], values: usize) -> Result<(), TrajectoryError> {
    if times.len() != values {
        return Err(TrajectoryError::LengthMismatch {
            times: times.len(),
            values,
        });
    }
    if times.len() < 2 {
        return Err(TrajectoryError::TooShort(times.len()));
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(TrajectoryError::NotIncreasing(i + 1));
    }
    Ok(())
}

fn out_of_range(times: &[f64], start: f64, end: f64) -> TrajectoryError {
    TrajectoryError::WindowOutOfRange {
        start,
        end,
        lo: times[0],
        hi: times[times.len() - 1],
    }
}

impl InterpolatedPath {
    pub fn new(knot_times: Vec<f64>, knot_values: Vec<Vec<f64>>) -> Result<Self, TrajectoryError> {
        check_knots(&knot_times, knot_values.len())?;
        Ok(InterpolatedPath {
            knot_times,
            knot_values,
        })
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn knot_values(&self) -> &[Vec<f64>] {
        &self.knot_values
    }

    pub fn start(&self) -> f64 {
        self.knot_times[0]
    }

    pub fn end(&self) -> f64 {
        self.knot_times[self.knot_times.len() - 1]
    }

    /// Segment `n` and weights `((t(n+1) - t)/Δ, (t - t(n))/Δ)` for `t` in
    /// `[t(n), t(n+1)]`.
    pub fn weights(&self, t: f64) -> Result<(usize, f64, f64), TrajectoryError> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(out_of_range(&self.knot_times, t, t));
        }
        let n = (self.knot_times.partition_point(|&k| k <= t) - 1).min(self.knot_times.len() - 2);
        let (t0, t1) = (self.knot_times[n], self.knot_times[n + 1]);
        let span = t1 - t0;
        Ok((n, (t1 - t) / span, (t - t0) / span))
    }

    /// Knots return their stored value exactly.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, TrajectoryError> {
        let (n, _, w1) = self.weights(t)?;
        if t == self.knot_times[n] {
            return Ok(self.knot_values[n].clone());
        }
        if t == self.knot_times[n + 1] {
            return Ok(self.knot_values[n + 1].clone());
        }
        // w0 a + w1 b written as a + w1 (b - a), exact on constant segments.
        Ok(self.knot_values[n]
            .iter()
            .zip(&self.knot_values[n + 1])
            .map(|(a, b)| a + w1 * (b - a))
            .collect())
    }
}

/// `value[n]` on `[knot_times[n], knot_times[n+1])`; the last value holds at
/// the final knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstantControl {
    knot_times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PiecewiseConstantControl {
    pub fn new(knot_times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, TrajectoryError> {
        check_knots(&knot_times, values.len())?;
        Ok(PiecewiseConstantControl { knot_times, values })
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    fn range_check(&self, a: f64, b: f64) -> Result<(), TrajectoryError> {
        let (lo, hi) = (self.knot_times[0], self.knot_times[self.knot_times.len() - 1]);
        if a >= lo && b <= hi && a <= b {
            Ok(())
        } else {
            Err(out_of_range(&self.knot_times, a, b))
        }
    }

    pub fn eval(&self, t: f64) -> Result<&[f64], TrajectoryError> {
        self.range_check(t, t)?;
        Ok(&self.values[self.knot_times.partition_point(|&k| k <= t) - 1])
    }

    /// `∫_a^b ū`, accumulated piece by piece.
    pub fn integral(&self, a: f64, b: f64) -> Result<Vec<f64>, TrajectoryError> {
        self.range_check(a, b)?;
        let mut acc = vec![0.0; self.values[0].len()];
        let first = self.knot_times.partition_point(|&k| k <= a) - 1;
        for n in first..self.knot_times.len() - 1 {
            let lo = self.knot_times[n].max(a);
            let hi = self.knot_times[n + 1].min(b);
            if hi <= lo {
                break;
            }
            acc.iter_mut().zip(&self.values[n]).for_each(|(c, u)| *c += (hi - lo) * u);
        }
        Ok(acc)
    }
}

fn require_dense(records: &[TraceRecord]) -> Result<(), TrajectoryError> {
    match records.windows(2).find(|w| w[1].n != w[0].n + 1) {
        Some(w) => Err(TrajectoryError::SparseLogging { from: w[0].n, to: w[1].n }),
        None => Ok(()),
    }
}

fn path_from(trace: &Trace, scale: Timescale, state: fn(&TraceRecord) -> &Vec<f64>) -> Result<InterpolatedPath, TrajectoryError> {
    require_dense(&trace.records)?;
    InterpolatedPath::new(
        trace.records.iter().map(|r| scale.time(r)).collect(),
        trace.records.iter().map(|r| state(r).clone()).collect(),
    )
}

/// `x̄` with knots `(t(n), x_n)`.
pub fn interpolate_fast(trace: &Trace) -> Result<InterpolatedPath, TrajectoryError> {
    path_from(trace, Timescale::Fast, |r| &r.x)
}

/// `ỹ` with knots `(s(n), y_n)`.
pub fn interpolate_slow(trace: &Trace) -> Result<InterpolatedPath, TrajectoryError> {
    path_from(trace, Timescale::Slow, |r| &r.y)
}

/// `ȳ` with knots `(t(n), y_n)`.
pub fn interpolate_y_on_fast_clock(trace: &Trace) -> Result<InterpolatedPath, TrajectoryError> {
    path_from(trace, Timescale::Fast, |r| &r.y)
}

/// `ū` (fast) or `ṽ` (slow).
pub fn control_path(trace: &Trace, scale: Timescale) -> Result<PiecewiseConstantControl, TrajectoryError> {
    require_dense(&trace.records)?;
    let control = |r: &TraceRecord| match scale {
        Timescale::Fast => r.u.clone(),
        Timescale::Slow => r.v.clone(),
    };
    PiecewiseConstantControl::new(
        trace.records.iter().map(|r| scale.time(r)).collect(),
        trace.records.iter().map(control).collect(),
    )
}

/// Records `i..=j` covering `[start, end]` on the given clock, checked dense.
fn window(trace: &Trace, scale: Timescale, start: f64, length: f64) -> Result<&[TraceRecord], TrajectoryError> {
    if !(start.is_finite() && length > 0.0 && length.is_finite()) {
        return Err(TrajectoryError::BadWindow { start, length });
    }
    let end = start + length;
    let recs = &trace.records;
    let times: Vec<f64> = recs.iter().map(|r| scale.time(r)).collect();
    if recs.len() < 2 || start < times[0] || end > times[times.len() - 1] {
        return Err(out_of_range(&times, start, end));
    }
    let i = (times.partition_point(|&t| t <= start) - 1).min(recs.len() - 2);
    let j = times.partition_point(|&t| t < end).max(i + 1);
    let w = &recs[i..=j];
    require_dense(w)?;
    Ok(w)
}

/// Uniform grid on `[start, end]` merged with the knots strictly inside.
fn evaluation_points(knots: &[f64], start: f64, end: f64) -> Vec<f64> {
    let mut pts: Vec<f64> = (0..=GRID_INTERVALS)
        .map(|k| start + (end - start) * k as f64 / GRID_INTERVALS as f64)
        .collect();
    pts.extend(knots.iter().copied().filter(|&t| t > start && t < end));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

fn state_of(r: &TraceRecord, scale: Timescale) -> &[f64] {
    match scale {
        Timescale::Fast => &r.x,
        Timescale::Slow => &r.y,
    }
}

fn control_of(r: &TraceRecord, scale: Timescale) -> &[f64] {
    match scale {
        Timescale::Fast => &r.u,
        Timescale::Slow => &r.v,
    }
}

fn noise_of(r: &TraceRecord, scale: Timescale) -> &[f64] {
    match scale {
        Timescale::Fast => &r.m1,
        Timescale::Slow => &r.m2,
    }
}

/// `sup_τ ||z̄(s+τ) - z^s(τ)||` where `z^s(τ) = z̄(s) + ∫_s^{s+τ}` of the
/// logged control, on the fast (`x̄`, `ū`) or slow (`ỹ`, `ṽ`) clock.
///
/// Both paths are piecewise linear with the same knots, so evaluating on the
/// grid plus knots gives the exact supremum.
pub fn control_tracking_error(trace: &Trace, scale: Timescale, s: f64, horizon: f64) -> Result<f64, TrajectoryError> {
    let w = window(trace, scale, s, horizon)?;
    let times: Vec<f64> = w.iter().map(|r| scale.time(r)).collect();
    let path = InterpolatedPath::new(times.clone(), w.iter().map(|r| state_of(r, scale).to_vec()).collect())?;
    let origin = path.eval(s)?;
    // Integral of the control from s to each knot after the first.
    let mut base = vec![vec![0.0; origin.len()]; w.len()];
    for m in 1..w.len() {
        let from = times[m - 1].max(s);
        base[m] = base[m - 1]
            .iter()
            .zip(control_of(&w[m - 1], scale))
            .map(|(c, u)| c + (times[m] - from) * u)
            .collect();
    }
    let mut sup: f64 = 0.0;
    for tau in evaluation_points(&times, s, s + horizon) {
        let (m, _, _) = path.weights(tau)?;
        let from = times[m].max(s);
        let z = path.eval(tau)?;
        let u = control_of(&w[m], scale);
        let e: Vec<f64> = (0..z.len())
            .map(|i| z[i] - origin[i] - base[m][i] - (tau - from) * u[i])
            .collect();
        sup = sup.max(norm(&e));
    }
    Ok(sup)
}

/// Fast-clock tracking error against `ẋ^s = ū(s + ·)`.
pub fn tracking_error_fast(trace: &Trace, s: f64, horizon: f64) -> Result<f64, TrajectoryError> {
    control_tracking_error(trace, Timescale::Fast, s, horizon)
}

/// The same supremum computed from the noise alone:
/// `D(t) = (t(i+1) - s) M_i + Σ_{i<k<m} a(k) M_k + (t - t(m)) M_m` for `t` in
/// `[t(m), t(m+1)]`, using `schedule` for the weights. Agrees with
/// [`control_tracking_error`] up to rounding whenever no projection acted.
pub fn weighted_noise_sup(trace: &Trace, schedule: &StepSchedule, scale: Timescale, s: f64, horizon: f64) -> Result<f64, TrajectoryError> {
    let w = window(trace, scale, s, horizon)?;
    let end = s + horizon;
    let dim = noise_of(&w[0], scale).len();
    let mut d = vec![0.0; dim];
    let mut sup: f64 = 0.0;
    for (idx, r) in w[..w.len() - 1].iter().enumerate() {
        let t0 = scale.time(r);
        let t1 = scale.time(&w[idx + 1]);
        let m = noise_of(r, scale);
        let from = t0.max(s);
        if t1 >= end {
            // Last segment: stop at the window end.
            d.iter_mut().zip(m).for_each(|(di, mi)| *di += (end - from) * mi);
        } else if idx == 0 {
            d.iter_mut().zip(m).for_each(|(di, mi)| *di += (t1 - from) * mi);
        } else {
            let a = schedule.value(r.n);
            d.iter_mut().zip(m).for_each(|(di, mi)| *di += a * mi);
        }
        sup = sup.max(norm(&d));
    }
    Ok(sup)
}

/// Slow tracking against the least-norm Euler solution of `ẏ ∈ G(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowTracking {
    pub error: f64,
    /// Fraction of window steps with `d(v_n, G(y_n)) <= ε`.
    pub membership_fraction: f64,
    pub epsilon: f64,
    pub window_steps: usize,
}

/// `g_flow.map` must be `G`; it is used both for the flow and for membership.
pub fn tracking_error_slow(trace: &Trace, g_flow: &FlowProblem, s: f64, horizon: f64, eps: f64) -> Result<SlowTracking, TrajectoryError> {
    let w = window(trace, Timescale::Slow, s, horizon)?;
    let times: Vec<f64> = w.iter().map(|r| r.s).collect();
    let path = InterpolatedPath::new(times.clone(), w.iter().map(|r| r.y.clone()).collect())?;
    let start = path.eval(s)?;
    let sol = integrate_di(g_flow, &start, horizon)?;
    let mut error: f64 = 0.0;
    for tau in evaluation_points(&times, s, s + horizon) {
        error = error.max(dist(&path.eval(tau)?, &sol.eval(tau - s)));
    }
    let steps = &w[..w.len() - 1];
    let mut inside = 0usize;
    for r in steps {
        if distance(&r.v, &g_flow.map.evaluate(&r.y))? <= eps {
            inside += 1;
        }
    }
    Ok(SlowTracking {
        error,
        membership_fraction: inside as f64 / steps.len() as f64,
        epsilon: eps,
        window_steps: steps.len(),
    })
}

/// `sup_{τ <= T} ||ȳ(s+τ) - ȳ(s)||` on the fast clock.
pub fn quasi_static_sup(trace: &Trace, s: f64, horizon: f64) -> Result<f64, TrajectoryError> {
    let w = window(trace, Timescale::Fast, s, horizon)?;
    let times: Vec<f64> = w.iter().map(|r| r.t).collect();
    let path = InterpolatedPath::new(times.clone(), w.iter().map(|r| r.y.clone()).collect())?;
    let origin = path.eval(s)?;
    let mut sup: f64 = 0.0;
    for tau in evaluation_points(&times, s, s + horizon) {
        sup = sup.max(norm(&sub(&path.eval(tau)?, &origin)));
    }
    Ok(sup)
}

/// Exported diagnostic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub s: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub error: f64,
    pub membership_fraction: Option<f64>,
    pub seed: Option<u64>,
}
