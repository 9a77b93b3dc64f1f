//! The coupled two-timescale recursion, its traces and stability monitoring.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{NoiseSpec, NoiseStream};
use crate::schedules::{validate_pair, SchedulePair, ValidationReport};
use crate::setvalued::{distance, least_norm, ConvexCompactSet, SetValuedMap};
use crate::vecops::{all_finite, norm};
use crate::MEMBERSHIP_TOL;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("map {name} has shape {domain} -> {codomain}, expected {expected_domain} -> {expected_codomain}")]
    MapShape {
        name: String,
        domain: usize,
        codomain: usize,
        expected_domain: usize,
        expected_codomain: usize,
    },
    #[error("initial state has dimensions ({0}, {1}), system expects ({2}, {3})")]
    InitialShape(usize, usize, usize, usize),
    #[error("non-finite value produced at step {step}")]
    NonFinite { step: u64 },
    #[error("step schedules fail validation: {0:?}")]
    InvalidSchedules(ValidationReport),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("custom selection at step {step} lies {distance:e} outside the map value")]
    SelectionOutside { step: u64, distance: f64 },
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace csv: {0}")]
    Format(String),
}

type CustomSelection = dyn Fn(&ConvexCompactSet, u64) -> Vec<f64> + Send + Sync;
type CustomProjection = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// How `u_n ∈ h(x_n, y_n)` and `v_n ∈ g(x_n, y_n)` are picked.
#[derive(Clone)]
pub enum SelectionPolicy {
    LeastNorm,
    /// Uniform vertex, drawn from a counter-based stream keyed by the step.
    RandomVertex { seed: u64 },
    /// Receives the set and the step index; must return a member of the set.
    Custom(Arc<CustomSelection>),
}

impl fmt::Debug for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::LeastNorm => f.write_str("LeastNorm"),
            SelectionPolicy::RandomVertex { seed } => write!(f, "RandomVertex({seed})"),
            SelectionPolicy::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Optional map applied to the slow iterate after each update.
#[derive(Clone)]
pub enum Projection {
    NonNegativeOrthant,
    Custom(Arc<CustomProjection>),
}

impl Projection {
    pub fn apply(&self, y: Vec<f64>) -> Vec<f64> {
        match self {
            Projection::NonNegativeOrthant => y.into_iter().map(|v| v.max(0.0)).collect(),
            Projection::Custom(f) => f(&y),
        }
    }
}

impl fmt::Debug for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Projection::NonNegativeOrthant => f.write_str("NonNegativeOrthant"),
            Projection::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// `h: R^{d+k} → subsets of R^d` (fast drift) and `g: R^{d+k} → subsets of R^k`
/// (slow drift), both evaluated at the concatenated state `(x, y)`.
#[derive(Clone, Debug)]
pub struct CoupledSystem {
    pub h: SetValuedMap,
    pub g: SetValuedMap,
    fast_dim: usize,
    slow_dim: usize,
    pub selection: SelectionPolicy,
    pub projection: Option<Projection>,
}

impl CoupledSystem {
    pub fn new(h: SetValuedMap, g: SetValuedMap, fast_dim: usize, slow_dim: usize) -> Result<Self, EngineError> {
        for (map, codomain) in [(&h, fast_dim), (&g, slow_dim)] {
            if map.domain_dim() != fast_dim + slow_dim || map.codomain_dim() != codomain {
                return Err(EngineError::MapShape {
                    name: map.name().to_string(),
                    domain: map.domain_dim(),
                    codomain: map.codomain_dim(),
                    expected_domain: fast_dim + slow_dim,
                    expected_codomain: codomain,
                });
            }
        }
        Ok(CoupledSystem {
            h,
            g,
            fast_dim,
            slow_dim,
            selection: SelectionPolicy::LeastNorm,
            projection: None,
        })
    }

    pub fn with_selection(mut self, selection: SelectionPolicy) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_projection(mut self, projection: Option<Projection>) -> Self {
        self.projection = projection;
        self
    }

    pub fn fast_dim(&self) -> usize {
        self.fast_dim
    }

    pub fn slow_dim(&self) -> usize {
        self.slow_dim
    }

    fn joint(x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(x.len() + y.len());
        z.extend_from_slice(x);
        z.extend_from_slice(y);
        z
    }

    pub fn h_value(&self, x: &[f64], y: &[f64]) -> ConvexCompactSet {
        self.h.evaluate(&Self::joint(x, y))
    }

    pub fn g_value(&self, x: &[f64], y: &[f64]) -> ConvexCompactSet {
        self.g.evaluate(&Self::joint(x, y))
    }

    fn select(&self, set: &ConvexCompactSet, step: u64, which: u64) -> Result<Vec<f64>, EngineError> {
        match &self.selection {
            SelectionPolicy::LeastNorm => Ok(least_norm(set)),
            SelectionPolicy::RandomVertex { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(2 * step + which);
                let vs = set.vertices();
                Ok(vs[rng.random_range(0..vs.len())].clone())
            }
            SelectionPolicy::Custom(f) => {
                let w = f(set, step);
                let d = distance(&w, set).map_err(|e| EngineError::Format(e.to_string()))?;
                if d > MEMBERSHIP_TOL {
                    return Err(EngineError::SelectionOutside { step, distance: d });
                }
                Ok(w)
            }
        }
    }

    fn selections(&self, x: &[f64], y: &[f64], n: u64) -> Result<(Vec<f64>, Vec<f64>), EngineError> {
        let z = Self::joint(x, y);
        let (hv, gv) = (self.h.evaluate(&z), self.g.evaluate(&z));
        if !hv.vertices().iter().chain(gv.vertices()).all(|v| all_finite(v)) {
            return Err(EngineError::NonFinite { step: n });
        }
        Ok((self.select(&hv, n, 0)?, self.select(&gv, n, 1)?))
    }
}

/// The two noise streams of a run.
#[derive(Debug, Clone)]
pub struct Streams {
    pub fast: NoiseStream,
    pub slow: NoiseStream,
}

impl Streams {
    pub fn new(system: &CoupledSystem, fast: &NoiseSpec, slow: &NoiseSpec) -> Self {
        Streams {
            fast: NoiseStream::new(fast.model(system.fast_dim), fast.seed),
            slow: NoiseStream::new(slow.model(system.slow_dim), slow.seed),
        }
    }
}

/// Everything one step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

/// One update `x' = x + a(n)(u + M1)`, `y' = P(y + b(n)(v + M2))`.
pub fn step(
    system: &CoupledSystem,
    x: &[f64],
    y: &[f64],
    n: u64,
    pair: &SchedulePair,
    streams: &mut Streams,
) -> Result<StepOutput, EngineError> {
    let (u, v) = system.selections(x, y, n)?;
    let m1 = streams.fast.sample(x, y);
    let m2 = streams.slow.sample(x, y);
    let (a, b) = (pair.fast.value(n), pair.slow.value(n));
    let x_next: Vec<f64> = x.iter().zip(&u).zip(&m1).map(|((xi, ui), mi)| xi + a * (ui + mi)).collect();
    let mut y_next: Vec<f64> = y.iter().zip(&v).zip(&m2).map(|((yi, vi), mi)| yi + b * (vi + mi)).collect();
    if let Some(p) = &system.projection {
        y_next = p.apply(y_next);
    }
    if !all_finite(&x_next) || !all_finite(&y_next) {
        return Err(EngineError::NonFinite { step: n });
    }
    Ok(StepOutput {
        x: x_next,
        y: y_next,
        u,
        v,
        m1,
        m2,
    })
}

/// Which norm the divergence bound applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitor {
    /// `||x|| + ||y||`
    #[default]
    Joint,
    Fast,
    Slow,
}

impl Monitor {
    pub fn measure(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Monitor::Joint => norm(x) + norm(y),
            Monitor::Fast => norm(x),
            Monitor::Slow => norm(y),
        }
    }
}

pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedules: SchedulePair,
    pub noise_fast: NoiseSpec,
    pub noise_slow: NoiseSpec,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub steps: u64,
    pub divergence_bound: f64,
    pub log_stride: u64,
    pub monitor: Monitor,
    /// Run even when the schedules fail validation.
    pub allow_invalid_schedules: bool,
}

impl RunConfig {
    /// Default schedules, no noise, dense logging.
    pub fn new(x0: Vec<f64>, y0: Vec<f64>, steps: u64) -> Self {
        RunConfig {
            schedules: SchedulePair::default(),
            noise_fast: NoiseSpec::zero(),
            noise_slow: NoiseSpec::zero(),
            x0,
            y0,
            steps,
            divergence_bound: DEFAULT_DIVERGENCE_BOUND,
            log_stride: 1,
            monitor: Monitor::Joint,
            allow_invalid_schedules: false,
        }
    }

    pub fn with_noise(mut self, fast: NoiseSpec, slow: NoiseSpec) -> Self {
        self.noise_fast = fast;
        self.noise_slow = slow;
        self
    }

    pub fn with_schedules(mut self, schedules: SchedulePair) -> Self {
        self.schedules = schedules;
        self
    }

    pub fn with_log_stride(mut self, stride: u64) -> Self {
        self.log_stride = stride;
        self
    }

    pub fn with_divergence_bound(mut self, bound: f64) -> Self {
        self.divergence_bound = bound;
        self
    }

    fn check(&self, system: &CoupledSystem) -> Result<(), EngineError> {
        if self.steps == 0 {
            return Err(EngineError::Config("steps must be at least 1".into()));
        }
        if self.log_stride == 0 {
            return Err(EngineError::Config("log_stride must be at least 1".into()));
        }
        if self.x0.len() != system.fast_dim || self.y0.len() != system.slow_dim {
            return Err(EngineError::InitialShape(
                self.x0.len(),
                self.y0.len(),
                system.fast_dim,
                system.slow_dim,
            ));
        }
        if !all_finite(&self.x0) || !all_finite(&self.y0) {
            return Err(EngineError::Config("initial state must be finite".into()));
        }
        let start = self.monitor.measure(&self.x0, &self.y0);
        if !(self.divergence_bound > start) {
            return Err(EngineError::Config(format!(
                "divergence bound {} must exceed the initial norm {}",
                self.divergence_bound, start
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunVerdict {
    Completed,
    Diverged { step: u64 },
}

impl fmt::Display for RunVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunVerdict::Completed => f.write_str("completed"),
            RunVerdict::Diverged { step } => write!(f, "diverged@{step}"),
        }
    }
}

impl std::str::FromStr for RunVerdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "completed" {
            return Ok(RunVerdict::Completed);
        }
        s.strip_prefix("diverged@")
            .and_then(|n| n.parse().ok())
            .map(|step| RunVerdict::Diverged { step })
            .ok_or_else(|| format!("unknown verdict {s:?}"))
    }
}

/// State, selections and noise at step `n`, with both clocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub n: u64,
    pub t: f64,
    pub s: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `M1_{n+1}`
    pub m1: Vec<f64>,
    /// `M2_{n+1}`
    pub m2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSource {
    Recorded,
    /// Recovered from consecutive states; exact for the fast iterate, and for
    /// the slow one only when no projection was active.
    Reconstructed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub fast_dim: usize,
    pub slow_dim: usize,
    pub records: Vec<TraceRecord>,
    pub verdict: RunVerdict,
    pub divergence_bound: f64,
    pub monitor: Monitor,
    pub noise_source: NoiseSource,
}

impl Trace {
    pub fn first(&self) -> &TraceRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("a trace has at least one record")
    }

    /// True when every record index follows its predecessor by one.
    pub fn is_dense(&self) -> bool {
        self.records.windows(2).all(|w| w[1].n == w[0].n + 1)
    }

    /// Position of step `n` in the records, if logged.
    pub fn position(&self, n: u64) -> Option<usize> {
        self.records.binary_search_by_key(&n, |r| r.n).ok()
    }
}

/// Iterates the recursion for `config.steps` steps.
pub fn run(system: &CoupledSystem, config: &RunConfig) -> Result<Trace, EngineError> {
    config.check(system)?;
    let report = validate_pair(&config.schedules);
    if !report.is_valid() && !config.allow_invalid_schedules {
        return Err(EngineError::InvalidSchedules(report));
    }
    let pair = &config.schedules;
    let mut streams = Streams::new(system, &config.noise_fast, &config.noise_slow);
    let mut x = config.x0.clone();
    let mut y = config.y0.clone();
    let (mut t, mut s) = (0.0, 0.0);
    let mut records = Vec::with_capacity((config.steps / config.log_stride + 2).min(1 << 24) as usize);
    let mut verdict = RunVerdict::Completed;

    let mut n = 0;
    loop {
        let out_step = n < config.steps && verdict == RunVerdict::Completed;
        let log = !out_step || n % config.log_stride == 0;
        if !out_step {
            // Final state: selections and the would-be noise, not applied.
            let (u, v) = system.selections(&x, &y, n)?;
            let m1 = streams.fast.sample(&x, &y);
            let m2 = streams.slow.sample(&x, &y);
            records.push(TraceRecord { n, t, s, x, y, u, v, m1, m2 });
            break;
        }
        let out = step(system, &x, &y, n, pair, &mut streams)?;
        if log {
            records.push(TraceRecord {
                n,
                t,
                s,
                x: std::mem::take(&mut x),
                y: std::mem::take(&mut y),
                u: out.u,
                v: out.v,
                m1: out.m1,
                m2: out.m2,
            });
        }
        t += pair.fast.value(n);
        s += pair.slow.value(n);
        x = out.x;
        y = out.y;
        n += 1;
        if config.monitor.measure(&x, &y) > config.divergence_bound {
            verdict = RunVerdict::Diverged { step: n };
        }
    }

    Ok(Trace {
        fast_dim: system.fast_dim,
        slow_dim: system.slow_dim,
        records,
        verdict,
        divergence_bound: config.divergence_bound,
        monitor: config.monitor,
        noise_source: NoiseSource::Recorded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    Bounded,
    Diverged { first_crossing_step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Running supremum of `||x_n|| + ||y_n||` over logged steps.
    pub sup_norm: f64,
    pub sup_step: u64,
    pub verdict: Stability,
}

pub fn monitor_stability(trace: &Trace) -> StabilityReport {
    let (mut sup_norm, mut sup_step) = (f64::NEG_INFINITY, 0);
    let mut crossing = None;
    for r in &trace.records {
        let v = norm(&r.x) + norm(&r.y);
        if v > sup_norm {
            sup_norm = v;
            sup_step = r.n;
        }
        if crossing.is_none() && trace.monitor.measure(&r.x, &r.y) > trace.divergence_bound {
            crossing = Some(r.n);
        }
    }
    let verdict = match (trace.verdict, crossing) {
        (RunVerdict::Diverged { step }, _) => Stability::Diverged { first_crossing_step: step },
        (_, Some(step)) => Stability::Diverged { first_crossing_step: step },
        _ => Stability::Bounded,
    };
    StabilityReport {
        sup_norm,
        sup_step,
        verdict,
    }
}

/// Largest `d(u_n, h(x_n, y_n))` and `d(v_n, g(x_n, y_n))` over the trace.
pub fn selection_membership_error(system: &CoupledSystem, trace: &Trace) -> f64 {
    trace
        .records
        .iter()
        .map(|r| {
            let du = distance(&r.u, &system.h_value(&r.x, &r.y)).unwrap_or(f64::INFINITY);
            let dv = distance(&r.v, &system.g_value(&r.x, &r.y)).unwrap_or(f64::INFINITY);
            du.max(dv)
        })
        .fold(0.0, f64::max)
}

/// Largest `||y_{n+1} - y_n - a(n)[ε(n) + M3_{n+1}]||` with `ε(n) = (b/a) v_n`
/// and `M3_{n+1} = (b/a) M2_{n+1}`, over consecutive logged pairs.
pub fn slow_rewrite_residual(trace: &Trace, pair: &SchedulePair) -> f64 {
    let mut worst: f64 = 0.0;
    for w in trace.records.windows(2) {
        let (r, next) = (&w[0], &w[1]);
        if next.n != r.n + 1 {
            continue;
        }
        let (a, b) = (pair.fast.value(r.n), pair.slow.value(r.n));
        let ratio = b / a;
        for i in 0..r.y.len() {
            let eps = ratio * r.v[i];
            let m3 = ratio * r.m2[i];
            worst = worst.max((next.y[i] - r.y[i] - a * (eps + m3)).abs());
        }
    }
    worst
}

fn header(d: usize, k: usize) -> Vec<String> {
    let mut h = vec!["n".to_string(), "t".to_string(), "s".to_string()];
    h.extend((0..d).map(|i| format!("x_{i}")));
    h.extend((0..k).map(|i| format!("y_{i}")));
    h.extend((0..d).map(|i| format!("ux_{i}")));
    h.extend((0..k).map(|i| format!("vy_{i}")));
    h.push("verdict".to_string());
    h
}

/// CSV with header `n,t,s,x_*,y_*,ux_*,vy_*,verdict`. The final verdict is
/// repeated on each row.
pub fn write_csv<W: Write>(trace: &Trace, writer: W) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(trace.fast_dim, trace.slow_dim))?;
    let verdict = trace.verdict.to_string();
    let mut row: Vec<String> = Vec::new();
    for r in &trace.records {
        row.clear();
        row.push(r.n.to_string());
        row.push(r.t.to_string());
        row.push(r.s.to_string());
        for v in r.x.iter().chain(&r.y).chain(&r.u).chain(&r.v) {
            row.push(v.to_string());
        }
        row.push(verdict.clone());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| EngineError::Format(e.to_string()))?;
    Ok(())
}

/// Reads a CSV trace and recovers the noise from consecutive rows:
/// `M1_{n+1} = (x_{n+1} - x_n) / a(n) - u_n`, likewise for `M2`. Rows without
/// a successor get zero noise.
pub fn read_csv<R: Read>(reader: R, pair: &SchedulePair) -> Result<Trace, EngineError> {
    let mut rd = csv::Reader::from_reader(reader);
    let head = rd.headers()?.clone();
    let count = |p: &str| head.iter().filter(|h| h.starts_with(p)).count();
    let (d, k) = (count("x_"), count("y_"));
    if head.iter().collect::<Vec<_>>() != header(d, k).iter().map(|s| s.as_str()).collect::<Vec<_>>() {
        return Err(EngineError::Format("unexpected header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| EngineError::Format(format!("bad number {s:?}")));
    let mut records = Vec::new();
    let mut verdict = RunVerdict::Completed;
    for row in rd.records() {
        let row = row?;
        let n: u64 = row[0].parse().map_err(|_| EngineError::Format(format!("bad step {:?}", &row[0])))?;
        let vals: Vec<f64> = (1..3 + 2 * (d + k)).map(|i| num(&row[i])).collect::<Result<_, _>>()?;
        verdict = row[row.len() - 1].parse().map_err(EngineError::Format)?;
        let (t, s) = (vals[0], vals[1]);
        let rest = &vals[2..];
        records.push(TraceRecord {
            n,
            t,
            s,
            x: rest[..d].to_vec(),
            y: rest[d..d + k].to_vec(),
            u: rest[d + k..2 * d + k].to_vec(),
            v: rest[2 * d + k..].to_vec(),
            m1: vec![0.0; d],
            m2: vec![0.0; k],
        });
    }
    if records.is_empty() {
        return Err(EngineError::Format("trace has no rows".into()));
    }
    for i in 0..records.len() - 1 {
        if records[i + 1].n != records[i].n + 1 {
            continue;
        }
        let n = records[i].n;
        let (a, b) = (pair.fast.value(n), pair.slow.value(n));
        let (cur, next) = records.split_at_mut(i + 1);
        let (r, nx) = (&mut cur[i], &next[0]);
        for j in 0..d {
            r.m1[j] = (nx.x[j] - r.x[j]) / a - r.u[j];
        }
        for j in 0..k {
            r.m2[j] = (nx.y[j] - r.y[j]) / b - r.v[j];
        }
    }
    Ok(Trace {
        fast_dim: d,
        slow_dim: k,
        records,
        verdict,
        divergence_bound: f64::INFINITY,
        monitor: Monitor::Joint,
        noise_source: NoiseSource::Reconstructed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::make_power_schedule;
    use crate::setvalued::neg_subdiff_flat_box;

    fn contraction() -> CoupledSystem {
        let h = SetValuedMap::single_valued("-x", 2, 1, 1.0, |z| vec![-z[0]]);
        let g = SetValuedMap::single_valued("-y", 2, 1, 1.0, |z| vec![-z[1]]);
        CoupledSystem::new(h, g, 1, 1).unwrap()
    }

    fn pair(a0: f64, b0: f64) -> SchedulePair {
        let constant = |v| crate::schedules::StepSchedule::table(vec![v]).unwrap();
        SchedulePair::new(constant(a0), constant(b0))
    }

    #[test]
    fn single_step_arithmetic() {
        let sys = contraction();
        let mut streams = Streams::new(&sys, &NoiseSpec::zero(), &NoiseSpec::zero());
        let out = step(&sys, &[1.0], &[1.0], 0, &pair(0.5, 0.1), &mut streams).unwrap();
        assert_eq!(out.x, vec![0.5]);
        assert_eq!(out.y, vec![0.9]);
        assert_eq!(out.u, vec![-1.0]);
        assert_eq!(out.v, vec![-1.0]);
    }

    #[test]
    fn least_norm_at_flat_interior_keeps_x() {
        let h = SetValuedMap::new("flat", 2, 1, 1.0, |z| neg_subdiff_flat_box(z[0]));
        let g = SetValuedMap::single_valued("x-y", 2, 1, 2.0, |z| vec![z[0] - z[1]]);
        let sys = CoupledSystem::new(h, g, 1, 1).unwrap();
        let mut streams = Streams::new(&sys, &NoiseSpec::zero(), &NoiseSpec::zero());
        let out = step(&sys, &[0.0], &[0.5], 0, &SchedulePair::default(), &mut streams).unwrap();
        assert_eq!(out.u, vec![0.0]);
        assert_eq!(out.x, vec![0.0]);
        // At the kink the value is [-1, 0] and least norm still picks 0.
        let out = step(&sys, &[1.0], &[0.5], 0, &SchedulePair::default(), &mut streams).unwrap();
        assert_eq!(out.u, vec![0.0]);
    }

    #[test]
    fn identical_seeds_identical_steps() {
        let sys = contraction();
        let spec = NoiseSpec::gaussian(0.3, 42);
        let mut s1 = Streams::new(&sys, &spec, &spec.for_run(1000));
        let mut s2 = Streams::new(&sys, &spec, &spec.for_run(1000));
        let p = SchedulePair::default();
        for n in 0..10 {
            assert_eq!(
                step(&sys, &[1.0], &[2.0], n, &p, &mut s1).unwrap(),
                step(&sys, &[1.0], &[2.0], n, &p, &mut s2).unwrap()
            );
        }
    }

    #[test]
    fn contraction_run_decays() {
        // Π (1 - a(n)) over 1e4 steps with a(n) = (n+1)^-0.6, a(0) = 1, is 0
        // for x; for y, Π (1 - b(n)) with b(0) = 1 is 0 as well. Both
        // coordinates therefore vanish after the first step.
        let trace = run(&contraction(), &RunConfig::new(vec![1.0], vec![1.0], 10_000)).unwrap();
        let last = trace.last();
        assert!(norm(&last.x) + norm(&last.y) < 1e-2);
        let stab = monitor_stability(&trace);
        assert_eq!(stab.sup_step, 0);
        assert_eq!(stab.sup_norm, 2.0);
        assert_eq!(stab.verdict, Stability::Bounded);

        // Offset schedules avoid the exact first-step collapse; the decay
        // then follows Π (1 - a(n)) computed directly.
        let fast = make_power_schedule(0.5, 0.6, 0).unwrap();
        let slow = make_power_schedule(0.5, 0.9, 0).unwrap();
        let p = SchedulePair::new(fast.clone(), slow.clone());
        let trace = run(&contraction(), &RunConfig::new(vec![1.0], vec![1.0], 10_000).with_schedules(p)).unwrap();
        let prod_a: f64 = (0..10_000).map(|n| 1.0 - fast.value(n)).product();
        let prod_b: f64 = (0..10_000).map(|n| 1.0 - slow.value(n)).product();
        assert!((trace.last().x[0] - prod_a).abs() < 1e-12);
        assert!((trace.last().y[0] - prod_b).abs() < 1e-12);
        assert!(prod_a.abs() + prod_b.abs() < 1e-2);
    }

    #[test]
    fn explosive_run_diverges() {
        let h = SetValuedMap::single_valued("-x", 2, 1, 1.0, |z| vec![-z[0]]);
        let g = SetValuedMap::single_valued("+y", 2, 1, 1.0, |z| vec![z[1]]);
        let sys = CoupledSystem::new(h, g, 1, 1).unwrap();
        let cfg = RunConfig::new(vec![0.0], vec![1.0], 100_000).with_divergence_bound(1e3);
        let trace = run(&sys, &cfg).unwrap();
        let RunVerdict::Diverged { step } = trace.verdict else {
            panic!("expected divergence");
        };
        assert!(step < 100_000);
        assert_eq!(trace.last().n, step);
        assert!(trace.last().y[0] > 1e3);
        assert_eq!(
            monitor_stability(&trace).verdict,
            Stability::Diverged { first_crossing_step: step }
        );
    }

    #[test]
    fn run_rejects_bad_configs() {
        let sys = contraction();
        let mut cfg = RunConfig::new(vec![1.0], vec![1.0], 10);
        cfg.schedules = SchedulePair::new(
            make_power_schedule(1.0, 1.0, 0).unwrap(),
            make_power_schedule(1.0, 1.0, 0).unwrap(),
        );
        assert!(matches!(run(&sys, &cfg), Err(EngineError::InvalidSchedules(_))));
        cfg.allow_invalid_schedules = true;
        assert!(run(&sys, &cfg).is_ok());
        assert!(matches!(
            run(&sys, &RunConfig::new(vec![1.0], vec![1.0], 0)),
            Err(EngineError::Config(_))
        ));
        assert!(matches!(
            run(&sys, &RunConfig::new(vec![1.0], vec![1.0], 5).with_divergence_bound(1.5)),
            Err(EngineError::Config(_))
        ));
        assert!(matches!(
            run(&sys, &RunConfig::new(vec![1.0, 2.0], vec![1.0], 5)),
            Err(EngineError::InitialShape(..))
        ));
    }

    #[test]
    fn non_finite_is_a_hard_error() {
        let h = SetValuedMap::single_valued("nan", 2, 1, 1.0, |z| vec![if z[0] > 0.5 { f64::NAN } else { 1.0 }]);
        let g = SetValuedMap::single_valued("0", 2, 1, 1.0, |_| vec![0.0]);
        let sys = CoupledSystem::new(h, g, 1, 1).unwrap();
        let err = run(&sys, &RunConfig::new(vec![0.0], vec![0.0], 10)).unwrap_err();
        assert!(matches!(err, EngineError::NonFinite { step: 1 }), "{err:?}");
    }

    #[test]
    fn sparse_logging_keeps_final_state() {
        let cfg = RunConfig::new(vec![1.0], vec![1.0], 25).with_log_stride(10);
        let trace = run(&contraction(), &cfg).unwrap();
        let ns: Vec<u64> = trace.records.iter().map(|r| r.n).collect();
        assert_eq!(ns, vec![0, 10, 20, 25]);
        assert!(!trace.is_dense());
    }

    #[test]
    fn csv_round_trip_reconstructs_noise() {
        let h = SetValuedMap::new("flat", 2, 1, 1.0, |z| neg_subdiff_flat_box(z[0]));
        let g = SetValuedMap::single_valued("x-y", 2, 1, 2.0, |z| vec![z[0] - z[1]]);
        let sys = CoupledSystem::new(h, g, 1, 1).unwrap();
        let cfg = RunConfig::new(vec![3.0], vec![-2.0], 200)
            .with_noise(NoiseSpec::gaussian(0.1, 1), NoiseSpec::gaussian(0.1, 2));
        let trace = run(&sys, &cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n,t,s,x_0,y_0,ux_0,vy_0,verdict\n"));
        let back = read_csv(buf.as_slice(), &cfg.schedules).unwrap();
        assert_eq!(back.records.len(), trace.records.len());
        for (a, b) in trace.records.iter().zip(&back.records).take(trace.records.len() - 1) {
            assert_eq!(a.x, b.x);
            assert!((a.m1[0] - b.m1[0]).abs() < 1e-9 * (1.0 + a.m1[0].abs()) / cfg.schedules.fast.value(a.n));
            assert!((a.m2[0] - b.m2[0]).abs() < 1e-9 / cfg.schedules.slow.value(a.n));
        }
        assert!(read_csv("a,b\n1,2\n".as_bytes(), &cfg.schedules).is_err());
    }

    #[test]
    fn verdict_strings() {
        assert_eq!("completed".parse::<RunVerdict>().unwrap(), RunVerdict::Completed);
        assert_eq!("diverged@17".parse::<RunVerdict>().unwrap(), RunVerdict::Diverged { step: 17 });
        assert!("nope".parse::<RunVerdict>().is_err());
    }
}
