//! Step-size sequences and the summability conditions on a fast/slow pair.
//!
//! A [`StepSchedule`] is either a power law `gain / (n + offset + 1)^exponent`
//! or a finite table of values. Every schedule is normalized so that
//! `sup_n a(n) <= 1`; construction fails otherwise.
//!
//! [`validate_pair`] checks that `Σ a = Σ b = ∞`, `Σ a² + b² < ∞` and
//! `b(n)/a(n) → 0`. Power-law pairs are decided exactly from p-series facts;
//! tables can only be judged heuristically from their finite prefix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("gain must be positive and finite, got {0}")]
    NonPositiveGain(f64),
    #[error("exponent must be finite, got {0}")]
    NonFiniteExponent(f64),
    #[error("schedule exceeds the normalization sup a(n) <= 1 (a(0) = {0})")]
    Normalization(f64),
    #[error("negative exponent {0} makes the schedule unbounded")]
    Unbounded(f64),
    #[error("table schedule needs at least one value")]
    EmptyTable,
    #[error("table value {value} at index {index} is not a positive finite number")]
    NonPositiveTableValue { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    PowerLaw,
    Table,
}

/// A deterministic positive step-size sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct StepSchedule {
    family: ScheduleFamily,
    gain: f64,
    exponent: f64,
    offset: u64,
    table: Option<Vec<f64>>,
}

/// Serialized form: `{family, gain, exponent, offset}` or `{family: "table", table}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub family: ScheduleFamily,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub exponent: f64,
    #[serde(default)]
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<ScheduleSpec> for StepSchedule {
    type Error = ScheduleError;

    fn try_from(spec: ScheduleSpec) -> Result<Self, Self::Error> {
        match spec.family {
            ScheduleFamily::PowerLaw => make_power_schedule(spec.gain, spec.exponent, spec.offset),
            ScheduleFamily::Table => StepSchedule::table(spec.table.unwrap_or_default()),
        }
    }
}

impl From<StepSchedule> for ScheduleSpec {
    fn from(s: StepSchedule) -> Self {
        ScheduleSpec {
            family: s.family,
            gain: s.gain,
            exponent: s.exponent,
            offset: s.offset,
            table: s.table,
        }
    }
}

/// `a(n) = gain / (n + offset + 1)^exponent`.
pub fn make_power_schedule(gain: f64, exponent: f64, offset: u64) -> Result<StepSchedule, ScheduleError> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(ScheduleError::NonPositiveGain(gain));
    }
    if !exponent.is_finite() {
        return Err(ScheduleError::NonFiniteExponent(exponent));
    }
    let s = StepSchedule {
        family: ScheduleFamily::PowerLaw,
        gain,
        exponent,
        offset,
        table: None,
    };
    let first = s.value(0);
    if first > 1.0 {
        return Err(ScheduleError::Normalization(first));
    }
    if exponent < 0.0 {
        return Err(ScheduleError::Unbounded(exponent));
    }
    Ok(s)
}

impl StepSchedule {
    /// A finite table; indices past the end repeat the last value.
    pub fn table(values: Vec<f64>) -> Result<Self, ScheduleError> {
        if values.is_empty() {
            return Err(ScheduleError::EmptyTable);
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ScheduleError::NonPositiveTableValue { index, value });
            }
            if value > 1.0 {
                return Err(ScheduleError::Normalization(value));
            }
        }
        Ok(StepSchedule {
            family: ScheduleFamily::Table,
            gain: 1.0,
            exponent: 0.0,
            offset: 0,
            table: Some(values),
        })
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    #[inline]
    pub fn value(&self, n: u64) -> f64 {
        match &self.table {
            Some(t) => t[(n as usize).min(t.len() - 1)],
            None => self.gain / ((n + self.offset + 1) as f64).powf(self.exponent),
        }
    }

    /// Streams `(n, t(n), a(n))` starting from `n = 0`.
    pub fn clock_iter(&self) -> ClockIter<'_> {
        ClockIter {
            schedule: self,
            n: 0,
            t: 0.0,
        }
    }
}

/// Iterator over `(n, t(n), a(n))` with `t(n) = Σ_{i<n} a(i)` accumulated
/// left to right, so it agrees bit for bit with [`clock`].
pub struct ClockIter<'a> {
    schedule: &'a StepSchedule,
    n: u64,
    t: f64,
}

impl Iterator for ClockIter<'_> {
    type Item = (u64, f64, f64);

    fn next(&mut self) -> Option<Self::Item> {
        let a = self.schedule.value(self.n);
        let item = (self.n, self.t, a);
        self.t += a;
        self.n += 1;
        Some(item)
    }
}

/// `t(n) = Σ_{i=0}^{n-1} a(i)`, with `t(0) = 0`.
pub fn clock(schedule: &StepSchedule, n: u64) -> f64 {
    let mut t = 0.0;
    for i in 0..n {
        t += schedule.value(i);
    }
    t
}

/// Fast (`a`) and slow (`b`) step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePair {
    pub fast: StepSchedule,
    pub slow: StepSchedule,
}

impl SchedulePair {
    pub fn new(fast: StepSchedule, slow: StepSchedule) -> Self {
        SchedulePair { fast, slow }
    }
}

impl Default for SchedulePair {
    /// `a(n) = (n+1)^-0.6`, `b(n) = (n+1)^-0.9`.
    fn default() -> Self {
        SchedulePair {
            fast: make_power_schedule(1.0, 0.6, 0).expect("valid default"),
            slow: make_power_schedule(1.0, 0.9, 0).expect("valid default"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    SumDivergenceA,
    SumDivergenceB,
    SquareSummabilityA,
    SquareSummabilityB,
    RatioToZero,
    Positivity,
    Normalization,
}

impl Condition {
    pub fn tag(self) -> &'static str {
        match self {
            Condition::SumDivergenceA => "sum-divergence-a",
            Condition::SumDivergenceB => "sum-divergence-b",
            Condition::SquareSummabilityA => "square-summability-a",
            Condition::SquareSummabilityB => "square-summability-b",
            Condition::RatioToZero => "ratio-to-zero",
            Condition::Positivity => "positivity",
            Condition::Normalization => "normalization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationMethod {
    Analytic,
    NumericHeuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub violated_conditions: Vec<Condition>,
    pub method: ValidationMethod,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }
}

/// Asymptotic decay exponent `p` with `a(n) ~ C n^-p` and the constant `C`.
fn decay(schedule: &StepSchedule) -> (f64, f64) {
    match &schedule.table {
        None => (schedule.exponent, schedule.gain),
        Some(t) => fit_tail(t),
    }
}

/// Least-squares fit of `log a(n) = log C - p log(n+1)` over the second half
/// of a table. Tables shorter than 4 entries are treated as constant.
fn fit_tail(table: &[f64]) -> (f64, f64) {
    if table.len() < 4 {
        return (0.0, *table.last().unwrap());
    }
    let start = table.len() / 2;
    let pts: Vec<(f64, f64)> = table[start..]
        .iter()
        .enumerate()
        .map(|(i, &v)| (((start + i + 1) as f64).ln(), v.ln()))
        .collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (-slope, (my - slope * mx).exp())
}

/// Checks the step-size conditions on a pair.
///
/// Power-law pairs: `Σ n^-p` diverges iff `p <= 1`, `Σ n^-2p` converges iff
/// `p > 1/2`, and `b/a → 0` iff the slow exponent is strictly larger. Table
/// schedules go through the same tests with exponents fitted to the tail of
/// the table, and the report is marked heuristic.
pub fn validate_pair(pair: &SchedulePair) -> ValidationReport {
    let heuristic = pair.fast.family == ScheduleFamily::Table || pair.slow.family == ScheduleFamily::Table;
    let mut violated = Vec::new();

    for s in [&pair.fast, &pair.slow] {
        let positive = match &s.table {
            Some(t) => t.iter().all(|&v| v > 0.0),
            None => s.gain > 0.0,
        };
        if !positive && !violated.contains(&Condition::Positivity) {
            violated.push(Condition::Positivity);
        }
        let sup = match &s.table {
            Some(t) => t.iter().cloned().fold(0.0, f64::max),
            None if s.exponent >= 0.0 => s.value(0),
            None => f64::INFINITY,
        };
        if sup > 1.0 && !violated.contains(&Condition::Normalization) {
            violated.push(Condition::Normalization);
        }
    }

    let (pa, _) = decay(&pair.fast);
    let (pb, _) = decay(&pair.slow);
    if pa > 1.0 {
        violated.push(Condition::SumDivergenceA);
    }
    if pb > 1.0 {
        violated.push(Condition::SumDivergenceB);
    }
    if pa <= 0.5 {
        violated.push(Condition::SquareSummabilityA);
    }
    if pb <= 0.5 {
        violated.push(Condition::SquareSummabilityB);
    }
    // Equal exponents leave the ratio at a positive constant.
    let ratio_ok = if heuristic { pb - pa > 1e-3 } else { pb > pa };
    if !ratio_ok {
        violated.push(Condition::RatioToZero);
    }

    ValidationReport {
        verdict: if violated.is_empty() { Verdict::Valid } else { Verdict::Invalid },
        violated_conditions: violated,
        method: if heuristic {
            ValidationMethod::NumericHeuristic
        } else {
            ValidationMethod::Analytic
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn power(g: f64, p: f64) -> StepSchedule {
        make_power_schedule(g, p, 0).unwrap()
    }

    #[test]
    fn power_schedule_values() {
        let s = power(1.0, 0.6);
        assert_eq!(s.value(0), 1.0);
        assert_relative_eq!(s.value(1), 2f64.powf(-0.6), max_relative = 1e-15);
        let c = power(1.0, 0.0);
        assert!((0..100).all(|n| c.value(n) == 1.0));
    }

    #[test]
    fn rejects_unnormalized_and_bad_gain() {
        assert_eq!(make_power_schedule(2.0, 1.0, 0), Err(ScheduleError::Normalization(2.0)));
        assert!(matches!(make_power_schedule(0.0, 1.0, 0), Err(ScheduleError::NonPositiveGain(_))));
        assert!(matches!(make_power_schedule(-1.0, 1.0, 0), Err(ScheduleError::NonPositiveGain(_))));
        assert!(matches!(make_power_schedule(1.0, -0.5, 0), Err(ScheduleError::Unbounded(_))));
        // An offset can bring a large gain under the bound.
        assert!(make_power_schedule(2.0, 1.0, 1).is_ok());
    }

    #[test]
    fn validate_examples() {
        let ok = validate_pair(&SchedulePair::new(power(1.0, 0.6), power(1.0, 0.9)));
        assert!(ok.is_valid());
        assert_eq!(ok.method, ValidationMethod::Analytic);

        let same = validate_pair(&SchedulePair::new(power(1.0, 1.0), power(1.0, 1.0)));
        assert_eq!(same.verdict, Verdict::Invalid);
        assert_eq!(same.violated_conditions, vec![Condition::RatioToZero]);

        let slow_a = validate_pair(&SchedulePair::new(power(1.0, 0.4), power(1.0, 0.9)));
        assert_eq!(slow_a.violated_conditions, vec![Condition::SquareSummabilityA]);

        let constant = validate_pair(&SchedulePair::new(power(1.0, 0.0), power(1.0, 0.9)));
        assert!(constant.violated_conditions.contains(&Condition::SquareSummabilityA));

        let summable = validate_pair(&SchedulePair::new(power(1.0, 0.6), power(1.0, 1.2)));
        assert_eq!(summable.violated_conditions, vec![Condition::SumDivergenceB]);
    }

    #[test]
    fn table_validation_is_heuristic() {
        let fast: Vec<f64> = (0..4000).map(|n| ((n + 1) as f64).powf(-0.6)).collect();
        let slow: Vec<f64> = (0..4000).map(|n| ((n + 1) as f64).powf(-0.9)).collect();
        let r = validate_pair(&SchedulePair::new(
            StepSchedule::table(fast.clone()).unwrap(),
            StepSchedule::table(slow).unwrap(),
        ));
        assert_eq!(r.method, ValidationMethod::NumericHeuristic);
        assert!(r.is_valid(), "{r:?}");

        let r = validate_pair(&SchedulePair::new(
            StepSchedule::table(fast.clone()).unwrap(),
            StepSchedule::table(fast).unwrap(),
        ));
        assert_eq!(r.violated_conditions, vec![Condition::RatioToZero]);
        assert!(StepSchedule::table(vec![]).is_err());
        assert!(StepSchedule::table(vec![0.5, 0.0]).is_err());
    }

    #[test]
    fn clock_examples() {
        let s = power(1.0, 1.0);
        assert_eq!(clock(&s, 0), 0.0);
        assert_relative_eq!(clock(&s, 3), 1.0 + 0.5 + 1.0 / 3.0, max_relative = 1e-15);
        for n in 0..50 {
            assert!(clock(&s, n + 1) > clock(&s, n));
        }
        let streamed: Vec<f64> = s.clock_iter().take(20).map(|(_, t, _)| t).collect();
        for (n, t) in streamed.iter().enumerate() {
            assert_eq!(*t, clock(&s, n as u64));
        }
    }

    #[test]
    fn serde_shape() {
        let s: StepSchedule =
            serde_json::from_str(r#"{"family":"power-law","gain":1.0,"exponent":0.6,"offset":0}"#).unwrap();
        assert_eq!(s, power(1.0, 0.6));
        assert!(serde_json::from_str::<StepSchedule>(r#"{"family":"power-law","gain":2.0,"exponent":1.0}"#).is_err());
        assert!(serde_json::from_str::<StepSchedule>(r#"{"family":"power-law","bogus":1}"#).is_err());
    }
}
