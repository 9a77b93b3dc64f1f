//! Experiment configuration files.
//!
//! ```json
//! {
//!   "system": {"registry": "dual-qp"},
//!   "schedules": {"fast": {"family": "power-law", "exponent": 0.6},
//!                 "slow": {"family": "power-law", "exponent": 0.9}},
//!   "noise": {"fast": {"kind": "iid-gaussian", "sigma": 0.05, "seed": 0},
//!             "slow": {"kind": "iid-gaussian", "sigma": 0.05, "seed": 1000000}},
//!   "steps": 200000,
//!   "seeds": [1, 2, 3],
//!   "log_stride": 100
//! }
//! ```
//!
//! `system` is either `{"registry": NAME}` or
//! `{"qp": {"Q": .., "b": .., "c": .., "A": ..}, "scheme": "dual" | "primal", "project": bool}`.
//! Unknown keys are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use ttsa::engine::{CoupledSystem, Monitor, RunConfig, DEFAULT_DIVERGENCE_BOUND};
use ttsa::flows::{self, PredefinedSystem};
use ttsa::lagrangian::QuadraticProgram;
use ttsa::noise::NoiseSpec;
use ttsa::schedules::SchedulePair;
use ttsa::trajectories::Timescale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Dual,
    Primal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qp: Option<QuadraticProgram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    /// Projection of the multiplier onto `μ >= 0` (dual scheme only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePair {
    pub fast: NoiseSpec,
    pub slow: NoiseSpec,
}

impl Default for NoisePair {
    fn default() -> Self {
        NoisePair {
            fast: NoiseSpec::zero(),
            slow: NoiseSpec::zero(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Initial {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub s: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "fast")]
    pub timescale: Timescale,
}

fn fast() -> Timescale {
    Timescale::Fast
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    #[serde(default)]
    pub windows: Vec<WindowSpec>,
    /// Membership slack for `v_n ∈ N^ε(G(y_n))`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Step of the `G`-flow integrator used for slow tracking.
    #[serde(default = "default_flow_step")]
    pub flow_step: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Diagnostics {
            windows: Vec::new(),
            epsilon: default_epsilon(),
            flow_step: default_flow_step(),
        }
    }
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_flow_step() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub schedules: SchedulePair,
    #[serde(default)]
    pub noise: NoisePair,
    #[serde(default)]
    pub initial: Option<Initial>,
    pub steps: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub log_stride: u64,
    #[serde(default = "default_bound")]
    pub divergence_bound: f64,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub output: Output,
}

fn one() -> u64 {
    1
}

fn default_bound() -> f64 {
    DEFAULT_DIVERGENCE_BOUND
}

/// The system a config refers to, with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub system: PredefinedSystem,
    pub qp: Option<QuadraticProgram>,
    pub scheme: Option<Scheme>,
}

impl Resolved {
    pub fn coupled(&self) -> &CoupledSystem {
        &self.system.system
    }

    /// Engine-order `(x0, y0)` labels for reports: the primal scheme runs `μ` fast.
    pub fn is_primal(&self) -> bool {
        self.scheme == Some(Scheme::Primal) || self.system.name == "primal-qp"
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| format!("invalid config: {e}"))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), String> {
        if self.seeds.is_empty() {
            return Err("seed list is empty".into());
        }
        if self.steps == 0 {
            return Err("steps must be at least 1".into());
        }
        if self.log_stride == 0 {
            return Err("log_stride must be at least 1".into());
        }
        self.resolve().map(|_| ())
    }

    pub fn resolve(&self) -> Result<Resolved, String> {
        let s = &self.system;
        match (&s.registry, &s.qp) {
            (Some(name), None) => {
                if s.scheme.is_some() || s.project.is_some() {
                    return Err("`scheme` and `project` apply to inline `qp` systems only".into());
                }
                let system = flows::lookup(name).ok_or_else(|| {
                    let known: Vec<&str> = flows::registry().iter().map(|p| p.name).collect();
                    format!("unknown registry system `{name}` (known: {})", known.join(", "))
                })?;
                let qp = match name.as_str() {
                    "dual-qp" => Some(QuadraticProgram::example_active()),
                    "primal-qp" => Some(QuadraticProgram::example_inactive()),
                    _ => None,
                };
                Ok(Resolved {
                    system,
                    qp,
                    scheme: None,
                })
            }
            (None, Some(qp)) => {
                let scheme = s.scheme.unwrap_or(Scheme::Dual);
                let system = match scheme {
                    Scheme::Dual => flows::dual_qp_system(qp, s.project.unwrap_or(true)),
                    Scheme::Primal => {
                        if s.project == Some(true) {
                            return Err("the primal scheme runs without projection".into());
                        }
                        flows::primal_qp_system(qp)
                    }
                };
                Ok(Resolved {
                    system,
                    qp: Some(qp.clone()),
                    scheme: Some(scheme),
                })
            }
            _ => Err("`system` needs exactly one of `registry` or `qp`".into()),
        }
    }

    /// Engine configuration for one seed; noise seeds are offset by `seed`.
    pub fn run_config(&self, resolved: &Resolved, seed: u64, allow_invalid: bool) -> RunConfig {
        let (x0, y0) = match &self.initial {
            Some(i) => (i.x0.clone(), i.y0.clone()),
            None => (resolved.system.x0.clone(), resolved.system.y0.clone()),
        };
        let mut rc = RunConfig::new(x0, y0, self.steps)
            .with_schedules(self.schedules.clone())
            .with_noise(self.noise.fast.for_run(seed), self.noise.slow.for_run(seed))
            .with_log_stride(self.log_stride)
            .with_divergence_bound(self.divergence_bound);
        if resolved.is_primal() {
            rc.monitor = Monitor::Fast;
        }
        rc.allow_invalid_schedules = allow_invalid;
        rc
    }
}
