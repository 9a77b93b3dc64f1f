use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use ttsa::batch::{map_items, Execution};
use ttsa::engine::{self, monitor_stability, RunVerdict, Trace};
use ttsa::flows::{lyapunov_probe, reach_time, AttractorSpec, FlowProblem, LambdaRep};
use ttsa::lagrangian::{kkt_oracle, KktSolution, LagrangianError, QuadraticProgram};
use ttsa::noise::{weighted_sum_diagnostic, DiagnosticOptions, NoiseKind};
use ttsa::schedules::validate_pair;
use ttsa::setvalued::{check_pointwise_bound, check_usc, SetValuedMap, UscOptions, UscSequence};
use ttsa::trajectories::{quasi_static_sup, tracking_error_fast, tracking_error_slow, Timescale, TrackingRecord};

use crate::config::{ExperimentConfig, Resolved};
use crate::CliError;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_config(path: &Path, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::parse(&read_text(path)?).map_err(CliError::Usage)?;
    if let Some(s) = seeds {
        if s.is_empty() {
            return Err(CliError::Usage("--seeds is empty".into()));
        }
        cfg.seeds = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    writeln!(w).map_err(io)?;
    w.flush().map_err(io)
}

/// Write errors (a closed pipe, say) are ignored: the exit status carries the verdict.
fn print_json(value: &impl Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn sample_points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect()
}

fn marchaud_report(map: &SetValuedMap, seed: u64) -> Result<(bool, Value), CliError> {
    let dim = map.domain_dim();
    let bound = check_pointwise_bound(map, &sample_points(dim, 200, seed), map.growth_constant());
    let limits = sample_points(dim, 20, seed + 1);
    let offsets = sample_points(dim, 20, seed + 2);
    let seqs: Vec<UscSequence> = limits
        .iter()
        .zip(&offsets)
        .enumerate()
        .map(|(i, (l, o))| UscSequence::geometric(map, l, o, 30, i))
        .collect();
    let usc = check_usc(map, &seqs, UscOptions::default()).map_err(|e| CliError::Validation(e.to_string()))?;
    let passed = bound.passed() && usc.passed();
    Ok((passed, json!({"name": map.name(), "passed": passed, "growth_bound": bound, "usc": usc})))
}

fn probe(flow: &FlowProblem, start: &[f64], set: ttsa::setvalued::ConvexCompactSet) -> Result<(bool, Value), CliError> {
    let spec = AttractorSpec::global(set);
    let err = |e: ttsa::flows::FlowError| CliError::Validation(e.to_string());
    let reach = reach_time(flow, &[start.to_vec()], &spec, 0.1, 100.0).map_err(err)?;
    let lyap = lyapunov_probe(flow, &spec, 0.2, 0.1, 2, 10.0).map_err(err)?;
    let passed = reach.all_reached_and_stayed() && lyap.passed();
    Ok((passed, json!({"attractor": spec.set.to_string(), "passed": passed, "reach": reach, "lyapunov": lyap})))
}

/// Schedule conditions, sampled Marchaud checks of `h` and `g`, and attractor
/// probes where the system declares its attractors.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let resolved = cfg.resolve().map_err(CliError::Usage)?;
    let sys = resolved.coupled();
    let schedules = validate_pair(&cfg.schedules);
    let mut passed = schedules.is_valid();
    let (h_ok, h) = marchaud_report(&sys.h, 11)?;
    let (g_ok, g) = marchaud_report(&sys.g, 21)?;
    passed &= h_ok && g_ok;

    let rc = cfg.run_config(&resolved, cfg.seeds[0], true);
    let dims_ok = rc.x0.len() == sys.fast_dim() && rc.y0.len() == sys.slow_dim();
    passed &= dims_ok;

    let mut attractors = serde_json::Map::new();
    let step = 1e-2;
    if dims_ok {
        if let Some(LambdaRep::Compact(lam)) = resolved.system.lambda_at(&rc.y0) {
            let flow = resolved.system.fast_flow(&rc.y0, step).map_err(|e| CliError::Validation(e.to_string()))?;
            let (ok, report) = probe(&flow, &rc.x0, lam)?;
            passed &= ok;
            attractors.insert("fast".into(), report);
        }
        if let (Some(a0), Some(flow)) = (resolved.system.slow_attractor.clone(), resolved.system.slow_flow(step)) {
            let flow = flow.map_err(|e| CliError::Validation(e.to_string()))?;
            let (ok, report) = probe(&flow, &rc.y0, a0)?;
            passed &= ok;
            attractors.insert("slow".into(), report);
        }
    }

    let mut warnings = Vec::new();
    let noisy = |k: NoiseKind| k != NoiseKind::Zero;
    if noisy(cfg.noise.fast.kind) && noisy(cfg.noise.slow.kind) && cfg.noise.fast.seed == cfg.noise.slow.seed {
        warnings.push("fast and slow noise share a seed, so their draws are identical");
    }

    print_json(&json!({
        "system": resolved.system.name,
        "passed": passed,
        "schedules": schedules,
        "initial_state_dimensions_match": dims_ok,
        "marchaud": {"h": h, "g": g},
        "attractors": attractors,
        "warnings": warnings,
    }));
    if passed {
        Ok(())
    } else {
        Err(CliError::Validation("validation failed".into()))
    }
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    trace_file: String,
    verdict: Option<String>,
    diverged: bool,
    error: Option<String>,
    final_fast: Vec<f64>,
    final_slow: Vec<f64>,
    sup_norm: f64,
    /// `||x_N - x*||` against the KKT oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    x_error: Option<f64>,
    /// `||μ_N - μ*||` against the KKT oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_error: Option<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn run_seed(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    oracle: Option<&KktSolution>,
    seed: u64,
    out: &Path,
    allow_invalid: bool,
) -> Result<SeedSummary, CliError> {
    let name = format!("trace_seed{seed}.csv");
    let path = out.join(&name);
    let rc = cfg.run_config(resolved, seed, allow_invalid);
    let mut summary = SeedSummary {
        seed,
        trace_file: name,
        verdict: None,
        diverged: false,
        error: None,
        final_fast: Vec::new(),
        final_slow: Vec::new(),
        sup_norm: f64::NAN,
        x_error: None,
        mu_error: None,
    };
    let trace = match engine::run(resolved.coupled(), &rc) {
        Ok(t) => t,
        Err(e) => {
            summary.error = Some(e.to_string());
            return Ok(summary);
        }
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let file = File::create(&path).map_err(io)?;
    let mut w = BufWriter::new(file);
    engine::write_csv(&trace, &mut w).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    w.flush().map_err(io)?;

    let last = trace.last();
    summary.verdict = Some(trace.verdict.to_string());
    summary.diverged = matches!(trace.verdict, RunVerdict::Diverged { .. });
    summary.sup_norm = monitor_stability(&trace).sup_norm;
    summary.final_fast = last.x.clone();
    summary.final_slow = last.y.clone();
    if let Some(o) = oracle {
        let (x, mu) = if resolved.is_primal() { (&last.y, &last.x) } else { (&last.x, &last.y) };
        summary.x_error = Some(distance(x, &o.x_star));
        summary.mu_error = Some(distance(mu, &o.mu_star));
    }
    Ok(summary)
}

fn max_of(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    it.collect::<Option<Vec<f64>>>().map(|v| v.into_iter().fold(0.0, f64::max))
}

/// One CSV per seed (seeds run concurrently) and a `summary.json`.
pub fn run(cfg: &ExperimentConfig, out: &Path, allow_invalid: bool) -> Result<(), CliError> {
    let resolved = cfg.resolve().map_err(CliError::Usage)?;
    let schedules = validate_pair(&cfg.schedules);
    if !schedules.is_valid() && !allow_invalid {
        let tags: Vec<&str> = schedules.violated_conditions.iter().map(|c| c.tag()).collect();
        return Err(CliError::Validation(format!(
            "schedules violate {}; pass --override-schedule-check to run anyway",
            tags.join(", ")
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let oracle = resolved.qp.as_ref().and_then(|qp| kkt_oracle(qp).ok());
    let results = map_items(Execution::default(), &cfg.seeds, |&seed| {
        run_seed(cfg, &resolved, oracle.as_ref(), seed, out, allow_invalid)
    });
    let seeds: Vec<SeedSummary> = results.into_iter().collect::<Result<_, _>>()?;
    let failed = seeds.iter().any(|s| s.error.is_some());
    let summary = json!({
        "system": resolved.system.name,
        "steps": cfg.steps,
        "schedules_valid": schedules.is_valid(),
        "oracle": oracle,
        "all_completed": seeds.iter().all(|s| s.verdict.as_deref() == Some("completed")),
        "any_diverged": seeds.iter().any(|s| s.diverged),
        "max_x_error": max_of(seeds.iter().map(|s| s.x_error)),
        "max_mu_error": max_of(seeds.iter().map(|s| s.mu_error)),
        "seeds": seeds,
    });
    write_json(&out.join("summary.json"), &summary)?;
    if failed {
        Err(CliError::Validation("at least one seed stopped with an error; see summary.json".into()))
    } else {
        Ok(())
    }
}

/// Prints the oracle solution, or a structured verdict and a failure status.
pub fn kkt(path: &Path) -> Result<(), CliError> {
    let qp: QuadraticProgram =
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("invalid QP {}: {e}", path.display())))?;
    match kkt_oracle(&qp) {
        Ok(sol) => {
            print_json(&sol);
            Ok(())
        }
        Err(e) => {
            let verdict = match e {
                LagrangianError::Unbounded => "unbounded",
                LagrangianError::TooManyConstraints(_) => "too-many-constraints",
                LagrangianError::DualityGap(_) => "duality-gap",
                _ => "error",
            };
            print_json(&json!({"verdict": verdict, "message": e.to_string()}));
            Err(CliError::Validation(e.to_string()))
        }
    }
}

fn seed_from_name(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.strip_prefix("trace_seed")?.parse().ok()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn diagnose_trace(cfg: &ExperimentConfig, resolved: &Resolved, path: &Path) -> Result<Value, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let trace: Trace = engine::read_csv(BufReader::new(file), &cfg.schedules)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let seed = seed_from_name(path);
    let noise_sum = if trace.is_dense() && trace.records.len() > 8 {
        let body = &trace.records[..trace.records.len() - 1];
        weighted_sum_diagnostic(body.iter().map(|r| r.m1.as_slice()), &cfg.schedules.fast, DiagnosticOptions::default())
    } else {
        None
    };
    let g_flow = match resolved.system.g_map() {
        Some(m) => Some(FlowProblem::new(m, cfg.diagnostics.flow_step).map_err(|e| CliError::Usage(e.to_string()))?),
        None => None,
    };
    let fail = |e: ttsa::trajectories::TrajectoryError| CliError::Validation(format!("{}: {e}", path.display()));
    let mut windows = Vec::new();
    for w in &cfg.diagnostics.windows {
        match w.timescale {
            Timescale::Fast => {
                let error = tracking_error_fast(&trace, w.s, w.horizon).map_err(fail)?;
                let quasi = quasi_static_sup(&trace, w.s, w.horizon).map_err(fail)?;
                windows.push(json!({
                    "timescale": "fast",
                    "record": TrackingRecord { s: w.s, horizon: w.horizon, error, membership_fraction: None, seed },
                    "quasi_static_sup": quasi,
                }));
            }
            Timescale::Slow => {
                let flow = g_flow.as_ref().ok_or_else(|| {
                    CliError::Usage(format!("system `{}` has no known G for slow tracking", resolved.system.name))
                })?;
                let r = tracking_error_slow(&trace, flow, w.s, w.horizon, cfg.diagnostics.epsilon).map_err(fail)?;
                windows.push(json!({
                    "timescale": "slow",
                    "record": TrackingRecord {
                        s: w.s,
                        horizon: w.horizon,
                        error: r.error,
                        membership_fraction: Some(r.membership_fraction),
                        seed,
                    },
                    "epsilon": r.epsilon,
                    "window_steps": r.window_steps,
                }));
            }
        }
    }
    Ok(json!({
        "file": path,
        "seed": seed,
        "steps": trace.last().n,
        "dense": trace.is_dense(),
        "noise_sum": noise_sum,
        "windows": windows,
    }))
}

/// Noise-sum, quasi-static and tracking statistics for existing traces.
pub fn diagnose(cfg: &ExperimentConfig, traces: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if traces.is_empty() {
        return Err(CliError::Usage("no trace files given".into()));
    }
    let resolved = cfg.resolve().map_err(CliError::Usage)?;
    let reports: Vec<Value> = map_items(Execution::default(), traces, |p| diagnose_trace(cfg, &resolved, p))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let medians: Vec<Option<f64>> = (0..cfg.diagnostics.windows.len())
        .map(|i| median(reports.iter().filter_map(|r| r["windows"][i]["record"]["error"].as_f64()).collect()))
        .collect();
    let report = json!({"system": resolved.system.name, "median_error_per_window": medians, "traces": reports});
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        write_json(&dir.join("diagnostics.json"), &report)?;
    }
    print_json(&report);
    Ok(())
}
