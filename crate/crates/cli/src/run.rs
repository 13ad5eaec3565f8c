use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::Context;
use periodic_lmpc::scenarios::{format_scenario, resolve_scenario, save_scenario};
use periodic_lmpc::sim::{
    make_seed, run_closed_loop, verify_properties, PropertyReport, PropertyTolerances,
    SeedTrajectory, SimLog, SimSettings,
};
use periodic_lmpc::{Error, ScenarioConfig64};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::RunArgs;

pub const TRAJECTORY: &str = "trajectory.csv";
pub const SUMMARY: &str = "summary.json";
pub const MANIFEST: &str = "manifest.json";
pub const SCENARIO_COPY: &str = "scenario.cfg";

/// Failure with its exit code.
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn usage(kind: &'static str, e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            kind,
            message: e.to_string(),
        }
    }

    fn from_core(e: &Error) -> Self {
        let (code, kind) = match e {
            Error::Parse { .. } => (2, "parse"),
            Error::UnknownBuiltin(_) => (2, "unknown_builtin"),
            Error::Io(_) => (2, "io"),
            Error::InvalidProblem(_) | Error::Dimension { .. } => (2, "invalid_problem"),
            Error::SeedValidation { .. } => (1, "seed_validation"),
            _ => (1, "run_failed"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct ErrorInfo {
    kind: String,
    message: String,
}

#[derive(Serialize)]
struct PropertySummary {
    passed: bool,
    max_violation: f64,
    worst_violation_tick: Option<usize>,
    max_cost_increase: f64,
    worst_increase_tick: Option<usize>,
    log_consistency: f64,
    fallback_ticks: usize,
    convergence_cycle: Option<usize>,
    period_cost_gap: Option<f64>,
    open_loop_deviation: Option<f64>,
    steady_state_checked: bool,
    violations: Vec<String>,
}

impl From<&PropertyReport> for PropertySummary {
    fn from(r: &PropertyReport) -> Self {
        Self {
            passed: r.passed(),
            max_violation: r.max_violation,
            worst_violation_tick: r.worst_violation_tick,
            max_cost_increase: r.max_cost_increase,
            worst_increase_tick: r.worst_increase_tick,
            log_consistency: r.log_consistency,
            fallback_ticks: r.fallback_ticks.len(),
            convergence_cycle: r.convergence_cycle,
            period_cost_gap: r.period_cost_gap,
            open_loop_deviation: r.open_loop_deviation,
            steady_state_checked: r.steady_state_checked,
            violations: r.violations(),
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    period: usize,
    horizon: usize,
    cycles: usize,
    convergence_cycle: Option<usize>,
    period_costs: Vec<f64>,
    status_counts: BTreeMap<&'static str, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_seconds: Option<f64>,
    properties: PropertySummary,
}

#[derive(Serialize)]
struct Manifest {
    scenario: String,
    source: String,
    settings_hash: Option<String>,
    cycles: Option<usize>,
    files: Vec<String>,
    exit_status: u8,
    error: Option<ErrorInfo>,
    properties: Option<PropertySummary>,
}

/// Everything a finished simulation produced.
struct Outcome {
    cfg: ScenarioConfig64,
    cycles: usize,
    log: SimLog<f64>,
    report: PropertyReport,
    hash: String,
    seconds: f64,
}

/// Simulates every requested scenario, `jobs` at a time. With `write` the
/// artifacts go to disk; otherwise only the property table is printed.
pub fn cmd_run(args: &RunArgs, write: bool) -> u8 {
    if args.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return 2;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(String, u8)>>> = Mutex::new(vec![None; args.scenario.len()]);
    std::thread::scope(|s| {
        for _ in 0..args.jobs.min(args.scenario.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(name) = args.scenario.get(i) else {
                    break;
                };
                let res = run_one(args, name, write);
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let results = results.into_inner().unwrap();
    let mut code = 0;
    for (text, c) in results.into_iter().flatten() {
        print!("{text}");
        code = code.max(c);
    }
    code
}

fn stem(name_or_path: &str) -> String {
    Path::new(name_or_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name_or_path.to_string())
}

fn out_dir(args: &RunArgs, name: &str, cfg: Option<&ScenarioConfig64>) -> PathBuf {
    match (&args.out, cfg.and_then(|c| c.output.clone())) {
        (Some(base), _) => base.join(stem(name)),
        (None, Some(dir)) => dir,
        (None, None) => PathBuf::from("runs").join(stem(name)),
    }
}

/// Returns the text to print and the exit code.
fn run_one(args: &RunArgs, name: &str, write: bool) -> (String, u8) {
    let result = simulate(args, name);
    let dir = out_dir(args, name, result.as_ref().ok().map(|o| &o.cfg));
    let (text, code) = match &result {
        Ok(o) => {
            let code = if o.report.passed() { 0 } else { 1 };
            (property_table(name, o), code)
        }
        Err(f) => (format!("{name}: {} error: {}\n", f.kind, f.message), f.code),
    };
    if !write {
        return (text, code);
    }
    match write_artifacts(args, name, &dir, &result, code) {
        Ok(()) => (text, code),
        Err(e) => (format!("{text}{name}: failed to write outputs: {e:#}\n"), 2),
    }
}

fn simulate(args: &RunArgs, name: &str) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let cfg: ScenarioConfig64 = resolve_scenario(name).map_err(|e| Failure::from_core(&e))?;
    let cycles = args.cycles.unwrap_or(cfg.cycles);
    if cycles == 0 {
        return Err(Failure::usage("usage", "--cycles must be at least 1"));
    }
    let (seed, seed_text) = match &args.seed_override {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage("io", format!("{}: {e}", path.display())))?;
            let seed =
                SeedTrajectory::read_csv(&cfg.spec, &text).map_err(|e| Failure::from_core(&e))?;
            (seed, text)
        }
        None => (
            make_seed(&cfg).map_err(|e| Failure::from_core(&e))?,
            String::new(),
        ),
    };
    let hash = settings_hash(&cfg, cycles, &seed_text);
    log::info!("{name}: {cycles} cycles");
    let log = run_closed_loop(&cfg.spec, &seed, cycles, &SimSettings::default())
        .map_err(|e| Failure::from_core(&e))?;
    let report = verify_properties(&log, &cfg.spec, &PropertyTolerances::default())
        .map_err(|e| Failure::from_core(&e))?;
    Ok(Outcome {
        cfg,
        cycles,
        log,
        report,
        hash,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn settings_hash(cfg: &ScenarioConfig64, cycles: usize, seed_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format_scenario(cfg).as_bytes());
    h.update(format!("\ncycles={cycles}\n").as_bytes());
    h.update(format!("{:?}\n", SimSettings::<f64>::default()).as_bytes());
    h.update(seed_text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn property_table(name: &str, o: &Outcome) -> String {
    let r = &o.report;
    let tol = &r.tolerances;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3e}"));
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    let mut s = format!("{name} ({} cycles)\n", o.cycles);
    s += &format!("  {:<28}{:>12}{:>12}\n", "check", "value", "tolerance");
    s += &format!(
        "  {:<28}{:>12.3e}{:>12.1e}  {}\n",
        "constraint violation",
        r.max_violation,
        tol.feasibility,
        mark(r.max_violation < tol.feasibility)
    );
    s += &format!(
        "  {:<28}{:>12.3e}{:>12.1e}  {}\n",
        "open-loop cost increase",
        r.max_cost_increase,
        tol.monotonicity,
        mark(r.max_cost_increase < tol.monotonicity)
    );
    s += &format!(
        "  {:<28}{:>12.3e}{:>12.1e}  {}\n",
        "log consistency",
        r.log_consistency,
        1e-9,
        mark(r.log_consistency <= 1e-9)
    );
    s += &format!(
        "  {:<28}{:>12}\n",
        "convergence cycle",
        r.convergence_cycle.map_or("-".into(), |c| c.to_string())
    );
    if r.steady_state_checked {
        s += &format!(
            "  {:<28}{:>12}{:>12.1e}\n",
            "period cost gap",
            opt(r.period_cost_gap),
            tol.period_cost_gap
        );
        s += &format!(
            "  {:<28}{:>12}{:>12.1e}\n",
            "open-loop deviation",
            opt(r.open_loop_deviation),
            tol.open_loop_deviation
        );
    }
    s += &format!("  {:<28}{:>12}\n", "fallback ticks", r.fallback_ticks.len());
    s += &format!("  result: {}\n", if r.passed() { "PASS" } else { "FAIL" });
    s
}

fn write_artifacts(
    args: &RunArgs,
    name: &str,
    dir: &Path,
    result: &Result<Outcome, Failure>,
    code: u8,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    let manifest = match result {
        Ok(o) => {
            let mut csv = Vec::new();
            o.log.write_csv(&mut csv, args.timing)?;
            fs::write(dir.join(TRAJECTORY), csv)?;
            save_scenario(&o.cfg, &dir.join(SCENARIO_COPY))?;
            let mut status_counts = BTreeMap::new();
            for r in &o.log.ticks {
                *status_counts.entry(r.status).or_insert(0) += 1;
            }
            let summary = Summary {
                scenario: &o.cfg.name,
                period: o.cfg.spec.period,
                horizon: o.cfg.spec.horizon,
                cycles: o.cycles,
                convergence_cycle: o.report.convergence_cycle,
                period_costs: o.log.period_costs(),
                status_counts,
                wall_seconds: args.timing.then_some(o.seconds),
                properties: (&o.report).into(),
            };
            fs::write(
                dir.join(SUMMARY),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            files.extend([TRAJECTORY, SCENARIO_COPY, SUMMARY].map(String::from));
            Manifest {
                scenario: o.cfg.name.clone(),
                source: name.to_string(),
                settings_hash: Some(o.hash.clone()),
                cycles: Some(o.cycles),
                files,
                exit_status: code,
                error: None,
                properties: Some((&o.report).into()),
            }
        }
        Err(f) => Manifest {
            scenario: stem(name),
            source: name.to_string(),
            settings_hash: None,
            cycles: args.cycles,
            files,
            exit_status: code,
            error: Some(ErrorInfo {
                kind: f.kind.to_string(),
                message: f.message.clone(),
            }),
            properties: None,
        },
    };
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::rename(&tmp, dir.join(MANIFEST))?;
    Ok(())
}
