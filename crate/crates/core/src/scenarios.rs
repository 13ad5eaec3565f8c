//! Benchmark scenarios and the scenario file format.
//!
//! A scenario file is line oriented. Blank lines and lines starting with `#`
//! are ignored, except that the first line must be the version header.
//!
//! ```text
//! # periodic-lmpc scenario v1
//! name = s3_tv_cost
//! period = 100
//! horizon = 15
//! state_dim = 2
//! input_dim = 1
//! strictly_convex = true
//! cycles = 10
//! seed = steady_state_origin
//! dynamics = linear
//! linear 0..100 A = [1, 0.1; 0, 1] B = [0; 0.1] c = [0; 0]
//! state_constraint 0..100 G = [0, 1; 0, -1] g = [0.1; 0.1]
//! input_constraint 0..100 G = [] g = []
//! cost 0..50 Q = [1, 0; 0, 0] R = [1] x_ref = [-0.2; 0]
//! cost 50..100 Q = [1, 0; 0, 0] R = [1] x_ref = [0.2; 0]
//! ```
//!
//! Matrices list rows separated by `;` and entries by `,`. A range `lo..hi`
//! covers intracycle times `lo <= tau < hi`; the ranges of each segment kind
//! must partition `0..period`.
//!
//! `dynamics = builtin <name>` replaces the `linear` lines with a registered
//! formula (`s1_tv_dynamics`, `s4_nonlinear`).
//!
//! Seeds: `steady_state_origin`, `warmup_mpc`, or
//! `analytic x0 = [..] u_amplitude = [..] u_offset = [..]` meaning
//! `u_tau = u_amplitude * sin(2 pi tau / P) + u_offset` applied from `x0`.
//!
//! An optional `output = <dir>` sets the default run directory.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    AffineModel, ConstraintSchedule, Dynamics, NonlinearMap, Polyhedron, ProblemSpec,
    QuadraticCost, StageCostSchedule,
};
use crate::Scalar;

pub const SCENARIO_NAMES: [&str; 4] = [
    "s1_tv_dynamics",
    "s2_tv_constraints",
    "s3_tv_cost",
    "s4_nonlinear",
];

pub const SCENARIO_HEADER: &str = "# periodic-lmpc scenario v1";

/// How the initial periodic trajectory is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum SeedPolicy<T: Scalar> {
    /// `x_t = 0`, `u_t = 0`.
    SteadyStateOrigin,
    /// Terminal-free input-minimizing MPC run until periodic.
    WarmupMpc,
    /// `u_tau = amplitude * sin(2 pi tau / P) + offset` from `x0`.
    Analytic {
        x0: DVector<T>,
        amplitude: DVector<T>,
        offset: DVector<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig<T: Scalar> {
    pub name: String,
    pub spec: ProblemSpec<T>,
    pub seed: SeedPolicy<T>,
    pub cycles: usize,
    pub output: Option<PathBuf>,
}

/// `p+ = p + dt q`, `q+ = q + dt p (gain sin(2 pi tau / P) + u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedOscillator {
    pub dt: f64,
    pub gain: f64,
}

impl Default for ForcedOscillator {
    fn default() -> Self {
        Self { dt: 0.1, gain: 5.0 }
    }
}

impl ForcedOscillator {
    fn forcing<T: Scalar>(&self, tau: usize, period: usize) -> T {
        T::lit(self.gain * (2.0 * PI * tau as f64 / period as f64).sin())
    }
}

impl<T: Scalar> NonlinearMap<T> for ForcedOscillator {
    fn name(&self) -> &str {
        "s4_nonlinear"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, tau: usize, period: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let dt = T::lit(self.dt);
        let w = self.forcing::<T>(tau, period);
        DVector::from_vec(vec![x[0] + dt * x[1], x[1] + dt * x[0] * (w + u[0])])
    }

    fn jacobians(
        &self,
        tau: usize,
        period: usize,
        x: &DVector<T>,
        u: &DVector<T>,
    ) -> Option<(DMatrix<T>, DMatrix<T>)> {
        let dt = T::lit(self.dt);
        let w = self.forcing::<T>(tau, period);
        let a = DMatrix::from_row_slice(2, 2, &[T::one(), dt, dt * (w + u[0]), T::one()]);
        let b = DMatrix::from_row_slice(2, 1, &[T::zero(), dt * x[0]]);
        Some((a, b))
    }

    fn weighted_hessian(
        &self,
        _tau: usize,
        _period: usize,
        _x: &DVector<T>,
        _u: &DVector<T>,
        w: &DVector<T>,
    ) -> Option<DMatrix<T>> {
        // Only the bilinear p*u term is curved.
        let mut h = DMatrix::zeros(3, 3);
        let v = w[1] * T::lit(self.dt);
        h[(0, 2)] = v;
        h[(2, 0)] = v;
        Some(h)
    }

    /// `gamma_j = lambda_j p_j / sum_i lambda_i p_i`, valid when every weighted `p_j > 0`.
    fn input_multipliers(&self, states: &[DVector<T>], lambda: &[T]) -> Option<Vec<T>> {
        if states.len() != lambda.len() {
            return None;
        }
        let positive = states
            .iter()
            .zip(lambda)
            .all(|(x, l)| *l == T::zero() || x[0] > T::zero());
        if !positive {
            return None;
        }
        let total = states
            .iter()
            .zip(lambda)
            .fold(T::zero(), |s, (x, l)| s + *l * x[0]);
        if total <= T::zero() {
            return None;
        }
        Some(
            states
                .iter()
                .zip(lambda)
                .map(|(x, l)| *l * x[0] / total)
                .collect(),
        )
    }
}

fn mat<T: Scalar>(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<T> {
    DMatrix::from_iterator(cols, rows, vals.iter().map(|v| T::lit(*v))).transpose()
}

fn vec_of<T: Scalar>(vals: &[f64]) -> DVector<T> {
    DVector::from_iterator(vals.len(), vals.iter().map(|v| T::lit(*v)))
}

fn double_integrator<T: Scalar>(period: usize) -> Dynamics<T> {
    let model = AffineModel {
        a: mat(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        b: mat(2, 1, &[0.0, 0.1]),
        c: DVector::zeros(2),
    };
    Dynamics::Linear {
        models: vec![model; period],
        builtin: None,
    }
}

/// Dynamics registered under a name, for `dynamics = builtin <name>`.
pub fn builtin_dynamics<T: Scalar>(name: &str, period: usize) -> Result<Dynamics<T>> {
    match name {
        "s1_tv_dynamics" => {
            let models = (0..period)
                .map(|tau| {
                    let k = 0.1 * (1.0 - (2.0 * PI * tau as f64 / period as f64).sin());
                    AffineModel {
                        a: mat(2, 2, &[1.0, 0.1, k, 1.0]),
                        b: mat(2, 1, &[0.0, 0.1]),
                        c: DVector::zeros(2),
                    }
                })
                .collect();
            Ok(Dynamics::Linear {
                models,
                builtin: Some(name.to_string()),
            })
        }
        "s4_nonlinear" => Ok(Dynamics::Nonlinear(Arc::new(ForcedOscillator::default()))),
        _ => Err(Error::UnknownBuiltin(name.to_string())),
    }
}

fn p_box<T: Scalar>(lo: Option<f64>, hi: Option<f64>) -> Polyhedron<T> {
    Polyhedron::from_box(&[lo.map(T::lit), None], &[hi.map(T::lit), None])
}

fn u_box<T: Scalar>(bound: Option<f64>) -> Polyhedron<T> {
    match bound {
        Some(b) => Polyhedron::from_box(&[Some(T::lit(-b))], &[Some(T::lit(b))]),
        None => Polyhedron::unbounded(1),
    }
}

/// Position band of the time-varying constraint scenario at intracycle time `tau`.
pub fn s2_band(tau: usize, period: usize) -> (f64, f64) {
    const BANDS: [(f64, f64); 6] = [
        (-0.4, 0.1),
        (-0.4, -0.2),
        (-0.4, 0.1),
        (-0.1, 0.4),
        (0.2, 0.4),
        (-0.1, 0.4),
    ];
    // Segment k covers k P / 6 <= tau < (k + 1) P / 6.
    let k = (6 * tau / period).min(5);
    BANDS[k]
}

/// One of the four benchmark scenarios with period 100.
pub fn builtin<T: Scalar>(name: &str) -> Result<ScenarioConfig<T>> {
    let period = 100;
    let pos_cost = |target: f64, r: f64| {
        QuadraticCost::new(
            mat(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            mat(1, 1, &[r]),
            vec_of(&[target, 0.0]),
        )
    };
    let (horizon, dynamics, constraints, cost, seed) = match name {
        "s1_tv_dynamics" => (
            25,
            builtin_dynamics(name, period)?,
            ConstraintSchedule::constant(p_box(Some(-0.3), Some(0.3)), u_box(None), period),
            StageCostSchedule::constant(pos_cost(0.2, 1.0)?, period, true),
            SeedPolicy::SteadyStateOrigin,
        ),
        "s2_tv_constraints" => {
            let state = (0..period)
                .map(|tau| {
                    let (lo, hi) = s2_band(tau, period);
                    p_box(Some(lo), Some(hi))
                })
                .collect();
            let cost =
                QuadraticCost::new(DMatrix::zeros(2, 2), mat(1, 1, &[1.0]), DVector::zeros(2))?;
            (
                30,
                double_integrator(period),
                ConstraintSchedule {
                    state,
                    input: vec![u_box(None); period],
                },
                StageCostSchedule::constant(cost, period, false),
                SeedPolicy::WarmupMpc,
            )
        }
        "s3_tv_cost" => {
            let q_box =
                Polyhedron::from_box(&[None, Some(T::lit(-0.1))], &[None, Some(T::lit(0.1))]);
            let stages = (0..period)
                .map(|tau| pos_cost(if tau < period / 2 { -0.2 } else { 0.2 }, 1.0))
                .collect::<Result<Vec<_>>>()?;
            (
                15,
                double_integrator(period),
                ConstraintSchedule::constant(q_box, u_box(None), period),
                StageCostSchedule {
                    stages,
                    strictly_convex: true,
                },
                SeedPolicy::SteadyStateOrigin,
            )
        }
        "s4_nonlinear" => (
            8,
            builtin_dynamics(name, period)?,
            ConstraintSchedule::constant(p_box(Some(0.5), None), u_box(Some(5.0)), period),
            StageCostSchedule::constant(pos_cost(2.0, 0.0)?, period, false),
            SeedPolicy::Analytic {
                x0: vec_of(&[1.0, 0.0]),
                amplitude: vec_of(&[-5.0]),
                offset: vec_of(&[0.0]),
            },
        ),
        _ => return Err(Error::UnknownBuiltin(name.to_string())),
    };
    let spec = ProblemSpec::new(period, horizon, 2, 1, dynamics, constraints, cost)?;
    Ok(ScenarioConfig {
        name: name.to_string(),
        spec,
        seed,
        cycles: 10,
        output: None,
    })
}

/// A builtin name or a path to a scenario file.
pub fn resolve_scenario<T: Scalar>(name_or_path: &str) -> Result<ScenarioConfig<T>> {
    if SCENARIO_NAMES.contains(&name_or_path) {
        builtin(name_or_path)
    } else {
        load_scenario(Path::new(name_or_path))
    }
}

pub fn load_scenario<T: Scalar>(path: &Path) -> Result<ScenarioConfig<T>> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

pub fn save_scenario<T: Scalar>(cfg: &ScenarioConfig<T>, path: &Path) -> Result<()> {
    std::fs::write(path, format_scenario(cfg))?;
    Ok(())
}

fn fmt_matrix<T: Scalar>(m: &DMatrix<T>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| {
            r.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect();
    format!("[{}]", rows.join("; "))
}

fn fmt_vector<T: Scalar>(v: &DVector<T>) -> String {
    let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", vals.join("; "))
}

/// Groups consecutive equal entries into `(lo, hi, item)` ranges.
fn runs<X: PartialEq>(items: &[X]) -> Vec<(usize, usize, &X)> {
    let mut out: Vec<(usize, usize, &X)> = Vec::new();
    for (i, it) in items.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.2 == it => last.1 = i + 1,
            _ => out.push((i, i + 1, it)),
        }
    }
    out
}

pub fn format_scenario<T: Scalar>(cfg: &ScenarioConfig<T>) -> String {
    let spec = &cfg.spec;
    let mut s = String::new();
    let _ = writeln!(s, "{SCENARIO_HEADER}");
    let _ = writeln!(s, "name = {}", cfg.name);
    let _ = writeln!(s, "period = {}", spec.period);
    let _ = writeln!(s, "horizon = {}", spec.horizon);
    let _ = writeln!(s, "state_dim = {}", spec.state_dim);
    let _ = writeln!(s, "input_dim = {}", spec.input_dim);
    let _ = writeln!(s, "strictly_convex = {}", spec.cost.strictly_convex);
    let _ = writeln!(s, "cycles = {}", cfg.cycles);
    if let Some(out) = &cfg.output {
        let _ = writeln!(s, "output = {}", out.display());
    }
    match &cfg.seed {
        SeedPolicy::SteadyStateOrigin => {
            let _ = writeln!(s, "seed = steady_state_origin");
        }
        SeedPolicy::WarmupMpc => {
            let _ = writeln!(s, "seed = warmup_mpc");
        }
        SeedPolicy::Analytic {
            x0,
            amplitude,
            offset,
        } => {
            let _ = writeln!(
                s,
                "seed = analytic x0 = {} u_amplitude = {} u_offset = {}",
                fmt_vector(x0),
                fmt_vector(amplitude),
                fmt_vector(offset)
            );
        }
    }
    match &spec.dynamics {
        Dynamics::Linear {
            builtin: Some(name),
            ..
        } => {
            let _ = writeln!(s, "dynamics = builtin {name}");
        }
        Dynamics::Nonlinear(map) => {
            let _ = writeln!(s, "dynamics = builtin {}", map.name());
        }
        Dynamics::Linear {
            models,
            builtin: None,
        } => {
            let _ = writeln!(s, "dynamics = linear");
            for (lo, hi, m) in runs(models) {
                let _ = writeln!(
                    s,
                    "linear {lo}..{hi} A = {} B = {} c = {}",
                    fmt_matrix(&m.a),
                    fmt_matrix(&m.b),
                    fmt_vector(&m.c)
                );
            }
        }
    }
    for (kind, polys) in [
        ("state_constraint", &spec.constraints.state),
        ("input_constraint", &spec.constraints.input),
    ] {
        for (lo, hi, p) in runs(polys) {
            let _ = writeln!(
                s,
                "{kind} {lo}..{hi} G = {} g = {}",
                fmt_matrix(&p.g_mat),
                fmt_vector(&p.g_vec)
            );
        }
    }
    for (lo, hi, c) in runs(&spec.cost.stages) {
        let _ = writeln!(
            s,
            "cost {lo}..{hi} Q = {} R = {} x_ref = {}",
            fmt_matrix(&c.q),
            fmt_matrix(&c.r),
            fmt_vector(&c.x_ref)
        );
    }
    s
}

struct LineErr {
    line: usize,
}

impl LineErr {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }
}

/// `name = [..]` pairs following a segment range.
fn keyed_literals<'a>(mut rest: &'a str, at: &LineErr) -> Result<Vec<(&'a str, &'a str)>> {
    let mut out = Vec::new();
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            return Ok(out);
        }
        let eq = rest
            .find('=')
            .ok_or_else(|| at.err(format!("expected `key = [..]` near `{rest}`")))?;
        let key = rest[..eq].trim();
        let after = rest[eq + 1..].trim_start();
        if !after.starts_with('[') {
            return Err(at.err(format!("expected `[` after `{key} =`")));
        }
        let close = after
            .find(']')
            .ok_or_else(|| at.err(format!("unclosed `[` for `{key}`")))?;
        out.push((key, &after[1..close]));
        rest = &after[close + 1..];
    }
}

fn parse_number<T: Scalar>(tok: &str, at: &LineErr) -> Result<T> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| at.err(format!("bad number `{}`", tok.trim())))?;
    if !v.is_finite() {
        return Err(at.err(format!("non-finite number `{}`", tok.trim())));
    }
    Ok(T::lit(v))
}

fn parse_matrix<T: Scalar>(
    body: &str,
    rows: Option<usize>,
    cols: usize,
    what: &str,
    at: &LineErr,
) -> Result<DMatrix<T>> {
    let body = body.trim();
    let parsed: Vec<Vec<T>> = if body.is_empty() {
        Vec::new()
    } else {
        body.split(';')
            .map(|r| {
                r.split(',')
                    .map(|tok| parse_number(tok, at))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?
    };
    if let Some(r) = rows {
        if parsed.len() != r {
            return Err(at.err(format!("{what} needs {r} rows, found {}", parsed.len())));
        }
    }
    let mut m = DMatrix::zeros(parsed.len(), cols);
    for (i, row) in parsed.iter().enumerate() {
        if row.len() != cols {
            return Err(at.err(format!(
                "{what} row {} needs {cols} entries, found {}",
                i + 1,
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

/// Column vector written either as `[a; b]` or `[a, b]`.
fn parse_vector<T: Scalar>(
    body: &str,
    len: Option<usize>,
    what: &str,
    at: &LineErr,
) -> Result<DVector<T>> {
    let body = body.trim();
    let vals: Vec<T> = if body.is_empty() {
        Vec::new()
    } else {
        body.split([';', ','])
            .map(|tok| parse_number(tok, at))
            .collect::<Result<_>>()?
    };
    if let Some(n) = len {
        if vals.len() != n {
            return Err(at.err(format!("{what} needs {n} entries, found {}", vals.len())));
        }
    }
    Ok(DVector::from_vec(vals))
}

fn lookup<'a>(pairs: &[(&str, &'a str)], key: &str, at: &LineErr) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| at.err(format!("missing `{key} = [..]`")))
}

fn check_keys(pairs: &[(&str, &str)], allowed: &[&str], at: &LineErr) -> Result<()> {
    for (k, _) in pairs {
        if !allowed.contains(k) {
            return Err(at.err(format!("unknown field `{k}`")));
        }
    }
    Ok(())
}

struct Segment {
    line: usize,
    lo: usize,
    hi: usize,
    body: String,
}

fn parse_range(tok: &str, at: &LineErr) -> Result<(usize, usize)> {
    let (a, b) = tok
        .split_once("..")
        .ok_or_else(|| at.err(format!("expected range `lo..hi`, found `{tok}`")))?;
    let lo = a
        .parse()
        .map_err(|_| at.err(format!("bad range start `{a}`")))?;
    let hi = b
        .parse()
        .map_err(|_| at.err(format!("bad range end `{b}`")))?;
    if lo >= hi {
        return Err(at.err(format!("empty range {lo}..{hi}")));
    }
    Ok((lo, hi))
}

/// Expands segments into a per-tau schedule, rejecting gaps and overlaps.
fn expand<X: Clone>(
    kind: &str,
    segments: &[Segment],
    period: usize,
    last_line: usize,
    mut parse: impl FnMut(&Segment, &LineErr) -> Result<X>,
) -> Result<Vec<X>> {
    let mut slots: Vec<Option<X>> = vec![None; period];
    for seg in segments {
        let at = LineErr { line: seg.line };
        if seg.hi > period {
            return Err(at.err(format!(
                "range {}..{} exceeds the period {period}",
                seg.lo, seg.hi
            )));
        }
        let item = parse(seg, &at)?;
        for slot in &mut slots[seg.lo..seg.hi] {
            if slot.is_some() {
                return Err(at.err(format!("{kind} ranges overlap")));
            }
            *slot = Some(item.clone());
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(tau, s)| {
            s.ok_or_else(|| Error::Parse {
                line: last_line,
                message: format!("{kind} schedule does not cover tau = {tau}"),
            })
        })
        .collect()
}

pub fn parse_scenario<T: Scalar>(text: &str) -> Result<ScenarioConfig<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == SCENARIO_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing header `{SCENARIO_HEADER}`"),
            })
        }
    }
    let mut keys: Vec<(usize, String, String)> = Vec::new();
    let mut segments: Vec<(String, Segment)> = Vec::new();
    let mut last_line = 1;
    for (ln, raw) in lines {
        last_line = ln;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = LineErr { line: ln };
        let first = line.split_whitespace().next().unwrap_or_default();
        if matches!(
            first,
            "linear" | "state_constraint" | "input_constraint" | "cost"
        ) {
            let rest = line[first.len()..].trim_start();
            let range_tok = rest.split_whitespace().next().unwrap_or_default();
            let (lo, hi) = parse_range(range_tok, &at)?;
            segments.push((
                first.to_string(),
                Segment {
                    line: ln,
                    lo,
                    hi,
                    body: rest[range_tok.len()..].to_string(),
                },
            ));
        } else if let Some((k, v)) = line.split_once('=') {
            let k = k.trim();
            if keys.iter().any(|(_, key, _)| key == k) {
                return Err(at.err(format!("duplicate key `{k}`")));
            }
            keys.push((ln, k.to_string(), v.trim().to_string()));
        } else {
            return Err(at.err(format!("unrecognized line `{line}`")));
        }
    }

    let get = |key: &str| {
        keys.iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
    };
    let need = |key: &str| {
        get(key).ok_or_else(|| Error::Parse {
            line: last_line,
            message: format!("missing key `{key}`"),
        })
    };
    let int = |key: &str| -> Result<usize> {
        let (l, v) = need(key)?;
        v.parse()
            .map_err(|_| LineErr { line: l }.err(format!("`{key}` must be a non-negative integer")))
    };
    for (l, k, _) in &keys {
        let known = [
            "name",
            "period",
            "horizon",
            "state_dim",
            "input_dim",
            "strictly_convex",
            "cycles",
            "seed",
            "dynamics",
            "output",
        ];
        if !known.contains(&k.as_str()) {
            return Err(LineErr { line: *l }.err(format!("unknown key `{k}`")));
        }
    }

    let name = need("name")?.1.to_string();
    let period = int("period")?;
    let horizon = int("horizon")?;
    let n = int("state_dim")?;
    let d = int("input_dim")?;
    if period == 0 {
        return Err(LineErr {
            line: need("period")?.0,
        }
        .err("period must be positive"));
    }
    let cycles = match get("cycles") {
        Some(_) => int("cycles")?,
        None => 10,
    };
    let strictly_convex = match get("strictly_convex") {
        None => false,
        Some((l, v)) => v
            .parse()
            .map_err(|_| LineErr { line: l }.err("`strictly_convex` must be true or false"))?,
    };
    let output = get("output").map(|(_, v)| PathBuf::from(v));

    let (seed_line, seed_text) = need("seed")?;
    let at = LineErr { line: seed_line };
    let seed = match seed_text.split_whitespace().next().unwrap_or_default() {
        "steady_state_origin" => SeedPolicy::SteadyStateOrigin,
        "warmup_mpc" => SeedPolicy::WarmupMpc,
        "analytic" => {
            let pairs = keyed_literals(&seed_text["analytic".len()..], &at)?;
            check_keys(&pairs, &["x0", "u_amplitude", "u_offset"], &at)?;
            SeedPolicy::Analytic {
                x0: parse_vector(lookup(&pairs, "x0", &at)?, Some(n), "x0", &at)?,
                amplitude: parse_vector(
                    lookup(&pairs, "u_amplitude", &at)?,
                    Some(d),
                    "u_amplitude",
                    &at,
                )?,
                offset: parse_vector(lookup(&pairs, "u_offset", &at)?, Some(d), "u_offset", &at)?,
            }
        }
        other => return Err(at.err(format!("unknown seed policy `{other}`"))),
    };

    let of_kind = |kind: &str| -> Vec<Segment> {
        segments
            .iter()
            .filter(|(k, _)| k == kind)
            .map(|(_, s)| Segment {
                line: s.line,
                lo: s.lo,
                hi: s.hi,
                body: s.body.clone(),
            })
            .collect()
    };

    let (dyn_line, dyn_text) = need("dynamics")?;
    let at = LineErr { line: dyn_line };
    let linear_segments = of_kind("linear");
    let dynamics = match dyn_text.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["linear"] => {
            let models = expand("linear", &linear_segments, period, last_line, |seg, at| {
                let pairs = keyed_literals(&seg.body, at)?;
                check_keys(&pairs, &["A", "B", "c"], at)?;
                let a = parse_matrix(lookup(&pairs, "A", at)?, Some(n), n, "A", at)?;
                let b = parse_matrix(lookup(&pairs, "B", at)?, Some(n), d, "B", at)?;
                let c = match pairs.iter().find(|(k, _)| *k == "c") {
                    Some((_, v)) => parse_vector(v, Some(n), "c", at)?,
                    None => DVector::zeros(n),
                };
                Ok(AffineModel { a, b, c })
            })?;
            Dynamics::Linear {
                models,
                builtin: None,
            }
        }
        ["builtin", which] => {
            if let Some(seg) = linear_segments.first() {
                return Err(
                    LineErr { line: seg.line }.err("`linear` lines conflict with builtin dynamics")
                );
            }
            let dynamics = builtin_dynamics(which, period).map_err(|e| at.err(e.to_string()))?;
            if let Dynamics::Nonlinear(map) = &dynamics {
                if map.state_dim() != n || map.input_dim() != d {
                    return Err(at.err(format!(
                        "builtin `{which}` has state_dim {} and input_dim {}",
                        map.state_dim(),
                        map.input_dim()
                    )));
                }
            } else if n != 2 || d != 1 {
                return Err(at.err(format!("builtin `{which}` has state_dim 2 and input_dim 1")));
            }
            dynamics
        }
        _ => return Err(at.err("expected `dynamics = linear` or `dynamics = builtin <name>`")),
    };

    let polys = |kind: &str, dim: usize| {
        expand(kind, &of_kind(kind), period, last_line, |seg, at| {
            let pairs = keyed_literals(&seg.body, at)?;
            check_keys(&pairs, &["G", "g"], at)?;
            let g_mat = parse_matrix(lookup(&pairs, "G", at)?, None, dim, "G", at)?;
            let g_vec = parse_vector(lookup(&pairs, "g", at)?, Some(g_mat.nrows()), "g", at)?;
            Polyhedron::new(g_mat, g_vec).map_err(|e| at.err(e.to_string()))
        })
    };
    let state = polys("state_constraint", n)?;
    let input = polys("input_constraint", d)?;
    let stages = expand("cost", &of_kind("cost"), period, last_line, |seg, at| {
        let pairs = keyed_literals(&seg.body, at)?;
        check_keys(&pairs, &["Q", "R", "x_ref"], at)?;
        let q = parse_matrix(lookup(&pairs, "Q", at)?, Some(n), n, "Q", at)?;
        let r = parse_matrix(lookup(&pairs, "R", at)?, Some(d), d, "R", at)?;
        let x_ref = match pairs.iter().find(|(k, _)| *k == "x_ref") {
            Some((_, v)) => parse_vector(v, Some(n), "x_ref", at)?,
            None => DVector::zeros(n),
        };
        QuadraticCost::new(q, r, x_ref).map_err(|e| at.err(e.to_string()))
    })?;

    let spec = ProblemSpec::new(
        period,
        horizon,
        n,
        d,
        dynamics,
        ConstraintSchedule { state, input },
        StageCostSchedule {
            stages,
            strictly_convex,
        },
    )
    .map_err(|e| match e {
        Error::InvalidProblem(m) => Error::Parse {
            line: last_line,
            message: m,
        },
        other => other,
    })?;
    Ok(ScenarioConfig {
        name,
        spec,
        seed,
        cycles,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn horizons_match_benchmarks() {
        let n: Vec<usize> = SCENARIO_NAMES
            .iter()
            .map(|s| builtin::<f64>(s).unwrap().spec.horizon)
            .collect();
        assert_eq!(n, vec![25, 30, 15, 8]);
        assert!(builtin::<f64>("s5").is_err());
    }

    #[test]
    fn s2_band_at_half_period() {
        let cfg = builtin::<f64>("s2_tv_constraints").unwrap();
        let poly = &cfg.spec.constraints.state[50];
        assert_eq!(poly.axis_bounds(0), (Some(-0.1), Some(0.4)));
    }

    #[test]
    fn s2_bands_partition_the_period() {
        let starts: Vec<usize> = (1..100)
            .filter(|t| 6 * t / 100 != 6 * (t - 1) / 100)
            .collect();
        assert_eq!(starts, vec![17, 34, 50, 67, 84]);
        assert_eq!(s2_band(16, 100), (-0.4, 0.1));
        assert_eq!(s2_band(17, 100), (-0.4, -0.2));
        assert_eq!(s2_band(99, 100), (-0.1, 0.4));
        for tau in 0..100 {
            let k = (0..6)
                .filter(|k| k * 100 <= 6 * tau && 6 * tau < (k + 1) * 100)
                .count();
            assert_eq!(k, 1, "tau {tau}");
        }
    }

    #[test]
    fn gamma_example() {
        let map = ForcedOscillator::default();
        let states = vec![dvector![1.0, 0.3], dvector![2.0, -0.1]];
        let g = NonlinearMap::<f64>::input_multipliers(&map, &states, &[0.5, 0.5]).unwrap();
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-15 && (g[1] - 2.0 / 3.0).abs() < 1e-15);
        let us = [dvector![0.7], dvector![-1.2]];
        let xm = &states[0] * 0.5 + &states[1] * 0.5;
        let um = &us[0] * g[0] + &us[1] * g[1];
        for tau in [0, 13, 77] {
            let lhs = map.eval(tau, 100, &xm, &um);
            let rhs = map.eval(tau, 100, &states[0], &us[0]) * 0.5
                + map.eval(tau, 100, &states[1], &us[1]) * 0.5;
            assert!((lhs - rhs).amax() < 1e-15);
        }
        assert!(
            NonlinearMap::<f64>::input_multipliers(&map, &[dvector![-1.0, 0.0]], &[1.0]).is_none()
        );
    }

    #[test]
    fn builtins_round_trip_through_text() {
        for name in SCENARIO_NAMES {
            let cfg = builtin::<f64>(name).unwrap();
            let text = format_scenario(&cfg);
            let back: ScenarioConfig<f64> = parse_scenario(&text).unwrap();
            assert_eq!(back, cfg, "{name}");
            assert_eq!(format_scenario(&back), text);
        }
    }

    #[test]
    fn shipped_files_match_builtins() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        for name in SCENARIO_NAMES {
            let cfg: ScenarioConfig<f64> = load_scenario(&dir.join(format!("{name}.cfg"))).unwrap();
            assert_eq!(cfg, builtin(name).unwrap(), "{name}");
        }
    }

    fn s3_text() -> String {
        format_scenario(&builtin::<f64>("s3_tv_cost").unwrap())
    }

    #[test]
    fn long_horizon_is_rejected() {
        let text = s3_text().replace("horizon = 15", "horizon = 100");
        let err = parse_scenario::<f64>(&text).unwrap_err().to_string();
        assert!(err.contains("N < P"), "{err}");
    }

    #[test]
    fn indefinite_weight_is_rejected() {
        let text = s3_text().replace("Q = [1, 0; 0, 0]", "Q = [1, 0; 0, -1]");
        assert!(parse_scenario::<f64>(&text).is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = s3_text().replace("R = [1]", "R = [x]");
        match parse_scenario::<f64>(&text) {
            Err(Error::Parse { line, .. }) => {
                assert!(text.lines().nth(line - 1).unwrap().starts_with("cost"))
            }
            other => panic!("{other:?}"),
        }
        let text = s3_text().replace("cost 50..100", "cost 49..100");
        assert!(parse_scenario::<f64>(&text)
            .unwrap_err()
            .to_string()
            .contains("overlap"));
        let text = s3_text().replace("cost 50..100", "cost 51..100");
        assert!(parse_scenario::<f64>(&text)
            .unwrap_err()
            .to_string()
            .contains("tau = 50"));
        assert!(matches!(
            parse_scenario::<f64>("name = x"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
