//! Closed-loop simulation, seed construction and property checks.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::controller::{ControllerSettings, LmpcController};
use crate::error::{Error, Result};
use crate::model::{intracycle, ProblemSpec};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};
use crate::safe_set::TrajectoryStore;
use crate::scenarios::{ScenarioConfig, SeedPolicy};
use crate::Scalar;

/// One period of states `x_0..x_P` and inputs `u_0..u_{P-1}` with `x_P = x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedTrajectory<T: Scalar> {
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
}

impl<T: Scalar> SeedTrajectory<T> {
    /// Integrates `inputs` from `x0`.
    pub fn rollout(spec: &ProblemSpec<T>, x0: DVector<T>, inputs: Vec<DVector<T>>) -> Result<Self> {
        let mut states = vec![x0];
        for (t, u) in inputs.iter().enumerate() {
            let next = spec.eval_dynamics(t, &states[t], u)?;
            states.push(next);
        }
        Ok(Self { states, inputs })
    }

    pub fn period_cost(&self, spec: &ProblemSpec<T>) -> Result<T> {
        let mut c = T::zero();
        for (t, u) in self.inputs.iter().enumerate() {
            c += spec.eval_stage_cost(t, &self.states[t], u)?;
        }
        Ok(c)
    }

    /// Reads `t,x0..,u0..` rows (header required, one row per tick `0..P`;
    /// the final row may leave the inputs empty).
    pub fn read_csv(spec: &ProblemSpec<T>, text: &str) -> Result<Self> {
        let n = spec.state_dim;
        let d = spec.input_dim;
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let ln = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 1 + n + d {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected {} columns, found {}", 1 + n + d, cells.len()),
                });
            }
            let num = |s: &str| {
                s.parse::<f64>().map(T::lit).map_err(|_| Error::Parse {
                    line: ln,
                    message: format!("bad number `{s}`"),
                })
            };
            let x = cells[1..=n]
                .iter()
                .map(|c| num(c))
                .collect::<Result<Vec<T>>>()?;
            states.push(DVector::from_vec(x));
            if cells[1 + n..].iter().all(|c| c.is_empty()) {
                continue;
            }
            let u = cells[1 + n..]
                .iter()
                .map(|c| num(c))
                .collect::<Result<Vec<T>>>()?;
            inputs.push(DVector::from_vec(u));
        }
        Ok(Self { states, inputs })
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let n = self.states.first().map_or(0, |x| x.len());
        let d = self.inputs.first().map_or(0, |u| u.len());
        let mut head = vec!["t".to_string()];
        head.extend((0..n).map(|i| format!("x{i}")));
        head.extend((0..d).map(|i| format!("u{i}")));
        writeln!(out, "{}", head.join(","))?;
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| format!("{v}")));
            match self.inputs.get(t) {
                Some(u) => row.extend(u.iter().map(|v| format!("{v}"))),
                None => row.extend(std::iter::repeat_n(String::new(), d)),
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Checks that the seed is one dynamics-consistent, feasible period with `x_P = x_0`.
pub fn validate_seed<T: Scalar>(
    spec: &ProblemSpec<T>,
    seed: &SeedTrajectory<T>,
    tol: T,
) -> Result<()> {
    let p = spec.period;
    let fail = |tick: usize, reason: String| Err(Error::SeedValidation { tick, reason });
    if seed.inputs.len() != p || seed.states.len() != p + 1 {
        return fail(
            0,
            format!(
                "expected {} states and {p} inputs, found {} and {}",
                p + 1,
                seed.states.len(),
                seed.inputs.len()
            ),
        );
    }
    for t in 0..p {
        let x = &seed.states[t];
        let u = &seed.inputs[t];
        if x.len() != spec.state_dim || u.len() != spec.input_dim {
            return fail(t, "wrong state or input dimension".into());
        }
        let rep = spec.check_constraints(t, x, u, tol)?;
        if !rep.feasible {
            return fail(t, format!("constraint violated by {}", rep.violation()));
        }
        let next = spec.eval_dynamics(t, x, u)?;
        let err = (&next - &seed.states[t + 1]).amax();
        if err > tol {
            return fail(t, format!("dynamics mismatch {err}"));
        }
    }
    let gap = (&seed.states[p] - &seed.states[0]).amax();
    if gap > tol {
        return fail(p, format!("x_P differs from x_0 by {gap}"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct WarmupSettings<T: Scalar> {
    pub cycles_max: usize,
    /// Periodicity tolerance over a full period.
    pub tol: T,
    pub qp: QpSettings<T>,
}

impl<T: Scalar> Default for WarmupSettings<T> {
    fn default() -> Self {
        Self {
            cycles_max: 50,
            tol: T::lit(1e-6),
            qp: QpSettings::default(),
        }
    }
}

/// Input-minimizing MPC over the problem horizon with stage constraints and
/// an optional terminal equality on the state at absolute time `target.0`.
fn warmup_action<T: Scalar>(
    spec: &ProblemSpec<T>,
    t: usize,
    x_t: &DVector<T>,
    target: Option<(usize, &DVector<T>)>,
    settings: &QpSettings<T>,
) -> Result<DVector<T>> {
    let n = spec.state_dim;
    let d = spec.input_dim;
    let n_h = spec.horizon;
    let nv = (n_h + 1) * n + n_h * d;
    let xs = |k: usize| k * n;
    let us = |k: usize| (n_h + 1) * n + k * d;
    let inf = T::infinity_bound();

    let mut h = DMatrix::zeros(nv, nv);
    for k in 0..n_h {
        for j in 0..d {
            h[(us(k) + j, us(k) + j)] = T::lit(2.0);
        }
    }
    let mut rows: Vec<(Vec<(usize, T)>, T, T)> = Vec::new();
    for i in 0..n {
        rows.push((vec![(xs(0) + i, T::one())], x_t[i], x_t[i]));
    }
    for k in 0..n_h {
        let m = spec.linearize_dynamics(t + k, x_t, &DVector::zeros(d))?;
        for i in 0..n {
            let mut r = vec![(xs(k + 1) + i, T::one())];
            r.extend((0..n).map(|j| (xs(k) + j, -m.a[(i, j)])));
            r.extend((0..d).map(|j| (us(k) + j, -m.b[(i, j)])));
            rows.push((r, m.c[i], m.c[i]));
        }
        let tau = spec.tau(t + k);
        let poly = &spec.constraints.input[tau];
        for r in 0..poly.rows() {
            rows.push((
                (0..d).map(|j| (us(k) + j, poly.g_mat[(r, j)])).collect(),
                -inf,
                poly.g_vec[r],
            ));
        }
        let poly = &spec.constraints.state[spec.tau(t + k + 1)];
        for r in 0..poly.rows() {
            rows.push((
                (0..n)
                    .map(|j| (xs(k + 1) + j, poly.g_mat[(r, j)]))
                    .collect(),
                -inf,
                poly.g_vec[r],
            ));
        }
    }
    if let Some((at, x_target)) = target {
        let k = at - t;
        for i in 0..n {
            rows.push((vec![(xs(k) + i, T::one())], x_target[i], x_target[i]));
        }
    }
    let mut a = DMatrix::zeros(rows.len(), nv);
    let mut l = DVector::zeros(rows.len());
    let mut u = DVector::zeros(rows.len());
    for (r, (entries, lo, hi)) in rows.into_iter().enumerate() {
        for (j, v) in entries {
            a[(r, j)] += v;
        }
        l[r] = lo;
        u[r] = hi;
    }
    if !spec.dynamics.is_linear() {
        return Err(Error::InvalidProblem(
            "warmup MPC needs affine dynamics".into(),
        ));
    }
    let p = QpProblem::new(h, DVector::zeros(nv), a, l, u)?;
    let sol = qp::solve_qp(&p, settings);
    if sol.status != QpStatus::Solved {
        return Err(Error::Solver(format!(
            "warmup MPC at t={t}: {}",
            sol.status.as_str()
        )));
    }
    Ok(sol.z.rows(us(0), d).into_owned())
}

/// Runs a terminal-free input-minimizing MPC from the origin until one full
/// period repeats the previous one, then re-simulates that period with its
/// end pinned to its start.
pub fn warmup_mpc<T: Scalar>(
    spec: &ProblemSpec<T>,
    settings: &WarmupSettings<T>,
) -> Result<SeedTrajectory<T>> {
    let p = spec.period;
    let mut states = vec![DVector::zeros(spec.state_dim)];
    let mut gap = T::zero();
    for cycle in 0..settings.cycles_max {
        for t in cycle * p..(cycle + 1) * p {
            let u = warmup_action(spec, t, &states[t], None, &settings.qp)?;
            let next = spec.eval_dynamics(t, &states[t], &u)?;
            states.push(next);
        }
        if cycle == 0 {
            continue;
        }
        gap = (cycle * p + 1..=(cycle + 1) * p)
            .map(|t| (&states[t] - &states[t - p]).amax())
            .fold(T::zero(), |a, b| a.max(b));
        if gap < settings.tol {
            let start = (cycle + 1) * p;
            let x_start = states[start].clone();
            let mut xs = vec![x_start.clone()];
            let mut us = Vec::with_capacity(p);
            for k in 0..p {
                let t = start + k;
                let target = (t + spec.horizon >= start + p).then_some((start + p, &x_start));
                let u = warmup_action(spec, t, &xs[k], target, &settings.qp)?;
                let next = spec.eval_dynamics(t, &xs[k], &u)?;
                xs.push(next);
                us.push(u);
            }
            let seed = SeedTrajectory {
                states: xs,
                inputs: us,
            };
            validate_seed(spec, &seed, T::lit(1e-8))?;
            log::debug!("warmup converged after {} cycles", cycle + 1);
            return Ok(seed);
        }
    }
    Err(Error::WarmupNotPeriodic {
        cycles: settings.cycles_max,
        gap: gap.to_f64_lossy(),
    })
}

/// Seed trajectory for a scenario, validated.
pub fn make_seed<T: Scalar>(cfg: &ScenarioConfig<T>) -> Result<SeedTrajectory<T>> {
    let spec = &cfg.spec;
    let p = spec.period;
    let seed = match &cfg.seed {
        SeedPolicy::SteadyStateOrigin => SeedTrajectory::rollout(
            spec,
            DVector::zeros(spec.state_dim),
            vec![DVector::zeros(spec.input_dim); p],
        )?,
        SeedPolicy::WarmupMpc => warmup_mpc(spec, &WarmupSettings::default())?,
        SeedPolicy::Analytic {
            x0,
            amplitude,
            offset,
        } => {
            let inputs = (0..p)
                .map(|t| {
                    let s = T::lit((2.0 * PI * t as f64 / p as f64).sin());
                    amplitude * s + offset
                })
                .collect();
            SeedTrajectory::rollout(spec, x0.clone(), inputs)?
        }
    };
    validate_seed(spec, &seed, T::lit(1e-8))?;
    Ok(seed)
}

#[derive(Clone, Debug)]
pub struct SimSettings<T: Scalar> {
    pub controller: ControllerSettings<T>,
    pub max_cycles_retained: Option<usize>,
}

impl<T: Scalar> Default for SimSettings<T> {
    fn default() -> Self {
        Self {
            controller: ControllerSettings::default(),
            max_cycles_retained: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TickRecord<T: Scalar> {
    pub t: usize,
    pub cycle: usize,
    pub tau: usize,
    pub x: DVector<T>,
    pub u: DVector<T>,
    pub h: T,
    /// Absent on seed ticks.
    pub lmpc_cost: Option<T>,
    /// `seed`, `solved`, `candidate` or `fallback`.
    pub status: &'static str,
    pub sqp_iters: Option<usize>,
    pub solve_ms: Option<f64>,
    /// Open-loop states `x*_{t..t+N|t}`.
    pub open_loop: Option<Vec<DVector<T>>>,
}

#[derive(Clone, Debug)]
pub struct SimLog<T: Scalar> {
    pub period: usize,
    pub ticks: Vec<TickRecord<T>>,
    /// State after the last tick.
    pub final_state: DVector<T>,
}

impl<T: Scalar> SimLog<T> {
    pub fn cycles(&self) -> usize {
        self.ticks.len() / self.period
    }

    /// State at tick `t`, including the final one.
    pub fn state(&self, t: usize) -> &DVector<T> {
        if t == self.ticks.len() {
            &self.final_state
        } else {
            &self.ticks[t].x
        }
    }

    /// `J_{t -> t+P}` for every complete cycle.
    pub fn period_costs(&self) -> Vec<T> {
        self.ticks
            .chunks(self.period)
            .filter(|c| c.len() == self.period)
            .map(|c| c.iter().fold(T::zero(), |s, r| s + r.h))
            .collect()
    }

    pub fn csv_header(&self) -> String {
        let n = self.final_state.len();
        let d = self.ticks.first().map_or(0, |r| r.u.len());
        let mut head = vec!["t".to_string(), "cycle".into(), "tau".into()];
        head.extend((0..n).map(|i| format!("x{i}")));
        head.extend((0..d).map(|i| format!("u{i}")));
        head.extend(
            ["stage_cost", "lmpc_cost", "status", "sqp_iters", "solve_ms"].map(String::from),
        );
        head.join(",")
    }

    /// One row per tick. Wall times are written only when `timing` is set,
    /// so the default output is reproducible.
    pub fn write_csv<W: Write>(&self, out: &mut W, timing: bool) -> Result<()> {
        writeln!(out, "{}", self.csv_header())?;
        for r in &self.ticks {
            let mut row = vec![r.t.to_string(), r.cycle.to_string(), r.tau.to_string()];
            row.extend(r.x.iter().map(|v| format!("{v}")));
            row.extend(r.u.iter().map(|v| format!("{v}")));
            row.push(format!("{}", r.h));
            row.push(r.lmpc_cost.map(|c| format!("{c}")).unwrap_or_default());
            row.push(r.status.to_string());
            row.push(r.sqp_iters.map(|k| k.to_string()).unwrap_or_default());
            row.push(match (timing, r.solve_ms) {
                (true, Some(ms)) => format!("{ms:.3}"),
                _ => String::new(),
            });
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Replays the seed for one period, then closes the loop with LMPC until
/// `cycles * P` ticks have been applied.
pub fn run_closed_loop<T: Scalar>(
    spec: &ProblemSpec<T>,
    seed: &SeedTrajectory<T>,
    cycles: usize,
    settings: &SimSettings<T>,
) -> Result<SimLog<T>> {
    validate_seed(spec, seed, T::lit(1e-8))?;
    if cycles == 0 {
        return Err(Error::InvalidProblem("cycles must be at least 1".into()));
    }
    let p = spec.period;
    let mut store = TrajectoryStore::new(p, seed.states[0].clone())
        .with_max_cycles_retained(settings.max_cycles_retained);
    let mut controller = LmpcController::new(settings.controller.clone());
    let mut ticks = Vec::with_capacity(cycles * p);
    for t in 0..cycles * p {
        let x = store.state(t).clone();
        let (cycle, tau) = intracycle(t, p);
        let (u, lmpc_cost, status, sqp_iters, solve_ms, open_loop) = if t < p {
            (seed.inputs[t].clone(), None, "seed", None, None, None)
        } else {
            let sol = controller.step(spec, &store, t)?;
            let diag = &sol.diagnostics;
            (
                sol.action().clone(),
                Some(sol.cost),
                diag.source.as_str(),
                diag.sqp_iterations,
                Some(diag.solve_ms),
                Some(sol.states.clone()),
            )
        };
        let h = spec.eval_stage_cost(t, &x, &u)?;
        let next = spec.eval_dynamics(t, &x, &u)?;
        store.record_step(spec, t, next, u.clone(), h)?;
        ticks.push(TickRecord {
            t,
            cycle,
            tau,
            x,
            u,
            h,
            lmpc_cost,
            status,
            sqp_iters,
            solve_ms,
            open_loop,
        });
    }
    Ok(SimLog {
        period: p,
        ticks,
        final_state: store.state(cycles * p).clone(),
    })
}

/// Smallest cycle from which every recorded cycle repeats its predecessor
/// within `tol` in the max norm.
pub fn detect_periodic_convergence<T: Scalar>(log: &SimLog<T>, tol: T) -> Option<usize> {
    let p = log.period;
    let cycles = log.cycles();
    if cycles < 2 {
        return None;
    }
    let gap = |c: usize| {
        (c * p..(c + 1) * p)
            .map(|t| (log.state(t) - log.state(t - p)).amax())
            .fold(T::zero(), |a, b| a.max(b))
    };
    let mut first = None;
    for c in (1..cycles).rev() {
        if gap(c) < tol {
            first = Some(c);
        } else {
            break;
        }
    }
    first
}

#[derive(Clone, Debug)]
pub struct PropertyTolerances {
    pub feasibility: f64,
    pub monotonicity: f64,
    pub convergence: f64,
    pub period_cost_gap: f64,
    pub open_loop_deviation: f64,
}

impl Default for PropertyTolerances {
    fn default() -> Self {
        Self {
            feasibility: 1e-6,
            monotonicity: 1e-6,
            convergence: 1e-4,
            period_cost_gap: 1e-3,
            open_loop_deviation: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PropertyReport {
    /// Constraint violation per tick (zero when satisfied).
    pub violation_per_tick: Vec<f64>,
    pub max_violation: f64,
    pub worst_violation_tick: Option<usize>,
    /// Largest tick-to-tick increase of the open-loop cost.
    pub max_cost_increase: f64,
    pub worst_increase_tick: Option<usize>,
    /// Largest mismatch between logged and re-evaluated stage costs or dynamics.
    pub log_consistency: f64,
    pub fallback_ticks: Vec<usize>,
    pub convergence_cycle: Option<usize>,
    /// `max |J_{t->t+P} - J^LMPC_t|` over ticks past convergence.
    pub period_cost_gap: Option<f64>,
    /// `max_k |x*_{t+k|t} - x_{t+k}|` over ticks past convergence.
    pub open_loop_deviation: Option<f64>,
    /// Whether the two gaps above are binding (strictly convex stage cost).
    pub steady_state_checked: bool,
    pub tolerances: PropertyTolerances,
}

impl PropertyReport {
    /// Human-readable list of failed checks.
    pub fn violations(&self) -> Vec<String> {
        let tol = &self.tolerances;
        let mut out = Vec::new();
        if self.max_violation >= tol.feasibility {
            out.push(format!(
                "constraint violation {:e} at t={}",
                self.max_violation,
                self.worst_violation_tick.unwrap_or(0)
            ));
        }
        if self.max_cost_increase >= tol.monotonicity {
            out.push(format!(
                "open-loop cost increase {:e} at t={}",
                self.max_cost_increase,
                self.worst_increase_tick.unwrap_or(0)
            ));
        }
        if self.log_consistency > 1e-9 {
            out.push(format!(
                "log inconsistent with the model by {:e}",
                self.log_consistency
            ));
        }
        if self.steady_state_checked {
            if let Some(g) = self.period_cost_gap.filter(|g| *g > tol.period_cost_gap) {
                out.push(format!("period cost differs from open-loop cost by {g:e}"));
            }
            if let Some(g) = self
                .open_loop_deviation
                .filter(|g| *g > tol.open_loop_deviation)
            {
                out.push(format!(
                    "open-loop states deviate from closed loop by {g:e}"
                ));
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.violations().is_empty()
    }
}

/// Re-evaluates a log against the model: feasibility, cost monotonicity and,
/// past convergence, agreement of open-loop predictions with the closed loop.
pub fn verify_properties<T: Scalar>(
    log: &SimLog<T>,
    spec: &ProblemSpec<T>,
    tolerances: &PropertyTolerances,
) -> Result<PropertyReport> {
    let p = log.period;
    let total = log.ticks.len();
    let mut violation_per_tick = Vec::with_capacity(total);
    let mut consistency = 0.0f64;
    for r in &log.ticks {
        let rep = spec.check_constraints(r.t, &r.x, &r.u, T::zero())?;
        violation_per_tick.push(rep.violation().to_f64_lossy().max(0.0));
        let h = spec.eval_stage_cost(r.t, &r.x, &r.u)?;
        consistency = consistency.max((h - r.h).abs().to_f64_lossy());
        let next = spec.eval_dynamics(r.t, &r.x, &r.u)?;
        consistency = consistency.max((&next - log.state(r.t + 1)).amax().to_f64_lossy());
    }
    let (worst_violation_tick, max_violation) = violation_per_tick
        .iter()
        .copied()
        .enumerate()
        .fold(
            (None, 0.0),
            |(bt, bv), (t, v)| if v > bv { (Some(t), v) } else { (bt, bv) },
        );

    let mut max_cost_increase = 0.0f64;
    let mut worst_increase_tick = None;
    for w in log.ticks.windows(2) {
        if let (Some(a), Some(b)) = (w[0].lmpc_cost, w[1].lmpc_cost) {
            let inc = (b - a).to_f64_lossy();
            if inc > max_cost_increase {
                max_cost_increase = inc;
                worst_increase_tick = Some(w[1].t);
            }
        }
    }
    let fallback_ticks = log
        .ticks
        .iter()
        .filter(|r| r.status == "fallback")
        .map(|r| r.t)
        .collect();

    let convergence_cycle = detect_periodic_convergence(log, T::lit(tolerances.convergence));
    let mut period_cost_gap = None;
    let mut open_loop_deviation = None;
    if let Some(c) = convergence_cycle {
        let from = (c * p).max(p);
        let mut cost_gap: Option<f64> = None;
        let mut dev: Option<f64> = None;
        for t in from..total {
            let r = &log.ticks[t];
            if let (Some(j), true) = (r.lmpc_cost, t + p <= total) {
                let closed = log.ticks[t..t + p].iter().fold(T::zero(), |s, k| s + k.h);
                let g = (closed - j).abs().to_f64_lossy();
                cost_gap = Some(cost_gap.map_or(g, |m| m.max(g)));
            }
            if let Some(ol) = &r.open_loop {
                if t + ol.len() - 1 <= total {
                    let g = ol
                        .iter()
                        .enumerate()
                        .map(|(k, x)| (x - log.state(t + k)).amax().to_f64_lossy())
                        .fold(0.0, f64::max);
                    dev = Some(dev.map_or(g, |m| m.max(g)));
                }
            }
        }
        period_cost_gap = cost_gap;
        open_loop_deviation = dev;
    }
    Ok(PropertyReport {
        violation_per_tick,
        max_violation,
        worst_violation_tick,
        max_cost_increase,
        worst_increase_tick,
        log_consistency: consistency,
        fallback_ticks,
        convergence_cycle,
        period_cost_gap,
        open_loop_deviation,
        steady_state_checked: spec.cost.strictly_convex,
        tolerances: tolerances.clone(),
    })
}

#[cfg(test)]
mod tests;
