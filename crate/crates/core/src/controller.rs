//! Finite-time optimal control problem with a data-driven terminal set and
//! cost, its QP/SQP solution, and the shifted feasible candidate.

use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::model::{AffineModel, Dynamics, ProblemSpec};
use crate::qp::{self, QpProblem, QpSettings, QpStatus, WarmStart};
use crate::safe_set::{TerminalData, TrajectoryStore};
use crate::Scalar;

/// Layout of the stacked decision vector `[x_0..x_N, u_0..u_{N-1}, lambda]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarIndex {
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    pub vertices: usize,
}

impl VarIndex {
    pub fn state(&self, k: usize) -> Range<usize> {
        let s = k * self.state_dim;
        s..s + self.state_dim
    }

    pub fn input(&self, k: usize) -> Range<usize> {
        let s = (self.horizon + 1) * self.state_dim + k * self.input_dim;
        s..s + self.input_dim
    }

    pub fn lambda(&self) -> Range<usize> {
        let s = (self.horizon + 1) * self.state_dim + self.horizon * self.input_dim;
        s..s + self.vertices
    }

    pub fn num_vars(&self) -> usize {
        (self.horizon + 1) * self.state_dim + self.horizon * self.input_dim + self.vertices
    }

    pub fn pack<T: Scalar>(
        &self,
        states: &[DVector<T>],
        inputs: &[DVector<T>],
        lambda: &DVector<T>,
    ) -> DVector<T> {
        let mut z = DVector::zeros(self.num_vars());
        for (k, x) in states.iter().enumerate() {
            z.rows_mut(self.state(k).start, self.state_dim).copy_from(x);
        }
        for (k, u) in inputs.iter().enumerate() {
            z.rows_mut(self.input(k).start, self.input_dim).copy_from(u);
        }
        z.rows_mut(self.lambda().start, self.vertices)
            .copy_from(lambda);
        z
    }

    #[allow(clippy::type_complexity)]
    pub fn unpack<T: Scalar>(
        &self,
        z: &DVector<T>,
    ) -> (Vec<DVector<T>>, Vec<DVector<T>>, DVector<T>) {
        let states = (0..=self.horizon)
            .map(|k| z.rows(self.state(k).start, self.state_dim).into_owned())
            .collect();
        let inputs = (0..self.horizon)
            .map(|k| z.rows(self.input(k).start, self.input_dim).into_owned())
            .collect();
        let lambda = z.rows(self.lambda().start, self.vertices).into_owned();
        (states, inputs, lambda)
    }
}

/// QP instance of the FTOCP plus the row ranges needed to read its duals.
#[derive(Clone, Debug)]
pub struct Ftocp<T: Scalar> {
    pub qp: QpProblem<T>,
    pub index: VarIndex,
    /// Rows holding the `N` dynamics blocks, `n` rows each.
    pub dynamics_rows: Range<usize>,
    /// Constant part of the stage costs, dropped by the QP objective.
    pub cost_offset: T,
}

/// Builds the FTOCP at tick `t` for affine dynamics.
pub fn build_ftocp<T: Scalar>(
    spec: &ProblemSpec<T>,
    td: &TerminalData<T>,
    t: usize,
    x_t: &DVector<T>,
) -> Result<Ftocp<T>> {
    let models = match &spec.dynamics {
        Dynamics::Linear { .. } => (0..spec.horizon)
            .map(|k| spec.linearize_dynamics(t + k, x_t, &DVector::zeros(spec.input_dim)))
            .collect::<Result<Vec<_>>>()?,
        Dynamics::Nonlinear(_) => {
            return Err(Error::InvalidProblem(
                "build_ftocp needs affine dynamics; nonlinear systems go through the SQP path"
                    .into(),
            ))
        }
    };
    build_ftocp_with_models(spec, td, t, x_t, &models)
}

/// Builds the FTOCP with explicit per-stage affine models and optional
/// additional per-stage Hessian blocks over `(x_k, u_k)`.
pub fn build_ftocp_with_models<T: Scalar>(
    spec: &ProblemSpec<T>,
    td: &TerminalData<T>,
    t: usize,
    x_t: &DVector<T>,
    models: &[AffineModel<T>],
) -> Result<Ftocp<T>> {
    let n = spec.state_dim;
    let d = spec.input_dim;
    let horizon = spec.horizon;
    check_dim("measured state", n, x_t.len())?;
    check_dim("stage models", horizon, models.len())?;
    if td.is_empty() {
        return Err(Error::EmptySafeSet { slot: td.slot });
    }
    check_dim("safe-set vertex dimension", n, td.vertices.nrows())?;

    let pre = spec.check_constraints(t, x_t, &DVector::zeros(d), T::lit(1e-6))?;
    if pre.state_margins.iter().any(|m| *m > T::lit(1e-6)) {
        log::warn!("measured state at t={t} violates the state constraints");
    }

    let m_vert = td.len();
    let index = VarIndex {
        state_dim: n,
        input_dim: d,
        horizon,
        vertices: m_vert,
    };
    let nv = index.num_vars();
    let inf = T::infinity_bound();
    let two = T::lit(2.0);

    let mut h = DMatrix::zeros(nv, nv);
    let mut q = DVector::zeros(nv);
    let mut cost_offset = T::zero();
    for k in 0..horizon {
        let c = spec.cost.at(t + k);
        let xs = index.state(k).start;
        let us = index.input(k).start;
        let mut blk = h.view_mut((xs, xs), (n, n));
        blk += &c.q * two;
        let mut blk = h.view_mut((us, us), (d, d));
        blk += &c.r * two;
        let lin = -(&c.q * &c.x_ref) * two;
        let mut seg = q.rows_mut(xs, n);
        seg += lin;
        cost_offset += (&c.q * &c.x_ref).dot(&c.x_ref);
    }
    q.rows_mut(index.lambda().start, m_vert)
        .copy_from(&td.costs);

    let mut rows_a: Vec<DVector<T>> = Vec::new();
    let mut lo: Vec<T> = Vec::new();
    let mut hi: Vec<T> = Vec::new();
    let mut push = |row: DVector<T>, l: T, u: T| {
        rows_a.push(row);
        lo.push(l);
        hi.push(u);
    };

    // x_0 = x_t
    for i in 0..n {
        let mut row = DVector::zeros(nv);
        row[index.state(0).start + i] = T::one();
        push(row, x_t[i], x_t[i]);
    }
    // x_{k+1} - A_k x_k - B_k u_k = c_k
    let dyn_start = n;
    for (k, model) in models.iter().enumerate() {
        for i in 0..n {
            let mut row = DVector::zeros(nv);
            row[index.state(k + 1).start + i] = T::one();
            for j in 0..n {
                row[index.state(k).start + j] -= model.a[(i, j)];
            }
            for j in 0..d {
                row[index.input(k).start + j] -= model.b[(i, j)];
            }
            push(row, model.c[i], model.c[i]);
        }
    }
    let dynamics_rows = dyn_start..dyn_start + n * horizon;
    // Stage constraints. The state at k = 0 is pinned to the measurement, so
    // its polyhedron adds nothing but a possible infeasibility at round-off.
    for k in 0..horizon {
        let tau = spec.tau(t + k);
        if k > 0 {
            let poly = &spec.constraints.state[tau];
            for r in 0..poly.rows() {
                let mut row = DVector::zeros(nv);
                for j in 0..n {
                    row[index.state(k).start + j] = poly.g_mat[(r, j)];
                }
                push(row, -inf, poly.g_vec[r]);
            }
        }
        let poly = &spec.constraints.input[tau];
        for r in 0..poly.rows() {
            let mut row = DVector::zeros(nv);
            for j in 0..d {
                row[index.input(k).start + j] = poly.g_mat[(r, j)];
            }
            push(row, -inf, poly.g_vec[r]);
        }
    }
    // x_N = D lambda, 1'lambda = 1, lambda >= 0
    for i in 0..n {
        let mut row = DVector::zeros(nv);
        row[index.state(horizon).start + i] = T::one();
        for j in 0..m_vert {
            row[index.lambda().start + j] = -td.vertices[(i, j)];
        }
        push(row, T::zero(), T::zero());
    }
    let mut row = DVector::zeros(nv);
    for j in 0..m_vert {
        row[index.lambda().start + j] = T::one();
    }
    push(row, T::one(), T::one());
    for j in 0..m_vert {
        let mut row = DVector::zeros(nv);
        row[index.lambda().start + j] = T::one();
        push(row, T::zero(), inf);
    }

    let mut a = DMatrix::zeros(rows_a.len(), nv);
    for (r, row) in rows_a.iter().enumerate() {
        a.set_row(r, &row.transpose());
    }
    let qp = QpProblem::new(h, q, a, DVector::from_vec(lo), DVector::from_vec(hi))?;
    Ok(Ftocp {
        qp,
        index,
        dynamics_rows,
        cost_offset,
    })
}

/// How the applied trajectory was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolutionSource {
    Optimizer,
    /// Shifted candidate adopted because it was cheaper than the optimizer output.
    Candidate,
    /// Shifted candidate adopted because the optimizer failed.
    Fallback,
}

impl SolutionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SolutionSource::Optimizer => "solved",
            SolutionSource::Candidate => "candidate",
            SolutionSource::Fallback => "fallback",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveDiagnostics {
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub sqp_iterations: Option<usize>,
    pub source: SolutionSource,
    /// Wall time of the whole controller step; not part of any reproducible output.
    pub solve_ms: f64,
    pub terminal_gap: f64,
}

impl SolveDiagnostics {
    pub fn fallback(&self) -> bool {
        self.source == SolutionSource::Fallback
    }
}

/// Open-loop optimum at tick `t`.
#[derive(Clone, Debug)]
pub struct FtocpSolution<T: Scalar> {
    pub t: usize,
    /// `x*_{t|t} .. x*_{t+N|t}`, re-integrated through the true dynamics.
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    pub lambda: DVector<T>,
    /// Recording ticks of the safe-set vertices `lambda` refers to.
    pub vertex_times: Vec<usize>,
    /// `sum h_k(x*, u*) + J' lambda*`.
    pub cost: T,
    pub diagnostics: SolveDiagnostics,
}

impl<T: Scalar> FtocpSolution<T> {
    pub fn action(&self) -> &DVector<T> {
        &self.inputs[0]
    }
}

/// Feasible trajectory for the FTOCP at `t` built from the solution at `t - 1`.
#[derive(Clone, Debug)]
pub struct CandidateTrajectory<T: Scalar> {
    pub t: usize,
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    /// Aligned with `terminal_data(t, t + N)`.
    pub lambda: DVector<T>,
    /// False when no feasibility guarantee exists (warm start only).
    pub valid: bool,
}

/// Candidate at the first LMPC tick of a cycle-aligned store: the stored
/// segment one period back.
pub fn seed_candidate<T: Scalar>(
    spec: &ProblemSpec<T>,
    store: &TrajectoryStore<T>,
    t: usize,
    td: &TerminalData<T>,
) -> Result<CandidateTrajectory<T>> {
    let p = spec.period;
    let n_h = spec.horizon;
    if t < p {
        return Err(Error::IndexOutOfRange(format!(
            "seed candidate needs t >= P, got {t}"
        )));
    }
    let base = t - p;
    let states: Vec<_> = (0..=n_h).map(|k| store.state(base + k).clone()).collect();
    let inputs: Vec<_> = (0..n_h).map(|k| store.input(base + k).clone()).collect();
    let mut lambda = DVector::zeros(td.len());
    let pos = td.times.iter().position(|&i| i == base + n_h);
    if let Some(j) = pos {
        lambda[j] = T::one();
    }
    let gap = (store.state(t) - store.state(base)).amax();
    Ok(CandidateTrajectory {
        t,
        states,
        inputs,
        lambda,
        valid: pos.is_some() && gap <= T::lit(1e-8),
    })
}

/// Shifts `prev` (solved at `t - 1`) by one tick and appends one safe-set step.
pub fn candidate_shift<T: Scalar>(
    spec: &ProblemSpec<T>,
    prev: &FtocpSolution<T>,
    store: &TrajectoryStore<T>,
    t: usize,
    td: &TerminalData<T>,
) -> Result<CandidateTrajectory<T>> {
    if prev.t + 1 != t {
        return Err(Error::IndexOutOfRange(format!(
            "candidate for t={t} needs a solution from t={}, got t={}",
            t.saturating_sub(1),
            prev.t
        )));
    }
    let n_h = spec.horizon;
    let mut states: Vec<DVector<T>> = prev.states[1..=n_h].to_vec();
    let mut inputs: Vec<DVector<T>> = prev.inputs[1..n_h].to_vec();

    let successors: Vec<DVector<T>> = prev
        .vertex_times
        .iter()
        .map(|&i| store.state(i + 1).clone())
        .collect();
    let vertex_states: Vec<DVector<T>> = prev
        .vertex_times
        .iter()
        .map(|&i| store.state(i).clone())
        .collect();
    let vertex_inputs: Vec<DVector<T>> = prev
        .vertex_times
        .iter()
        .map(|&i| store.input(i).clone())
        .collect();
    let lam: Vec<T> = prev.lambda.iter().copied().collect();

    let mut terminal = DVector::zeros(spec.state_dim);
    for (x, &l) in successors.iter().zip(&lam) {
        terminal += x * l;
    }
    let (gamma, mut valid) = match &spec.dynamics {
        Dynamics::Linear { .. } => (lam.clone(), true),
        Dynamics::Nonlinear(map) => match map.input_multipliers(&vertex_states, &lam) {
            Some(g) => (g, true),
            None => (lam.clone(), false),
        },
    };
    let mut appended = DVector::zeros(spec.input_dim);
    for (u, &g) in vertex_inputs.iter().zip(&gamma) {
        appended += u * g;
    }
    states.push(terminal);
    inputs.push(appended);

    let mut lambda = DVector::zeros(td.len());
    for (c, &i) in prev.vertex_times.iter().enumerate() {
        match td.times.iter().position(|&k| k == i + 1) {
            Some(j) => lambda[j] = prev.lambda[c],
            None if prev.lambda[c] == T::zero() => {}
            None => valid = false,
        }
    }
    Ok(CandidateTrajectory {
        t,
        states,
        inputs,
        lambda,
        valid,
    })
}

/// Re-integrates `inputs` from `x_t` and checks every FTOCP constraint.
/// Returns the trajectory, its cost and the terminal gap when feasible.
#[allow(clippy::type_complexity)]
pub(crate) fn assess<T: Scalar>(
    spec: &ProblemSpec<T>,
    td: &TerminalData<T>,
    t: usize,
    x_t: &DVector<T>,
    inputs: &[DVector<T>],
    lambda: &DVector<T>,
    tol: T,
) -> Result<Option<(Vec<DVector<T>>, T, T)>> {
    let n_h = spec.horizon;
    let mut states = Vec::with_capacity(n_h + 1);
    states.push(x_t.clone());
    let mut cost = T::zero();
    for k in 0..n_h {
        let x = &states[k];
        let u = &inputs[k];
        let rep = spec.check_constraints(t + k, x, u, tol)?;
        let state_ok = k == 0 || rep.state_margins.iter().all(|m| *m <= tol);
        let input_ok = rep.input_margins.iter().all(|m| *m <= tol);
        if !state_ok || !input_ok {
            return Ok(None);
        }
        cost += spec.eval_stage_cost(t + k, x, u)?;
        let next = spec.eval_dynamics(t + k, x, u)?;
        states.push(next);
    }
    if lambda.iter().any(|l| *l < -tol) || (lambda.sum() - T::one()).abs() > tol {
        return Ok(None);
    }
    let gap = (&states[n_h] - td.combine(lambda)).amax();
    if gap > tol {
        return Ok(None);
    }
    cost += td.costs.dot(lambda);
    Ok(Some((states, cost, gap)))
}

#[derive(Clone, Debug)]
pub struct SqpSettings<T: Scalar> {
    pub max_iter: usize,
    pub step_tol: T,
    /// Also stop once the QP model predicts a relative cost decrease below
    /// this and the iterate is dynamically feasible; catches flat valleys
    /// where the step never shrinks.
    pub decrease_tol: T,
    /// l1 dynamics defect the decrease test requires.
    pub defect_tol: T,
    /// Backtracking factor of the line search.
    pub backtrack: T,
    pub min_step: T,
    /// Armijo sufficient-decrease constant.
    pub armijo: T,
    /// Weight of `|z - z_k|^2 / 2` added to each QP subproblem.
    pub proximal: T,
}

impl<T: Scalar> Default for SqpSettings<T> {
    fn default() -> Self {
        Self {
            max_iter: 30,
            step_tol: T::lit(1e-7),
            decrease_tol: T::lit(1e-6),
            defect_tol: T::lit(1e-10),
            backtrack: T::lit(0.5),
            min_step: T::lit(1e-4),
            armijo: T::lit(1e-4),
            proximal: T::zero(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ControllerSettings<T: Scalar> {
    pub qp: QpSettings<T>,
    pub sqp: SqpSettings<T>,
    /// Tolerance used when re-checking open-loop trajectories.
    pub feasibility_tol: T,
}

impl<T: Scalar> Default for ControllerSettings<T> {
    fn default() -> Self {
        Self {
            qp: QpSettings::default(),
            sqp: SqpSettings::default(),
            feasibility_tol: T::lit(1e-6),
        }
    }
}

/// Raw optimizer output before the candidate comparison.
struct OptimizerOutput<T: Scalar> {
    inputs: Vec<DVector<T>>,
    lambda: DVector<T>,
    status: QpStatus,
    qp_iterations: usize,
    sqp_iterations: Option<usize>,
    converged: bool,
}

fn finalize<T: Scalar>(
    spec: &ProblemSpec<T>,
    td: &TerminalData<T>,
    t: usize,
    x_t: &DVector<T>,
    out: OptimizerOutput<T>,
    tol: T,
    started: Instant,
) -> Result<Option<FtocpSolution<T>>> {
    if !out.converged {
        return Ok(None);
    }
    let lambda = out.lambda.map(|v| v.max(T::zero()));
    let Some((states, cost, gap)) = assess(spec, td, t, x_t, &out.inputs, &lambda, tol)? else {
        return Ok(None);
    };
    Ok(Some(FtocpSolution {
        t,
        states,
        inputs: out.inputs,
        lambda,
        vertex_times: td.times.clone(),
        cost,
        diagnostics: SolveDiagnostics {
            qp_status: out.status,
            qp_iterations: out.qp_iterations,
            sqp_iterations: out.sqp_iterations,
            source: SolutionSource::Optimizer,
            solve_ms: started.elapsed().as_secs_f64() * 1e3,
            terminal_gap: gap.to_f64_lossy(),
        },
    }))
}

fn warm_vector<T: Scalar>(
    index: &VarIndex,
    warm: Option<&CandidateTrajectory<T>>,
) -> Option<DVector<T>> {
    warm.filter(|c| c.lambda.len() == index.vertices)
        .map(|c| index.pack(&c.states, &c.inputs, &c.lambda))
}

/// Solves the FTOCP for affine dynamics. `Ok(None)` means the solver did not
/// return a usable point.
pub fn solve_lmpc_linear<T: Scalar>(
    spec: &ProblemSpec<T>,
    store: &TrajectoryStore<T>,
    t: usize,
    x_t: &DVector<T>,
    warm: Option<&CandidateTrajectory<T>>,
    settings: &ControllerSettings<T>,
) -> Result<Option<FtocpSolution<T>>> {
    let started = Instant::now();
    let td = store.terminal_data(t, t + spec.horizon)?;
    let ftocp = build_ftocp(spec, &td, t, x_t)?;
    let ws = WarmStart {
        z: warm_vector(&ftocp.index, warm),
        y: None,
    };
    let sol = qp::solve_qp_warm(&ftocp.qp, &settings.qp, Some(&ws));
    let (_, inputs, lambda) = ftocp.index.unpack(&sol.z);
    let out = OptimizerOutput {
        inputs,
        lambda,
        status: sol.status,
        qp_iterations: sol.iterations,
        sqp_iterations: None,
        converged: sol.status == QpStatus::Solved,
    };
    finalize(spec, &td, t, x_t, out, settings.feasibility_tol, started)
}

/// Positive-semidefinite part of a symmetric matrix.
fn psd_part<T: Scalar>(m: DMatrix<T>) -> DMatrix<T> {
    let sym = (&m + m.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(T::zero()));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Re-solves the step QP with the dynamics rows shifted by the
/// linearization error at `trial`, pulling the full step back towards the
/// constraint manifold.
fn second_order_correction<T: Scalar>(
    spec: &ProblemSpec<T>,
    t: usize,
    ftocp: &Ftocp<T>,
    models: &[AffineModel<T>],
    trial: &DVector<T>,
    qp_settings: &QpSettings<T>,
) -> Result<Option<(DVector<T>, usize)>> {
    let n = spec.state_dim;
    let (xs, us, _) = ftocp.index.unpack(trial);
    let mut qp = ftocp.qp.clone();
    for (k, m) in models.iter().enumerate() {
        let lin = &m.a * &xs[k] + &m.b * &us[k] + &m.c;
        let err = spec.eval_dynamics(t + k, &xs[k], &us[k])? - lin;
        for i in 0..n {
            let r = ftocp.dynamics_rows.start + k * n + i;
            qp.l[r] += err[i];
            qp.u[r] += err[i];
        }
    }
    let ws = WarmStart {
        z: Some(trial.clone()),
        y: None,
    };
    let sol = qp::solve_qp_warm(&qp, qp_settings, Some(&ws));
    Ok((sol.status == QpStatus::Solved).then_some((sol.z, sol.iterations)))
}

/// Second derivative of `w' f(tau, x, u)` over `(x, u)` by central
/// differences of the Jacobians.
fn weighted_hessian<T: Scalar>(
    spec: &ProblemSpec<T>,
    t: usize,
    x: &DVector<T>,
    u: &DVector<T>,
    w: &DVector<T>,
) -> Result<DMatrix<T>> {
    let n = spec.state_dim;
    let d = spec.input_dim;
    if let Some(map) = spec.dynamics.nonlinear_map() {
        if let Some(hs) = map.weighted_hessian(spec.tau(t), spec.period, x, u, w) {
            return Ok(hs);
        }
    }
    let grad = |x: &DVector<T>, u: &DVector<T>| -> Result<DVector<T>> {
        let m = spec.linearize_dynamics(t, x, u)?;
        let mut g = DVector::zeros(n + d);
        g.rows_mut(0, n).copy_from(&(m.a.transpose() * w));
        g.rows_mut(n, d).copy_from(&(m.b.transpose() * w));
        Ok(g)
    };
    let mut hs = DMatrix::zeros(n + d, n + d);
    let h = T::lit(1e-5);
    for j in 0..n + d {
        let (mut xp, mut up, mut xm, mut um) = (x.clone(), u.clone(), x.clone(), u.clone());
        if j < n {
            xp[j] += h;
            xm[j] -= h;
        } else {
            up[j - n] += h;
            um[j - n] -= h;
        }
        let col = (grad(&xp, &up)? - grad(&xm, &um)?) / (T::lit(2.0) * h);
        hs.set_column(j, &col);
    }
    Ok(hs)
}

/// Solves the FTOCP for nonlinear dynamics by SQP with an l1 merit line
/// search. The QP Hessian is the stage-cost Hessian plus the PSD part of the
/// constraint curvature weighted by the dynamics multipliers. Once the model
/// predicts no useful decrease, the iterate is projected back onto the
/// dynamics by minimum-distance QPs.
pub fn solve_lmpc_nonlinear<T: Scalar>(
    spec: &ProblemSpec<T>,
    store: &TrajectoryStore<T>,
    t: usize,
    x_t: &DVector<T>,
    warm: Option<&CandidateTrajectory<T>>,
    settings: &ControllerSettings<T>,
) -> Result<Option<FtocpSolution<T>>> {
    let started = Instant::now();
    let n = spec.state_dim;
    let d = spec.input_dim;
    let n_h = spec.horizon;
    let td = store.terminal_data(t, t + n_h)?;
    let index = VarIndex {
        state_dim: n,
        input_dim: d,
        horizon: n_h,
        vertices: td.len(),
    };
    let sqp = &settings.sqp;

    // Initial guess: the candidate, otherwise zero inputs with uniform weights.
    let mut z = match warm_vector(&index, warm) {
        Some(z) => z,
        None => {
            let mut states = vec![x_t.clone()];
            let inputs = vec![DVector::zeros(d); n_h];
            for k in 0..n_h {
                let next = spec.eval_dynamics(t + k, &states[k], &inputs[k])?;
                states.push(next);
            }
            let lambda =
                DVector::from_element(td.len(), T::one() / T::from_usize(td.len()).unwrap());
            index.pack(&states, &inputs, &lambda)
        }
    };
    z.rows_mut(index.state(0).start, n).copy_from(x_t);

    let objective = |z: &DVector<T>| -> Result<T> {
        let (xs, us, lam) = index.unpack(z);
        let mut c = td.costs.dot(&lam);
        for k in 0..n_h {
            c += spec.eval_stage_cost(t + k, &xs[k], &us[k])?;
        }
        Ok(c)
    };
    let defect_l1 = |z: &DVector<T>| -> Result<T> {
        let (xs, us, _) = index.unpack(z);
        let mut s = T::zero();
        for k in 0..n_h {
            let f = spec.eval_dynamics(t + k, &xs[k], &us[k])?;
            s += (&xs[k + 1] - f).abs().sum();
        }
        Ok(s)
    };
    let gradient = |z: &DVector<T>| -> DVector<T> {
        let (xs, _, _) = index.unpack(z);
        let mut g = DVector::zeros(index.num_vars());
        for k in 0..n_h {
            let c = spec.cost.at(t + k);
            let gx = &c.q * (&xs[k] - &c.x_ref) * T::lit(2.0);
            g.rows_mut(index.state(k).start, n).copy_from(&gx);
            let us = z.rows(index.input(k).start, d).into_owned();
            g.rows_mut(index.input(k).start, d)
                .copy_from(&(&c.r * us * T::lit(2.0)));
        }
        g.rows_mut(index.lambda().start, td.len())
            .copy_from(&td.costs);
        g
    };

    let mut penalty = T::one();
    let mut multipliers: Option<DVector<T>> = None;
    let mut total_qp_iters = 0;
    let mut last_status = QpStatus::Solved;
    let mut converged = false;
    let mut restoring = false;
    let mut iterations = 0;

    for iter in 1..=sqp.max_iter {
        iterations = iter;
        let (xs, us, _) = index.unpack(&z);
        let mut models = Vec::with_capacity(n_h);
        for k in 0..n_h {
            models.push(spec.linearize_dynamics(t + k, &xs[k], &us[k])?);
        }
        let mut ftocp = build_ftocp_with_models(spec, &td, t, x_t, &models)?;
        if restoring {
            // Closest point on the linearized constraints.
            ftocp.qp.h = DMatrix::identity(index.num_vars(), index.num_vars());
            ftocp.qp.q = -z.clone();
        } else {
            // Step-only terms: Lagrangian curvature of the dynamics and a
            // small proximal weight. Each adds E to H and -E z to q so the QP
            // gradient at the current iterate stays the true cost gradient.
            let mut extra =
                DMatrix::<T>::identity(index.num_vars(), index.num_vars()) * sqp.proximal;
            if let Some(y) = &multipliers {
                for k in 0..n_h {
                    // Lagrangian term y_k'(x_{k+1} - f_k) contributes -y_k' f_k.
                    let w = -y.rows(k * n, n).into_owned();
                    let blk = psd_part(weighted_hessian(spec, t + k, &xs[k], &us[k], &w)?);
                    let (xs0, us0) = (index.state(k).start, index.input(k).start);
                    for i in 0..n + d {
                        for j in 0..n + d {
                            let gi = if i < n { xs0 + i } else { us0 + i - n };
                            let gj = if j < n { xs0 + j } else { us0 + j - n };
                            extra[(gi, gj)] += blk[(i, j)];
                        }
                    }
                }
            }
            ftocp.qp.q -= &extra * &z;
            ftocp.qp.h += extra;
        }
        let ws = WarmStart {
            z: Some(z.clone()),
            y: None,
        };
        let sol = qp::solve_qp_warm(&ftocp.qp, &settings.qp, Some(&ws));
        total_qp_iters += sol.iterations;
        last_status = sol.status;
        if sol.status != QpStatus::Solved {
            break;
        }
        if restoring {
            z = sol.z;
            if defect_l1(&z)? <= sqp.defect_tol {
                converged = true;
                break;
            }
            continue;
        }
        let y_dyn = sol.y.rows(ftocp.dynamics_rows.start, n * n_h).into_owned();
        penalty = penalty.max(y_dyn.amax() * T::lit(1.5) + T::lit(1e-3));
        multipliers = Some(y_dyn);

        let step = &sol.z - &z;
        if step.amax() <= sqp.step_tol {
            z = sol.z;
            converged = true;
            break;
        }
        let f0 = objective(&z)?;
        let predicted = gradient(&z).dot(&step) + (&ftocp.qp.h * &step).dot(&step) * T::lit(0.5);
        if -predicted <= sqp.decrease_tol * (T::one() + f0.abs()) {
            if defect_l1(&z)? <= sqp.defect_tol {
                converged = true;
                break;
            }
            restoring = true;
            continue;
        }
        let merit = |z: &DVector<T>| -> Result<T> { Ok(objective(z)? + penalty * defect_l1(z)?) };
        let phi0 = merit(&z)?;
        let slope = gradient(&z).dot(&step) - penalty * defect_l1(&z)?;
        let mut alpha = T::one();
        let mut accepted = false;
        while alpha >= sqp.min_step {
            let trial = &z + &step * alpha;
            let phi = merit(&trial)?;
            if phi <= phi0 + sqp.armijo * alpha * slope.min(T::zero()) {
                z = trial;
                accepted = true;
                break;
            }
            if alpha == T::one() {
                if let Some(zc) =
                    second_order_correction(spec, t, &ftocp, &models, &trial, &settings.qp)?
                {
                    total_qp_iters += zc.1;
                    if merit(&zc.0)? <= phi0 + sqp.armijo * slope.min(T::zero()) {
                        z = zc.0;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= sqp.backtrack;
        }
        if !accepted {
            // No merit progress along the step: settle for the nearest
            // feasible point.
            restoring = true;
        }
    }

    let (_, inputs, lambda) = index.unpack(&z);
    let out = OptimizerOutput {
        inputs,
        lambda,
        status: last_status,
        qp_iterations: total_qp_iters,
        sqp_iterations: Some(iterations),
        converged,
    };
    finalize(spec, &td, t, x_t, out, settings.feasibility_tol, started)
}

/// Receding-horizon controller: solves the FTOCP each tick and keeps the
/// previous solution for the shifted candidate.
#[derive(Clone, Debug)]
pub struct LmpcController<T: Scalar> {
    pub settings: ControllerSettings<T>,
    prev: Option<FtocpSolution<T>>,
}

impl<T: Scalar> LmpcController<T> {
    pub fn new(settings: ControllerSettings<T>) -> Self {
        Self {
            settings,
            prev: None,
        }
    }

    pub fn previous(&self) -> Option<&FtocpSolution<T>> {
        self.prev.as_ref()
    }

    /// Computes the action at tick `t` from the newest stored state.
    pub fn step(
        &mut self,
        spec: &ProblemSpec<T>,
        store: &TrajectoryStore<T>,
        t: usize,
    ) -> Result<FtocpSolution<T>> {
        let started = Instant::now();
        let x_t = store.state(t).clone();
        let td = store.terminal_data(t, t + spec.horizon)?;
        let candidate = match &self.prev {
            Some(prev) if prev.t + 1 == t => candidate_shift(spec, prev, store, t, &td)?,
            _ => seed_candidate(spec, store, t, &td)?,
        };
        let tol = self.settings.feasibility_tol;
        let cand_eval = if candidate.valid {
            assess(
                spec,
                &td,
                t,
                &x_t,
                &candidate.inputs,
                &candidate.lambda,
                tol,
            )?
        } else {
            None
        };

        let optimized = if spec.dynamics.is_linear() {
            solve_lmpc_linear(spec, store, t, &x_t, Some(&candidate), &self.settings)?
        } else {
            solve_lmpc_nonlinear(spec, store, t, &x_t, Some(&candidate), &self.settings)?
        };

        let from_candidate = |source: SolutionSource, base: Option<&FtocpSolution<T>>| {
            let (states, cost, gap) = cand_eval.clone().expect("candidate evaluated");
            FtocpSolution {
                t,
                states,
                inputs: candidate.inputs.clone(),
                lambda: candidate.lambda.clone(),
                vertex_times: td.times.clone(),
                cost,
                diagnostics: SolveDiagnostics {
                    qp_status: base.map_or(QpStatus::MaxIter, |b| b.diagnostics.qp_status),
                    qp_iterations: base.map_or(0, |b| b.diagnostics.qp_iterations),
                    sqp_iterations: base.and_then(|b| b.diagnostics.sqp_iterations),
                    source,
                    solve_ms: 0.0,
                    terminal_gap: gap.to_f64_lossy(),
                },
            }
        };

        let mut chosen = match (optimized, cand_eval.is_some()) {
            (Some(opt), true) => {
                let (_, cand_cost, _) = cand_eval.as_ref().unwrap();
                let slack = T::lit(1e-9) * (T::one() + cand_cost.abs());
                if opt.cost <= *cand_cost + slack {
                    opt
                } else {
                    from_candidate(SolutionSource::Candidate, Some(&opt))
                }
            }
            (Some(opt), false) => opt,
            (None, true) => {
                log::warn!("optimizer failed at t={t}; applying the shifted candidate");
                from_candidate(SolutionSource::Fallback, None)
            }
            (None, false) => {
                return Err(Error::Solver(format!(
                    "no feasible FTOCP solution and no valid candidate at t={t}"
                )))
            }
        };
        chosen.diagnostics.solve_ms = started.elapsed().as_secs_f64() * 1e3;
        self.prev = Some(chosen.clone());
        Ok(chosen)
    }
}
