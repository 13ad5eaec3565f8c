//! Periodic control problem: dynamics, constraint and stage-cost schedules.
//!
//! Every schedule is indexed by intracycle time `tau = t mod P`, so evaluating
//! any ingredient at `t` and `t + P` goes through the same stored entry.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::qp::{self, QpSettings, QpStatus};
use crate::Scalar;

/// Splits an absolute tick into `(cycle, tau)`.
#[inline]
pub fn intracycle(t: usize, period: usize) -> (usize, usize) {
    assert!(period >= 1, "period must be positive");
    (t / period, t % period)
}

/// Convex polyhedron `{ v : G v <= g }`. Zero rows means the whole space.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyhedron<T: Scalar> {
    pub g_mat: DMatrix<T>,
    pub g_vec: DVector<T>,
}

impl<T: Scalar> Polyhedron<T> {
    pub fn new(g_mat: DMatrix<T>, g_vec: DVector<T>) -> Result<Self> {
        check_dim("polyhedron rows", g_mat.nrows(), g_vec.len())?;
        Ok(Self { g_mat, g_vec })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            g_mat: DMatrix::zeros(0, dim),
            g_vec: DVector::zeros(0),
        }
    }

    /// Axis-aligned box; `None` leaves that side open.
    pub fn from_box(lower: &[Option<T>], upper: &[Option<T>]) -> Self {
        assert_eq!(lower.len(), upper.len());
        let dim = lower.len();
        let mut rows: Vec<(usize, T, T)> = Vec::new();
        for i in 0..dim {
            if let Some(hi) = upper[i] {
                rows.push((i, T::one(), hi));
            }
            if let Some(lo) = lower[i] {
                rows.push((i, -T::one(), -lo));
            }
        }
        let mut g_mat = DMatrix::zeros(rows.len(), dim);
        let mut g_vec = DVector::zeros(rows.len());
        for (r, (i, sign, rhs)) in rows.into_iter().enumerate() {
            g_mat[(r, i)] = sign;
            g_vec[r] = rhs;
        }
        Self { g_mat, g_vec }
    }

    pub fn dim(&self) -> usize {
        self.g_mat.ncols()
    }

    pub fn rows(&self) -> usize {
        self.g_mat.nrows()
    }

    /// Signed margins `G v - g`; positive entries are violations.
    pub fn margins(&self, v: &DVector<T>) -> DVector<T> {
        &self.g_mat * v - &self.g_vec
    }

    /// Interval `[lo, hi]` implied for coordinate `i` by rows that touch only that coordinate.
    pub fn axis_bounds(&self, i: usize) -> (Option<T>, Option<T>) {
        let mut lo: Option<T> = None;
        let mut hi: Option<T> = None;
        for r in 0..self.rows() {
            let row = self.g_mat.row(r);
            let single = (0..self.dim()).all(|j| j == i || row[j] == T::zero());
            let coef = row[i];
            if !single || coef == T::zero() {
                continue;
            }
            let bound = self.g_vec[r] / coef;
            if coef > T::zero() {
                hi = Some(hi.map_or(bound, |h: T| h.min(bound)));
            } else {
                lo = Some(lo.map_or(bound, |l: T| l.max(bound)));
            }
        }
        (lo, hi)
    }

    /// Nonemptiness via a feasibility LP.
    pub fn is_nonempty(&self) -> bool {
        if self.rows() == 0 {
            return true;
        }
        let dim = self.dim();
        let lower = DVector::from_element(self.rows(), -T::infinity_bound());
        let settings = QpSettings {
            eps_abs: T::lit(1e-7),
            eps_rel: T::lit(1e-7),
            ..QpSettings::default()
        };
        let sol = qp::solve_lp(
            &DVector::zeros(dim),
            &self.g_mat,
            &lower,
            &self.g_vec,
            &settings,
        );
        sol.status == QpStatus::Solved
    }
}

/// Per-`tau` state and input polyhedra.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSchedule<T: Scalar> {
    pub state: Vec<Polyhedron<T>>,
    pub input: Vec<Polyhedron<T>>,
}

impl<T: Scalar> ConstraintSchedule<T> {
    pub fn constant(state: Polyhedron<T>, input: Polyhedron<T>, period: usize) -> Self {
        Self {
            state: vec![state; period],
            input: vec![input; period],
        }
    }

    pub fn check(&self, t: usize, x: &DVector<T>, u: &DVector<T>, tol: T) -> ConstraintReport<T> {
        let tau = t % self.state.len();
        let state_margins = self.state[tau].margins(x);
        let input_margins = self.input[tau].margins(u);
        let max_margin = state_margins
            .iter()
            .chain(input_margins.iter())
            .copied()
            .fold(None, |acc: Option<T>, m| Some(acc.map_or(m, |a| a.max(m))));
        let feasible = max_margin.is_none_or(|m| m <= tol);
        ConstraintReport {
            state_margins,
            input_margins,
            max_margin,
            feasible,
        }
    }
}

/// Signed margins per constraint row at one tick.
#[derive(Clone, Debug)]
pub struct ConstraintReport<T: Scalar> {
    pub state_margins: DVector<T>,
    pub input_margins: DVector<T>,
    /// `None` when no constraint rows exist at this tick.
    pub max_margin: Option<T>,
    pub feasible: bool,
}

impl<T: Scalar> ConstraintReport<T> {
    /// Largest positive margin, zero when feasible.
    pub fn violation(&self) -> T {
        self.max_margin.map_or(T::zero(), |m| m.max(T::zero()))
    }
}

/// `h(x, u) = (x - x_ref)' Q (x - x_ref) + u' R u`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost<T: Scalar> {
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub x_ref: DVector<T>,
}

impl<T: Scalar> QuadraticCost<T> {
    pub fn new(q: DMatrix<T>, r: DMatrix<T>, x_ref: DVector<T>) -> Result<Self> {
        check_dim("cost Q columns", q.nrows(), q.ncols())?;
        check_dim("cost R columns", r.nrows(), r.ncols())?;
        check_dim("cost reference", q.nrows(), x_ref.len())?;
        Ok(Self { q, r, x_ref })
    }

    pub fn eval(&self, x: &DVector<T>, u: &DVector<T>) -> T {
        let dx = x - &self.x_ref;
        let sx = (&self.q * &dx).dot(&dx);
        let su = (&self.r * u).dot(u);
        sx + su
    }

    pub fn input_dependent(&self) -> bool {
        self.r.iter().any(|v| *v != T::zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageCostSchedule<T: Scalar> {
    pub stages: Vec<QuadraticCost<T>>,
    /// Declared strict convexity of the closed-loop problem; gates the
    /// open-loop-equals-closed-loop check.
    pub strictly_convex: bool,
}

impl<T: Scalar> StageCostSchedule<T> {
    pub fn constant(cost: QuadraticCost<T>, period: usize, strictly_convex: bool) -> Self {
        Self {
            stages: vec![cost; period],
            strictly_convex,
        }
    }

    pub fn input_dependent(&self) -> bool {
        self.stages.iter().any(QuadraticCost::input_dependent)
    }

    pub fn at(&self, t: usize) -> &QuadraticCost<T> {
        &self.stages[t % self.stages.len()]
    }
}

/// `x+ = A x + B u + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineModel<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DVector<T>,
}

impl<T: Scalar> AffineModel<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, c: DVector<T>) -> Result<Self> {
        check_dim("dynamics A columns", a.nrows(), a.ncols())?;
        check_dim("dynamics B rows", a.nrows(), b.nrows())?;
        check_dim("dynamics offset", a.nrows(), c.len())?;
        Ok(Self { a, b, c })
    }

    pub fn apply(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.a * x + &self.b * u + &self.c
    }
}

/// Differentiable periodic map `x+ = f(tau, x, u)`.
///
/// Implementations receive the intracycle time, never the absolute tick, so
/// periodicity holds bit for bit.
pub trait NonlinearMap<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, tau: usize, period: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T>;

    /// Analytic `(df/dx, df/du)`; `None` falls back to central differences.
    fn jacobians(
        &self,
        _tau: usize,
        _period: usize,
        _x: &DVector<T>,
        _u: &DVector<T>,
    ) -> Option<(DMatrix<T>, DMatrix<T>)> {
        None
    }

    /// Hessian of `w' f(tau, x, u)` over the stacked `(x, u)`; `None` falls
    /// back to differencing the Jacobians.
    fn weighted_hessian(
        &self,
        _tau: usize,
        _period: usize,
        _x: &DVector<T>,
        _u: &DVector<T>,
        _w: &DVector<T>,
    ) -> Option<DMatrix<T>> {
        None
    }

    /// Input multipliers `gamma` with `f(sum lambda x, sum gamma u) = sum lambda f(x, u)`.
    ///
    /// `None` means no such construction is registered for this system, or
    /// it does not apply to the given states.
    fn input_multipliers(&self, _states: &[DVector<T>], _lambda: &[T]) -> Option<Vec<T>> {
        None
    }
}

#[derive(Clone)]
pub enum Dynamics<T: Scalar> {
    /// One affine model per intracycle time. `builtin` records the registry
    /// name when the schedule was generated from a formula.
    Linear {
        models: Vec<AffineModel<T>>,
        builtin: Option<String>,
    },
    Nonlinear(Arc<dyn NonlinearMap<T>>),
}

impl<T: Scalar> fmt::Debug for Dynamics<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Linear { models, builtin } => f
                .debug_struct("Linear")
                .field("entries", &models.len())
                .field("builtin", builtin)
                .finish(),
            Dynamics::Nonlinear(map) => f.debug_tuple("Nonlinear").field(&map.name()).finish(),
        }
    }
}

impl<T: Scalar> PartialEq for Dynamics<T> {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Dynamics::Linear { models: a, .. }, Dynamics::Linear { models: b, .. }) => a == b,
            (Dynamics::Nonlinear(a), Dynamics::Nonlinear(b)) => a.name() == b.name(),
            _ => false,
        }
    }
}

impl<T: Scalar> Dynamics<T> {
    pub fn is_linear(&self) -> bool {
        matches!(self, Dynamics::Linear { .. })
    }

    pub fn nonlinear_map(&self) -> Option<&Arc<dyn NonlinearMap<T>>> {
        match self {
            Dynamics::Nonlinear(m) => Some(m),
            Dynamics::Linear { .. } => None,
        }
    }
}

/// The periodic control problem.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec<T: Scalar> {
    pub period: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub dynamics: Dynamics<T>,
    pub constraints: ConstraintSchedule<T>,
    pub cost: StageCostSchedule<T>,
}

fn is_psd<T: Scalar>(m: &DMatrix<T>) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(T::one());
    if asym > T::lit(1e-9) * scale {
        return false;
    }
    let eig = SymmetricEigen::new(m.clone());
    eig.eigenvalues.iter().all(|&l| l >= -T::lit(1e-10) * scale)
}

impl<T: Scalar> ProblemSpec<T> {
    pub fn new(
        period: usize,
        horizon: usize,
        state_dim: usize,
        input_dim: usize,
        dynamics: Dynamics<T>,
        constraints: ConstraintSchedule<T>,
        cost: StageCostSchedule<T>,
    ) -> Result<Self> {
        let spec = Self {
            period,
            horizon,
            state_dim,
            input_dim,
            dynamics,
            constraints,
            cost,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidProblem(m));
        if self.period == 0 || self.horizon == 0 {
            return invalid("period and horizon must be positive".into());
        }
        if self.horizon >= self.period {
            return invalid(format!(
                "horizon N={} must be smaller than the period P={} (N < P)",
                self.horizon, self.period
            ));
        }
        if self.state_dim == 0 || self.input_dim == 0 {
            return invalid("state and input dimensions must be positive".into());
        }
        let p = self.period;
        if self.constraints.state.len() != p
            || self.constraints.input.len() != p
            || self.cost.stages.len() != p
        {
            return invalid(format!("every schedule must have exactly P={p} entries"));
        }
        match &self.dynamics {
            Dynamics::Linear { models, .. } => {
                if models.len() != p {
                    return invalid(format!("linear dynamics must have exactly P={p} entries"));
                }
                for (tau, m) in models.iter().enumerate() {
                    if m.a.nrows() != self.state_dim || m.b.ncols() != self.input_dim {
                        return invalid(format!("dynamics at tau={tau} has wrong dimensions"));
                    }
                }
            }
            Dynamics::Nonlinear(map) => {
                if map.state_dim() != self.state_dim || map.input_dim() != self.input_dim {
                    return invalid(format!("map `{}` has wrong dimensions", map.name()));
                }
                if self.cost.input_dependent() {
                    return invalid(
                        "nonlinear dynamics require an input-independent stage cost (R = 0)".into(),
                    );
                }
            }
        }
        for tau in 0..p {
            let sx = &self.constraints.state[tau];
            let su = &self.constraints.input[tau];
            if sx.dim() != self.state_dim || su.dim() != self.input_dim {
                return invalid(format!("constraint at tau={tau} has wrong dimensions"));
            }
            let c = &self.cost.stages[tau];
            if c.q.nrows() != self.state_dim || c.r.nrows() != self.input_dim {
                return invalid(format!("cost at tau={tau} has wrong dimensions"));
            }
            if !is_psd(&c.q) || !is_psd(&c.r) {
                return invalid(format!(
                    "stage cost at tau={tau} is not convex (Q and R must be symmetric PSD)"
                ));
            }
        }
        // Identical polyhedra repeat across the schedule; test each distinct one once.
        let mut checked: Vec<&Polyhedron<T>> = Vec::new();
        for (tau, poly) in self
            .constraints
            .state
            .iter()
            .chain(self.constraints.input.iter())
            .enumerate()
        {
            if checked.contains(&poly) {
                continue;
            }
            if !poly.is_nonempty() {
                return invalid(format!(
                    "empty constraint polyhedron (schedule entry {})",
                    tau % p
                ));
            }
            checked.push(poly);
        }
        Ok(())
    }

    pub fn tau(&self, t: usize) -> usize {
        t % self.period
    }

    pub fn eval_dynamics(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        check_dim("state", self.state_dim, x.len())?;
        check_dim("input", self.input_dim, u.len())?;
        let tau = self.tau(t);
        Ok(match &self.dynamics {
            Dynamics::Linear { models, .. } => models[tau].apply(x, u),
            Dynamics::Nonlinear(map) => map.eval(tau, self.period, x, u),
        })
    }

    pub fn eval_stage_cost(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> Result<T> {
        check_dim("state", self.state_dim, x.len())?;
        check_dim("input", self.input_dim, u.len())?;
        Ok(self.cost.at(t).eval(x, u))
    }

    pub fn check_constraints(
        &self,
        t: usize,
        x: &DVector<T>,
        u: &DVector<T>,
        tol: T,
    ) -> Result<ConstraintReport<T>> {
        check_dim("state", self.state_dim, x.len())?;
        check_dim("input", self.input_dim, u.len())?;
        Ok(self.constraints.check(t, x, u, tol))
    }

    /// Affine model `A x + B u + c` tangent to the dynamics at `(x_bar, u_bar)`.
    pub fn linearize_dynamics(
        &self,
        t: usize,
        x_bar: &DVector<T>,
        u_bar: &DVector<T>,
    ) -> Result<AffineModel<T>> {
        check_dim("state", self.state_dim, x_bar.len())?;
        check_dim("input", self.input_dim, u_bar.len())?;
        let tau = self.tau(t);
        let map = match &self.dynamics {
            Dynamics::Linear { models, .. } => return Ok(models[tau].clone()),
            Dynamics::Nonlinear(map) => map,
        };
        let (a, b) = match map.jacobians(tau, self.period, x_bar, u_bar) {
            Some(j) => j,
            None => finite_difference_jacobians(map.as_ref(), tau, self.period, x_bar, u_bar),
        };
        if a.iter().chain(b.iter()).any(|v| !v.is_finite_value()) {
            return Err(Error::NonFiniteJacobian { tick: t });
        }
        let f0 = map.eval(tau, self.period, x_bar, u_bar);
        let c = f0 - &a * x_bar - &b * u_bar;
        Ok(AffineModel { a, b, c })
    }
}

fn fd_step<T: Scalar>(v: T) -> T {
    let base = if T::default_epsilon() < T::lit(1e-10) {
        T::lit(1e-6)
    } else {
        T::default_epsilon().powf(T::lit(1.0 / 3.0))
    };
    base * v.abs().max(T::one())
}

/// Central-difference Jacobians of a nonlinear map.
pub fn finite_difference_jacobians<T: Scalar>(
    map: &dyn NonlinearMap<T>,
    tau: usize,
    period: usize,
    x: &DVector<T>,
    u: &DVector<T>,
) -> (DMatrix<T>, DMatrix<T>) {
    let n = x.len();
    let d = u.len();
    let two = T::lit(2.0);
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (map.eval(tau, period, &xp, u) - map.eval(tau, period, &xm, u)) / (two * h);
        a.set_column(j, &col);
    }
    let mut b = DMatrix::zeros(n, d);
    for j in 0..d {
        let h = fd_step(u[j]);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (map.eval(tau, period, x, &up) - map.eval(tau, period, x, &um)) / (two * h);
        b.set_column(j, &col);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{builtin, ForcedOscillator, SCENARIO_NAMES};
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_spec() -> ProblemSpec<f64> {
        let model = AffineModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
        )
        .unwrap();
        let cost =
            QuadraticCost::new(DMatrix::identity(2, 2), dmatrix![1.0], DVector::zeros(2)).unwrap();
        ProblemSpec::new(
            4,
            2,
            2,
            1,
            Dynamics::Linear {
                models: vec![model; 4],
                builtin: None,
            },
            ConstraintSchedule::constant(Polyhedron::unbounded(2), Polyhedron::unbounded(1), 4),
            StageCostSchedule::constant(cost, 4, true),
        )
        .unwrap()
    }

    #[test]
    fn intracycle_examples() {
        assert_eq!(intracycle(0, 100), (0, 0));
        assert_eq!(intracycle(304, 100), (3, 4));
        assert_eq!(intracycle(3 * 6 + 1, 6), (3, 1));
    }

    #[test]
    fn identity_dynamics() {
        let spec = identity_spec();
        let x = spec
            .eval_dynamics(3, &dvector![1.0, 2.0], &dvector![5.0])
            .unwrap();
        assert_eq!(x, dvector![1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = identity_spec();
        assert!(matches!(
            spec.eval_dynamics(0, &dvector![1.0], &dvector![0.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(spec
            .eval_stage_cost(0, &dvector![1.0, 2.0], &dvector![0.0, 1.0])
            .is_err());
    }

    #[test]
    fn scenario_one_dynamics_and_cost() {
        let cfg = builtin::<f64>("s1_tv_dynamics").unwrap();
        let spec = &cfg.spec;
        let x = spec
            .eval_dynamics(0, &dvector![0.1, 0.0], &dvector![0.0])
            .unwrap();
        assert!((x - dvector![0.1, 0.01]).norm() < 1e-15);
        let h = spec
            .eval_stage_cost(0, &dvector![0.2, 0.7], &dvector![0.0])
            .unwrap();
        assert_eq!(h, 0.0);
        let h = spec
            .eval_stage_cost(0, &dvector![0.0, 0.0], &dvector![0.0])
            .unwrap();
        assert!((h - 0.04).abs() < 1e-15);
    }

    #[test]
    fn scenario_three_cost_switches_at_half_period() {
        let cfg = builtin::<f64>("s3_tv_cost").unwrap();
        let h = cfg
            .spec
            .eval_stage_cost(50, &dvector![0.0, 0.0], &dvector![0.0])
            .unwrap();
        assert!((h - 0.04).abs() < 1e-15);
        let h = cfg
            .spec
            .eval_stage_cost(49, &dvector![-0.2, 0.0], &dvector![0.0])
            .unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn scenario_four_rest_point() {
        let cfg = builtin::<f64>("s4_nonlinear").unwrap();
        let x = cfg
            .spec
            .eval_dynamics(0, &dvector![1.0, 0.0], &dvector![0.0])
            .unwrap();
        assert_eq!(x, dvector![1.0, 0.0]);
    }

    #[test]
    fn constraint_margins() {
        let s1 = builtin::<f64>("s1_tv_dynamics").unwrap();
        let rep = s1
            .spec
            .check_constraints(0, &dvector![0.31, 0.0], &dvector![0.0], 0.0)
            .unwrap();
        assert!(!rep.feasible);
        assert!((rep.violation() - 0.01).abs() < 1e-12);
        let rep = s1
            .spec
            .check_constraints(0, &dvector![0.1, 5.0], &dvector![3.0], 0.0)
            .unwrap();
        assert!(rep.feasible);
        assert!(rep.state_margins.iter().all(|m| *m < 0.0));

        // First tick of the second band, [-0.4, -0.2].
        let s2 = builtin::<f64>("s2_tv_constraints").unwrap();
        let rep = s2
            .spec
            .check_constraints(17, &dvector![0.0, 0.0], &dvector![0.0], 0.0)
            .unwrap();
        assert!((rep.violation() - 0.2).abs() < 1e-12);
        let rep = s2
            .spec
            .check_constraints(16, &dvector![0.0, 0.0], &dvector![0.0], 0.0)
            .unwrap();
        assert!(rep.feasible);
    }

    #[test]
    fn linearization_of_linear_map_is_itself() {
        let s1 = builtin::<f64>("s1_tv_dynamics").unwrap();
        let m = s1
            .spec
            .linearize_dynamics(37, &dvector![0.3, -1.0], &dvector![2.0])
            .unwrap();
        match &s1.spec.dynamics {
            Dynamics::Linear { models, .. } => assert_eq!(&m, &models[37]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn scenario_four_input_sensitivity() {
        let s4 = builtin::<f64>("s4_nonlinear").unwrap();
        let m = s4
            .spec
            .linearize_dynamics(0, &dvector![1.0, 0.0], &dvector![0.0])
            .unwrap();
        assert!((m.b[(1, 0)] - 0.1).abs() < 1e-15);
        assert_eq!(m.b[(0, 0)], 0.0);
        let map = ForcedOscillator::default();
        let (_, b_fd) =
            finite_difference_jacobians::<f64>(&map, 0, 100, &dvector![1.0, 0.0], &dvector![0.0]);
        assert!((b_fd[(1, 0)] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn analytic_and_finite_difference_jacobians_agree() {
        let map = ForcedOscillator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let tau = rng.random_range(0..100);
            let x = dvector![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let u = dvector![rng.random_range(-5.0..5.0)];
            let (a, b) = map.jacobians(tau, 100, &x, &u).unwrap();
            let (a_fd, b_fd) = finite_difference_jacobians::<f64>(&map, tau, 100, &x, &u);
            let scale = a.abs().max().max(b.abs().max()).max(1.0);
            assert!((a - a_fd).abs().max() <= 1e-6 * scale);
            assert!((b - b_fd).abs().max() <= 1e-6 * scale);
        }
    }

    #[test]
    fn linearization_error_is_second_order() {
        let s4 = builtin::<f64>("s4_nonlinear").unwrap();
        let spec = &s4.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = rng.random_range(0..300);
            let xb = dvector![rng.random_range(0.5..2.5), rng.random_range(-1.0..1.0)];
            let ub = dvector![rng.random_range(-5.0..5.0)];
            let m = spec.linearize_dynamics(t, &xb, &ub).unwrap();
            for scale in [1e-2, 1e-3] {
                let dx = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)] * scale;
                let du = dvector![rng.random_range(-1.0..1.0)] * scale;
                let exact = spec.eval_dynamics(t, &(&xb + &dx), &(&ub + &du)).unwrap();
                let approx = m.apply(&(&xb + &dx), &(&ub + &du));
                let delta2 = dx.norm_squared() + du.norm_squared();
                // Only the bilinear p*u term is curved; its coefficient is 0.1.
                assert!((exact - approx).norm() <= 0.1 * delta2 + 1e-14);
            }
        }
    }

    #[test]
    fn schedules_are_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in SCENARIO_NAMES {
            let cfg = builtin::<f64>(name).unwrap();
            let spec = &cfg.spec;
            for _ in 0..50 {
                let t = rng.random_range(0..1000);
                let x = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let u = dvector![rng.random_range(-1.0..1.0)];
                let p = spec.period;
                assert_eq!(
                    spec.eval_dynamics(t, &x, &u).unwrap(),
                    spec.eval_dynamics(t + p, &x, &u).unwrap()
                );
                assert_eq!(
                    spec.eval_stage_cost(t, &x, &u).unwrap(),
                    spec.eval_stage_cost(t + p, &x, &u).unwrap()
                );
                let a = spec.check_constraints(t, &x, &u, 0.0).unwrap();
                let b = spec.check_constraints(t + p, &x, &u, 0.0).unwrap();
                assert_eq!(a.state_margins, b.state_margins);
            }
        }
    }

    #[test]
    fn stage_costs_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in SCENARIO_NAMES {
            let spec = builtin::<f64>(name).unwrap().spec;
            for _ in 0..200 {
                let t = rng.random_range(0..100);
                let mut draw = || {
                    (
                        dvector![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                        dvector![rng.random_range(-5.0..5.0)],
                    )
                };
                let (x1, u1) = draw();
                let (x2, u2) = draw();
                let th: f64 = rng.random_range(0.0..1.0);
                let xm = &x1 * th + &x2 * (1.0 - th);
                let um = &u1 * th + &u2 * (1.0 - th);
                let lhs = spec.eval_stage_cost(t, &xm, &um).unwrap();
                let rhs = th * spec.eval_stage_cost(t, &x1, &u1).unwrap()
                    + (1.0 - th) * spec.eval_stage_cost(t, &x2, &u2).unwrap();
                assert!(lhs <= rhs + 1e-9);
            }
        }
    }

    #[test]
    fn rejects_long_horizon_and_indefinite_cost() {
        let spec = identity_spec();
        let mut bad = spec.clone();
        bad.horizon = 4;
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("N < P"), "{err}");
        let mut bad = spec.clone();
        bad.cost.stages[1].q = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.constraints.state[2] = Polyhedron::from_box(&[Some(1.0), None], &[Some(0.0), None]);
        assert!(bad.validate().unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn box_axis_bounds() {
        let poly = Polyhedron::from_box(&[Some(-0.4), None], &[Some(0.1), Some(2.0)]);
        assert_eq!(poly.axis_bounds(0), (Some(-0.4), Some(0.1)));
        assert_eq!(poly.axis_bounds(1), (None, Some(2.0)));
    }

    #[test]
    fn single_precision_evaluation() {
        let cfg = builtin::<f32>("s1_tv_dynamics").unwrap();
        let x = cfg
            .spec
            .eval_dynamics(0, &dvector![0.1f32, 0.0], &dvector![0.0f32])
            .unwrap();
        assert!((x[1] - 0.01).abs() < 1e-7);
    }
}
