//! Recorded closed-loop data, sampled safe sets and the Q-function.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::model::ProblemSpec;
use crate::qp::{self, QpSettings, QpStatus};
use crate::Scalar;

/// Realized trajectory `x_0..x_t`, inputs `u_0..u_{t-1}` and stage-cost prefix
/// sums `C_i = sum_{k<i} h_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStore<T: Scalar> {
    period: usize,
    states: Vec<DVector<T>>,
    inputs: Vec<DVector<T>>,
    cost_prefix: Vec<T>,
    max_cycles_retained: Option<usize>,
}

impl<T: Scalar> TrajectoryStore<T> {
    pub fn new(period: usize, x0: DVector<T>) -> Self {
        Self {
            period,
            states: vec![x0],
            inputs: Vec::new(),
            cost_prefix: vec![T::zero()],
            max_cycles_retained: None,
        }
    }

    /// Caps the number of past cycles contributing safe-set vertices.
    ///
    /// The recursive feasibility and cost guarantees assume every past cycle
    /// stays in the safe set; with a cap they no longer hold.
    pub fn with_max_cycles_retained(mut self, cycles: Option<usize>) -> Self {
        if let Some(c) = cycles {
            log::warn!(
                "safe set limited to the last {c} cycles; feasibility and cost guarantees no longer apply"
            );
        }
        self.max_cycles_retained = cycles;
        self
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// Index of the newest recorded state.
    pub fn current_time(&self) -> usize {
        self.states.len() - 1
    }

    pub fn states(&self) -> &[DVector<T>] {
        &self.states
    }

    pub fn inputs(&self) -> &[DVector<T>] {
        &self.inputs
    }

    pub fn cost_prefix(&self) -> &[T] {
        &self.cost_prefix
    }

    pub fn state(&self, i: usize) -> &DVector<T> {
        &self.states[i]
    }

    pub fn input(&self, i: usize) -> &DVector<T> {
        &self.inputs[i]
    }

    /// Stage cost paid at tick `i`.
    pub fn stage_cost(&self, i: usize) -> T {
        self.cost_prefix[i + 1] - self.cost_prefix[i]
    }

    /// Appends `(u_t, x_{t+1}, h_t)` after checking it against the dynamics.
    pub fn record_step(
        &mut self,
        spec: &ProblemSpec<T>,
        t: usize,
        x_next: DVector<T>,
        u: DVector<T>,
        h: T,
    ) -> Result<()> {
        if t != self.current_time() {
            return Err(Error::IndexOutOfRange(format!(
                "record_step at t={t} but the store ends at t={}",
                self.current_time()
            )));
        }
        check_dim("recorded state", spec.state_dim, x_next.len())?;
        check_dim("recorded input", spec.input_dim, u.len())?;
        let predicted = spec.eval_dynamics(t, &self.states[t], &u)?;
        let err = (&predicted - &x_next).amax();
        let scale = predicted.amax().max(T::one());
        if err > T::lit(1e-9) * scale {
            return Err(Error::InconsistentStep {
                tick: t,
                error: err.to_f64_lossy(),
            });
        }
        let c = self.cost_prefix[t] + h;
        self.inputs.push(u);
        self.states.push(x_next);
        self.cost_prefix.push(c);
        Ok(())
    }

    /// Cost accumulated from tick `i` to tick `t`: `C_t - C_i`.
    pub fn return_cost(&self, t: usize, i: usize) -> Result<T> {
        if i > t || t > self.current_time() {
            return Err(Error::IndexOutOfRange(format!(
                "return_cost(t={t}, i={i}) with data up to t={}",
                self.current_time()
            )));
        }
        Ok(self.cost_prefix[t] - self.cost_prefix[i])
    }

    /// Safe-set vertices for slot `k` and their return costs to time `t`.
    ///
    /// Vertices are every recorded `x_{k - jP}` with `j >= 1` and `k - jP >= 0`.
    pub fn terminal_data(&self, t: usize, k: usize) -> Result<TerminalData<T>> {
        if t > self.current_time() {
            return Err(Error::IndexOutOfRange(format!(
                "terminal data requested at t={t} with data up to t={}",
                self.current_time()
            )));
        }
        let p = self.period;
        let mut times = Vec::new();
        let mut j = 1;
        while j * p <= k {
            if self.max_cycles_retained.is_some_and(|cap| j > cap) {
                break;
            }
            let idx = k - j * p;
            if idx <= t {
                times.push(idx);
            }
            j += 1;
        }
        if times.is_empty() {
            return Err(Error::EmptySafeSet { slot: k });
        }
        let n = self.states[0].len();
        let mut vertices = DMatrix::zeros(n, times.len());
        let mut costs = DVector::zeros(times.len());
        for (c, &idx) in times.iter().enumerate() {
            vertices.set_column(c, &self.states[idx]);
            costs[c] = self.cost_prefix[t] - self.cost_prefix[idx];
        }
        Ok(TerminalData {
            slot: k,
            vertices,
            costs,
            times,
        })
    }

    /// CSV dump: `t,tau,cycle,x0..,u0..,h,C`. The final row has empty input and cost.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let n = self.states[0].len();
        let d = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string(), "tau".into(), "cycle".into()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..d).map(|i| format!("u{i}")));
        header.push("h".into());
        header.push("C".into());
        writeln!(out, "{}", header.join(","))?;
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![
                t.to_string(),
                (t % self.period).to_string(),
                (t / self.period).to_string(),
            ];
            row.extend(x.iter().map(|v| v.to_string()));
            if t < self.inputs.len() {
                row.extend(self.inputs[t].iter().map(|v| v.to_string()));
                row.push(self.stage_cost(t).to_string());
            } else {
                row.extend((0..d).map(|_| String::new()));
                row.push(String::new());
            }
            row.push(self.cost_prefix[t].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Terminal set and terminal cost data for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalData<T: Scalar> {
    /// Absolute tick `k` the vertices share the intracycle time of.
    pub slot: usize,
    /// `n x M`, column `j-1` is `x_{k - jP}`.
    pub vertices: DMatrix<T>,
    /// Return costs of the vertices.
    pub costs: DVector<T>,
    /// Recording tick of every column.
    pub times: Vec<usize>,
}

impl<T: Scalar> TerminalData<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn combine(&self, lambda: &DVector<T>) -> DVector<T> {
        &self.vertices * lambda
    }
}

/// `min J'lambda` s.t. `D lambda = x`, `1'lambda = 1`, `lambda >= 0`.
pub fn q_function<T: Scalar>(
    td: &TerminalData<T>,
    x: &DVector<T>,
    settings: &QpSettings<T>,
) -> Result<(T, DVector<T>)> {
    let n = td.vertices.nrows();
    let m = td.len();
    check_dim("Q-function query", n, x.len())?;
    if m == 0 {
        return Err(Error::EmptySafeSet { slot: td.slot });
    }
    let inf = T::infinity_bound();
    let mut a = DMatrix::zeros(n + 1 + m, m);
    a.view_mut((0, 0), (n, m)).copy_from(&td.vertices);
    let mut l = DVector::zeros(n + 1 + m);
    let mut u = DVector::zeros(n + 1 + m);
    for i in 0..n {
        l[i] = x[i];
        u[i] = x[i];
    }
    for j in 0..m {
        a[(n, j)] = T::one();
        a[(n + 1 + j, j)] = T::one();
        u[n + 1 + j] = inf;
    }
    l[n] = T::one();
    u[n] = T::one();
    let sol = qp::solve_lp(&td.costs, &a, &l, &u, settings);
    match sol.status {
        QpStatus::Solved => {
            let lambda = sol.z.map(|v| v.max(T::zero()));
            Ok((td.costs.dot(&lambda), lambda))
        }
        _ => {
            let residual = (&td.vertices * &sol.z - x).amax();
            Err(Error::OutsideSafeSet {
                residual: residual.to_f64_lossy(),
            })
        }
    }
}
