//! Convex QP / LP solver.
//!
//! Problems are posed as
//!
//! ```text
//! minimize    1/2 z' H z + q' z
//! subject to  l <= A z <= u
//! ```
//!
//! and solved with an operator-splitting (ADMM) iteration followed by an
//! active-set polish on a regularized KKT system. Equality rows use `l = u`.
//! Bounds at or beyond `Scalar::infinity_bound()` are treated as absent.
//!
//! Dual sign convention: `H z + q + A' y = 0`, with `y_i >= 0` on rows whose
//! upper bound is active and `y_i <= 0` on rows whose lower bound is active.

mod admm;
mod csr;
pub mod dump;
mod polish;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::Scalar;

pub use admm::{solve_qp, solve_qp_warm};

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem<T: Scalar> {
    pub h: DMatrix<T>,
    pub q: DVector<T>,
    pub a: DMatrix<T>,
    pub l: DVector<T>,
    pub u: DVector<T>,
}

impl<T: Scalar> QpProblem<T> {
    pub fn new(
        h: DMatrix<T>,
        q: DVector<T>,
        a: DMatrix<T>,
        l: DVector<T>,
        u: DVector<T>,
    ) -> Result<Self> {
        let p = Self { h, q, a, l, u };
        p.validate()?;
        Ok(p)
    }

    /// Problem with no quadratic term.
    pub fn linear(q: DVector<T>, a: DMatrix<T>, l: DVector<T>, u: DVector<T>) -> Result<Self> {
        let m = q.len();
        Self::new(DMatrix::zeros(m, m), q, a, l, u)
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_rows(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.q.len();
        check_dim("QP H rows", m, self.h.nrows())?;
        check_dim("QP H columns", m, self.h.ncols())?;
        check_dim("QP A columns", m, self.a.ncols())?;
        check_dim("QP lower bound", self.a.nrows(), self.l.len())?;
        check_dim("QP upper bound", self.a.nrows(), self.u.len())?;
        if self.q.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::InvalidProblem("non-finite linear cost".into()));
        }
        if self.l.iter().zip(self.u.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidProblem(
                "lower bound exceeds upper bound".into(),
            ));
        }
        let asym = (&self.h - self.h.transpose()).abs().max();
        if m > 0 && asym > T::lit(1e-9) * self.h.abs().max().max(T::one()) {
            return Err(Error::InvalidProblem("H is not symmetric".into()));
        }
        if m > 0 {
            let shift = T::lit(1e-9) * self.h.abs().max().max(T::one());
            let probe = &self.h + DMatrix::identity(m, m) * shift;
            if Cholesky::new(probe).is_none() {
                return Err(Error::InvalidProblem(
                    "H is not positive semidefinite".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<T>) -> T {
        (&self.h * z).dot(z) * T::lit(0.5) + self.q.dot(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::PrimalInfeasible => "primal_infeasible",
            QpStatus::DualInfeasible => "dual_infeasible",
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution<T: Scalar> {
    pub z: DVector<T>,
    pub y: DVector<T>,
    pub objective: T,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub polished: bool,
}

#[derive(Clone, Debug)]
pub struct QpSettings<T: Scalar> {
    pub eps_abs: T,
    pub eps_rel: T,
    pub eps_prim_inf: T,
    pub eps_dual_inf: T,
    pub max_iter: usize,
    pub rho: T,
    pub sigma: T,
    /// Over-relaxation in `(0, 2)`.
    pub alpha: T,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
    /// First iteration at which a polish is attempted; later attempts double.
    pub polish_start: usize,
    pub polish_delta: T,
    pub polish_refine_iter: usize,
}

impl<T: Scalar> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            eps_abs: T::lit(1e-8),
            eps_rel: T::lit(1e-8),
            eps_prim_inf: T::lit(1e-6),
            eps_dual_inf: T::lit(1e-6),
            max_iter: 20_000,
            rho: T::lit(0.1),
            sigma: T::lit(1e-6),
            alpha: T::lit(1.6),
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            polish: true,
            polish_start: 25,
            polish_delta: T::lit(1e-9),
            polish_refine_iter: 10,
        }
    }
}

/// Initial primal/dual guess.
#[derive(Clone, Debug, Default)]
pub struct WarmStart<T: Scalar> {
    pub z: Option<DVector<T>>,
    pub y: Option<DVector<T>>,
}

/// LP convenience wrapper: `H = 0`.
pub fn solve_lp<T: Scalar>(
    q: &DVector<T>,
    a: &DMatrix<T>,
    l: &DVector<T>,
    u: &DVector<T>,
    settings: &QpSettings<T>,
) -> QpSolution<T> {
    let m = q.len();
    let problem = QpProblem {
        h: DMatrix::zeros(m, m),
        q: q.clone(),
        a: a.clone(),
        l: l.clone(),
        u: u.clone(),
    };
    solve_qp(&problem, settings)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals<T: Scalar> {
    /// `|| A z - proj_[l,u](A z) ||_inf`
    pub primal: T,
    /// `|| H z + q + A' y ||_inf`
    pub dual: T,
    /// Largest `|y_i| * (distance of row i to the bound its sign selects)`.
    pub complementarity: T,
}

/// Recomputes the optimality residuals of `(z, y)` from the problem data alone.
pub fn kkt_residuals<T: Scalar>(p: &QpProblem<T>, s: &QpSolution<T>) -> KktResiduals<T> {
    residuals_of(p, &s.z, &s.y)
}

pub fn residuals_of<T: Scalar>(
    p: &QpProblem<T>,
    z: &DVector<T>,
    y: &DVector<T>,
) -> KktResiduals<T> {
    let inf = T::infinity_bound();
    let az = &p.a * z;
    let mut primal = T::zero();
    let mut complementarity = T::zero();
    for i in 0..az.len() {
        let lo = p.l[i];
        let hi = p.u[i];
        let v = az[i];
        let below = if lo > -inf {
            (lo - v).max(T::zero())
        } else {
            T::zero()
        };
        let above = if hi < inf {
            (v - hi).max(T::zero())
        } else {
            T::zero()
        };
        primal = primal.max(below).max(above);
        let yi = y[i];
        let c = if yi > T::zero() {
            if hi < inf {
                yi * (hi - v).abs()
            } else {
                yi
            }
        } else if yi < T::zero() {
            if lo > -inf {
                -yi * (v - lo).abs()
            } else {
                -yi
            }
        } else {
            T::zero()
        };
        complementarity = complementarity.max(c);
    }
    let stat = &p.h * z + &p.q + p.a.transpose() * y;
    let dual = stat.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    KktResiduals {
        primal,
        dual,
        complementarity,
    }
}
