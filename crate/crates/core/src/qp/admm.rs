use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::csr::{norm_inf, Csr};
use super::polish::polish;
use super::{QpProblem, QpSettings, QpSolution, QpStatus, WarmStart};
use crate::Scalar;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

pub fn solve_qp<T: Scalar>(p: &QpProblem<T>, settings: &QpSettings<T>) -> QpSolution<T> {
    solve_qp_warm(p, settings, None)
}

struct Workspace<T: Scalar> {
    h: Csr<T>,
    a: Csr<T>,
    h_dense: DMatrix<T>,
    a_dense: DMatrix<T>,
    l: DVector<T>,
    u: DVector<T>,
    rho_vec: DVector<T>,
    chol: Cholesky<T, Dyn>,
}

impl<T: Scalar> Workspace<T> {
    fn rho_vector(&self, rho: T) -> DVector<T> {
        let inf = T::infinity_bound();
        DVector::from_iterator(
            self.l.len(),
            self.l.iter().zip(self.u.iter()).map(|(&lo, &hi)| {
                if lo <= -inf && hi >= inf {
                    T::lit(RHO_MIN)
                } else if lo == hi {
                    rho * T::lit(RHO_EQ_SCALE)
                } else {
                    rho
                }
            }),
        )
    }

    /// Factor `H + sigma I + A' diag(rho) A`.
    fn factor(&mut self, rho: T, sigma: T) -> bool {
        self.rho_vec = self.rho_vector(rho);
        let m = self.h_dense.nrows();
        let mut k = self.h_dense.clone();
        for i in 0..m {
            k[(i, i)] += sigma;
        }
        let mut scaled = self.a_dense.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.rho_vec[i];
        }
        k += self.a_dense.transpose() * scaled;
        match Cholesky::new(k) {
            Some(c) => {
                self.chol = c;
                true
            }
            None => false,
        }
    }
}

fn clamp_bounds<T: Scalar>(v: &DVector<T>) -> DVector<T> {
    let inf = T::infinity_bound();
    v.map(|x| x.max(-inf).min(inf))
}

fn project<T: Scalar>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

pub fn solve_qp_warm<T: Scalar>(
    p: &QpProblem<T>,
    settings: &QpSettings<T>,
    warm: Option<&WarmStart<T>>,
) -> QpSolution<T> {
    let m = p.num_vars();
    let rows = p.num_rows();
    let l = clamp_bounds(&p.l);
    let u = clamp_bounds(&p.u);
    let inf = T::infinity_bound();

    let mut ws = Workspace {
        h: Csr::from_dense(&p.h),
        a: Csr::from_dense(&p.a),
        h_dense: p.h.clone(),
        a_dense: p.a.clone(),
        l: l.clone(),
        u: u.clone(),
        rho_vec: DVector::zeros(rows),
        chol: Cholesky::new(DMatrix::identity(m.max(1), m.max(1))).expect("identity"),
    };
    let mut rho = settings.rho;
    let sigma = settings.sigma;
    let alpha = settings.alpha;
    if m == 0 || !ws.factor(rho, sigma) {
        // Only reachable for an empty or non-convex problem.
        return QpSolution {
            z: DVector::zeros(m),
            y: DVector::zeros(rows),
            objective: T::zero(),
            status: if m == 0 {
                QpStatus::Solved
            } else {
                QpStatus::DualInfeasible
            },
            iterations: 0,
            primal_residual: T::zero(),
            dual_residual: T::zero(),
            polished: false,
        };
    }

    let mut x = warm
        .and_then(|w| w.z.clone())
        .filter(|z| z.len() == m)
        .unwrap_or_else(|| DVector::zeros(m));
    let mut y = warm
        .and_then(|w| w.y.clone())
        .filter(|y| y.len() == rows)
        .unwrap_or_else(|| DVector::zeros(rows));
    let mut z = {
        let ax = ws.a.mul(&x);
        DVector::from_iterator(rows, (0..rows).map(|i| project(ax[i], l[i], u[i])))
    };

    let mut ax = DVector::zeros(rows);
    let mut hx = DVector::zeros(m);
    let mut aty = DVector::zeros(m);
    let mut rhs_dual = DVector::zeros(rows);
    let mut atv = DVector::zeros(m);
    let mut zr = DVector::zeros(rows);

    let mut prim_res = T::zero();
    let mut dual_res = T::zero();
    let mut next_polish = settings.polish_start.max(1);

    let finish = |z: DVector<T>, y: DVector<T>, status, iterations, pr, dr, polished| {
        let objective = p.objective(&z);
        QpSolution {
            z,
            y,
            objective,
            status,
            iterations,
            primal_residual: pr,
            dual_residual: dr,
            polished,
        }
    };

    for iter in 1..=settings.max_iter {
        let x_prev = x.clone();
        let y_prev = y.clone();

        // x-update through the reduced KKT system.
        for i in 0..rows {
            rhs_dual[i] = ws.rho_vec[i] * z[i] - y[i];
        }
        ws.a.tmul_into(&rhs_dual, &mut atv);
        let rhs = &x * sigma - &p.q + &atv;
        let x_tilde = ws.chol.solve(&rhs);
        let z_tilde = ws.a.mul(&x_tilde);

        x = &x_tilde * alpha + &x_prev * (T::one() - alpha);
        for i in 0..rows {
            zr[i] = alpha * z_tilde[i] + (T::one() - alpha) * z[i];
        }
        for i in 0..rows {
            let z_new = project(zr[i] + y[i] / ws.rho_vec[i], l[i], u[i]);
            y[i] += ws.rho_vec[i] * (zr[i] - z_new);
            z[i] = z_new;
        }

        ws.a.mul_into(&x, &mut ax);
        ws.h.mul_into(&x, &mut hx);
        ws.a.tmul_into(&y, &mut aty);
        prim_res = norm_inf(&(&ax - &z));
        dual_res = norm_inf(&(&hx + &p.q + &aty));
        let eps_prim = settings.eps_abs + settings.eps_rel * norm_inf(&ax).max(norm_inf(&z));
        let eps_dual = settings.eps_abs
            + settings.eps_rel * norm_inf(&hx).max(norm_inf(&aty)).max(norm_inf(&p.q));

        if prim_res <= eps_prim && dual_res <= eps_dual {
            if settings.polish {
                if let Some(pol) = polish(p, &ws.a, &l, &u, &z, &y, settings) {
                    return finish(
                        pol.z,
                        pol.y,
                        QpStatus::Solved,
                        iter,
                        pol.primal,
                        pol.dual,
                        true,
                    );
                }
            }
            return finish(x, y, QpStatus::Solved, iter, prim_res, dual_res, false);
        }

        if settings.polish && iter == next_polish {
            next_polish = next_polish.saturating_mul(2);
            if let Some(pol) = polish(p, &ws.a, &l, &u, &z, &y, settings) {
                return finish(
                    pol.z,
                    pol.y,
                    QpStatus::Solved,
                    iter,
                    pol.primal,
                    pol.dual,
                    true,
                );
            }
        }

        let dy = &y - &y_prev;
        if primal_infeasible(&ws.a, &l, &u, &dy, settings.eps_prim_inf, inf) {
            return finish(
                x,
                y,
                QpStatus::PrimalInfeasible,
                iter,
                prim_res,
                dual_res,
                false,
            );
        }
        let dx = &x - &x_prev;
        if dual_infeasible(p, &ws, &dx, settings.eps_dual_inf, inf) {
            return finish(
                x,
                y,
                QpStatus::DualInfeasible,
                iter,
                prim_res,
                dual_res,
                false,
            );
        }

        if settings.adaptive_rho && iter % settings.adaptive_rho_interval.max(1) == 0 {
            let prim_scale = norm_inf(&ax).max(norm_inf(&z)).max(T::lit(1e-12));
            let dual_scale = norm_inf(&hx)
                .max(norm_inf(&aty))
                .max(norm_inf(&p.q))
                .max(T::lit(1e-12));
            let num = prim_res / prim_scale;
            let den = (dual_res / dual_scale).max(T::lit(1e-30));
            let new_rho = (rho * (num / den).sqrt())
                .max(T::lit(RHO_MIN))
                .min(T::lit(RHO_MAX));
            if new_rho > rho * T::lit(5.0) || new_rho < rho / T::lit(5.0) {
                rho = new_rho;
                if !ws.factor(rho, sigma) {
                    break;
                }
            }
        }
    }

    if settings.polish {
        if let Some(pol) = polish(p, &ws.a, &l, &u, &z, &y, settings) {
            return finish(
                pol.z,
                pol.y,
                QpStatus::Solved,
                settings.max_iter,
                pol.primal,
                pol.dual,
                true,
            );
        }
    }
    finish(
        x,
        y,
        QpStatus::MaxIter,
        settings.max_iter,
        prim_res,
        dual_res,
        false,
    )
}

fn primal_infeasible<T: Scalar>(
    a: &Csr<T>,
    l: &DVector<T>,
    u: &DVector<T>,
    dy: &DVector<T>,
    eps: T,
    inf: T,
) -> bool {
    let norm = norm_inf(dy);
    if norm <= T::lit(1e-12) {
        return false;
    }
    let thresh = eps * norm;
    if norm_inf(&a.tmul(dy)) > thresh {
        return false;
    }
    let mut support = T::zero();
    for i in 0..dy.len() {
        let d = dy[i];
        if d > thresh {
            if u[i] >= inf {
                return false;
            }
            support += u[i] * d;
        } else if d < -thresh {
            if l[i] <= -inf {
                return false;
            }
            support += l[i] * d;
        }
    }
    support < -thresh
}

fn dual_infeasible<T: Scalar>(
    p: &QpProblem<T>,
    ws: &Workspace<T>,
    dx: &DVector<T>,
    eps: T,
    inf: T,
) -> bool {
    let norm = norm_inf(dx);
    if norm <= T::lit(1e-12) {
        return false;
    }
    let thresh = eps * norm;
    if norm_inf(&ws.h.mul(dx)) > thresh || p.q.dot(dx) > -thresh {
        return false;
    }
    let adx = ws.a.mul(dx);
    (0..adx.len()).all(|i| {
        let ok_hi = ws.u[i] >= inf || adx[i] <= thresh;
        let ok_lo = ws.l[i] <= -inf || adx[i] >= -thresh;
        ok_hi && ok_lo
    })
}
