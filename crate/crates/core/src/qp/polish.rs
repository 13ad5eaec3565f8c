//! Active-set polish: guess the active constraints from an ADMM iterate and
//! solve the equality-constrained KKT system directly.

use nalgebra::{DMatrix, DVector};

use super::csr::{norm_inf, Csr};
use super::{QpProblem, QpSettings};
use crate::Scalar;

pub(super) struct Polished<T: Scalar> {
    pub z: DVector<T>,
    pub y: DVector<T>,
    pub primal: T,
    pub dual: T,
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Lower,
    Upper,
    Equality,
}

const MAX_CORRECTIONS: usize = 8;

/// Regularized KKT solve with iterative refinement for a fixed active set.
fn solve_kkt<T: Scalar>(
    p: &QpProblem<T>,
    active: &[(usize, Side)],
    l: &DVector<T>,
    u: &DVector<T>,
    settings: &QpSettings<T>,
) -> Option<(DVector<T>, DVector<T>)> {
    let m = p.num_vars();
    let k = active.len();
    let dim = m + k;
    let delta = settings.polish_delta;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (m, m)).copy_from(&p.h);
    let mut rhs = DVector::zeros(dim);
    for j in 0..m {
        rhs[j] = -p.q[j];
    }
    for (r, &(i, side)) in active.iter().enumerate() {
        for j in 0..m {
            let v = p.a[(i, j)];
            kkt[(m + r, j)] = v;
            kkt[(j, m + r)] = v;
        }
        rhs[m + r] = match side {
            Side::Upper => u[i],
            Side::Lower | Side::Equality => l[i],
        };
    }
    let mut reg = kkt.clone();
    for j in 0..m {
        reg[(j, j)] += delta;
    }
    for r in 0..k {
        reg[(m + r, m + r)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..settings.polish_refine_iter {
        let res = &rhs - &kkt * &sol;
        if norm_inf(&res) <= T::lit(1e-14) * norm_inf(&rhs).max(T::one()) {
            break;
        }
        sol += lu.solve(&res)?;
    }
    if sol.iter().any(|v| !v.is_finite_value()) {
        return None;
    }
    Some((sol.rows(0, m).into_owned(), sol.rows(m, k).into_owned()))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn polish<T: Scalar>(
    p: &QpProblem<T>,
    a: &Csr<T>,
    l: &DVector<T>,
    u: &DVector<T>,
    z: &DVector<T>,
    y: &DVector<T>,
    settings: &QpSettings<T>,
) -> Option<Polished<T>> {
    let inf = T::infinity_bound();
    let rows = l.len();

    let mut active: Vec<(usize, Side)> = Vec::new();
    for i in 0..rows {
        if l[i] == u[i] {
            active.push((i, Side::Equality));
        } else if l[i] > -inf && z[i] - l[i] < -y[i] {
            active.push((i, Side::Lower));
        } else if u[i] < inf && u[i] - z[i] < y[i] {
            active.push((i, Side::Upper));
        }
    }

    // Active-set corrections: drop rows whose multiplier has the wrong sign,
    // add rows the candidate violates.
    let mut attempt = 0;
    let (zp, yp) = loop {
        attempt += 1;
        let (zp, mults) = solve_kkt(p, &active, l, u, settings)?;
        let mut yp = DVector::zeros(rows);
        let mut wrong = Vec::new();
        for (r, &(i, side)) in active.iter().enumerate() {
            let v = mults[r];
            yp[i] = v;
            let bad = match side {
                Side::Lower => v > T::lit(1e-9) * (T::one() + v.abs()),
                Side::Upper => v < -T::lit(1e-9) * (T::one() + v.abs()),
                Side::Equality => false,
            };
            if bad {
                wrong.push(r);
            }
        }
        let az = a.mul(&zp);
        let tol = settings.eps_abs;
        let violated: Vec<(usize, Side)> = (0..rows)
            .filter(|i| !active.iter().any(|(j, _)| j == i))
            .filter_map(|i| {
                if az[i] < l[i] - tol {
                    Some((i, Side::Lower))
                } else if az[i] > u[i] + tol {
                    Some((i, Side::Upper))
                } else {
                    None
                }
            })
            .collect();
        if wrong.is_empty() && violated.is_empty() {
            break (zp, yp);
        }
        if attempt >= MAX_CORRECTIONS {
            return None;
        }
        let mut next: Vec<(usize, Side)> = active
            .iter()
            .enumerate()
            .filter(|(r, _)| !wrong.contains(r))
            .map(|(_, e)| *e)
            .collect();
        next.extend(violated);
        next.sort_by_key(|e| e.0);
        active = next;
    };

    let az = a.mul(&zp);
    let mut primal = T::zero();
    for i in 0..rows {
        primal = primal.max(l[i] - az[i]).max(az[i] - u[i]);
    }
    let hz = &p.h * &zp;
    let aty = a.tmul(&yp);
    let dual = norm_inf(&(&hz + &p.q + &aty));
    let proj = DVector::from_iterator(rows, (0..rows).map(|i| az[i].max(l[i]).min(u[i])));
    let eps_prim = settings.eps_abs + settings.eps_rel * norm_inf(&az).max(norm_inf(&proj));
    let eps_dual =
        settings.eps_abs + settings.eps_rel * norm_inf(&hz).max(norm_inf(&aty)).max(norm_inf(&p.q));
    if primal <= eps_prim && dual <= eps_dual {
        Some(Polished {
            z: zp,
            y: yp,
            primal: primal.max(T::zero()),
            dual,
        })
    } else {
        None
    }
}
