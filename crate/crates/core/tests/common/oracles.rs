//! Brute-force reference solutions, independent of the solver code paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

const INF: f64 = 1e30;

/// Least-squares solve that rejects inconsistent systems.
fn consistent_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = m.clone().svd(true, true);
    let sol = svd.solve(rhs, 1e-12).ok()?;
    let res = (m * &sol - rhs).amax();
    if res <= 1e-9 * (1.0 + rhs.amax()) {
        Some(sol)
    } else {
        None
    }
}

/// Minimum of `1/2 z'Hz + q'z` over `l <= Az <= u` by enumerating every
/// active set (each row inactive, at its lower bound or at its upper bound)
/// and solving the corresponding equality-constrained KKT system.
///
/// Returns `(objective, argmin)`; `None` when no active set yields a feasible
/// stationary point.
pub fn qp_by_active_sets(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
) -> Option<(f64, DVector<f64>)> {
    let m = q.len();
    let p = l.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let combos = 3usize.pow(p as u32);
    for code in 0..combos {
        let mut c = code;
        let mut rows: Vec<(usize, f64)> = Vec::new();
        let mut skip = false;
        for i in 0..p {
            let choice = c % 3;
            c /= 3;
            match choice {
                0 => {}
                1 => {
                    if l[i] <= -INF {
                        skip = true;
                    }
                    rows.push((i, l[i]));
                }
                _ => {
                    if u[i] >= INF || l[i] == u[i] {
                        skip = true;
                    }
                    rows.push((i, u[i]));
                }
            }
        }
        if skip {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(m + k, m + k);
        kkt.view_mut((0, 0), (m, m)).copy_from(h);
        let mut rhs = DVector::zeros(m + k);
        for j in 0..m {
            rhs[j] = -q[j];
        }
        for (r, &(i, b)) in rows.iter().enumerate() {
            for j in 0..m {
                kkt[(m + r, j)] = a[(i, j)];
                kkt[(j, m + r)] = a[(i, j)];
            }
            rhs[m + r] = b;
        }
        let Some(sol) = consistent_solve(&kkt, &rhs) else {
            continue;
        };
        let z = sol.rows(0, m).into_owned();
        let az = a * &z;
        let feasible = (0..p).all(|i| az[i] >= l[i] - 1e-9 && az[i] <= u[i] + 1e-9);
        if !feasible {
            continue;
        }
        let obj = 0.5 * (h * &z).dot(&z) + q.dot(&z);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, z));
        }
    }
    best
}

/// Minimum of `c'x` over the box `[lo, hi]` by enumerating its vertices.
pub fn box_lp_by_vertices(c: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let n = c.len();
    let mut best = f64::INFINITY;
    for mask in 0..(1usize << n) {
        let v: f64 = (0..n)
            .map(|i| c[i] * if mask >> i & 1 == 1 { hi[i] } else { lo[i] })
            .sum();
        best = best.min(v);
    }
    best
}

fn subsets(m: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 1usize..(1 << m) {
        if (mask.count_ones() as usize) <= max_size {
            out.push((0..m).filter(|j| mask >> j & 1 == 1).collect());
        }
    }
    out
}

/// Q-function value by enumerating vertex subsets of size at most `n + 1`
/// and solving `D_S lambda = x, 1'lambda = 1` exactly on each.
pub fn q_function_by_subsets(d: &DMatrix<f64>, costs: &[f64], x: &DVector<f64>) -> Option<f64> {
    let n = d.nrows();
    let m = d.ncols();
    let mut best: Option<f64> = None;
    for s in subsets(m, n + 1) {
        let k = s.len();
        let mut sys = DMatrix::zeros(n + 1, k);
        let mut rhs = DVector::zeros(n + 1);
        for (c, &j) in s.iter().enumerate() {
            for i in 0..n {
                sys[(i, c)] = d[(i, j)];
            }
            sys[(n, c)] = 1.0;
        }
        for i in 0..n {
            rhs[i] = x[i];
        }
        rhs[n] = 1.0;
        let Some(lambda) = consistent_solve(&sys, &rhs) else {
            continue;
        };
        if lambda.iter().any(|&v| v < -1e-10) {
            continue;
        }
        let val: f64 = s
            .iter()
            .enumerate()
            .map(|(c, &j)| lambda[c] * costs[j])
            .sum();
        if best.is_none_or(|b| val < b) {
            best = Some(val);
        }
    }
    best
}

/// `(primal, dual, complementarity)` residuals of `(z, y)` for
/// `min 1/2 z'Hz + q'z, l <= Az <= u` with `Hz + q + A'y = 0`, `y_i > 0` on
/// upper-active rows and `y_i < 0` on lower-active rows.
pub fn kkt_residuals(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> (f64, f64, f64) {
    let az = a * z;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..az.len() {
        primal = primal.max(l[i] - az[i]).max(az[i] - u[i]);
        if y[i] > 0.0 {
            comp = comp.max(if u[i] >= INF {
                y[i]
            } else {
                y[i] * (u[i] - az[i]).abs()
            });
        } else if y[i] < 0.0 {
            comp = comp.max(if l[i] <= -INF {
                -y[i]
            } else {
                -y[i] * (az[i] - l[i]).abs()
            });
        }
    }
    let dual = (h * z + q + a.transpose() * y).amax();
    (primal.max(0.0), dual, comp)
}

/// Random convex QP with `m` variables and `p` rows that is feasible by
/// construction. `H` has random rank, so some instances are unbounded.
pub fn random_qp<R: rand::Rng>(
    rng: &mut R,
    m: usize,
    p: usize,
) -> (
    DMatrix<f64>,
    DVector<f64>,
    DMatrix<f64>,
    DVector<f64>,
    DVector<f64>,
) {
    let rank = rng.random_range(0..=m);
    let f = DMatrix::from_fn(m, rank, |_, _| rng.random_range(-1.0..1.0));
    let h = &f * f.transpose();
    let q = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
    let a = DMatrix::from_fn(p, m, |_, _| rng.random_range(-1.0..1.0));
    let z0 = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let az = &a * &z0;
    let mut l = DVector::zeros(p);
    let mut u = DVector::zeros(p);
    for i in 0..p {
        match rng.random_range(0..4) {
            0 => {
                l[i] = az[i];
                u[i] = az[i];
            }
            1 => {
                l[i] = -INF;
                u[i] = az[i] + rng.random_range(0.0..1.0);
            }
            2 => {
                l[i] = az[i] - rng.random_range(0.0..1.0);
                u[i] = INF;
            }
            _ => {
                l[i] = az[i] - rng.random_range(0.0..1.0);
                u[i] = az[i] + rng.random_range(0.0..1.0);
            }
        }
    }
    (h, q, a, l, u)
}
