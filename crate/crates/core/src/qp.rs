//! Dense convex QP: minimize ½xᵀHx + fᵀx subject to Gx ≤ h, Ex = e.
//!
//! Primal active-set method. A feasible start comes from a phase-1 problem
//! minimizing the largest constraint violation. Steps are computed in the
//! null space of the working set, so positive semidefinite H is handled:
//! along zero-curvature directions the method moves to the next blocking
//! constraint or reports the problem unbounded.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{max, vec_inf};
use crate::scalar::{c, f, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Scalar> {
    pub h: DMatrix<T>,
    pub f: DVector<T>,
    pub g: DMatrix<T>,
    pub h_ineq: DVector<T>,
    pub e: DMatrix<T>,
    pub e_eq: DVector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult<T: Scalar> {
    pub x_star: DVector<T>,
    pub status: QpStatus,
    pub kkt_residual: T,
    pub active_set: Vec<usize>,
    pub mult_ineq: DVector<T>,
    pub mult_eq: DVector<T>,
    pub objective: T,
    pub iterations: usize,
}

impl<T: Scalar> QpProblem<T> {
    pub fn new(h: DMatrix<T>, f: DVector<T>) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            g: DMatrix::zeros(0, n),
            h_ineq: DVector::zeros(0),
            e: DMatrix::zeros(0, n),
            e_eq: DVector::zeros(0),
        }
    }

    pub fn with_ineq(mut self, g: DMatrix<T>, h: DVector<T>) -> Self {
        self.g = g;
        self.h_ineq = h;
        self
    }

    pub fn with_eq(mut self, e: DMatrix<T>, v: DVector<T>) -> Self {
        self.e = e;
        self.e_eq = v;
        self
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<T>) -> T {
        (x.transpose() * &self.h * x)[0] * c::<T>(0.5) + self.f.dot(x)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.h.nrows() != n
            || self.h.ncols() != n
            || self.g.ncols() != n
            || self.g.nrows() != self.h_ineq.len()
            || self.e.ncols() != n
            || self.e.nrows() != self.e_eq.len()
        {
            return Err(Error::Qp("inconsistent dimensions".into()));
        }
        let scale = max(T::one(), self.h.amax());
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > c::<T>(1e-12) * scale {
            return Err(Error::Qp(format!("H not symmetric ({})", f(asym))));
        }
        if n > 0 {
            let ev = SymmetricEigen::new(self.h.clone()).eigenvalues;
            if ev.min() < -c::<T>(1e-10) * scale {
                return Err(Error::Qp(format!(
                    "H not positive semidefinite (eigenvalue {})",
                    f(ev.min())
                )));
            }
        }
        Ok(())
    }
}

struct Core<T: Scalar> {
    x: DVector<T>,
    work: Vec<usize>,
    status: QpStatus,
    lam_eq: DVector<T>,
    lam_in: DVector<T>,
    iterations: usize,
}

/// Orthonormal basis of the null space of `a` (rows are constraints).
fn null_space<T: Scalar>(a: &DMatrix<T>, n: usize) -> DMatrix<T> {
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let k = a.nrows();
    let padded = if k < n {
        let mut m = DMatrix::zeros(n, n);
        m.rows_mut(0, k).copy_from(a);
        m
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let smax = svd.singular_values.max();
    let thr = max(smax, T::one()) * T::tol();
    let cols: Vec<usize> = (0..vt.nrows())
        .filter(|&i| svd.singular_values[i] <= thr)
        .collect();
    let mut z = DMatrix::zeros(n, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        z.set_column(j, &vt.row(i).transpose());
    }
    z
}

fn working_matrix<T: Scalar>(e: &DMatrix<T>, g: &DMatrix<T>, work: &[usize]) -> DMatrix<T> {
    let n = e.ncols();
    let mut a = DMatrix::zeros(e.nrows() + work.len(), n);
    a.rows_mut(0, e.nrows()).copy_from(e);
    for (r, &i) in work.iter().enumerate() {
        a.set_row(e.nrows() + r, &g.row(i));
    }
    a
}

/// Active-set iterations from a feasible `x0`. Rows of `g` and `e` are
/// expected to be normalized and `e` to have full row rank.
#[allow(clippy::too_many_arguments)]
fn active_set<T: Scalar>(
    h: &DMatrix<T>,
    fv: &DVector<T>,
    g: &DMatrix<T>,
    hv: &DVector<T>,
    e: &DMatrix<T>,
    x0: DVector<T>,
    mut work: Vec<usize>,
    max_iter: usize,
) -> Result<Core<T>> {
    let n = fv.len();
    let m = g.nrows();
    let neq = e.nrows();
    let mut x = x0;
    let hscale = max(T::one(), h.amax());
    let tol = T::tol();
    let mut in_work = vec![false; m];
    for &i in &work {
        in_work[i] = true;
    }
    for it in 0..max_iter {
        let grad = h * &x + fv;
        let gscale = max(T::one(), vec_inf(&grad));
        let a_w = working_matrix(e, g, &work);
        let z = null_space(&a_w, n);
        let mut p = DVector::zeros(n);
        let mut ray = false;
        if z.ncols() > 0 {
            let gz = z.transpose() * &grad;
            let red = z.transpose() * h * &z;
            let eig = SymmetricEigen::new(red);
            let ctol = hscale * tol;
            let mut d0 = DVector::zeros(z.ncols());
            let mut dn = DVector::zeros(z.ncols());
            for i in 0..z.ncols() {
                let q = eig.eigenvectors.column(i);
                let comp = q.dot(&gz);
                if eig.eigenvalues[i] > ctol {
                    dn -= q * (comp / eig.eigenvalues[i]);
                } else {
                    d0 += q * comp;
                }
            }
            if d0.norm() > tol * gscale {
                p = -(&z * d0);
                ray = true;
            } else {
                p = &z * dn;
            }
        }
        let xscale = T::one() + vec_inf(&x);
        if !ray && vec_inf(&p) <= tol * xscale {
            // stationary on the working set: check multipliers
            let lam = if a_w.nrows() > 0 {
                a_w.transpose()
                    .svd(true, true)
                    .solve(&(-&grad), T::tol() * T::tol())
                    .map_err(|s| Error::Qp(s.to_string()))?
            } else {
                DVector::zeros(0)
            };
            let mut worst: Option<(usize, T)> = None;
            for (r, &i) in work.iter().enumerate() {
                let mu = lam[neq + r];
                let better = match worst {
                    None => mu < -tol * gscale,
                    Some((wi, wv)) => mu < wv || (mu == wv && i < work[wi]),
                };
                if better {
                    worst = Some((r, mu));
                }
            }
            match worst {
                None => {
                    let mut lam_in = DVector::zeros(m);
                    for (r, &i) in work.iter().enumerate() {
                        lam_in[i] = max(lam[neq + r], T::zero());
                    }
                    let lam_eq = DVector::from_iterator(neq, (0..neq).map(|r| lam[r]));
                    return Ok(Core {
                        x,
                        work,
                        status: QpStatus::Optimal,
                        lam_eq,
                        lam_in,
                        iterations: it,
                    });
                }
                Some((r, _)) => {
                    in_work[work[r]] = false;
                    work.remove(r);
                    continue;
                }
            }
        }
        // ratio test, lowest index on ties
        let pn = p.norm();
        let mut step = if ray { None } else { Some(T::one()) };
        let mut block: Option<usize> = None;
        for i in 0..m {
            if in_work[i] {
                continue;
            }
            let ap = g.row(i).dot(&p.transpose());
            if ap > tol * pn {
                let slack = hv[i] - g.row(i).dot(&x.transpose());
                let s = max(slack, T::zero()) / ap;
                let take = match step {
                    None => true,
                    Some(cur) => s < cur,
                };
                if take {
                    step = Some(s);
                    block = Some(i);
                }
            }
        }
        let s = match step {
            None => {
                return Ok(Core {
                    x,
                    work,
                    status: QpStatus::Unbounded,
                    lam_eq: DVector::zeros(neq),
                    lam_in: DVector::zeros(m),
                    iterations: it,
                })
            }
            Some(s) => s,
        };
        x += &p * s;
        if let Some(i) = block {
            in_work[i] = true;
            work.push(i);
        }
    }
    Err(Error::Qp(format!(
        "no convergence in {max_iter} iterations"
    )))
}

/// Indices of a maximal independent subset of rows, in order.
fn independent_rows<T: Scalar>(a: &DMatrix<T>) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..a.nrows() {
        let mut trial = keep.clone();
        trial.push(i);
        let sub = DMatrix::from_fn(trial.len(), a.ncols(), |r, col| a[(trial[r], col)]);
        let sv = sub.svd(false, false).singular_values;
        if sv.min() > T::tol() * max(T::one(), sv.max()) {
            keep = trial;
        }
    }
    keep
}

fn normalized<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>) -> (DMatrix<T>, DVector<T>, DVector<T>) {
    let mut a2 = a.clone();
    let mut b2 = b.clone();
    let mut s = DVector::from_element(a.nrows(), T::one());
    for i in 0..a.nrows() {
        let nrm = a.row(i).norm();
        if nrm > T::zero() {
            s[i] = nrm;
            a2.row_mut(i).unscale_mut(nrm);
            b2[i] /= nrm;
        }
    }
    (a2, b2, s)
}

pub fn solve_qp<T: Scalar>(p: &QpProblem<T>) -> Result<QpResult<T>> {
    p.validate()?;
    let n = p.n();
    let m = p.g.nrows();
    let max_iter = 50 * (n + m + 10);
    let (g, hv, gs) = normalized(&p.g, &p.h_ineq);
    let feas_tol = c::<T>(1e-9);

    // zero rows of G: either trivially satisfied or infeasible
    for i in 0..m {
        if gs[i] == T::one() && p.g.row(i).norm() == T::zero() && p.h_ineq[i] < -feas_tol {
            return Ok(infeasible(p, DVector::zeros(n), vec![i], 0));
        }
    }

    // equalities: independent subset, least-squares start
    let (e_all, ev_all, _) = normalized(&p.e, &p.e_eq);
    let keep = independent_rows(&e_all);
    let e = DMatrix::from_fn(keep.len(), n, |r, col| e_all[(keep[r], col)]);
    let ev = DVector::from_iterator(keep.len(), keep.iter().map(|&i| ev_all[i]));
    let mut x0 = if e.nrows() > 0 {
        e.clone()
            .svd(true, true)
            .solve(&ev, T::tol() * T::tol())
            .map_err(|s| Error::Qp(s.to_string()))?
    } else {
        DVector::zeros(n)
    };
    if p.e.nrows() > 0
        && vec_inf(&(&p.e * &x0 - &p.e_eq)) > feas_tol * max(T::one(), vec_inf(&p.e_eq))
    {
        return Ok(infeasible(p, x0, vec![], 0));
    }

    // phase 1: minimize s subject to Gx - s <= h, s >= 0, Ex = e
    let viol = (0..m).fold(T::zero(), |acc, i| {
        max(acc, g.row(i).dot(&x0.transpose()) - hv[i])
    });
    let mut iters = 0;
    let mut start_work = Vec::new();
    if viol > feas_tol {
        let mut g1 = DMatrix::zeros(m + 1, n + 1);
        g1.view_mut((0, 0), (m, n)).copy_from(&g);
        for i in 0..m {
            g1[(i, n)] = -T::one();
        }
        g1[(m, n)] = -T::one();
        let mut h1 = DVector::zeros(m + 1);
        h1.rows_mut(0, m).copy_from(&hv);
        let (g1, h1, _) = normalized(&g1, &h1);
        let mut e1 = DMatrix::zeros(e.nrows(), n + 1);
        e1.view_mut((0, 0), (e.nrows(), n)).copy_from(&e);
        let mut f1 = DVector::zeros(n + 1);
        f1[n] = T::one();
        let mut z0 = DVector::zeros(n + 1);
        z0.rows_mut(0, n).copy_from(&x0);
        z0[n] = viol;
        let core = active_set(
            &DMatrix::zeros(n + 1, n + 1),
            &f1,
            &g1,
            &h1,
            &e1,
            z0,
            vec![],
            max_iter,
        )?;
        iters += core.iterations;
        let s = core.x[n];
        x0 = core.x.rows(0, n).into_owned();
        let w: Vec<usize> = core.work.iter().copied().filter(|&i| i < m).collect();
        if core.status != QpStatus::Optimal || s > feas_tol {
            let mut w = w;
            w.sort_unstable();
            return Ok(infeasible(p, x0, w, iters));
        }
        start_work = w;
    }

    let core = active_set(&p.h, &p.f, &g, &hv, &e, x0, start_work, max_iter)?;
    iters += core.iterations;
    let mut work = core.work.clone();
    work.sort_unstable();
    // multipliers back in the caller's scaling
    let mut mult_ineq = DVector::zeros(m);
    for i in 0..m {
        mult_ineq[i] = core.lam_in[i] / gs[i];
    }
    let (_, _, es) = normalized(&p.e, &p.e_eq);
    let mut mult_eq = DVector::zeros(p.e.nrows());
    for (r, &i) in keep.iter().enumerate() {
        mult_eq[i] = core.lam_eq[r] / es[i];
    }
    let x = core.x;
    let kkt = if core.status == QpStatus::Optimal {
        kkt_residual(p, &x, &mult_ineq, &mult_eq)
    } else {
        T::zero()
    };
    let objective = p.objective(&x);
    Ok(QpResult {
        x_star: x,
        status: core.status,
        kkt_residual: kkt,
        active_set: work,
        mult_ineq,
        mult_eq,
        objective,
        iterations: iters,
    })
}

fn infeasible<T: Scalar>(
    p: &QpProblem<T>,
    x: DVector<T>,
    active: Vec<usize>,
    iterations: usize,
) -> QpResult<T> {
    QpResult {
        objective: p.objective(&x),
        x_star: x,
        status: QpStatus::Infeasible,
        kkt_residual: T::zero(),
        active_set: active,
        mult_ineq: DVector::zeros(p.g.nrows()),
        mult_eq: DVector::zeros(p.e.nrows()),
        iterations,
    }
}

/// Largest violation of stationarity, primal and dual feasibility and
/// complementary slackness.
pub fn kkt_residual<T: Scalar>(
    p: &QpProblem<T>,
    x: &DVector<T>,
    mu: &DVector<T>,
    nu: &DVector<T>,
) -> T {
    let mut stat = &p.h * x + &p.f;
    if p.g.nrows() > 0 {
        stat += p.g.transpose() * mu;
    }
    if p.e.nrows() > 0 {
        stat += p.e.transpose() * nu;
    }
    let mut r = vec_inf(&stat);
    for i in 0..p.g.nrows() {
        let s = p.g.row(i).dot(&x.transpose()) - p.h_ineq[i];
        r = max(r, s);
        r = max(r, -mu[i]);
        r = max(r, (mu[i] * s).abs());
    }
    if p.e.nrows() > 0 {
        r = max(r, vec_inf(&(&p.e * x - &p.e_eq)));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_identity() {
        let p = QpProblem::<f64>::new(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![-1.0, 2.0, -3.0]),
        );
        let r = solve_qp(&p).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert!((r.x_star - DVector::from_vec(vec![1.0, -2.0, 3.0])).amax() < 1e-12);
    }

    #[test]
    fn single_active_bound() {
        // (x - 2)^2 = x^2 - 4x + 4
        let p = QpProblem::<f64>::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
        )
        .with_ineq(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
        );
        let r = solve_qp(&p).unwrap();
        assert!((r.x_star[0] - 1.0).abs() < 1e-12);
        assert_eq!(r.active_set, vec![0]);
        assert!(r.kkt_residual < 1e-12);
    }

    #[test]
    fn infeasible_box() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let p = QpProblem::<f64>::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_ineq(g, DVector::from_vec(vec![-1.0, -1.0]));
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn unbounded_linear() {
        let p = QpProblem::<f64>::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![1.0, 0.0]))
            .with_ineq(
                DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
                DVector::from_element(1, 1.0),
            );
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Unbounded);
    }

    #[test]
    fn linear_program_vertex() {
        // min -x - y, x + y <= 1... plus x <= 0.7, x,y >= 0, and 2x + y <= 1.6
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 0.0, -1.0, 0.0, 0.0, -1.0]);
        let p = QpProblem::<f64>::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![-2.0, -1.0]))
            .with_ineq(g, DVector::from_vec(vec![1.0, 0.7, 0.0, 0.0]));
        let r = solve_qp(&p).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert!((r.x_star[0] - 0.7).abs() < 1e-12 && (r.x_star[1] - 0.3).abs() < 1e-12);
        assert!(r.kkt_residual < 1e-10);
    }

    #[test]
    fn equality_and_singular_hessian() {
        // min (u - 3)^2 + v1 + 2 v2, v1 + v2 = u, 0 <= v <= 1
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 2.0]));
        let fv = DVector::from_vec(vec![1.0, 2.0, -6.0]);
        let g = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0],
        );
        let p = QpProblem::<f64>::new(h, fv)
            .with_ineq(g, DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]))
            .with_eq(
                DMatrix::from_row_slice(1, 3, &[1.0, 1.0, -1.0]),
                DVector::zeros(1),
            );
        let r = solve_qp(&p).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        // u = 2 is optimal: marginal cost 2 of v2 equals 2(3 - u)
        assert!((r.x_star[2] - 2.0).abs() < 1e-9, "{}", r.x_star);
        assert!(r.kkt_residual < 1e-9);
    }
}
