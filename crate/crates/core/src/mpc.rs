//! Medium-level offset-free tube MPC on the slow ensemble model.
//!
//! State ξ = [x̄(k) − x̄(k−1); ȳ(k)], input Δū(k). Every set is an interval,
//! so tightening reduces to support functions of the tube.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::hl::{ShareSolution, StaticMap};
use crate::linalg::{max, min, spectral_radius};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::scalar::{c, f, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    default,
    deny_unknown_fields,
    bound(deserialize = "T: Scalar + Deserialize<'de>")
)]
pub struct MpcConfig<T: Scalar> {
    pub horizon: usize,
    pub q_y: T,
    pub r_du: T,
    pub rho: T,
    pub epsilon: T,
    /// Ratio of the Δx half-widths of W to its output half-width.
    pub state_floor: T,
}

impl<T: Scalar> Default for MpcConfig<T> {
    fn default() -> Self {
        MpcConfig {
            horizon: 10,
            q_y: T::one(),
            r_du: c(0.1),
            rho: c(1e4),
            epsilon: c(0.01),
            state_floor: c(1e-3),
        }
    }
}

impl<T: Scalar> MpcConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let z = T::zero();
        if self.horizon == 0 || self.q_y <= z || self.r_du <= z || self.rho <= z {
            return Err(Error::Config(
                "MPC horizon and weights must be positive".into(),
            ));
        }
        if !(self.epsilon > z && self.epsilon < T::one()) || self.state_floor < z {
            return Err(Error::Config("MPC epsilon must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub c: RowDVector<T>,
    /// Order of the underlying ensemble model.
    pub n_x: usize,
}

pub fn build_velocity_form<T: Scalar>(ens: &EnsembleModel<T>) -> Result<VelocityModel<T>> {
    let s = ens.slow()?;
    Ok(velocity_from(&s.a_t, &s.b_t, &ens.c_hat))
}

pub fn velocity_from<T: Scalar>(
    a_t: &DMatrix<T>,
    b_t: &DVector<T>,
    cm: &RowDVector<T>,
) -> VelocityModel<T> {
    let n = a_t.nrows();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(a_t);
    let ca = cm * a_t;
    a.view_mut((n, 0), (1, n)).copy_from(&ca);
    a[(n, n)] = T::one();
    let mut b = DVector::zeros(n + 1);
    b.rows_mut(0, n).copy_from(b_t);
    b[n] = (cm * b_t)[0];
    let mut cv = RowDVector::zeros(n + 1);
    cv[n] = T::one();
    VelocityModel {
        a,
        b,
        c: cv,
        n_x: n,
    }
}

impl<T: Scalar> VelocityModel<T> {
    pub fn n(&self) -> usize {
        self.n_x + 1
    }

    pub fn state(&self, dx: &DVector<T>, y: T) -> DVector<T> {
        let mut xi = DVector::zeros(self.n());
        xi.rows_mut(0, self.n_x).copy_from(dx);
        xi[self.n_x] = y;
        xi
    }

    pub fn step(&self, xi: &DVector<T>, du: T) -> DVector<T> {
        &self.a * xi + &self.b * du
    }

    pub fn output(&self, xi: &DVector<T>) -> T {
        xi[self.n_x]
    }
}

/// Discrete LQR gain for u = K ξ by Riccati iteration.
pub fn lqr<T: Scalar>(
    a: &DMatrix<T>,
    b: &DVector<T>,
    q: &DMatrix<T>,
    r: T,
) -> Result<RowDVector<T>> {
    let mut p = q.clone();
    let mut k = RowDVector::zeros(a.nrows());
    for _ in 0..200_000 {
        let pb = &p * b;
        let s = r + (b.transpose() * &pb)[0];
        k = -(pb.transpose() * a) / s;
        let next = q + a.transpose() * &p * a + (a.transpose() * &pb) * &k;
        let next = (&next + next.transpose()) * c::<T>(0.5);
        let diff = (&next - &p).amax();
        p = next;
        if diff <= T::tol() * max(T::one(), p.amax()) {
            let a_cl = a + b * &k;
            let rho = spectral_radius(&a_cl);
            if rho >= T::one() {
                return Err(Error::GainDesign(format!(
                    "closed loop spectral radius {}",
                    f(rho)
                )));
            }
            return Ok(k);
        }
    }
    Err(Error::GainDesign(format!(
        "Riccati iteration did not converge (last gain {k:?})"
    )))
}

/// Outer approximation F = (1 − ε)^{-1} ⊕_{j<N} A^j W of the minimal
/// robust positively invariant set, W a centred box.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube<T: Scalar> {
    pub a_cl: DMatrix<T>,
    pub w: DVector<T>,
    pub epsilon: T,
    pub terms: usize,
    /// Half-widths of the bounding box of F.
    pub hull: DVector<T>,
}

const MAX_TUBE_TERMS: usize = 100_000;

fn abs_mul<T: Scalar>(m: &DMatrix<T>, w: &DVector<T>) -> DVector<T> {
    m.abs() * w
}

pub fn compute_tube<T: Scalar>(a_cl: &DMatrix<T>, w: &DVector<T>, epsilon: T) -> Result<Tube<T>> {
    let n = a_cl.nrows();
    if w.len() != n || w.iter().any(|&v| v < T::zero()) {
        return Err(Error::Contract(
            "W half-widths must be nonnegative and match A_cl".into(),
        ));
    }
    let rho = spectral_radius(a_cl);
    if rho >= T::one() {
        return Err(Error::GainDesign(format!(
            "A_cl not Schur (spectral radius {})",
            f(rho)
        )));
    }
    if w.iter().all(|&v| v == T::zero()) {
        return Ok(Tube {
            a_cl: a_cl.clone(),
            w: w.clone(),
            epsilon,
            terms: 0,
            hull: DVector::zeros(n),
        });
    }
    if w.iter().any(|&v| v == T::zero()) {
        return Err(Error::Contract("W must be full-dimensional or zero".into()));
    }
    let mut p = DMatrix::identity(n, n);
    let mut sum = DVector::zeros(n);
    let mut terms = 0;
    loop {
        let aw = abs_mul(&p, w);
        if terms > 0 && aw.iter().zip(w.iter()).all(|(&x, &wi)| x <= epsilon * wi) {
            break;
        }
        if terms == MAX_TUBE_TERMS {
            return Err(Error::GainDesign(
                "tube series did not reach epsilon".into(),
            ));
        }
        sum += aw;
        p = &p * a_cl;
        terms += 1;
    }
    let hull = sum / (T::one() - epsilon);
    Ok(Tube {
        a_cl: a_cl.clone(),
        w: w.clone(),
        epsilon,
        terms,
        hull,
    })
}

impl<T: Scalar> Tube<T> {
    /// Support function of W.
    pub fn support_w(&self, dir: &DVector<T>) -> T {
        dir.abs().dot(&self.w)
    }

    /// Support function of F in direction `dir`.
    pub fn support(&self, dir: &DVector<T>) -> T {
        let mut v = dir.transpose();
        let mut s = T::zero();
        for _ in 0..self.terms {
            s += v.abs().dot(&self.w.transpose());
            v = &v * &self.a_cl;
        }
        s / (T::one() - self.epsilon)
    }

    /// Vertex check A^N W ⊆ εW and the support form of A_cl F ⊕ W ⊆ F over
    /// the coordinate directions and `extra`.
    pub fn verify(&self, extra: &[DVector<T>], tol: T) -> Result<()> {
        let n = self.a_cl.nrows();
        let mut p = DMatrix::identity(n, n);
        for _ in 0..self.terms {
            p = &p * &self.a_cl;
        }
        let aw = abs_mul(&p, &self.w);
        for i in 0..n {
            if aw[i] > self.epsilon * self.w[i] + tol {
                return Err(Error::GainDesign(format!(
                    "A^N W not inside eps W on coordinate {i}"
                )));
            }
        }
        let mut dirs: Vec<DVector<T>> = (0..n)
            .flat_map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = T::one();
                [e.clone(), -e]
            })
            .collect();
        dirs.extend(extra.iter().cloned());
        for d in &dirs {
            let lhs = self.support(&(self.a_cl.transpose() * d)) + self.support_w(d);
            let rhs = self.support(d);
            if lhs > rhs + tol {
                return Err(Error::GainDesign(format!(
                    "invariance fails: {} > {}",
                    f(lhs),
                    f(rhs)
                )));
            }
        }
        Ok(())
    }
}

/// Untightened constraint data of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSets<T> {
    pub u_set: (T, T),
    pub y_set: (T, T),
    pub u_i: Vec<(T, T)>,
    pub y_i: Vec<(T, T)>,
    pub delta_u: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margins<T> {
    pub u: T,
    pub y: T,
    pub du: T,
    pub p_i: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightenedSets<T: Scalar> {
    pub u_set: (T, T),
    pub y_set: (T, T),
    pub du_max: T,
    pub u_i: Vec<(T, T)>,
    pub p_i: Vec<(T, T)>,
    pub k: RowDVector<T>,
    pub tube: Tube<T>,
    pub margins: Margins<T>,
}

fn shrink<T: Scalar>(s: (T, T), m: T, name: &str) -> Result<(T, T)> {
    let width = s.1 - s.0;
    if c::<T>(2.0) * m >= c::<T>(0.5) * width {
        return Err(Error::OverConservative(format!(
            "{name}: margin {} on width {}",
            f(m),
            f(width)
        )));
    }
    Ok((s.0 + m, s.1 - m))
}

/// Tube and tightened sets for output mismatch bounded by `y_inf`
/// (the ξ disturbance is Δe, so its output half-width is 2·y_inf).
/// `bias` bounds the static-map error of each boiler. Margins never drop
/// below `floor`, so several configurations can share one set of bounds.
pub fn tighten<T: Scalar>(
    vel: &VelocityModel<T>,
    sets: &ConstraintSets<T>,
    maps: &[StaticMap<T>],
    y_inf: T,
    bias: &[T],
    cfg: &MpcConfig<T>,
    floor: Option<&Margins<T>>,
) -> Result<TightenedSets<T>> {
    cfg.validate()?;
    let nb = maps.len();
    if sets.u_i.len() != nb || sets.y_i.len() != nb || bias.len() != nb {
        return Err(Error::Contract(
            "per-boiler constraint data differ in length".into(),
        ));
    }
    let n = vel.n();
    let q = vel.c.transpose() * &vel.c * cfg.q_y;
    let k = lqr(&vel.a, &vel.b, &q, cfg.r_du)?;
    let a_cl = &vel.a + &vel.b * &k;
    let wy = c::<T>(2.0) * y_inf;
    let mut w = DVector::from_element(n, wy * cfg.state_floor);
    w[vel.n_x] = wy;
    let tube = compute_tube(&a_cl, &w, cfg.epsilon)?;
    let kdir = k.transpose();
    let ydir = vel.c.transpose();
    tube.verify(&[kdir.clone(), -kdir.clone()], c(1e-8))?;
    let mut m_u = tube.support(&kdir);
    let mut m_y = tube.support(&ydir);
    let mut m_p: Vec<T> = (0..nb).map(|i| maps[i].g.abs() * m_u + bias[i]).collect();
    if let Some(fl) = floor {
        m_u = max(m_u, fl.u);
        m_y = max(m_y, fl.y);
        for (m, &fm) in m_p.iter_mut().zip(&fl.p_i) {
            *m = max(*m, fm);
        }
    }
    let u_set = shrink(sets.u_set, m_u, "U")?;
    let y_set = shrink(sets.y_set, m_y, "Y")?;
    let du = shrink((-sets.delta_u, sets.delta_u), m_u, "rate")?;
    let mut u_i = Vec::with_capacity(nb);
    let mut p_i = Vec::with_capacity(nb);
    for i in 0..nb {
        u_i.push(shrink(sets.u_i[i], m_u, &format!("U_{i}"))?);
        p_i.push(shrink(sets.y_i[i], m_p[i], &format!("P_{i}"))?);
    }
    Ok(TightenedSets {
        u_set,
        y_set,
        du_max: du.1,
        u_i,
        p_i,
        k,
        tube,
        margins: Margins {
            u: m_u,
            y: m_y,
            du: m_u,
            p_i: m_p,
        },
    })
}

/// Interval of ensemble inputs ū allowed by the tightened Ū, α_i ū ∈ U_i and
/// g_i α_i ū + γ_i ∈ P_i for the active boilers.
pub fn input_interval<T: Scalar>(
    sets: &TightenedSets<T>,
    shares: &ShareSolution<T>,
    maps: &[StaticMap<T>],
) -> (T, T) {
    let (mut lo, mut hi) = sets.u_set;
    let mut cut = |a: T, b: T, scale: T| {
        if scale > T::zero() {
            lo = max(lo, a / scale);
            hi = min(hi, b / scale);
        } else if scale < T::zero() {
            lo = max(lo, b / scale);
            hi = min(hi, a / scale);
        } else if a > T::zero() || b < T::zero() {
            hi = lo - T::one();
        }
    };
    for i in 0..maps.len() {
        if !shares.delta[i] {
            continue;
        }
        let a = shares.alpha[i];
        cut(sets.u_i[i].0, sets.u_i[i].1, a);
        cut(
            sets.p_i[i].0 - maps[i].gamma,
            sets.p_i[i].1 - maps[i].gamma,
            maps[i].g * a,
        );
    }
    (lo, hi)
}

/// Scale of the first admissible increment after a share change.
pub fn rate_scale<T: Scalar>(old: &ShareSolution<T>, new: &ShareSolution<T>) -> T {
    let mut s = T::one();
    for i in 0..new.alpha.len() {
        if new.delta[i] && old.alpha[i] > T::zero() && new.alpha[i] > T::zero() {
            s = min(s, old.alpha[i] / new.alpha[i]);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution<T> {
    pub du: Vec<T>,
    pub u: Vec<T>,
    pub y_pred: Vec<T>,
    pub r_hat: T,
    pub u_applied: T,
    pub cost: T,
}

#[allow(clippy::too_many_arguments)]
pub fn solve_mpc<T: Scalar>(
    vel: &VelocityModel<T>,
    xi: &DVector<T>,
    u_prev: T,
    r: T,
    shares: &ShareSolution<T>,
    maps: &[StaticMap<T>],
    sets: &TightenedSets<T>,
    cfg: &MpcConfig<T>,
    first_scale: T,
) -> Result<MpcSolution<T>> {
    let nh = cfg.horizon;
    let nv = nh + 1;
    let ir = nh;
    let n = vel.n();
    if xi.len() != n {
        return Err(Error::Contract(
            "state size does not match the velocity model".into(),
        ));
    }
    // ξ_j = A^j ξ0 + Σ_{i<j} A^{j-1-i} B Δu_i
    let mut free = Vec::with_capacity(nh + 1);
    let mut gam: Vec<DMatrix<T>> = Vec::with_capacity(nh + 1);
    free.push(xi.clone());
    gam.push(DMatrix::zeros(n, nh));
    for j in 1..=nh {
        free.push(&vel.a * &free[j - 1]);
        let mut g = &vel.a * &gam[j - 1];
        g.set_column(j - 1, &vel.b);
        gam.push(g);
    }
    let iy = vel.n_x;
    // y_j - r̂ = M_j z + free_j
    let mut m = DMatrix::zeros(nh, nv);
    let mut yfree = DVector::zeros(nh);
    for j in 1..=nh {
        for i in 0..nh {
            m[(j - 1, i)] = gam[j][(iy, i)];
        }
        m[(j - 1, ir)] = -T::one();
        yfree[j - 1] = free[j][iy];
    }
    let two = c::<T>(2.0);
    let mut h = m.transpose() * &m * (two * cfg.q_y);
    let mut fv = m.transpose() * &yfree * (two * cfg.q_y);
    for i in 0..nh {
        h[(i, i)] += two * cfg.r_du;
    }
    h[(ir, ir)] += two * cfg.rho;
    fv[ir] -= two * cfg.rho * r;
    let h = (&h + h.transpose()) * c::<T>(0.5);

    // terminal: Δx_N = 0, y_N = r̂
    let mut e = DMatrix::zeros(n, nv);
    let mut ev = DVector::zeros(n);
    for row in 0..n {
        for i in 0..nh {
            e[(row, i)] = gam[nh][(row, i)];
        }
        ev[row] = -free[nh][row];
    }
    e[(iy, ir)] = -T::one();

    let (ulo, uhi) = input_interval(sets, shares, maps);
    let mut rows: Vec<(DVector<T>, T)> = Vec::new();
    for j in 1..=nh {
        let mut g = DVector::zeros(nv);
        for i in 0..nh {
            g[i] = gam[j][(iy, i)];
        }
        rows.push((g.clone(), sets.y_set.1 - free[j][iy]));
        rows.push((-g, free[j][iy] - sets.y_set.0));
    }
    for j in 0..nh {
        let mut g = DVector::zeros(nv);
        for i in 0..=j {
            g[i] = T::one();
        }
        rows.push((g.clone(), uhi - u_prev));
        rows.push((-g, u_prev - ulo));
    }
    for j in 0..nh {
        let bound = if j == 0 {
            sets.du_max * first_scale
        } else {
            sets.du_max
        };
        let mut g = DVector::zeros(nv);
        g[j] = T::one();
        rows.push((g.clone(), bound));
        rows.push((-g, bound));
    }
    let mut gm = DMatrix::zeros(rows.len(), nv);
    let mut hv = DVector::zeros(rows.len());
    for (k, (g, b)) in rows.into_iter().enumerate() {
        gm.set_row(k, &g.transpose());
        hv[k] = b;
    }
    let qp = QpProblem::new(h, fv).with_ineq(gm, hv).with_eq(e, ev);
    let res = solve_qp(&qp)?;
    if res.status != QpStatus::Optimal {
        return Err(Error::MpcInfeasible {
            active: res.active_set,
        });
    }
    let z = &res.x_star;
    let du: Vec<T> = (0..nh).map(|i| z[i]).collect();
    let mut u = Vec::with_capacity(nh);
    let mut acc = u_prev;
    for &d in &du {
        acc += d;
        u.push(acc);
    }
    let y_pred = (1..=nh)
        .map(|j| yfree[j - 1] + (m.row(j - 1) * z)[0] + z[ir])
        .collect();
    let rr = r;
    Ok(MpcSolution {
        u_applied: u[0],
        du,
        u,
        y_pred,
        r_hat: z[ir],
        cost: res.objective
            + cfg.rho * rr * rr
            + cfg.q_y * yfree.iter().fold(T::zero(), |s, &v| s + v * v),
    })
}

/// State hand-off after a change of activation: the ensemble state is the sum
/// of the active boilers' reference states at the current and the previous
/// slow instant; the output component is the measured total gas.
pub fn reconfigure<T: Scalar>(
    vel: &VelocityModel<T>,
    ref_now: &[DVector<T>],
    ref_prev: &[DVector<T>],
    delta: &[bool],
    y_meas: T,
    u_prev: T,
) -> Result<(DVector<T>, T)> {
    if ref_now.len() != delta.len() || ref_prev.len() != delta.len() {
        return Err(Error::Contract(
            "reference states and activations differ in length".into(),
        ));
    }
    let mut dx = DVector::zeros(vel.n_x);
    for i in 0..delta.len() {
        if delta[i] {
            dx += &ref_now[i] - &ref_prev[i];
        }
    }
    Ok((vel.state(&dx, y_meas), u_prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::SlowModel;

    fn ens() -> EnsembleModel<f64> {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, -0.35, 1.0, 0.0]);
        let b = DVector::from_vec(vec![0.3, 0.0]);
        let cm = RowDVector::from_vec(vec![1.0, 0.0]);
        let (a_t, b_t) = crate::ensemble::resample_matrices(&a, &b, 3);
        EnsembleModel {
            a_hat: a,
            b_bar: b,
            c_hat: cm,
            gamma_bar: 0.05,
            g_bar: 2.0,
            alpha: vec![1.0],
            delta: vec![true],
            slow: Some(SlowModel { a_t, b_t, nu: 3 }),
        }
    }

    #[test]
    fn velocity_equilibrium() {
        let e = ens();
        let v = build_velocity_form(&e).unwrap();
        let s = e.slow.as_ref().unwrap();
        let x = (DMatrix::identity(2, 2) - &s.a_t)
            .lu()
            .solve(&(&s.b_t * 0.7))
            .unwrap();
        let y = (&e.c_hat * &x)[0] + e.gamma_bar;
        let mut xi = v.state(&DVector::zeros(2), y);
        for _ in 0..20 {
            xi = v.step(&xi, 0.0);
        }
        assert!(xi.rows(0, 2).amax() < 1e-14);
        assert!((v.output(&xi) - y).abs() < 1e-14);
    }

    #[test]
    fn bias_is_invisible() {
        let mut e = ens();
        let v1 = build_velocity_form(&e).unwrap();
        e.gamma_bar = 3.0;
        assert_eq!(v1, build_velocity_form(&e).unwrap());
    }

    #[test]
    fn scalar_tube() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let t = compute_tube(&a, &DVector::from_element(1, 1.0), 0.01).unwrap();
        assert!(t.hull[0] >= 2.0 && t.hull[0] <= 2.03, "{}", t.hull[0]);
        t.verify(&[], 1e-8).unwrap();
        let z = compute_tube(&a, &DVector::zeros(1), 0.01).unwrap();
        assert_eq!(z.hull[0], 0.0);
        let bad = DMatrix::from_element(1, 1, 1.01);
        assert!(matches!(
            compute_tube(&bad, &DVector::from_element(1, 1.0), 0.01),
            Err(Error::GainDesign(_))
        ));
    }

    #[test]
    fn reconfigure_identity_and_removal() {
        let v = build_velocity_form(&ens()).unwrap();
        let now = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![0.5, 0.25]),
        ];
        let prev = vec![
            DVector::from_vec(vec![0.5, 1.0]),
            DVector::from_vec(vec![0.0, 0.0]),
        ];
        let (xi, u) = reconfigure(&v, &now, &prev, &[true, true], 1.5, 0.8).unwrap();
        assert_eq!(xi.as_slice(), &[1.0, 1.25, 1.5]);
        assert_eq!(u, 0.8);
        let (xi, _) = reconfigure(&v, &now, &prev, &[true, false], 1.5, 0.8).unwrap();
        assert_eq!(xi.as_slice(), &[0.5, 1.0, 1.5]);
    }
}
