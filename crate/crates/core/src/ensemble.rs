//! Gain-consistent reference models, their aggregate and the slow-timescale
//! resampling.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg::{max, spectral_radius};
use crate::scalar::{c, f, Scalar};
use crate::sysid::{realize, static_gain, ArxModel, StateSpaceModel};

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel<T: Scalar> {
    pub a_hat: DMatrix<T>,
    pub b_hat: DVector<T>,
    pub c_hat: RowDVector<T>,
    pub gamma_hat: T,
    /// Maps the source model's canonical state onto the template's.
    pub beta: DMatrix<T>,
    pub g: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlowModel<T: Scalar> {
    pub a_t: DMatrix<T>,
    pub b_t: DVector<T>,
    pub nu: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<T: Scalar> {
    pub a_hat: DMatrix<T>,
    pub b_bar: DVector<T>,
    pub c_hat: RowDVector<T>,
    pub gamma_bar: T,
    pub g_bar: T,
    pub alpha: Vec<T>,
    pub delta: Vec<bool>,
    pub slow: Option<SlowModel<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceBound<T: Scalar> {
    /// Bound on the slow-timescale ensemble state residual, ∞-norm.
    pub w_inf: T,
    /// Bound on the ensemble output mismatch against the reference models.
    pub y_inf: T,
    pub delta_u: T,
    pub per_boiler_w: Vec<T>,
    pub per_boiler_y: Vec<T>,
}

pub const SAFETY_FACTOR: f64 = 1.25;
pub const BOUND_HORIZON: usize = 200;

fn gain_tol<T: Scalar>() -> T {
    T::tol() * c::<T>(100.0)
}

pub fn dc_gain<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>, cm: &RowDVector<T>) -> Result<T> {
    let n = a.nrows();
    let x = (DMatrix::<T>::identity(n, n) - a)
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Assumption("I - A is singular".into()))?;
    Ok((cm * x)[0])
}

/// Selection of the template coordinates out of a (possibly larger)
/// canonical state.
fn selection<T: Scalar>(nf_hat: usize, nb_hat: usize, nf: usize, nb: usize) -> Result<DMatrix<T>> {
    if nf_hat > nf || nb_hat > nb {
        return Err(Error::Contract(format!(
            "template orders ({nf_hat}, {nb_hat}) exceed model orders ({nf}, {nb})"
        )));
    }
    let n_hat = nf_hat + nb_hat - 1;
    let n = nf + nb - 1;
    let mut beta = DMatrix::zeros(n_hat, n);
    for j in 0..nf_hat {
        beta[(j, j)] = T::one();
    }
    for j in 0..nb_hat - 1 {
        beta[(nf_hat + j, nf + j)] = T::one();
    }
    Ok(beta)
}

pub fn make_reference<T: Scalar>(
    model: &StateSpaceModel<T>,
    template: &ArxModel<T>,
) -> Result<ReferenceModel<T>> {
    let g = static_gain(model)?;
    let den = T::one() + template.f.iter().fold(T::zero(), |s, &v| s + v);
    if den.abs() <= T::tol() {
        return Err(Error::DegenerateTemplate);
    }
    let tail = template.b.iter().skip(1).fold(T::zero(), |s, &v| s + v);
    let mut b = template.b.clone();
    b[0] = g * den - tail;
    let t = ArxModel {
        b,
        ..template.clone()
    };
    let mut ss = realize(&t)?;
    if ss.a == model.a {
        // same denominator and numerator tail: the formula reduces to the
        // model's own leading coefficient
        ss.b[0] = model.b[0];
    }
    let beta = selection(template.n_f(), template.n_b(), model.n_f, model.n_b)?;
    let r = ReferenceModel {
        a_hat: ss.a,
        b_hat: ss.b,
        c_hat: ss.c,
        gamma_hat: model.gamma,
        beta,
        g,
    };
    let got = dc_gain(&r.a_hat, &r.b_hat, &r.c_hat)?;
    if (got - g).abs() > gain_tol::<T>() * max(T::one(), g.abs()) {
        return Err(Error::ModelQuality(format!(
            "gain consistency lost: {} vs {}",
            f(got),
            f(g)
        )));
    }
    Ok(r)
}

impl<T: Scalar> ReferenceModel<T> {
    pub fn steady_state(&self, u: T) -> Result<DVector<T>> {
        let n = self.a_hat.nrows();
        (DMatrix::<T>::identity(n, n) - &self.a_hat)
            .lu()
            .solve(&(&self.b_hat * u))
            .ok_or_else(|| Error::Assumption("I - A is singular".into()))
    }

    pub fn step(&self, x: &DVector<T>, u: T) -> DVector<T> {
        &self.a_hat * x + &self.b_hat * u
    }

    pub fn output(&self, x: &DVector<T>) -> T {
        (&self.c_hat * x)[0] + self.gamma_hat
    }
}

pub fn aggregate<T: Scalar>(
    refs: &[ReferenceModel<T>],
    alpha: &[T],
    delta: &[bool],
) -> Result<EnsembleModel<T>> {
    if refs.is_empty() || refs.len() != alpha.len() || refs.len() != delta.len() {
        return Err(Error::Contract(
            "models, shares and activations differ in length".into(),
        ));
    }
    let tol = gain_tol::<T>();
    let mut sum = T::zero();
    for i in 0..refs.len() {
        if alpha[i] < -tol || alpha[i] > T::one() + tol {
            return Err(Error::Contract(format!(
                "share {} of boiler {} outside [0, 1]",
                f(alpha[i]),
                i
            )));
        }
        if !delta[i] && alpha[i] != T::zero() {
            return Err(Error::Contract(format!(
                "inactive boiler {} has share {}",
                i,
                f(alpha[i])
            )));
        }
        sum += alpha[i];
    }
    if (sum - T::one()).abs() > tol {
        return Err(Error::Contract(format!("shares sum to {}", f(sum))));
    }
    let n = refs[0].a_hat.nrows();
    let mut b_bar = DVector::zeros(n);
    let mut gamma_bar = T::zero();
    let mut g_bar = T::zero();
    for (i, r) in refs.iter().enumerate() {
        if r.a_hat.nrows() != n {
            return Err(Error::Contract("reference models differ in order".into()));
        }
        b_bar += &r.b_hat * alpha[i];
        g_bar += r.g * alpha[i];
        if delta[i] {
            gamma_bar += r.gamma_hat;
        }
    }
    Ok(EnsembleModel {
        a_hat: refs[0].a_hat.clone(),
        b_bar,
        c_hat: refs[0].c_hat.clone(),
        gamma_bar,
        g_bar,
        alpha: alpha.to_vec(),
        delta: delta.to_vec(),
        slow: None,
    })
}

pub fn resample_matrices<T: Scalar>(
    a: &DMatrix<T>,
    b: &DVector<T>,
    nu: usize,
) -> (DMatrix<T>, DVector<T>) {
    let mut b_t = DVector::zeros(b.len());
    let mut p = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..nu {
        b_t += &p * b;
        p = &p * a;
    }
    (p, b_t)
}

pub fn resample<T: Scalar>(ens: &EnsembleModel<T>, nu: usize) -> Result<EnsembleModel<T>> {
    if nu == 0 {
        return Err(Error::Contract("nu must be at least 1".into()));
    }
    let (a_t, b_t) = resample_matrices(&ens.a_hat, &ens.b_bar, nu);
    let g = dc_gain(&a_t, &b_t, &ens.c_hat)?;
    if (g - ens.g_bar).abs() > gain_tol::<T>() * max(T::one(), ens.g_bar.abs()) {
        return Err(Error::ModelQuality(format!(
            "resampling moved the DC gain: {} vs {}",
            f(g),
            f(ens.g_bar)
        )));
    }
    Ok(EnsembleModel {
        slow: Some(SlowModel { a_t, b_t, nu }),
        ..ens.clone()
    })
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn slow(&self) -> Result<&SlowModel<T>> {
        self.slow
            .as_ref()
            .ok_or_else(|| Error::Contract("ensemble model not resampled".into()))
    }

    pub fn n(&self) -> usize {
        self.a_hat.nrows()
    }
}

struct Responses<T: Scalar> {
    residual: Vec<DVector<T>>,
    output: Vec<T>,
}

/// Slow-timescale responses to a unit input step applied from rest: the
/// one-step residual of the reference model evaluated on the actual state,
/// and the output difference between actual and reference trajectories.
fn step_responses<T: Scalar>(
    r: &ReferenceModel<T>,
    m: &StateSpaceModel<T>,
    nu: usize,
    horizon: usize,
) -> Responses<T> {
    let (at, bt) = resample_matrices(&m.a, &m.b, nu);
    let (aht, bht) = resample_matrices(&r.a_hat, &r.b_hat, nu);
    let mut x = DVector::zeros(m.n());
    let mut xh = DVector::zeros(r.a_hat.nrows());
    let mut residual = Vec::with_capacity(horizon);
    let mut output = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let xn = &at * &x + &bt;
        let xb = &r.beta * &x;
        residual.push(&r.beta * &xn - &aht * xb - &bht);
        xh = &aht * &xh + &bht;
        output.push((&m.c * &xn)[0] - (&r.c_hat * &xh)[0]);
        x = xn;
    }
    Responses { residual, output }
}

/// Worst case of Σ_j h(j) Δu(k-j) over |Δu| ≤ delta_u, attained by the
/// bang-bang pattern Δu(k-j) = delta_u sign h(j).
fn worst_case<T: Scalar>(h: &[T], delta_u: T) -> T {
    h.iter().fold(T::zero(), |s, v| s + v.abs()) * delta_u
}

/// Largest Σ α_i m_i over shares in the simplex with α_i ≤ alpha_max.
fn weighted_max<T: Scalar>(m: &[T], alpha_max: T) -> T {
    let mut v: Vec<T> = m.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut left = T::one();
    let mut acc = T::zero();
    for mi in v {
        if left <= T::zero() {
            break;
        }
        let a = if alpha_max < left { alpha_max } else { left };
        acc += a * mi;
        left -= a;
    }
    acc
}

pub fn estimate_disturbance_bound<T: Scalar>(
    refs: &[ReferenceModel<T>],
    actual: &[StateSpaceModel<T>],
    delta_u: T,
    alpha_max: T,
    nu: usize,
) -> Result<DisturbanceBound<T>> {
    if delta_u <= T::zero() {
        return Err(Error::Contract("delta_u must be positive".into()));
    }
    if refs.len() != actual.len() || refs.is_empty() {
        return Err(Error::Contract(
            "reference and actual model lists differ".into(),
        ));
    }
    let mut per_w = Vec::new();
    let mut per_y = Vec::new();
    for (i, (r, m)) in refs.iter().zip(actual).enumerate() {
        let rho = spectral_radius(&m.a);
        // horizon long enough for the slowest mode to die out
        let settle = if rho > T::zero() {
            (f(c::<T>(1e-9).ln() / rho.ln()) / nu as f64).ceil() as usize
        } else {
            1
        };
        let horizon = BOUND_HORIZON.max(settle + 1);
        let resp = step_responses(r, m, nu, horizon);
        let peak = resp.output.iter().fold(T::zero(), |a, v| max(a, v.abs()));
        let tail = resp.output[horizon - 1].abs();
        let res_tail = crate::linalg::vec_inf(&resp.residual[horizon - 1]);
        let tol = c::<T>(1e-6) * max(peak, c::<T>(1e-12));
        if tail > tol && tail > T::tol() || res_tail > T::tol() * c::<T>(1e3) {
            return Err(Error::boiler(
                i,
                Error::ModelQuality(format!("mismatch does not settle (tail {})", f(tail))),
            ));
        }
        let nres = resp.residual[0].len();
        let mut w = T::zero();
        for comp in 0..nres {
            let h: Vec<T> = resp.residual.iter().map(|v| v[comp]).collect();
            w = max(w, worst_case(&h, delta_u));
        }
        per_w.push(w);
        per_y.push(worst_case(&resp.output, delta_u));
    }
    let k = c::<T>(SAFETY_FACTOR);
    Ok(DisturbanceBound {
        w_inf: k * weighted_max(&per_w, alpha_max),
        y_inf: k * weighted_max(&per_y, alpha_max),
        delta_u,
        per_boiler_w: per_w,
        per_boiler_y: per_y,
    })
}
