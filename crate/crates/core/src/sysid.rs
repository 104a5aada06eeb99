//! Transfer function plus constant identification and its canonical
//! state-space realization.
//!
//! The model is
//! `y(k) - γ = -Σ f_j (y(k-j) - γ) + Σ b_j u(k - n_k - j + 1)`.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::scalar::{c, f, Scalar};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArxModel<T: Scalar> {
    pub f: Vec<T>,
    pub b: Vec<T>,
    pub gamma: T,
    pub n_k: usize,
    pub tau: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub c: RowDVector<T>,
    pub gamma: T,
    pub n_f: usize,
    pub n_b: usize,
}

impl<T: Scalar> ArxModel<T> {
    pub fn n_f(&self) -> usize {
        self.f.len()
    }

    pub fn n_b(&self) -> usize {
        self.b.len()
    }

    fn start(&self) -> usize {
        self.n_f().max(self.n_b() + self.n_k - 1)
    }

    /// Companion matrix of the denominator.
    pub fn poles_matrix(&self) -> DMatrix<T> {
        let n = self.n_f();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            m[(0, j)] = -self.f[j];
        }
        for r in 1..n {
            m[(r, r - 1)] = T::one();
        }
        m
    }

    pub fn check_stable(&self) -> Result<()> {
        let rho = spectral_radius(&self.poles_matrix());
        if rho < T::one() {
            Ok(())
        } else {
            Err(Error::Unstable(f(rho)))
        }
    }

    pub fn dc_gain(&self) -> T {
        let den = T::one() + self.f.iter().fold(T::zero(), |s, &v| s + v);
        self.b.iter().fold(T::zero(), |s, &v| s + v) / den
    }

    /// Free-run simulation; the first samples of `y_init` seed the history.
    pub fn simulate(&self, u: &[T], y_init: &[T]) -> Vec<T> {
        let st = self.start();
        let mut y = vec![self.gamma; u.len()];
        for t in 0..st.min(u.len()) {
            y[t] = y_init.get(t).copied().unwrap_or(self.gamma);
        }
        for t in st..u.len() {
            let mut v = self.gamma;
            for (j, &fj) in self.f.iter().enumerate() {
                v -= fj * (y[t - 1 - j] - self.gamma);
            }
            for (j, &bj) in self.b.iter().enumerate() {
                v += bj * u[t - self.n_k - j];
            }
            y[t] = v;
        }
        y
    }
}

/// Normalized simulation fit in percent, 100 (1 - |y - ŷ| / |y - mean y|).
pub fn fit_percent<T: Scalar>(y: &[T], y_hat: &[T]) -> T {
    let n = c::<T>(y.len() as f64);
    let mean = y.iter().fold(T::zero(), |s, &v| s + v) / n;
    let mut e = T::zero();
    let mut d = T::zero();
    for (&a, &b) in y.iter().zip(y_hat) {
        e += (a - b) * (a - b);
        d += (a - mean) * (a - mean);
    }
    c::<T>(100.0) * (T::one() - (e / d).sqrt())
}

pub fn fit<T: Scalar>(u: &[T], y: &[T], n_f: usize, n_b: usize, n_k: usize) -> Result<ArxModel<T>> {
    if n_f < 1 || n_b < 1 || n_k < 1 {
        return Err(Error::Contract(
            "orders and delay must be at least 1".into(),
        ));
    }
    if u.len() != y.len() || u.len() < 10 * (n_f + n_b) {
        return Err(Error::Identifiability(format!(
            "need equal-length data of at least {} samples, got u: {}, y: {}",
            10 * (n_f + n_b),
            u.len(),
            y.len()
        )));
    }
    let mut levels: Vec<f64> = u.iter().map(|&v| f(v)).collect();
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    if levels.len() < n_f + n_b + 1 {
        return Err(Error::Identifiability(format!(
            "input has {} distinct levels, need at least {}",
            levels.len(),
            n_f + n_b + 1
        )));
    }
    let st = n_f.max(n_b + n_k - 1);
    let rows = u.len() - st;
    let cols = n_f + n_b + 1;
    let mut phi = DMatrix::<T>::zeros(rows, cols);
    let mut rhs = DVector::<T>::zeros(rows);
    for (r, t) in (st..u.len()).enumerate() {
        for j in 0..n_f {
            phi[(r, j)] = -y[t - 1 - j];
        }
        for j in 0..n_b {
            phi[(r, n_f + j)] = u[t - n_k - j];
        }
        phi[(r, cols - 1)] = T::one();
        rhs[r] = y[t];
    }
    // column scaling keeps the rank test meaningful across units
    let mut scale = DVector::<T>::zeros(cols);
    for j in 0..cols {
        let nrm = phi.column(j).norm();
        scale[j] = if nrm > T::zero() { nrm } else { T::one() };
        let s = scale[j];
        phi.column_mut(j).unscale_mut(s);
    }
    let svd = phi.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= smax * c::<T>(1e3) * T::default_epsilon() * c::<T>(cols as f64) || smax == T::zero()
    {
        return Err(Error::Identifiability(format!(
            "regressor rank deficient (singular values {} .. {})",
            f(smin),
            f(smax)
        )));
    }
    let theta = svd
        .solve(&rhs, T::zero())
        .map_err(|e| Error::Identifiability(e.to_string()))?;
    let theta = theta.component_div(&scale);
    let fv: Vec<T> = (0..n_f).map(|j| theta[j]).collect();
    let bv: Vec<T> = (0..n_b).map(|j| theta[n_f + j]).collect();
    let den = T::one() + fv.iter().fold(T::zero(), |s, &v| s + v);
    if den.abs() <= T::tol() {
        return Err(Error::Unstable(1.0));
    }
    let m = ArxModel {
        f: fv,
        b: bv,
        gamma: theta[cols - 1] / den,
        n_k,
        tau: T::one(),
    };
    m.check_stable()?;
    Ok(m)
}

/// Canonical realization with state
/// `[y(k)-γ, ..., y(k-n_f+1)-γ, u(k-1), ..., u(k-n_b+1)]` and `y = Cx + γ`.
pub fn realize<T: Scalar>(m: &ArxModel<T>) -> Result<StateSpaceModel<T>> {
    if m.n_k != 1 {
        return Err(Error::Contract(format!(
            "realization needs n_k = 1, got {}",
            m.n_k
        )));
    }
    let (nf, nb) = (m.n_f(), m.n_b());
    let n = nf + nb - 1;
    let mut a = DMatrix::zeros(n, n);
    for j in 0..nf {
        a[(0, j)] = -m.f[j];
    }
    for j in 1..nb {
        a[(0, nf + j - 1)] = m.b[j];
    }
    for r in 1..nf {
        a[(r, r - 1)] = T::one();
    }
    for r in (nf + 1)..n {
        a[(r, r - 1)] = T::one();
    }
    let mut b = DVector::zeros(n);
    b[0] = m.b[0];
    if nb >= 2 {
        b[nf] = T::one();
    }
    let mut cm = RowDVector::zeros(n);
    cm[0] = T::one();
    let ss = StateSpaceModel {
        a,
        b,
        c: cm,
        gamma: m.gamma,
        n_f: nf,
        n_b: nb,
    };
    ss.check_assumptions()?;
    Ok(ss)
}

pub fn static_gain<T: Scalar>(m: &StateSpaceModel<T>) -> Result<T> {
    let n = m.a.nrows();
    let lhs = DMatrix::<T>::identity(n, n) - &m.a;
    let x = lhs
        .lu()
        .solve(&m.b)
        .ok_or_else(|| Error::Assumption("I - A is singular".into()))?;
    Ok((&m.c * x)[0])
}

impl<T: Scalar> StateSpaceModel<T> {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Schur stability and nonzero static gain.
    pub fn check_assumptions(&self) -> Result<()> {
        let rho = spectral_radius(&self.a);
        if rho >= T::one() {
            return Err(Error::Unstable(f(rho)));
        }
        let g = static_gain(self)?;
        if g.abs() <= T::tol() {
            return Err(Error::Assumption("static gain is zero".into()));
        }
        Ok(())
    }

    pub fn steady_state(&self, u: T) -> Result<DVector<T>> {
        let n = self.n();
        let lhs = DMatrix::<T>::identity(n, n) - &self.a;
        lhs.lu()
            .solve(&(&self.b * u))
            .ok_or_else(|| Error::Assumption("I - A is singular".into()))
    }

    pub fn output(&self, x: &DVector<T>) -> T {
        (&self.c * x)[0] + self.gamma
    }

    /// Canonical state from measured output and input histories, newest
    /// first: `y_hist[0] = y(k)`, `u_hist[0] = u(k-1)`.
    pub fn state_from_history(&self, y_hist: &[T], u_hist: &[T]) -> DVector<T> {
        let mut x = DVector::zeros(self.n());
        for j in 0..self.n_f {
            x[j] = y_hist[j] - self.gamma;
        }
        for j in 0..self.n_b - 1 {
            x[self.n_f + j] = u_hist[j];
        }
        x
    }

    pub fn simulate(&self, x0: &DVector<T>, u: &[T]) -> Vec<T> {
        let mut x = x0.clone();
        let mut y = Vec::with_capacity(u.len());
        for &uk in u {
            y.push(self.output(&x));
            x = &self.a * &x + &self.b * uk;
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_first_order_recovery() {
        let mut u = Vec::new();
        let mut y: Vec<f64> = vec![0.0];
        for k in 0..200 {
            u.push(((k * 7919) % 13) as f64 * 0.1);
        }
        for k in 1..200 {
            y.push(0.5 * y[k - 1] + 0.3 * u[k - 1] + 0.1);
        }
        let m = fit(&u, &y, 1, 1, 1).unwrap();
        assert!((m.f[0] + 0.5).abs() < 1e-10);
        assert!((m.b[0] - 0.3).abs() < 1e-10);
        assert!((m.gamma - 0.2).abs() < 1e-10);
    }

    #[test]
    fn constant_input_is_not_identifiable() {
        let u = vec![0.5f64; 100];
        let y: Vec<f64> = (0..100).map(|k| 1.0 - 0.9f64.powi(k)).collect();
        assert!(matches!(
            fit(&u, &y, 3, 2, 1),
            Err(Error::Identifiability(_))
        ));
    }

    #[test]
    fn smallest_realization() {
        let m = ArxModel::<f64> {
            f: vec![-0.5],
            b: vec![0.3],
            gamma: 0.0,
            n_k: 1,
            tau: 1.0,
        };
        let s = realize(&m).unwrap();
        assert_eq!(s.a, DMatrix::from_element(1, 1, 0.5));
        assert_eq!(s.b[0], 0.3);
        assert_eq!(s.c[0], 1.0);
        assert!((static_gain(&s).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn identity_gain() {
        let s = StateSpaceModel {
            a: DMatrix::zeros(1, 1),
            b: DVector::from_element(1, 1.0),
            c: RowDVector::from_element(1, 1.0),
            gamma: 0.0,
            n_f: 1,
            n_b: 1,
        };
        assert_eq!(static_gain(&s).unwrap(), 1.0);
    }

    #[test]
    fn third_order_layout() {
        let m = ArxModel {
            f: vec![-1.2, 0.4, -0.05],
            b: vec![0.2, 0.1],
            gamma: 0.01,
            n_k: 1,
            tau: 10.0,
        };
        let s = realize(&m).unwrap();
        assert_eq!(s.n(), 4);
        assert_eq!(s.a[(0, 3)], 0.1);
        assert_eq!(s.b[3], 1.0);
        assert_eq!(s.a[(3, 3)], 0.0);
        let x = s.state_from_history(&[1.0, 2.0, 3.0], &[4.0]);
        assert_eq!(x.as_slice(), &[0.99, 1.99, 2.99, 4.0]);
    }

    #[test]
    fn unstable_fit_rejected() {
        let m = ArxModel {
            f: vec![-1.1],
            b: vec![1.0],
            gamma: 0.0,
            n_k: 1,
            tau: 1.0,
        };
        assert!(matches!(realize(&m), Err(Error::Unstable(_))));
    }
}
