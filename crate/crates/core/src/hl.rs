//! High-level share and activation problem.
//!
//! For a fixed activation pattern δ the substitution v_i = α_i ū_ss turns
//! every bilinear constraint into a linear one, leaving a convex QP in
//! (v, ū_ss). All patterns are enumerated and the cheapest is kept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::scalar::{c, f, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlConfig<T> {
    pub lambda: Vec<T>,
    pub lambda_bar: T,
    pub u_set: (T, T),
    pub y_set: (T, T),
    pub u_i: Vec<(T, T)>,
    pub y_i: Vec<(T, T)>,
    pub delta_u: T,
    pub trigger_threshold: T,
    /// Cyclic re-solve period, s.
    pub period: T,
    /// Medium-level sample time, s.
    pub t_slow: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShareSolution<T> {
    pub alpha: Vec<T>,
    pub delta: Vec<bool>,
    pub u_ss: T,
    pub cost: T,
    pub degenerate: bool,
}

/// Static map of one boiler, q_g = g q_s + γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticMap<T> {
    pub g: T,
    pub gamma: T,
}

impl<T: Scalar> HlConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.lambda.len();
        let ok_int = |s: &(T, T)| s.0 <= s.1;
        if n == 0 || self.u_i.len() != n || self.y_i.len() != n {
            return Err(Error::Config("per-boiler HL data differ in length".into()));
        }
        if !(ok_int(&self.u_set)
            && ok_int(&self.y_set)
            && self.u_i.iter().all(ok_int)
            && self.y_i.iter().all(ok_int))
        {
            return Err(Error::Config("empty HL constraint interval".into()));
        }
        if self.lambda_bar <= T::zero() || self.delta_u <= T::zero() {
            return Err(Error::Config(
                "lambda_bar and delta_u must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn should_trigger<T: Scalar>(
    demand: T,
    last_demand: T,
    k: usize,
    last_k: usize,
    cfg: &HlConfig<T>,
) -> bool {
    if (demand - last_demand).abs() >= cfg.trigger_threshold {
        return true;
    }
    let elapsed = c::<T>(k.saturating_sub(last_k) as f64) * cfg.t_slow;
    elapsed >= cfg.period
}

struct Pattern<T: Scalar> {
    qp: QpProblem<T>,
    labels: Vec<String>,
    active: Vec<usize>,
    constant: T,
}

/// Linear constraints of one pattern over x = (v_active, ū_ss).
fn build<T: Scalar>(
    demand: T,
    maps: &[StaticMap<T>],
    cfg: &HlConfig<T>,
    old: Option<&ShareSolution<T>>,
    anchor: T,
    delta: &[bool],
) -> Pattern<T> {
    let active: Vec<usize> = (0..delta.len()).filter(|&i| delta[i]).collect();
    let k = active.len();
    let n = k + 1;
    let iu = k;
    let mut rows: Vec<(Vec<T>, T, String)> = Vec::new();
    let mut push = |coef: Vec<(usize, T)>, rhs: T, label: String| {
        let mut r = vec![T::zero(); n];
        for (j, v) in coef {
            r[j] += v;
        }
        rows.push((r, rhs, label));
    };
    let gamma_sum = active.iter().fold(T::zero(), |s, &i| s + maps[i].gamma);
    push(vec![(iu, T::one())], cfg.u_set.1, "u_ss <= u_max".into());
    push(vec![(iu, -T::one())], -cfg.u_set.0, "u_ss >= u_min".into());
    let ysum: Vec<(usize, T)> = active
        .iter()
        .enumerate()
        .map(|(j, &i)| (j, maps[i].g))
        .collect();
    push(
        ysum.clone(),
        cfg.y_set.1 - gamma_sum,
        "sum q_g <= y_max".into(),
    );
    push(
        ysum.iter().map(|&(j, g)| (j, -g)).collect(),
        gamma_sum - cfg.y_set.0,
        "sum q_g >= y_min".into(),
    );
    for (j, &i) in active.iter().enumerate() {
        let m = maps[i];
        push(vec![(j, T::one())], cfg.u_i[i].1, format!("q_s,{i} <= max"));
        push(
            vec![(j, -T::one())],
            -cfg.u_i[i].0,
            format!("q_s,{i} >= min"),
        );
        push(
            vec![(j, m.g)],
            cfg.y_i[i].1 - m.gamma,
            format!("q_g,{i} <= max"),
        );
        push(
            vec![(j, -m.g)],
            m.gamma - cfg.y_i[i].0,
            format!("q_g,{i} >= min"),
        );
        push(vec![(j, -T::one())], T::zero(), format!("alpha_{i} >= 0"));
        if let Some(o) = old {
            // the anchor input stays admissible under the new shares:
            // α_i ū_a ∈ U_i and g_i α_i ū_a + γ_i ∈ Y_i, written in
            // v_i = α_i ū_ss
            let uo = anchor;
            if uo > T::zero() {
                push(
                    vec![(j, -uo), (iu, cfg.u_i[i].0)],
                    T::zero(),
                    format!("q_s,{i} at old input >= min"),
                );
                push(
                    vec![(j, uo), (iu, -cfg.u_i[i].1)],
                    T::zero(),
                    format!("q_s,{i} at old input <= max"),
                );
                push(
                    vec![(j, -m.g * uo), (iu, cfg.y_i[i].0 - m.gamma)],
                    T::zero(),
                    format!("q_g,{i} at old input >= min"),
                );
                push(
                    vec![(j, m.g * uo), (iu, m.gamma - cfg.y_i[i].1)],
                    T::zero(),
                    format!("q_g,{i} at old input <= max"),
                );
            }
            let prev = o.alpha[i] * o.u_ss;
            if o.alpha[i] > T::zero() {
                let band = o.alpha[i] * cfg.delta_u;
                push(vec![(j, T::one())], prev + band, format!("rate_{i} up"));
                push(vec![(j, -T::one())], band - prev, format!("rate_{i} down"));
            } else {
                push(vec![(j, T::one())], cfg.delta_u, format!("rate_{i} start"));
            }
        }
    }
    let m = rows.len();
    let mut g = DMatrix::zeros(m, n);
    let mut h = DVector::zeros(m);
    let mut labels = Vec::with_capacity(m);
    for (r, (coef, rhs, label)) in rows.into_iter().enumerate() {
        for j in 0..n {
            g[(r, j)] = coef[j];
        }
        h[r] = rhs;
        labels.push(label);
    }
    let mut e = DMatrix::zeros(1, n);
    for j in 0..k {
        e[(0, j)] = T::one();
    }
    e[(0, iu)] = -T::one();
    let two = c::<T>(2.0);
    let mut hm = DMatrix::zeros(n, n);
    hm[(iu, iu)] = two * cfg.lambda_bar;
    let mut fv = DVector::zeros(n);
    for (j, &i) in active.iter().enumerate() {
        fv[j] = cfg.lambda[i] * maps[i].g;
    }
    fv[iu] = -two * cfg.lambda_bar * demand;
    let constant = active
        .iter()
        .fold(T::zero(), |s, &i| s + cfg.lambda[i] * maps[i].gamma)
        + cfg.lambda_bar * demand * demand;
    Pattern {
        qp: QpProblem::new(hm, fv)
            .with_ineq(g, h)
            .with_eq(e, DVector::zeros(1)),
        labels,
        active,
        constant,
    }
}

fn better<T: Scalar>(a: (&T, &[bool]), b: (&T, &[bool])) -> bool {
    let tol = c::<T>(1e-9) * (T::one() + a.0.abs().max(b.0.abs()));
    if *a.0 < *b.0 - tol {
        return true;
    }
    if *a.0 > *b.0 + tol {
        return false;
    }
    let na = a.1.iter().filter(|&&d| d).count();
    let nb = b.1.iter().filter(|&&d| d).count();
    if na != nb {
        return na < nb;
    }
    a.1 < b.1
}

pub fn solve_shares<T: Scalar>(
    demand: T,
    maps: &[StaticMap<T>],
    cfg: &HlConfig<T>,
    old: Option<&ShareSolution<T>>,
) -> Result<ShareSolution<T>> {
    solve_shares_at(demand, maps, cfg, old, old.map(|o| o.u_ss))
}

/// As [`solve_shares`], with the input that must stay admissible under the
/// new shares given explicitly (normally the last applied ensemble input).
pub fn solve_shares_at<T: Scalar>(
    demand: T,
    maps: &[StaticMap<T>],
    cfg: &HlConfig<T>,
    old: Option<&ShareSolution<T>>,
    anchor: Option<T>,
) -> Result<ShareSolution<T>> {
    cfg.validate()?;
    let nb = maps.len();
    if nb != cfg.lambda.len() {
        return Err(Error::Contract(
            "static maps and HL config differ in length".into(),
        ));
    }
    if nb > 20 {
        return Err(Error::Contract("too many boilers for enumeration".into()));
    }
    if demand < T::zero() {
        return Err(Error::Contract("negative demand".into()));
    }
    if let Some(o) = old {
        if o.alpha.len() != nb {
            return Err(Error::Contract("old solution has the wrong size".into()));
        }
    }
    let mut best: Option<ShareSolution<T>> = None;
    let mut report = String::new();
    for mask in 1u32..(1u32 << nb) {
        let delta: Vec<bool> = (0..nb).map(|i| mask & (1 << i) != 0).collect();
        let pat = build(demand, maps, cfg, old, anchor.unwrap_or(T::zero()), &delta);
        let res = solve_qp(&pat.qp)?;
        match res.status {
            QpStatus::Optimal => {
                let x = &res.x_star;
                let k = pat.active.len();
                let u_ss = x[k];
                let cost = res.objective + pat.constant;
                let degenerate = u_ss.abs() <= T::tol();
                let mut alpha = vec![T::zero(); nb];
                for (j, &i) in pat.active.iter().enumerate() {
                    alpha[i] = if degenerate {
                        T::one() / c::<T>(k as f64)
                    } else {
                        x[j] / u_ss
                    };
                }
                let cand = ShareSolution {
                    alpha,
                    delta,
                    u_ss,
                    cost,
                    degenerate,
                };
                let take = match &best {
                    None => true,
                    Some(b) => better((&cand.cost, &cand.delta), (&b.cost, &b.delta)),
                };
                if take {
                    best = Some(cand);
                }
            }
            _ => {
                let x = &res.x_star;
                let mut first = String::from("none located");
                for i in 0..pat.qp.g.nrows() {
                    let v = pat.qp.g.row(i).dot(&x.transpose()) - pat.qp.h_ineq[i];
                    if v > c::<T>(1e-9) {
                        first = pat.labels[i].clone();
                        break;
                    }
                }
                let bits: String = delta.iter().map(|&d| if d { '1' } else { '0' }).collect();
                report.push_str(&format!("  delta = {bits}: {first}\n"));
            }
        }
    }
    best.ok_or(Error::HlInfeasible(report))
}

/// Post-hoc check of every constraint in share form. Returns the first
/// violated constraint.
pub fn check_solution<T: Scalar>(
    sol: &ShareSolution<T>,
    maps: &[StaticMap<T>],
    cfg: &HlConfig<T>,
    old: Option<&ShareSolution<T>>,
    anchor: Option<T>,
    tol: T,
) -> std::result::Result<(), String> {
    let u = sol.u_ss;
    let sum: T = sol.alpha.iter().fold(T::zero(), |s, &a| s + a);
    let fail = |ok: bool, what: String| if ok { Ok(()) } else { Err(what) };
    fail(
        (sum - T::one()).abs() <= tol,
        format!("sum alpha = {}", f(sum)),
    )?;
    fail(sol.delta.iter().any(|&d| d), "no active boiler".into())?;
    fail(
        u >= cfg.u_set.0 - tol && u <= cfg.u_set.1 + tol,
        format!("u_ss = {}", f(u)),
    )?;
    let mut ysum = T::zero();
    for i in 0..maps.len() {
        let a = sol.alpha[i];
        fail(
            a >= -tol && a <= T::one() + tol,
            format!("alpha_{i} = {}", f(a)),
        )?;
        if !sol.delta[i] {
            fail(a == T::zero(), format!("inactive boiler {i} has share"))?;
        } else {
            let v = a * u;
            let q = maps[i].g * v + maps[i].gamma;
            ysum += q;
            fail(
                v >= cfg.u_i[i].0 - tol && v <= cfg.u_i[i].1 + tol,
                format!("q_s,{i} = {}", f(v)),
            )?;
            fail(
                q >= cfg.y_i[i].0 - tol && q <= cfg.y_i[i].1 + tol,
                format!("q_g,{i} = {}", f(q)),
            )?;
        }
        if let (Some(o), true) = (old, sol.delta[i]) {
            let v = a * anchor.unwrap_or(o.u_ss);
            let q = maps[i].g * v + maps[i].gamma;
            fail(
                v >= cfg.u_i[i].0 - tol && v <= cfg.u_i[i].1 + tol,
                format!("q_s,{i} at old input = {}", f(v)),
            )?;
            fail(
                q >= cfg.y_i[i].0 - tol && q <= cfg.y_i[i].1 + tol,
                format!("q_g,{i} at old input = {}", f(q)),
            )?;
        }
        if let Some(o) = old {
            let v = a * u;
            let prev = if sol.delta[i] {
                o.alpha[i] * o.u_ss
            } else {
                T::zero()
            };
            let band = if o.alpha[i] > T::zero() {
                o.alpha[i] * cfg.delta_u
            } else {
                cfg.delta_u
            };
            fail(
                (v - prev).abs() <= band + tol,
                format!("rate_{i}: {} vs {}", f(v), f(prev)),
            )?;
        }
    }
    fail(
        ysum >= cfg.y_set.0 - tol && ysum <= cfg.y_set.1 + tol,
        format!("sum q_g = {}", f(ysum)),
    )?;
    Ok(())
}

/// Objective of a share solution.
pub fn share_cost<T: Scalar>(
    sol: &ShareSolution<T>,
    demand: T,
    maps: &[StaticMap<T>],
    cfg: &HlConfig<T>,
) -> T {
    let mut cost = cfg.lambda_bar * (sol.u_ss - demand) * (sol.u_ss - demand);
    for i in 0..maps.len() {
        if sol.delta[i] {
            cost += cfg.lambda[i] * (maps[i].g * sol.alpha[i] * sol.u_ss + maps[i].gamma);
        }
    }
    cost
}
