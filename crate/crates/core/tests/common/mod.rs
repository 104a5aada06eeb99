#![allow(dead_code)]

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steamnet::hl::{solve_shares, HlConfig, ShareSolution, StaticMap};
use steamnet::lowlevel::closed_loop_step;
use steamnet::mpc::{input_interval, solve_mpc};
use steamnet::qp::QpProblem;
use steamnet::scenario::{configure, design, gas_feasible_band, Configuration, Design};
use steamnet::ScenarioConfig;

pub fn default_design() -> &'static Design {
    static D: OnceLock<Design> = OnceLock::new();
    D.get_or_init(|| design(&ScenarioConfig::default()).expect("default design"))
}

// ---------------------------------------------------------------- low level

pub struct StepTrace {
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub q_g: Vec<f64>,
    pub p_sp: f64,
}

/// Steam command step on one boiler from the middle of its feasible band.
pub fn pressure_step(cfg: &ScenarioConfig, i: usize, frac: f64, seconds: f64) -> StepTrace {
    let p = &cfg.boilers[i];
    let (lo, hi) = gas_feasible_band(p).unwrap();
    let mid = 0.5 * (lo + hi);
    let target = mid + frac * (hi - lo);
    let mut cl = cfg.loop_at(i, mid).unwrap();
    let n = (seconds / cfg.timing.tau) as usize;
    let mut tr = StepTrace {
        t: vec![0.0],
        p: vec![cl.state.p],
        q_g: vec![cl.gas_command()],
        p_sp: p.p_sp,
    };
    for k in 0..n {
        let (next, _, _) = closed_loop_step(&cl, target).unwrap();
        cl = next;
        tr.t.push((k + 1) as f64 * cfg.timing.tau);
        tr.p.push(cl.state.p);
        tr.q_g.push(cl.gas_command());
    }
    tr
}

/// Time after which |p - p_sp| stays within 2% of its peak.
pub fn settling_time(tr: &StepTrace) -> f64 {
    let peak = tr.p.iter().map(|p| (p - tr.p_sp).abs()).fold(0.0, f64::max);
    let band = 0.02 * peak;
    let mut last = 0.0;
    for (t, p) in tr.t.iter().zip(&tr.p) {
        if (p - tr.p_sp).abs() > band {
            last = *t;
        }
    }
    last
}

// ---------------------------------------------------------------- QP oracle

/// Combinatorial KKT oracle: solve the equality-constrained KKT system for
/// every subset of inequalities and keep the best feasible stationary point.
pub fn qp_oracle(p: &QpProblem<f64>) -> Option<(DVector<f64>, f64)> {
    let n = p.n();
    let m = p.g.nrows();
    let me = p.e.nrows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|&i| mask & (1 << i) != 0).collect();
        let k = act.len() + me;
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for j in 0..n {
            rhs[j] = -p.f[j];
        }
        for (r, &i) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = p.g[(i, j)];
                kkt[(j, n + r)] = p.g[(i, j)];
            }
            rhs[n + r] = p.h_ineq[i];
        }
        for r in 0..me {
            let rr = act.len() + r;
            for j in 0..n {
                kkt[(n + rr, j)] = p.e[(r, j)];
                kkt[(j, n + rr)] = p.e[(r, j)];
            }
            rhs[n + rr] = p.e_eq[r];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        let feasible = (0..m).all(|i| (p.g.row(i) * &x)[0] <= p.h_ineq[i] + 1e-9)
            && (0..me).all(|i| ((p.e.row(i) * &x)[0] - p.e_eq[i]).abs() <= 1e-9);
        if !feasible {
            continue;
        }
        let obj = p.objective(&x);
        if best.as_ref().map_or(true, |b| obj < b.1) {
            best = Some((x, obj));
        }
    }
    best
}

/// Random strictly convex QP with a known feasible point.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem<f64> {
    let n = rng.gen_range(1..=8);
    let m = rng.gen_range(0..=12);
    let me = if n > 1 && rng.gen_bool(0.3) { 1 } else { 0 };
    let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let g = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let hv = &g * &x0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..0.5));
    let e = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
    let ev = &e * &x0;
    QpProblem::new(h, f).with_ineq(g, hv).with_eq(e, ev)
}

// ---------------------------------------------------------------- HL oracle

/// Every share constraint at fixed α is linear in ū_ss, so for a given share
/// vector the admissible ū_ss form an interval and the best ū_ss follows in
/// closed form. Returns (cost, ū_ss) or None.
pub fn cost_at_alpha(
    alpha: &[f64],
    delta: &[bool],
    demand: f64,
    maps: &[StaticMap<f64>],
    cfg: &HlConfig<f64>,
    old: Option<&ShareSolution<f64>>,
) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = cfg.u_set;
    let mut cut = |a: f64, b: f64, s: f64| {
        // a <= s u <= b
        if s > 0.0 {
            lo = lo.max(a / s);
            hi = hi.min(b / s);
        } else if a > 1e-15 || b < -1e-15 {
            hi = f64::NEG_INFINITY;
        }
    };
    let mut gsum = 0.0;
    let mut gam = 0.0;
    let mut lin = 0.0;
    for i in 0..maps.len() {
        if !delta[i] {
            continue;
        }
        let a = alpha[i];
        let m = maps[i];
        gsum += m.g * a;
        gam += m.gamma;
        lin += cfg.lambda[i] * (m.g * a);
        cut(cfg.u_i[i].0, cfg.u_i[i].1, a);
        cut(cfg.y_i[i].0 - m.gamma, cfg.y_i[i].1 - m.gamma, m.g * a);
        if let Some(o) = old {
            let ua = o.u_ss;
            if ua > 0.0 {
                let (v, q) = (a * ua, m.g * a * ua + m.gamma);
                if v < cfg.u_i[i].0 || v > cfg.u_i[i].1 || q < cfg.y_i[i].0 || q > cfg.y_i[i].1 {
                    return None;
                }
            }
            let prev = o.alpha[i] * o.u_ss;
            if o.alpha[i] > 0.0 {
                let band = o.alpha[i] * cfg.delta_u;
                cut(prev - band, prev + band, a);
            } else {
                cut(f64::NEG_INFINITY, cfg.delta_u, a);
            }
        }
    }
    cut(cfg.y_set.0 - gam, cfg.y_set.1 - gam, gsum);
    if lo > hi + 1e-12 {
        return None;
    }
    let base: f64 = (0..maps.len())
        .filter(|&i| delta[i])
        .map(|i| cfg.lambda[i] * maps[i].gamma)
        .sum();
    let cost = |u: f64| cfg.lambda_bar * (u - demand).powi(2) + lin * u + base;
    let u = (demand - lin / (2.0 * cfg.lambda_bar)).clamp(lo, hi.max(lo));
    Some((cost(u), u))
}

fn simplex_points(k: usize, steps: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![steps]];
    }
    let mut out = Vec::new();
    for a in 0..=steps {
        for mut rest in simplex_points(k - 1, steps - a) {
            rest.insert(0, a);
            out.push(rest);
        }
    }
    out
}

/// Exhaustive oracle: every activation pattern, shares on a simplex grid of
/// `steps` divisions, then successive local refinement around the best cell.
pub fn hl_grid_oracle(
    demand: f64,
    maps: &[StaticMap<f64>],
    cfg: &HlConfig<f64>,
    old: Option<&ShareSolution<f64>>,
    steps: usize,
) -> Option<(f64, Vec<f64>, f64)> {
    let nb = maps.len();
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for mask in 1u32..(1 << nb) {
        let delta: Vec<bool> = (0..nb).map(|i| mask & (1 << i) != 0).collect();
        let act: Vec<usize> = (0..nb).filter(|&i| delta[i]).collect();
        let k = act.len();
        let full = |w: &[f64]| {
            let mut a = vec![0.0; nb];
            for (j, &i) in act.iter().enumerate() {
                a[i] = w[j];
            }
            a
        };
        let mut local: Option<(f64, Vec<f64>, f64)> = None;
        for pt in simplex_points(k, steps) {
            let w: Vec<f64> = pt.iter().map(|&v| v as f64 / steps as f64).collect();
            if let Some((c, u)) = cost_at_alpha(&full(&w), &delta, demand, maps, cfg, old) {
                if local.as_ref().map_or(true, |b| c < b.0) {
                    local = Some((c, w, u));
                }
            }
        }
        let Some(mut cur) = local else { continue };
        // refine: perturb pairs of shares with shrinking step
        let mut h = 1.0 / steps as f64;
        while h > 1e-9 && k > 1 {
            let mut improved = true;
            while improved {
                improved = false;
                for a in 0..k {
                    for b in 0..k {
                        if a == b {
                            continue;
                        }
                        let mut w = cur.1.clone();
                        let d = h.min(w[b]);
                        if d <= 0.0 {
                            continue;
                        }
                        w[a] += d;
                        w[b] -= d;
                        if let Some((c, u)) =
                            cost_at_alpha(&full(&w), &delta, demand, maps, cfg, old)
                        {
                            if c < cur.0 - 1e-13 {
                                cur = (c, w, u);
                                improved = true;
                            }
                        }
                    }
                }
            }
            h *= 0.5;
        }
        let cand = (cur.0, full(&cur.1), cur.2);
        if best.as_ref().map_or(true, |b| cand.0 < b.0) {
            best = Some(cand);
        }
    }
    best
}

pub struct HlInstance {
    pub maps: Vec<StaticMap<f64>>,
    pub cfg: HlConfig<f64>,
    pub old: ShareSolution<f64>,
    pub demand: f64,
}

/// Random three-boiler share problem with a valid previous solution.
pub fn random_hl_instance(rng: &mut ChaCha8Rng) -> HlInstance {
    let nb = 3;
    let mut maps = Vec::new();
    let mut u_i = Vec::new();
    let mut y_i = Vec::new();
    let mut lambda = Vec::new();
    for _ in 0..nb {
        let g = rng.gen_range(0.5..0.8);
        let gamma = rng.gen_range(-0.02..0.02);
        let lo = rng.gen_range(0.08..0.25);
        let hi = rng.gen_range(1.0..1.3);
        maps.push(StaticMap { g, gamma });
        u_i.push((lo, hi));
        y_i.push((
            g * lo + gamma + rng.gen_range(0.0..0.05),
            g * hi + gamma - rng.gen_range(0.0..0.05),
        ));
        lambda.push(rng.gen_range(50.0..150.0));
    }
    let lmax = lambda.iter().cloned().fold(0.0, f64::max);
    let cfg = HlConfig {
        lambda,
        lambda_bar: rng.gen_range(1.0..1e3) * lmax,
        u_set: (0.089, 6.0),
        y_set: (0.1227, 4.22),
        u_i,
        y_i,
        delta_u: 0.5,
        trigger_threshold: 0.03,
        period: 150.0,
        t_slow: 30.0,
    };
    let d_old = rng.gen_range(0.2..3.3);
    let old = solve_shares(d_old, &maps, &cfg, None).expect("cold start is feasible");
    let demand = (d_old + rng.gen_range(-1.0..1.0)).max(0.0);
    HlInstance {
        maps,
        cfg,
        old,
        demand,
    }
}

// ---------------------------------------------------------------- MPC loop

pub struct LinearRun {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub violations: Vec<String>,
}

/// Closed loop of the MPC on the slow ensemble model itself, with an output
/// disturbance `dist(k)` added to the measured total gas.
pub fn linear_mpc_run(
    d: &Design,
    cfg: &ScenarioConfig,
    sol: &ShareSolution<f64>,
    conf: &Configuration,
    u0: f64,
    r: f64,
    steps: usize,
    mut dist: impl FnMut(usize) -> f64,
) -> LinearRun {
    let s = conf.ens.slow().unwrap();
    let n = conf.ens.n();
    let x0 = (DMatrix::identity(n, n) - &s.a_t)
        .lu()
        .solve(&(&s.b_t * u0))
        .unwrap();
    let out = |x: &DVector<f64>| (&conf.ens.c_hat * x)[0] + conf.ens.gamma_bar;
    let (mut x, mut x_prev) = (x0.clone(), x0);
    let mut u_prev = u0;
    let mut run = LinearRun {
        y: vec![],
        u: vec![],
        r_hat: vec![],
        violations: vec![],
    };
    for k in 0..steps {
        let y = out(&x) + dist(k);
        let xi = conf.vel.state(&(&x - &x_prev), y);
        let m = solve_mpc(
            &conf.vel,
            &xi,
            u_prev,
            r,
            sol,
            &d.maps,
            &conf.tight,
            &cfg.mpc,
            1.0,
        )
        .unwrap_or_else(|e| panic!("step {k}: {e}"));
        let u = m.u_applied;
        let mut chk = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v < lo - 1e-9 || v > hi + 1e-9 {
                run.violations
                    .push(format!("step {k}: {name} = {v} outside [{lo}, {hi}]"));
            }
        };
        chk("y", y, d.sets.y_set);
        chk("u", u, d.sets.u_set);
        chk("du", u - u_prev, (-d.sets.delta_u, d.sets.delta_u));
        for i in 0..d.maps.len() {
            if sol.delta[i] {
                let v = sol.alpha[i] * u;
                chk(&format!("q_s,{i}"), v, d.sets.u_i[i]);
                chk(
                    &format!("q_g,{i}"),
                    d.maps[i].g * v + d.maps[i].gamma,
                    d.sets.y_i[i],
                );
            }
        }
        run.y.push(y);
        run.u.push(u);
        run.r_hat.push(m.r_hat);
        x_prev = x.clone();
        x = &s.a_t * &x + &s.b_t * u;
        u_prev = u;
    }
    run
}

/// Largest steady output the tightened sets admit for a share solution.
pub fn max_steady_output(d: &Design, sol: &ShareSolution<f64>, conf: &Configuration) -> f64 {
    let (_, hi) = input_interval(&conf.tight, sol, &d.maps);
    (conf.ens.g_bar * hi + conf.ens.gamma_bar).min(conf.tight.y_set.1)
}

pub fn share_config(demand: f64) -> (ShareSolution<f64>, Configuration) {
    let d = default_design();
    let cfg = ScenarioConfig::default();
    let sol = solve_shares(demand, &d.maps, &d.hl, None).unwrap();
    let conf = configure(d, &cfg, &sol).unwrap();
    (sol, conf)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
