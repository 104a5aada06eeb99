mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use steamnet::hl::{should_trigger, solve_shares_at};
use steamnet::mpc::{build_velocity_form, compute_tube, input_interval, rate_scale, solve_mpc};
use steamnet::scenario::configure;
use steamnet::ScenarioConfig;

#[test]
fn velocity_form_reproduces_the_model() {
    let (sol, conf) = common::share_config(2.0);
    let s = conf.ens.slow().unwrap();
    let v = build_velocity_form(&conf.ens).unwrap();
    let mut rng = common::rng(3);
    let n = conf.ens.n();
    let mut x = DVector::from_fn(n, |_, _| rng.gen_range(-0.1..0.1));
    let mut u_prev = sol.u_ss;
    let x_prev = &s.a_t * &x + &s.b_t * u_prev;
    let out = |x: &DVector<f64>| (&conf.ens.c_hat * x)[0] + conf.ens.gamma_bar;
    let mut xi = v.state(&(&x_prev - &x), out(&x_prev));
    x = x_prev;
    for _ in 0..50 {
        let u = u_prev + rng.gen_range(-0.3..0.3);
        xi = v.step(&xi, u - u_prev);
        x = &s.a_t * &x + &s.b_t * u;
        assert!((v.output(&xi) - out(&x)).abs() <= 1e-10);
        u_prev = u;
    }
}

#[test]
fn zero_disturbance_means_zero_tube() {
    let a = DMatrix::from_element(1, 1, 0.5);
    let t = compute_tube(&a, &DVector::zeros(1), 0.01).unwrap();
    assert_eq!(t.support(&DVector::from_element(1, 1.0)), 0.0);
}

#[test]
fn margins_under_half_of_every_interval() {
    let d = common::default_design();
    let m = d.margins.as_ref().unwrap();
    let s = &d.sets;
    assert!(2.0 * m.u < 0.5 * (s.u_set.1 - s.u_set.0));
    assert!(2.0 * m.y < 0.5 * (s.y_set.1 - s.y_set.0));
    assert!(2.0 * m.du < 0.5 * 2.0 * s.delta_u);
    for i in 0..5 {
        assert!(2.0 * m.u < 0.5 * (s.u_i[i].1 - s.u_i[i].0));
        assert!(2.0 * m.p_i[i] < 0.5 * (s.y_i[i].1 - s.y_i[i].0));
    }
    let (_, conf) = common::share_config(2.0);
    let kd = conf.tight.k.transpose();
    conf.tight.tube.verify(&[kd.clone(), -kd], 1e-8).unwrap();
}

#[test]
fn at_target_nothing_moves() {
    let d = common::default_design();
    let cfg = ScenarioConfig::default();
    let (sol, conf) = common::share_config(2.0);
    let r = conf.ens.g_bar * sol.u_ss + conf.ens.gamma_bar;
    let xi = conf.vel.state(&DVector::zeros(conf.ens.n()), r);
    let m = solve_mpc(
        &conf.vel,
        &xi,
        sol.u_ss,
        r,
        &sol,
        &d.maps,
        &conf.tight,
        &cfg.mpc,
        1.0,
    )
    .unwrap();
    assert!(m.du.iter().all(|v| v.abs() <= 1e-9), "{:?}", m.du);
    assert!((m.r_hat - r).abs() <= 1e-6);
}

#[test]
fn unreachable_target_settles_on_the_largest_feasible_output() {
    let d = common::default_design();
    let cfg = ScenarioConfig::default();
    let (sol, conf) = common::share_config(2.0);
    let y_max = common::max_steady_output(d, &sol, &conf);
    let (lo, hi) = input_interval(&conf.tight, &sol, &d.maps);
    let u0 = 0.5 * (lo + hi);
    let run = common::linear_mpc_run(d, &cfg, &sol, &conf, u0, y_max + 1.0, 80, |_| 0.0);
    assert!(run.violations.is_empty(), "{:?}", run.violations);
    let du_max = conf.tight.du_max;
    assert!(hi - u0 > du_max);
    assert!(
        (run.u[0] - u0 - du_max).abs() <= 1e-7,
        "first move {} vs rate bound {du_max}",
        run.u[0] - u0
    );
    let last = *run.r_hat.last().unwrap();
    assert!((last - y_max).abs() <= 1e-6, "r_hat {last} vs {y_max}");
    assert!((run.y.last().unwrap() - y_max).abs() <= 1e-6);
}

#[test]
fn offset_free_under_bounded_disturbances() {
    let d = common::default_design();
    let cfg = ScenarioConfig::default();
    let (sol, conf) = common::share_config(2.0);
    let (lo, hi) = input_interval(&conf.tight, &sol, &d.maps);
    let (lo, hi) = (lo + 0.02 * (hi - lo), hi - 0.02 * (hi - lo));
    let w = d.y_inf;
    let mut rng = common::rng(99);
    for run_id in 0..100 {
        let u0 = rng.gen_range(lo..hi);
        // the steady input for r must stay admissible under any constant disturbance
        let slack = w / conf.ens.g_bar;
        let r = conf.ens.g_bar * rng.gen_range(lo + slack..hi - slack) + conf.ens.gamma_bar;
        let settle = rng.gen_range(5..20);
        let final_d = rng.gen_range(-w..w);
        let seq: Vec<f64> = (0..60)
            .map(|k| {
                if k < settle {
                    rng.gen_range(-w..w)
                } else {
                    final_d
                }
            })
            .collect();
        let run = common::linear_mpc_run(d, &cfg, &sol, &conf, u0, r, 60, |k| seq[k]);
        assert!(
            run.violations.is_empty(),
            "run {run_id}: {:?}",
            run.violations
        );
        for k in 40..60 {
            assert!(
                (run.y[k] - run.r_hat[k]).abs() <= 1e-3,
                "run {run_id} step {k}"
            );
        }
        assert!((run.r_hat[59] - r).abs() <= 1e-6, "run {run_id}: feasible target moved: r {r} r_hat {} u {} interval {lo} {hi} d {final_d} g {}", run.r_hat[59], run.u[59], conf.ens.g_bar);
        let mut prev = u0;
        for &u in &run.u {
            assert!((u - prev).abs() <= 0.5 + 1e-12);
            prev = u;
        }
    }
}

/// Long randomized run with share changes: the MPC state is reset as in the
/// scenario and the plant is the set of per-boiler reference models.
#[test]
fn recursively_feasible_across_share_changes() {
    let d = common::default_design();
    let cfg = ScenarioConfig::default();
    let mut rng = common::rng(5);
    let nb = d.maps.len();
    let mut demand = 1.5;
    let mut sol = solve_shares_at(demand, &d.maps, &d.hl, None, None).unwrap();
    let mut conf = configure(d, &cfg, &sol).unwrap();
    let nu = cfg.nu().unwrap();
    let mut plant: Vec<DVector<f64>> = (0..nb)
        .map(|i| d.refs[i].steady_state(sol.alpha[i] * sol.u_ss).unwrap())
        .collect();
    let mut model = plant.clone();
    let mut model_prev = plant.clone();
    let mut u_prev = sol.u_ss;
    let mut r = conf.ens.g_bar * sol.u_ss + conf.ens.gamma_bar;
    let (mut last_d, mut last_k) = (demand, 0);
    let mut scale = 1.0;
    let mut changes = 0;
    for k in 0..1000 {
        if k % 40 == 0 && k > 0 {
            demand = rng.gen_range(0.3..4.0);
        }
        if k > 0 && should_trigger(demand, last_d, k, last_k, &d.hl) {
            let new = solve_shares_at(demand, &d.maps, &d.hl, Some(&sol), Some(u_prev)).unwrap();
            last_d = demand;
            last_k = k;
            if new.delta != sol.delta
                || new
                    .alpha
                    .iter()
                    .zip(&sol.alpha)
                    .any(|(a, b)| (a - b).abs() > 1e-9)
                || (new.u_ss - sol.u_ss).abs() > 1e-9
            {
                changes += 1;
                for i in 0..nb {
                    if new.delta[i] {
                        let x = d.refs[i].steady_state(new.alpha[i] * u_prev).unwrap();
                        if !sol.delta[i] {
                            plant[i] = x.clone();
                        }
                        model[i] = x.clone();
                        model_prev[i] = x;
                    }
                }
                scale = rate_scale(&sol, &new);
                sol = new;
                conf = configure(d, &cfg, &sol).unwrap();
                r = conf.ens.g_bar * sol.u_ss + conf.ens.gamma_bar;
            }
        }
        let y: f64 = (0..nb)
            .filter(|&i| sol.delta[i])
            .map(|i| d.refs[i].output(&plant[i]))
            .sum();
        let mut dx = DVector::zeros(conf.ens.n());
        for i in (0..nb).filter(|&i| sol.delta[i]) {
            dx += &model[i] - &model_prev[i];
        }
        let xi = conf.vel.state(&dx, y);
        let m = solve_mpc(
            &conf.vel,
            &xi,
            u_prev,
            r,
            &sol,
            &d.maps,
            &conf.tight,
            &cfg.mpc,
            scale,
        )
        .unwrap_or_else(|e| panic!("step {k}: {e}"));
        scale = 1.0;
        assert!((m.u_applied - u_prev).abs() <= 0.5 + 1e-12);
        model_prev = model.clone();
        for i in (0..nb).filter(|&i| sol.delta[i]) {
            for _ in 0..nu {
                plant[i] = d.refs[i].step(&plant[i], sol.alpha[i] * m.u_applied);
                model[i] = d.refs[i].step(&model[i], sol.alpha[i] * m.u_applied);
            }
        }
        u_prev = m.u_applied;
    }
    assert!(changes > 5, "only {changes} share changes exercised");
}
