//! Decentralized low-level loop: pressure regulator R on the gas valve and
//! feed-water compensator C.

use serde::{Deserialize, Serialize};

use crate::boiler::{step, BoilerInputs, BoilerParams, BoilerState};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiConfig<T> {
    pub k_p: T,
    pub k_i: T,
    pub tau: T,
    pub u_min: T,
    pub u_max: T,
    pub anti_windup: bool,
}

impl<T: Scalar> PiConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.tau > T::zero() && self.u_min < self.u_max {
            Ok(())
        } else {
            Err(Error::Params(format!("PI config {:?}", self)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoopState<T> {
    pub integrator: T,
    pub last_output: T,
}

fn sat<T: Scalar>(u: T, lo: T, hi: T) -> T {
    if u > hi {
        hi
    } else if u < lo {
        lo
    } else {
        u
    }
}

/// Forward-Euler PI with conditional integration.
pub fn pi_step<T: Scalar>(cfg: &PiConfig<T>, lp: &LoopState<T>, error: T) -> (T, LoopState<T>) {
    let mut integ = lp.integrator + cfg.k_i * cfg.tau * error;
    let raw = cfg.k_p * error + integ;
    if cfg.anti_windup
        && ((raw > cfg.u_max && error > T::zero()) || (raw < cfg.u_min && error < T::zero()))
    {
        integ = lp.integrator;
    }
    let out = sat(cfg.k_p * error + integ, cfg.u_min, cfg.u_max);
    (
        out,
        LoopState {
            integrator: integ,
            last_output: out,
        },
    )
}

/// Compensator: the PI law closed around an ideal feed actuator, q_f =
/// PI(r - q_f), solved for q_f within the sample. No plant measurement
/// enters; q_f follows r with a first-order lag and no steady offset.
pub fn compensator_step<T: Scalar>(
    cfg: &PiConfig<T>,
    lp: &LoopState<T>,
    r: T,
) -> (T, LoopState<T>) {
    let ki = cfg.k_i * cfg.tau;
    let q_f = ((cfg.k_p + ki) * r + lp.integrator) / (T::one() + cfg.k_p + ki);
    let q_f = sat(q_f, cfg.u_min, cfg.u_max);
    let integ = lp.integrator + ki * (r - q_f);
    (
        q_f,
        LoopState {
            integrator: integ,
            last_output: q_f,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoop<T> {
    pub params: BoilerParams<T>,
    pub state: BoilerState<T>,
    pub r_cfg: PiConfig<T>,
    pub c_cfg: PiConfig<T>,
    pub r: LoopState<T>,
    pub c: LoopState<T>,
    pub dt: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopGains<T> {
    pub r_k_p: T,
    pub r_k_i: T,
    pub c_k_p: T,
    pub c_k_i: T,
}

impl<T: Scalar> ClosedLoop<T> {
    /// Loop at rest at the set-point with steam draw `q_s` and feed `q_f = q_s`.
    pub fn steady(
        params: BoilerParams<T>,
        gains: &LoopGains<T>,
        tau: T,
        dt: T,
        v_w: T,
        q_s: T,
    ) -> Result<Self> {
        params.validate()?;
        let q_g = params.balance_gas(params.p_sp, q_s, q_s)?;
        let r_cfg = PiConfig {
            k_p: gains.r_k_p,
            k_i: gains.r_k_i,
            tau,
            u_min: params.q_g_min,
            u_max: params.q_g_max,
            anti_windup: true,
        };
        let c_cfg = PiConfig {
            k_p: gains.c_k_p,
            k_i: gains.c_k_i,
            tau,
            u_min: T::zero(),
            u_max: c::<T>(10.0) * params.q_s_max,
            anti_windup: true,
        };
        r_cfg.validate()?;
        c_cfg.validate()?;
        let q_g0 = sat(q_g, params.q_g_min, params.q_g_max);
        Ok(ClosedLoop {
            params,
            state: BoilerState {
                p: params.p_sp,
                v_w,
            },
            r_cfg,
            c_cfg,
            r: LoopState {
                integrator: q_g0,
                last_output: q_g0,
            },
            c: LoopState {
                integrator: q_s,
                last_output: q_s,
            },
            dt,
        })
    }

    /// Gas command R issues from the current pressure.
    pub fn gas_command(&self) -> T {
        pi_step(&self.r_cfg, &self.r, self.params.p_sp - self.state.p).0
    }

    /// Fine integration steps per control interval.
    pub fn substeps(&self) -> usize {
        let n = (crate::scalar::f(self.r_cfg.tau) / crate::scalar::f(self.dt)).round();
        (n as usize).max(1)
    }
}

/// One control interval: C sets q_f from the command, R sets q_g from the
/// pressure at the start of the interval, the plant is integrated over tau.
pub fn closed_loop_step<T: Scalar>(
    cl: &ClosedLoop<T>,
    q_s_cmd: T,
) -> Result<(ClosedLoop<T>, T, T)> {
    let (q_f, c_state) = compensator_step(&cl.c_cfg, &cl.c, q_s_cmd);
    let (q_g, r_state) = pi_step(&cl.r_cfg, &cl.r, cl.params.p_sp - cl.state.p);
    let n = cl.substeps();
    let h = cl.r_cfg.tau / c::<T>(n as f64);
    let u = BoilerInputs {
        q_g,
        q_f,
        q_s: q_s_cmd,
    };
    let mut st = cl.state;
    for _ in 0..n {
        st = step(&st, &u, &cl.params, h)?;
    }
    Ok((
        ClosedLoop {
            state: st,
            r: r_state,
            c: c_state,
            ..*cl
        },
        q_g,
        q_f,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k_p: f64, k_i: f64) -> PiConfig<f64> {
        PiConfig {
            k_p,
            k_i,
            tau: 10.0,
            u_min: -100.0,
            u_max: 100.0,
            anti_windup: true,
        }
    }

    #[test]
    fn zero_error_holds() {
        let lp = LoopState {
            integrator: 0.3,
            last_output: 0.0,
        };
        let (u, n) = pi_step(&cfg(0.87, 3.54e-4), &lp, 0.0);
        assert_eq!(u, 0.3);
        assert_eq!(n.integrator, 0.3);
        let tight = PiConfig {
            u_max: 0.2,
            ..cfg(0.87, 3.54e-4)
        };
        assert_eq!(pi_step(&tight, &lp, 0.0).0, 0.2);
    }

    #[test]
    fn proportional_only() {
        let (u, _) = pi_step(&cfg(0.87, 0.0), &LoopState::default(), 2.0);
        assert_eq!(u, 1.74);
    }

    #[test]
    fn integrator_recursion() {
        let c = cfg(0.5, 0.01);
        let mut lp = LoopState::default();
        let mut u = 0.0;
        for _ in 0..7 {
            let r = pi_step(&c, &lp, 1.5);
            u = r.0;
            lp = r.1;
        }
        assert!((u - (0.5 * 1.5 + 7.0 * 0.01 * 10.0 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn integrator_frozen_in_saturation() {
        let c = PiConfig {
            u_max: 1.0,
            ..cfg(1.0, 0.1)
        };
        let lp = LoopState {
            integrator: 0.9,
            last_output: 0.9,
        };
        let (u, n) = pi_step(&c, &lp, 1.0);
        assert_eq!(u, 1.0);
        assert_eq!(n.integrator, 0.9);
        // unwinding direction still integrates
        let (_, n) = pi_step(&c, &n, -0.05);
        assert!(n.integrator < 0.9);
    }

    #[test]
    fn compensator_tracks_without_offset() {
        let c = cfg(0.31, 0.1);
        let mut lp = LoopState {
            integrator: 0.5,
            last_output: 0.5,
        };
        let mut q = 0.0;
        for _ in 0..60 {
            let r = compensator_step(&c, &lp, 0.8);
            q = r.0;
            lp = r.1;
        }
        assert!((q - 0.8).abs() < 1e-9);
    }
}
