//! Lumped once-through boiler: pressure and liquid volume dynamics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, f, Scalar};
use crate::steam::{saturation_properties, SaturationPoint};

/// kJ per m³·bar.
const KJ_PER_M3_BAR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoilerParams<T> {
    pub v_t: T,
    pub m_t: T,
    pub c_p: T,
    pub eta: T,
    pub lambda_lhv: T,
    pub h_f: T,
    pub q_s_min: T,
    pub q_s_max: T,
    pub q_g_min: T,
    pub q_g_max: T,
    pub lambda_cost: T,
    pub p_sp: T,
}

impl<T: Scalar> BoilerParams<T> {
    pub fn validate(&self) -> Result<()> {
        let z = T::zero();
        let ok = self.v_t > z
            && self.m_t > z
            && self.c_p > z
            && self.eta > z
            && self.eta <= T::one()
            && self.q_s_min > z
            && self.q_s_min < self.q_s_max
            && self.q_g_min > z
            && self.q_g_min < self.q_g_max
            && self.lambda_lhv > z;
        if ok {
            Ok(())
        } else {
            Err(Error::Params(format!("{:?}", self)))
        }
    }

    /// Gas flow that holds the energy balance at pressure `p` for steam draw `q_s`
    /// and feed flow `q_f`.
    pub fn balance_gas(&self, p: T, q_s: T, q_f: T) -> Result<T> {
        let s = saturation_properties(p)?;
        Ok((q_s * (s.h_s - s.h_w) - q_f * (self.h_f - s.h_w)) / (self.eta * self.lambda_lhv))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoilerState<T> {
    pub p: T,
    pub v_w: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoilerInputs<T> {
    pub q_g: T,
    pub q_f: T,
    pub q_s: T,
}

fn check_state<T: Scalar>(s: &BoilerState<T>, params: &BoilerParams<T>) -> Result<()> {
    let finite = f(s.p).is_finite() && f(s.v_w).is_finite();
    if finite && s.p > T::zero() && s.v_w >= T::zero() && s.v_w <= params.v_t {
        Ok(())
    } else {
        Err(Error::Integration {
            p: f(s.p),
            v_w: f(s.v_w),
        })
    }
}

/// Denominator of the pressure dynamics, kJ/bar.
pub fn phi<T: Scalar>(
    state: &BoilerState<T>,
    params: &BoilerParams<T>,
    s: &SaturationPoint<T>,
) -> Result<T> {
    let v_w = state.v_w;
    let v_s = params.v_t - v_w;
    let coupling = (s.d_rho_w_dp * v_w + s.d_rho_s_dp * v_s) * (s.rho_w * s.h_w - s.rho_s * s.h_s)
        / (s.rho_w - s.rho_s);
    let value = v_s * (s.h_s * s.d_rho_s_dp + s.rho_s * s.d_h_s_dp)
        + v_w * (s.h_w * s.d_rho_w_dp + s.rho_w * s.d_h_w_dp)
        + params.v_t * c::<T>(KJ_PER_M3_BAR)
        + params.m_t * params.c_p * s.d_t_s_dp
        - coupling;
    if value > T::zero() {
        Ok(value)
    } else {
        Err(Error::NonPositivePhi {
            phi: f(value),
            p: f(state.p),
            v_w: f(v_w),
        })
    }
}

/// (dp/dt [bar/s], dV_w/dt [m³/s]).
pub fn derivatives<T: Scalar>(
    state: &BoilerState<T>,
    inputs: &BoilerInputs<T>,
    params: &BoilerParams<T>,
) -> Result<(T, T)> {
    let s = saturation_properties(state.p)?;
    let ph = phi(state, params, &s)?;
    let num = params.eta * params.lambda_lhv * inputs.q_g + inputs.q_f * (params.h_f - s.h_w)
        - inputs.q_s * (s.h_s - s.h_w);
    let dp = num / ph;
    let v_s = params.v_t - state.v_w;
    let dv = (s.d_rho_w_dp * state.v_w + s.d_rho_s_dp * v_s) / (s.rho_w - s.rho_s) * dp;
    Ok((dp, dv))
}

/// One classical RK4 step with the inputs held over `dt`.
pub fn step<T: Scalar>(
    state: &BoilerState<T>,
    inputs: &BoilerInputs<T>,
    params: &BoilerParams<T>,
    dt: T,
) -> Result<BoilerState<T>> {
    if dt <= T::zero() {
        return Err(Error::Contract(format!("dt must be positive, got {dt}")));
    }
    let two = c::<T>(2.0);
    let half = dt / two;
    let at = |s: &BoilerState<T>, k: (T, T), h: T| BoilerState {
        p: s.p + h * k.0,
        v_w: s.v_w + h * k.1,
    };
    let k1 = derivatives(state, inputs, params)?;
    let k2 = derivatives(&at(state, k1, half), inputs, params)?;
    let k3 = derivatives(&at(state, k2, half), inputs, params)?;
    let k4 = derivatives(&at(state, k3, dt), inputs, params)?;
    let six = c::<T>(6.0);
    let next = BoilerState {
        p: state.p + dt / six * (k1.0 + two * k2.0 + two * k3.0 + k4.0),
        v_w: state.v_w + dt / six * (k1.1 + two * k2.1 + two * k3.1 + k4.1),
    };
    check_state(&next, params)?;
    Ok(next)
}
