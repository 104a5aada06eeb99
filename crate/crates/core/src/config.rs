//! Plant defaults.

use crate::boiler::BoilerParams;
use crate::lowlevel::LoopGains;
use crate::scalar::{c, Scalar};

/// Nominal pressure set-point, bar.
pub const P_SP: f64 = 57.0;
/// Feed water at 105 °C and 57 bar, kJ/kg.
pub const H_F: f64 = 444.344;
/// Effective heating value per kg of fuel gas, kJ/kg.
pub const LAMBDA_LHV: f64 = 4200.0;
/// Effective lumped metal specific heat, kJ/(kg K).
pub const C_P: f64 = 16.5;

// V_T, m_T, eta, q_s min, q_s max, q_g min, q_g max, cost weight
const BOILERS: [[f64; 8]; 5] = [
    [1.21, 5499.0, 0.90, 0.100, 1.264, 0.1251, 0.8588, 100.0],
    [1.15, 5220.0, 0.92, 0.092, 1.160, 0.1273, 0.8435, 130.0],
    [1.28, 5830.0, 0.89, 0.089, 1.125, 0.1295, 0.8458, 120.0],
    [1.14, 5060.0, 0.95, 0.095, 1.200, 0.1253, 0.8414, 70.0],
    [1.32, 5995.0, 0.99, 0.099, 1.250, 0.1227, 0.8389, 80.0],
];

pub fn default_boilers<T: Scalar>() -> Vec<BoilerParams<T>> {
    BOILERS
        .iter()
        .map(|r| BoilerParams {
            v_t: c(r[0]),
            m_t: c(r[1]),
            c_p: c(C_P),
            eta: c(r[2]),
            lambda_lhv: c(LAMBDA_LHV),
            h_f: c(H_F),
            q_s_min: c(r[3]),
            q_s_max: c(r[4]),
            q_g_min: c(r[5]),
            q_g_max: c(r[6]),
            lambda_cost: c(r[7]),
            p_sp: c(P_SP),
        })
        .collect()
}

pub fn default_gains<T: Scalar>() -> LoopGains<T> {
    LoopGains {
        r_k_p: c(0.87),
        r_k_i: c(3.54e-4),
        c_k_p: c(0.31),
        c_k_i: c(0.1),
    }
}
