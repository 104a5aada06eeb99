//! Saturated water/steam properties on the liquid-vapour line.
//!
//! Units used throughout the crate: pressure in bar, density in kg/m³,
//! specific enthalpy in kJ/kg, temperature in K, time in s. Heat flows are
//! therefore in kW and one m³·bar equals 100 kJ.

use crate::error::{Error, Result};
use crate::scalar::{c, f, Scalar};

pub const P_MIN: f64 = 10.0;
pub const P_MAX: f64 = 100.0;

const P_MID: f64 = 55.0;
const P_HALF: f64 = 45.0;

// Degree-5 least-squares fits in x = (p - 55)/45 to IAPWS-IF97 saturation
// data sampled every 0.25 bar over [10, 100] bar. Constant term first.
const RHO_W: [f64; 6] = [
    767.6058203364774,
    -87.33574647829344,
    11.542268666666402,
    -5.572318704104907,
    8.20021419209812,
    -6.261732198183761,
];
const RHO_S: [f64; 6] = [
    28.05585787047258,
    24.59750438702805,
    2.2633321471308383,
    0.4761566046246154,
    -0.017081309117430193,
    0.07829503969631764,
];
const H_W: [f64; 6] = [
    1184.4344151310354,
    267.61793429873273,
    -56.09418710614083,
    21.908433521623685,
    -40.832219997806405,
    32.044994716846105,
];
const H_S: [f64; 6] = [
    2789.536360988894,
    -43.04805622201141,
    -22.71702492013459,
    5.172539608061922,
    -14.686178044234184,
    11.662948803447422,
];
const T_S: [f64; 6] = [
    543.0004182061208,
    52.656630979222854,
    -14.16145266004495,
    5.046600831285966,
    -9.715308617726526,
    7.610651355101156,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationPoint<T> {
    pub p: T,
    pub rho_w: T,
    pub rho_s: T,
    pub h_w: T,
    pub h_s: T,
    pub t_s: T,
    pub d_rho_w_dp: T,
    pub d_rho_s_dp: T,
    pub d_h_w_dp: T,
    pub d_h_s_dp: T,
    pub d_t_s_dp: T,
}

/// Value and x-derivative of a polynomial by Horner's rule.
fn horner<T: Scalar>(coef: &[f64; 6], x: T) -> (T, T) {
    let mut v = T::zero();
    let mut d = T::zero();
    for &a in coef.iter().rev() {
        d = d * x + v;
        v = v * x + c::<T>(a);
    }
    (v, d)
}

pub fn saturation_properties<T: Scalar>(p: T) -> Result<SaturationPoint<T>> {
    let pf = f(p);
    if !(P_MIN..=P_MAX).contains(&pf) {
        return Err(Error::PressureRange {
            p: pf,
            lo: P_MIN,
            hi: P_MAX,
        });
    }
    let half = c::<T>(P_HALF);
    let x = (p - c::<T>(P_MID)) / half;
    let (rho_w, drw) = horner(&RHO_W, x);
    let (rho_s, drs) = horner(&RHO_S, x);
    let (h_w, dhw) = horner(&H_W, x);
    let (h_s, dhs) = horner(&H_S, x);
    let (t_s, dts) = horner(&T_S, x);
    Ok(SaturationPoint {
        p,
        rho_w,
        rho_s,
        h_w,
        h_s,
        t_s,
        d_rho_w_dp: drw / half,
        d_rho_s_dp: drs / half,
        d_h_w_dp: dhw / half,
        d_h_s_dp: dhs / half,
        d_t_s_dp: dts / half,
    })
}
