//! Droop-controlled grid-forming source behind a reactance with a
//! magnitude-clamp current limit. Per unit on the device rating.

#[allow(unused_imports)]
use num_traits::Float;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

type C64 = Complex64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GfmParams {
    pub id: alloc::string::String,
    pub bus: alloc::string::String,
    pub mva: f64,
    /// Active power set point in MW; reactive set point is zero.
    pub p_mw: f64,
    pub mp: f64,
    pub mq: f64,
    pub t_f: f64,
    pub x_s: f64,
    pub i_max: f64,
}

impl Default for GfmParams {
    fn default() -> Self {
        Self {
            id: "gfm1".into(),
            bus: alloc::string::String::new(),
            mva: 100.0,
            p_mw: 0.0,
            mp: 0.02,
            mq: 0.05,
            t_f: 0.05,
            x_s: 0.15,
            i_max: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfmState {
    pub theta: f64,
    pub p_filt: f64,
    pub q_filt: f64,
    pub v_set: f64,
    pub p_set: f64,
    pub q_set: f64,
}

pub const E_MIN: f64 = 0.5;
pub const E_MAX: f64 = 1.5;

pub fn e_mag(state: &GfmState, params: &GfmParams) -> f64 {
    (state.v_set + params.mq * (state.q_set - state.q_filt)).clamp(E_MIN, E_MAX)
}

pub fn internal_voltage(state: &GfmState, params: &GfmParams) -> C64 {
    C64::from_polar(e_mag(state, params), state.theta)
}

/// Current from the internal source into the terminal, clamped in magnitude.
pub fn gfm_current_limit(e: C64, v_terminal: C64, x_s: f64, i_max: f64) -> C64 {
    let i = (e - v_terminal) / C64::new(0.0, x_s);
    let m = i.norm();
    if m > i_max {
        i * (i_max / m)
    } else {
        i
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfmDerivatives {
    pub d_theta: f64,
    pub d_p_filt: f64,
    pub d_q_filt: f64,
    pub e_mag: f64,
    pub p: f64,
    pub q: f64,
}

pub fn gfm_derivatives(state: &GfmState, params: &GfmParams, v_terminal: C64, w_base: f64) -> GfmDerivatives {
    let e = e_mag(state, params);
    let i = gfm_current_limit(C64::from_polar(e, state.theta), v_terminal, params.x_s, params.i_max);
    let s = v_terminal * i.conj();
    GfmDerivatives {
        d_theta: w_base * params.mp * (state.p_set - state.p_filt),
        d_p_filt: (s.re - state.p_filt) / params.t_f,
        d_q_filt: (s.im - state.q_filt) / params.t_f,
        e_mag: e,
        p: s.re,
        q: s.im,
    }
}

/// Back-solves the droop set points so the device sits at output `s` for
/// terminal voltage `v`.
pub fn init_gfm(v: C64, s: C64, params: &GfmParams) -> GfmState {
    let i = (s / v).conj();
    let e = v + C64::new(0.0, params.x_s) * i;
    GfmState { theta: e.arg(), p_filt: s.re, q_filt: s.im, v_set: e.norm(), p_set: s.re, q_set: s.im }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WB: f64 = 100.0 * core::f64::consts::PI;

    #[test]
    fn droop_equilibrium() {
        let p = GfmParams::default();
        let st = GfmState { theta: 0.1, p_filt: 0.3, q_filt: 0.0, v_set: 1.02, p_set: 0.3, q_set: 0.0 };
        let d = gfm_derivatives(&st, &p, C64::from_polar(1.0, 0.0), WB);
        assert_eq!(d.d_theta, 0.0);
        assert_eq!(d.e_mag, 1.02);
    }

    #[test]
    fn angle_rate_from_power_error() {
        let p = GfmParams::default();
        let st = GfmState { theta: 0.0, p_filt: 0.2, q_filt: 0.0, v_set: 1.0, p_set: 0.3, q_set: 0.0 };
        let d = gfm_derivatives(&st, &p, C64::from_polar(1.0, 0.0), WB);
        assert!((d.d_theta - 0.002 * WB).abs() < 1e-12);
    }

    #[test]
    fn zero_difference_zero_power() {
        let p = GfmParams::default();
        let st = GfmState { theta: 0.3, p_filt: 0.0, q_filt: 0.0, v_set: 1.05, p_set: 0.0, q_set: 0.0 };
        let d = gfm_derivatives(&st, &p, C64::from_polar(1.05, 0.3), WB);
        assert!(d.p.abs() < 1e-15 && d.q.abs() < 1e-15);
    }

    #[test]
    fn clamp_behaviour() {
        let v = C64::from_polar(1.0, 0.0);
        let below = gfm_current_limit(C64::from_polar(1.05, 0.05), v, 0.15, 1.2);
        assert_eq!(below, (C64::from_polar(1.05, 0.05) - v) / C64::new(0.0, 0.15));
        let e = v + C64::new(0.0, 0.15) * C64::from_polar(2.4, 0.3);
        let clamped = gfm_current_limit(e, v, 0.15, 1.2);
        assert!((clamped.norm() - 1.2).abs() < 1e-12);
        assert!((clamped.arg() - 0.3).abs() < 1e-12);
        assert_eq!(gfm_current_limit(v, v, 0.15, 1.2), C64::new(0.0, 0.0));
    }

    #[test]
    fn init_sits_on_set_points() {
        let p = GfmParams::default();
        let v = C64::from_polar(0.99, 0.2);
        let st = init_gfm(v, C64::new(0.4, -0.1), &p);
        let d = gfm_derivatives(&st, &p, v, WB);
        assert!((d.p - 0.4).abs() < 1e-12 && (d.q + 0.1).abs() < 1e-12);
        assert_eq!(d.e_mag, st.v_set);
        assert!(d.d_theta.abs() < 1e-12 && d.d_p_filt.abs() < 1e-9 && d.d_q_filt.abs() < 1e-9);
    }
}
