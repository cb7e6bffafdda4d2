//! Grid-following inverter: SRF-PLL, first-order inner current loop and a
//! local PI voltage regulator with constant active-power command.
//!
//! Currents are per unit on the inverter rating. Positive `iq` injects
//! reactive power: the network current is `(ip - j iq) e^{j x2}`.

#[allow(unused_imports)]
use num_traits::Float;
use core::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type C64 = Complex64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GflError {
    #[error("PLL bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("PLL damping ratio must be positive, got {0}")]
    Damping(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    QPriority,
    PPriority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GflParams {
    pub id: alloc::string::String,
    pub bus: alloc::string::String,
    pub mva: f64,
    pub pll_bw_hz: f64,
    pub zeta: f64,
    pub t_g: f64,
    pub i_max: f64,
    pub kqp: f64,
    pub kqi: f64,
    pub priority: Priority,
}

impl Default for GflParams {
    fn default() -> Self {
        Self {
            id: "ibr1".into(),
            bus: alloc::string::String::new(),
            mva: 100.0,
            pll_bw_hz: 8.0,
            zeta: 0.707,
            t_g: 0.02,
            i_max: 1.1,
            kqp: 0.0,
            kqi: 20.0,
            priority: Priority::QPriority,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllState {
    /// Frequency integrator, rad/s.
    pub x1: f64,
    /// Estimated voltage phase, rad.
    pub x2: f64,
    pub kp: f64,
    pub ki: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentControlState {
    pub ip: f64,
    pub iq: f64,
    pub ip_cmd: f64,
    pub iq_cmd: f64,
    pub t_g: f64,
    pub i_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterControlState {
    pub x_q: f64,
    pub v_ref: f64,
    pub kqp: f64,
    pub kqi: f64,
    pub priority: Priority,
}

pub fn pll_gains_from_bandwidth(bw_hz: f64, zeta: f64) -> Result<(f64, f64), GflError> {
    if !(bw_hz > 0.0) {
        return Err(GflError::Bandwidth(bw_hz));
    }
    if !(zeta > 0.0) {
        return Err(GflError::Damping(zeta));
    }
    let wn = 2.0 * PI * bw_hz;
    Ok((2.0 * zeta * wn, wn * wn))
}

/// Phase error, deliberately not normalized by |V|.
pub fn pll_error(x2: f64, v_terminal: C64) -> f64 {
    (v_terminal * C64::from_polar(1.0, -x2)).im
}

/// d/dt of (x1, x2).
pub fn pll_derivatives(pll: &PllState, v_terminal: C64) -> (f64, f64) {
    let e = pll_error(pll.x2, v_terminal);
    (pll.ki * e, pll.kp * e + pll.x1)
}

/// d/dt of (ip, iq).
pub fn current_control_derivatives(cc: &CurrentControlState) -> (f64, f64) {
    ((cc.ip_cmd - cc.ip) / cc.t_g, (cc.iq_cmd - cc.iq) / cc.t_g)
}

/// Network current in the inverter's per unit.
pub fn injection(ip: f64, iq: f64, x2: f64) -> C64 {
    C64::new(ip, -iq) * C64::from_polar(1.0, x2)
}

/// Current limit allocation. Returns (ip_cmd, iq_cmd, iq_saturated).
pub fn allocate(ip_raw: f64, iq_raw: f64, i_max: f64, priority: Priority) -> (f64, f64, bool) {
    match priority {
        Priority::QPriority => {
            let iq = iq_raw.clamp(-i_max, i_max);
            let room = (i_max * i_max - iq * iq).max(0.0).sqrt();
            (ip_raw.clamp(-room, room), iq, iq != iq_raw)
        }
        Priority::PPriority => {
            let ip = ip_raw.clamp(-i_max, i_max);
            let room = (i_max * i_max - ip * ip).max(0.0).sqrt();
            let iq = iq_raw.clamp(-room, room);
            (ip, iq, iq != iq_raw)
        }
    }
}

/// Current commands for the present integrator value.
pub fn outer_control_commands(oc: &OuterControlState, v_meas: f64, p_ref: f64, i_max: f64) -> (f64, f64, bool) {
    let iq_raw = oc.kqp * (oc.v_ref - v_meas) + oc.x_q;
    let ip_raw = p_ref / v_meas.max(0.1);
    allocate(ip_raw, iq_raw, i_max, oc.priority)
}

/// Integrator rate with anti-windup: frozen while the command is clamped
/// and the error pushes further into the limit.
pub fn outer_integrator_rate(oc: &OuterControlState, v_meas: f64, iq_saturated: bool, iq_cmd: f64) -> f64 {
    let rate = oc.kqi * (oc.v_ref - v_meas);
    if iq_saturated && rate * iq_cmd > 0.0 {
        0.0
    } else {
        rate
    }
}

/// One explicit step of the outer loop. Returns the advanced state and the
/// commands evaluated before the step.
pub fn outer_control_step(oc: &OuterControlState, v_meas: f64, dt: f64, p_ref: f64, i_max: f64) -> (OuterControlState, f64, f64) {
    let (ip_cmd, iq_cmd, sat) = outer_control_commands(oc, v_meas, p_ref, i_max);
    let mut next = *oc;
    next.x_q += dt * outer_integrator_rate(oc, v_meas, sat, iq_cmd);
    (next, ip_cmd, iq_cmd)
}

/// Back-solves PLL, current and outer-loop states for terminal voltage `v`
/// and output `s` (inverter per unit). Returns states plus the active-power
/// reference.
pub fn init_gfl(v: C64, s: C64, params: &GflParams) -> Result<(PllState, CurrentControlState, OuterControlState, f64), GflError> {
    let (kp, ki) = pll_gains_from_bandwidth(params.pll_bw_hz, params.zeta)?;
    let theta = v.arg();
    let i_net = (s / v).conj();
    let idq = i_net * C64::from_polar(1.0, -theta);
    let ip = idq.re;
    let iq = -idq.im;
    let vm = v.norm();
    let pll = PllState { x1: 0.0, x2: theta, kp, ki };
    let cc = CurrentControlState { ip, iq, ip_cmd: ip, iq_cmd: iq, t_g: params.t_g, i_max: params.i_max };
    let oc = OuterControlState { x_q: iq, v_ref: vm, kqp: params.kqp, kqi: params.kqi, priority: params.priority };
    Ok((pll, cc, oc, ip * vm.max(0.1)))
}
