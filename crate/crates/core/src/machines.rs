//! Two-axis synchronous machine with a first-order exciter, governor,
//! optional stabilizer and a fixed-delay over-excitation limiter.
//!
//! Machine quantities are per unit on the machine rating; the stator has a
//! single transient reactance so the machine is an exact Norton source.

#[allow(unused_imports)]
use num_traits::Float;
use core::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type C64 = Complex64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MachineError {
    #[error("field voltage {efd:.4} outside limits [{min}, {max}] at initialization")]
    EfdOutOfRange { efd: f64, min: f64, max: f64 },
    #[error("mechanical power {pm:.4} outside [0, {p_max}] at initialization")]
    PmOutOfRange { pm: f64, p_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PssParams {
    pub gain: f64,
    pub t_washout: f64,
    pub t_lead: f64,
    pub t_lag: f64,
    pub limit: f64,
}

impl Default for PssParams {
    fn default() -> Self {
        Self { gain: 10.0, t_washout: 10.0, t_lead: 0.2, t_lag: 0.05, limit: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineParams {
    pub id: alloc::string::String,
    pub bus: alloc::string::String,
    pub mva: f64,
    pub xd: f64,
    pub xq: f64,
    /// Transient reactance, shared by both axes.
    pub x_p: f64,
    pub td0_p: f64,
    pub tq0_p: f64,
    pub h: f64,
    pub d: f64,
    pub ka: f64,
    pub ta: f64,
    pub efd_min: f64,
    pub efd_max: f64,
    pub droop_r: f64,
    pub t_gov: f64,
    pub p_max: f64,
    pub ifd_limit: f64,
    pub oel_delay: f64,
    /// Proportional gain of the field-current loop while limiting.
    pub k_oel: f64,
    pub oel_enabled: bool,
    pub pss: Option<PssParams>,
}

impl Default for MachineParams {
    fn default() -> Self {
        Self {
            id: "g1".into(),
            bus: alloc::string::String::new(),
            mva: 100.0,
            xd: 2.0,
            xq: 1.8,
            x_p: 0.3,
            td0_p: 6.0,
            tq0_p: 1.0,
            h: 4.0,
            d: 10.0,
            ka: 100.0,
            ta: 0.05,
            efd_min: 0.0,
            efd_max: 5.0,
            droop_r: 0.05,
            t_gov: 2.0,
            p_max: 1.1,
            ifd_limit: 3.0,
            oel_delay: 20.0,
            k_oel: 10.0,
            oel_enabled: true,
            pss: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineState {
    pub delta: f64,
    pub omega: f64,
    pub eq_p: f64,
    pub ed_p: f64,
    pub efd: f64,
    pub ifd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvrState {
    pub x_avr: f64,
    pub v_ref: f64,
    pub ka: f64,
    pub ta: f64,
    pub efd_limits: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GovState {
    pub x_gov: f64,
    pub droop_r: f64,
    pub p_ref: f64,
    pub t_gov: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OelStatus {
    Inactive,
    Timing,
    Limiting,
}

impl OelStatus {
    pub fn code(self) -> f64 {
        match self {
            OelStatus::Inactive => 0.0,
            OelStatus::Timing => 1.0,
            OelStatus::Limiting => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OelState {
    pub status: OelStatus,
    pub timer: f64,
    pub ifd_limit: f64,
    pub delay: f64,
}

impl OelState {
    pub fn new(ifd_limit: f64, delay: f64) -> Self {
        Self { status: OelStatus::Inactive, timer: 0.0, ifd_limit, delay }
    }
}

/// Emitted when the limiter takes over the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitEvent {
    pub ifd: f64,
    pub ifd_limit: f64,
}

/// Axis currents, electrical power and field current for a terminal voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatorQuantities {
    pub id: f64,
    pub iq: f64,
    pub pe: f64,
    pub ifd: f64,
}

fn to_dq(delta: f64) -> C64 {
    C64::from_polar(1.0, -(delta - FRAC_PI_2))
}

/// Internal transient EMF as a network phasor (machine voltage base).
pub fn transient_emf(state: &MachineState) -> C64 {
    C64::new(state.ed_p, state.eq_p) * C64::from_polar(1.0, state.delta - FRAC_PI_2)
}

pub fn stator(state: &MachineState, v_terminal: C64, params: &MachineParams) -> StatorQuantities {
    let vdq = v_terminal * to_dq(state.delta);
    let id = (state.eq_p - vdq.im) / params.x_p;
    let iq = (vdq.re - state.ed_p) / params.x_p;
    StatorQuantities {
        id,
        iq,
        pe: state.ed_p * id + state.eq_p * iq,
        ifd: state.eq_p + (params.xd - params.x_p) * id,
    }
}

/// Back-solves the machine for terminal voltage `v` and output `s`
/// (both per unit on the machine rating).
pub fn init_machine(v: C64, s: C64, params: &MachineParams) -> Result<(MachineState, AvrState, GovState), MachineError> {
    let i = (s / v).conj();
    let eq_axis = v + C64::new(0.0, params.xq) * i;
    let delta = eq_axis.arg();
    let rot = to_dq(delta);
    let vdq = v * rot;
    let idq = i * rot;
    let ed_p = vdq.re - params.x_p * idq.im;
    let eq_p = vdq.im + params.x_p * idq.re;
    let efd = eq_p + (params.xd - params.x_p) * idq.re;
    if efd < params.efd_min || efd > params.efd_max {
        return Err(MachineError::EfdOutOfRange { efd, min: params.efd_min, max: params.efd_max });
    }
    let pm = (vdq * idq.conj()).re;
    if pm < -1e-12 || pm > params.p_max {
        return Err(MachineError::PmOutOfRange { pm, p_max: params.p_max });
    }
    let state = MachineState { delta, omega: 0.0, eq_p, ed_p, efd, ifd: efd };
    let avr = AvrState {
        x_avr: efd,
        v_ref: v.norm() + efd / params.ka,
        ka: params.ka,
        ta: params.ta,
        efd_limits: (params.efd_min, params.efd_max),
    };
    let gov = GovState { x_gov: pm, droop_r: params.droop_r, p_ref: pm, t_gov: params.t_gov, p_max: params.p_max };
    Ok((state, avr, gov))
}

/// d/dt of (delta, omega, eq_p, ed_p).
pub fn machine_derivatives(state: &MachineState, v_terminal: C64, efd: f64, pm: f64, params: &MachineParams, w_base: f64) -> [f64; 4] {
    let sq = stator(state, v_terminal, params);
    [
        w_base * state.omega,
        (pm - sq.pe - params.d * state.omega) / (2.0 * params.h),
        (efd - sq.ifd) / params.td0_p,
        (-state.ed_p + (params.xq - params.x_p) * sq.iq) / params.tq0_p,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvrGovDerivatives {
    pub d_x_avr: f64,
    pub d_x_gov: f64,
    pub efd: f64,
    pub pm: f64,
}

/// Active bound of a non-windup lag. The engine holds it fixed over a step
/// so the implicit step sees a continuous right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LimitFlag {
    #[default]
    Free,
    Low,
    High,
}

impl LimitFlag {
    pub fn of(x: f64, lo: f64, hi: f64) -> Self {
        if x <= lo {
            LimitFlag::Low
        } else if x >= hi {
            LimitFlag::High
        } else {
            LimitFlag::Free
        }
    }

    fn guard(self, dx: f64) -> f64 {
        match self {
            LimitFlag::Low => dx.max(0.0),
            LimitFlag::High => dx.min(0.0),
            LimitFlag::Free => dx,
        }
    }
}

/// Exciter input; while the limiter holds the field it replaces the
/// voltage channel with a field-current regulator.
pub fn avr_input(avr: &AvrState, v_meas: f64, pss_signal: f64, oel: Option<(&OelState, f64, f64)>) -> f64 {
    match oel {
        Some((o, ifd, k)) if o.status == OelStatus::Limiting => o.ifd_limit + k * (o.ifd_limit - ifd),
        _ => avr.ka * (avr.v_ref - v_meas + pss_signal),
    }
}

pub fn avr_gov_derivatives(avr: &AvrState, gov: &GovState, state: &MachineState, v_meas: f64, pss_signal: f64) -> AvrGovDerivatives {
    avr_gov_with_input(avr, gov, state, avr_input(avr, v_meas, pss_signal, None))
}

pub fn avr_gov_with_input(avr: &AvrState, gov: &GovState, state: &MachineState, u: f64) -> AvrGovDerivatives {
    let (lo, hi) = avr.efd_limits;
    let flags = (LimitFlag::of(avr.x_avr, lo, hi), LimitFlag::of(gov.x_gov, 0.0, gov.p_max));
    avr_gov_with_flags(avr, gov, state, u, flags)
}

/// As `avr_gov_with_input` with the exciter and governor bounds given.
pub fn avr_gov_with_flags(avr: &AvrState, gov: &GovState, state: &MachineState, u: f64, flags: (LimitFlag, LimitFlag)) -> AvrGovDerivatives {
    let (lo, hi) = avr.efd_limits;
    let d_x_avr = flags.0.guard((u - avr.x_avr) / avr.ta);
    let d_x_gov = flags.1.guard((gov.p_ref - state.omega / gov.droop_r - gov.x_gov) / gov.t_gov);
    AvrGovDerivatives {
        d_x_avr,
        d_x_gov,
        efd: avr.x_avr.clamp(lo, hi),
        pm: gov.x_gov.clamp(0.0, gov.p_max),
    }
}

/// Washout plus lead-lag on speed. Returns (d x_washout, d x_leadlag, signal).
pub fn pss_derivatives(p: &PssParams, omega: f64, x_w: f64, x_l: f64) -> (f64, f64, f64) {
    let u = omega - x_w;
    let dx_w = u / p.t_washout;
    let dx_l = (u - x_l) / p.t_lag;
    let out = p.gain * (x_l + p.t_lead / p.t_lag * (u - x_l));
    (dx_w, dx_l, out.clamp(-p.limit, p.limit))
}

const TIMER_EPS: f64 = 1e-9;

pub fn oel_update(oel: &OelState, ifd: f64, dt: f64) -> (OelState, Option<LimitEvent>) {
    let mut next = *oel;
    match oel.status {
        OelStatus::Limiting => return (next, None),
        _ if ifd > oel.ifd_limit => {
            next.status = OelStatus::Timing;
            next.timer = (oel.timer + dt).min(oel.delay);
            if next.timer >= oel.delay - TIMER_EPS {
                next.status = OelStatus::Limiting;
                return (next, Some(LimitEvent { ifd, ifd_limit: oel.ifd_limit }));
            }
        }
        _ => {
            next.status = OelStatus::Inactive;
            next.timer = 0.0;
        }
    }
    (next, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> MachineParams {
        MachineParams { mva: 800.0, ..Default::default() }
    }

    fn settled(v: C64, s: C64) -> (MachineState, AvrState, GovState) {
        init_machine(v, s, &params()).unwrap()
    }

    #[test]
    fn no_load_machine() {
        let v = C64::from_polar(1.02, 0.3);
        let (st, avr, gov) = settled(v, C64::new(0.0, 0.0));
        assert!((st.delta - 0.3).abs() < 1e-12);
        assert!((st.eq_p - 1.02).abs() < 1e-12);
        assert!((st.efd - st.eq_p).abs() < 1e-12);
        assert!(st.ed_p.abs() < 1e-12);
        assert!(gov.x_gov.abs() < 1e-12);
        assert!((avr.x_avr - 1.02).abs() < 1e-12);
    }

    #[test]
    fn rated_lagging_equilibrium() {
        let p = params();
        let v = C64::from_polar(1.0, 0.2);
        let (st, avr, gov) = settled(v, C64::new(0.9, 0.4));
        let d = machine_derivatives(&st, v, st.efd, gov.x_gov, &p, 314.159);
        for x in d {
            assert!(x.abs() < 1e-10, "{d:?}");
        }
        let ag = avr_gov_derivatives(&avr, &gov, &st, v.norm(), 0.0);
        assert!(ag.d_x_avr.abs() < 1e-10 && ag.d_x_gov.abs() < 1e-10);
        let sq = stator(&st, v, &p);
        assert!((sq.pe - 0.9).abs() < 1e-12);
        let i = (transient_emf(&st) - v) / C64::new(0.0, p.x_p);
        assert!((v * i.conj() - C64::new(0.9, 0.4)).norm() < 1e-12);
    }

    #[test]
    fn efd_ceiling_violation() {
        let r = init_machine(C64::new(1.0, 0.0), C64::new(1.0, 2.5), &params());
        assert!(matches!(r, Err(MachineError::EfdOutOfRange { .. })));
    }

    #[test]
    fn speed_deviation_drives_angle() {
        let p = params();
        let v = C64::from_polar(1.0, 0.0);
        let (mut st, _, gov) = settled(v, C64::new(0.5, 0.1));
        st.omega = 0.01;
        let d = machine_derivatives(&st, v, st.efd, gov.x_gov + p.d * 0.01, &p, 100.0 * core::f64::consts::PI);
        assert!((d[0] - 0.01 * 100.0 * core::f64::consts::PI).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
    }

    #[test]
    fn avr_rate_and_ceiling() {
        let st = MachineState { delta: 0.0, omega: 0.0, eq_p: 1.0, ed_p: 0.0, efd: 2.0, ifd: 2.0 };
        let gov = GovState { x_gov: 0.5, droop_r: 0.05, p_ref: 0.5, t_gov: 2.0, p_max: 1.0 };
        let mut avr = AvrState { x_avr: 2.0, v_ref: 1.02, ka: 100.0, ta: 1.0, efd_limits: (0.0, 5.0) };
        let at_ref = avr_gov_derivatives(&avr, &gov, &st, 1.0, 0.0);
        assert!((at_ref.d_x_avr - 0.0).abs() < 1e-12);
        let dip = avr_gov_derivatives(&avr, &gov, &st, 0.95, 0.0);
        assert!((dip.d_x_avr - 5.0).abs() < 1e-12);
        avr.x_avr = 5.0;
        let top = avr_gov_derivatives(&avr, &gov, &st, 0.5, 0.0);
        assert_eq!(top.d_x_avr, 0.0);
        assert_eq!(top.efd, 5.0);
    }

    #[test]
    fn limiter_timing() {
        let dt = 0.002;
        let mut oel = OelState::new(3.0, 20.0);
        let (same, ev) = oel_update(&oel, 2.9, dt);
        assert_eq!(same, oel);
        assert!(ev.is_none());
        let steps = (20.0 / dt).round() as usize;
        for k in 1..=steps {
            let (n, ev) = oel_update(&oel, 3.3, dt);
            oel = n;
            assert_eq!(ev.is_some(), k == steps, "step {k}");
        }
        assert_eq!(oel.status, OelStatus::Limiting);
        let (n, ev) = oel_update(&oel, 1.0, dt);
        assert_eq!(n.status, OelStatus::Limiting);
        assert!(ev.is_none());
    }

    #[test]
    fn limiter_resets_on_short_excursions() {
        let dt = 0.01;
        let mut oel = OelState::new(3.0, 20.0);
        for k in 0..100_000 {
            let ifd = if (k / 1500) % 2 == 0 { 3.3 } else { 2.9 };
            let (n, ev) = oel_update(&oel, ifd, dt);
            assert!(ev.is_none());
            oel = n;
        }
        assert_ne!(oel.status, OelStatus::Limiting);
    }

    #[test]
    fn limiting_holds_field_current_at_limit() {
        let p = params();
        let oel = OelState { status: OelStatus::Limiting, timer: 20.0, ifd_limit: 3.0, delay: 20.0 };
        let avr = AvrState { x_avr: 3.0, v_ref: 1.0, ka: 100.0, ta: 0.05, efd_limits: (0.0, 5.0) };
        // at a steady state efd equals ifd, so the regulator input is only stationary at the limit
        for ifd in [2.8, 3.0, 3.2] {
            let u = avr_input(&avr, 0.9, 0.0, Some((&oel, ifd, p.k_oel)));
            let stationary = (u - ifd).abs() < 1e-12;
            assert_eq!(stationary, (ifd - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pss_quiet_at_rest() {
        let (a, b, s) = pss_derivatives(&PssParams::default(), 0.0, 0.0, 0.0);
        assert_eq!((a, b, s), (0.0, 0.0, 0.0));
    }
}
