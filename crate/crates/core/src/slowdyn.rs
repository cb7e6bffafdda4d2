//! Slow discrete dynamics: tap changers, exponential loads and the timed
//! voltage-reduction controller.
//!
//! The tap ratio sits on the from (transmission) side of its branch, so the
//! distribution voltage rises when the ratio decreases.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtcParams {
    pub id: String,
    /// Transformer branch carrying the tap.
    pub branch: String,
    /// Regulated voltage target; defaults to the initial distribution voltage.
    pub v_target: Option<f64>,
    pub deadband: f64,
    pub tap_step: f64,
    pub tap_min: f64,
    pub tap_max: f64,
    pub delay_first: f64,
    pub delay_next: f64,
    pub enabled: bool,
}

impl Default for LtcParams {
    fn default() -> Self {
        Self {
            id: "ltc1".into(),
            branch: String::new(),
            v_target: None,
            deadband: 0.01,
            tap_step: 0.01,
            tap_min: 0.85,
            tap_max: 1.15,
            delay_first: 30.0,
            delay_next: 10.0,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtcState {
    pub tap: f64,
    pub tap_step: f64,
    pub tap_min: f64,
    pub tap_max: f64,
    pub v_target: f64,
    pub deadband: f64,
    pub delay_first: f64,
    pub delay_next: f64,
    pub timer: f64,
    pub armed: bool,
}

impl LtcState {
    pub fn new(params: &LtcParams, tap: f64, v_target: f64) -> Self {
        Self {
            tap,
            tap_step: params.tap_step,
            tap_min: params.tap_min,
            tap_max: params.tap_max,
            v_target,
            deadband: params.deadband,
            delay_first: params.delay_first,
            delay_next: params.delay_next,
            timer: 0.0,
            armed: false,
        }
    }

    fn delay(&self) -> f64 {
        if self.armed {
            self.delay_next
        } else {
            self.delay_first
        }
    }

    /// Remaining steps before the ratio bound that raises voltage.
    pub fn steps_to_exhaustion(&self) -> usize {
        let n = ((self.tap - self.tap_min) / self.tap_step + 1e-9).floor();
        if n > 0.0 {
            n as usize
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapEvent {
    pub old_tap: f64,
    pub new_tap: f64,
}

const TIMER_EPS: f64 = 1e-9;

pub fn ltc_update(ltc: &LtcState, v_dist: f64, dt: f64) -> (LtcState, Option<TapEvent>) {
    let mut next = *ltc;
    let error = v_dist - ltc.v_target;
    if error.abs() <= ltc.deadband {
        next.timer = 0.0;
        next.armed = false;
        return (next, None);
    }
    let delay = ltc.delay();
    next.timer = (ltc.timer + dt).min(delay);
    if next.timer < delay - TIMER_EPS {
        return (next, None);
    }
    // Low voltage: lower the ratio.
    let proposed = if error < 0.0 { ltc.tap - ltc.tap_step } else { ltc.tap + ltc.tap_step };
    if proposed < ltc.tap_min - 1e-12 || proposed > ltc.tap_max + 1e-12 {
        return (next, None);
    }
    next.tap = proposed;
    next.timer = 0.0;
    next.armed = true;
    (next, Some(TapEvent { old_tap: ltc.tap, new_tap: proposed }))
}

/// Forced single step, as scheduled by an explicit event. Returns `None`
/// when the move would leave the ratio range.
pub fn tap_step(ltc: &LtcState, direction: i32) -> Option<LtcState> {
    let proposed = ltc.tap + f64::from(direction.signum()) * ltc.tap_step;
    if proposed < ltc.tap_min - 1e-12 || proposed > ltc.tap_max + 1e-12 {
        return None;
    }
    Some(LtcState { tap: proposed, ..*ltc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadParams {
    pub id: String,
    pub bus: String,
    pub alpha: f64,
    pub beta: f64,
    /// Zone tag used for aggregated load channels.
    pub zone: String,
}

impl Default for LoadParams {
    fn default() -> Self {
        Self { id: "load1".into(), bus: String::new(), alpha: 1.0, beta: 2.0, zone: "central".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadState {
    pub p0: f64,
    pub q0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub v0: f64,
}

/// (P, Q) in the units of `p0`, `q0`.
pub fn load_injection(load: &LoadState, v: f64) -> (f64, f64) {
    if v <= 0.0 {
        return (0.0, 0.0);
    }
    let r = v / load.v0;
    (load.p0 * r.powf(load.alpha), load.q0 * r.powf(load.beta))
}

/// Active power still missing relative to the reference consumption.
pub fn restoration_deficit(loads: &[LoadState], v_now: &[f64]) -> f64 {
    loads.iter().zip(v_now).map(|(l, &v)| l.p0 - load_injection(l, v).0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvrParams {
    pub t_activate: f64,
    pub delta_setpoint: f64,
    /// Tap changers affected; empty means all.
    pub ltcs: Vec<String>,
}

impl Default for CvrParams {
    fn default() -> Self {
        Self { t_activate: 300.0, delta_setpoint: 0.05, ltcs: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvrMode {
    Off,
    Timed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvrController {
    pub mode: CvrMode,
    pub t_activate: f64,
    pub delta_setpoint: f64,
    pub applied: bool,
}

/// Applies the set-point reduction to `ltcs` once `t` reaches the
/// activation time. Returns true only on the call that applied it.
pub fn cvr_apply(cvr: &mut CvrController, t: f64, ltcs: &mut [LtcState]) -> bool {
    if cvr.mode == CvrMode::Off || cvr.applied || t < cvr.t_activate - TIMER_EPS {
        return false;
    }
    for l in ltcs.iter_mut() {
        l.v_target *= 1.0 - cvr.delta_setpoint;
    }
    cvr.applied = true;
    true
}
