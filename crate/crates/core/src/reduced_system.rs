//! Built-in corridor test system and the four study-case presets.
//!
//! A stiff northern equivalent feeds the central area through a double
//! circuit corridor. The central bus hosts a synchronous machine with an
//! over-excitation limiter, a grid-following inverter on a weak radial
//! connection and a tap-changer fed distribution load.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

use crate::engine::{EngineError, Model};
use crate::ibr_gfl::GflParams;
use crate::ibr_gfm::GfmParams;
use crate::machines::MachineParams;
use crate::netmodel::{self, Branch, Bus, BusKind, NetworkModel};
use crate::scenario::{Devices, EventKind, EventSpec, Outputs, Scenario, SimulationSettings, SourceParams};
use crate::slowdyn::{CvrParams, LoadParams, LtcParams};

type C64 = Complex64;

/// Tunable parameters of the corridor system. Impedances on the 100 MVA
/// system base, powers in MW/MVAr.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorParams {
    pub v_north: f64,
    pub x_source: f64,
    /// Reactance of each corridor circuit.
    pub x_corridor: f64,
    pub x_gsu: f64,
    /// Radial connection of the inverter.
    pub x_ibr: f64,
    pub x_ltc: f64,
    pub p_load: f64,
    pub q_load: f64,
    pub p_gen: f64,
    pub v_gen: f64,
    pub gen_mva: f64,
    pub p_ibr: f64,
    pub v_ibr: f64,
    pub ibr_mva: f64,
    pub machine: MachineParams,
    pub gfl: GflParams,
    /// Field-current limit relative to the machine's initial field current.
    pub ifd_limit_ratio: f64,
    pub t_trip: f64,
    pub t_cvr: f64,
    pub t_end: f64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        let machine = MachineParams {
            id: "g_c".into(),
            bus: "gen".into(),
            mva: 1500.0,
            xd: 1.0,
            xq: 0.9,
            ka: 50.0,
            ta: 0.5,
            oel_delay: 60.0,
            ..Default::default()
        };
        let gfl = GflParams { id: "ibr".into(), bus: "ibr".into(), mva: 400.0, kqi: 100.0, i_max: 1.0, ..Default::default() };
        Self {
            v_north: 1.04,
            x_source: 0.02,
            x_corridor: 0.26,
            x_gsu: 0.02,
            x_ibr: 0.27,
            x_ltc: 0.1 * 100.0 / 1200.0,
            p_load: 800.0,
            q_load: 150.0,
            p_gen: 200.0,
            v_gen: 1.04,
            gen_mva: 1500.0,
            p_ibr: 300.0,
            v_ibr: 1.0,
            ibr_mva: 400.0,
            machine,
            gfl,
            ifd_limit_ratio: 1.04,
            t_trip: 5.0,
            t_cvr: 300.0,
            t_end: 600.0,
        }
    }
}

fn bus(id: &str, kv: f64, kind: BusKind, v: f64, p_gen: f64, p_load: f64, q_load: f64) -> Bus {
    Bus { id: id.into(), base_kv: kv, kind, v_setpoint: v, p_gen_mw: p_gen, p_load0: p_load, q_load0: q_load }
}

fn branch(id: &str, from: &str, to: &str, x: f64) -> Branch {
    Branch { id: id.into(), from: from.into(), to: to.into(), r: 0.0, x, b_shunt: 0.0, tap_ratio: 1.0, in_service: true }
}

impl CorridorParams {
    pub fn network(&self) -> NetworkModel {
        NetworkModel {
            s_base_mva: 100.0,
            buses: vec![
                bus("north", 400.0, BusKind::Slack, self.v_north, 0.0, 0.0, 0.0),
                bus("central", 400.0, BusKind::Pq, 1.0, 0.0, 0.0, 0.0),
                bus("gen", 20.0, BusKind::Pv, self.v_gen, self.p_gen, 0.0, 0.0),
                bus("ibr", 33.0, BusKind::Pv, self.v_ibr, self.p_ibr, 0.0, 0.0),
                bus("dist", 20.0, BusKind::Pq, 1.0, 0.0, self.p_load, self.q_load),
            ],
            branches: vec![
                branch("corridor_a", "north", "central", self.x_corridor),
                branch("corridor_b", "north", "central", self.x_corridor),
                branch("gsu", "central", "gen", self.x_gsu),
                branch("ibr_link", "central", "ibr", self.x_ibr),
                branch("ltc_tr", "central", "dist", self.x_ltc),
            ],
        }
    }

    /// Field current at the initial operating point, machine per unit.
    pub fn initial_field_current(&self) -> Result<f64, EngineError> {
        let mut probe = self.scenario(1);
        probe.devices.machine[0].ifd_limit = f64::INFINITY;
        let m = Model::new(&probe)?;
        let st = m.initial_state();
        Ok(m.field_currents(&st.y, &st.v)[0])
    }

    /// Case preset without the field-current limit calibration.
    fn scenario(&self, case: u8) -> Scenario {
        let mut gfl = self.gfl.clone();
        gfl.mva = self.ibr_mva;
        if case == 3 {
            gfl.pll_bw_hz = 4.0;
        }
        let mut machine = self.machine.clone();
        machine.mva = self.gen_mva;
        let gfm = (case == 4).then(|| GfmParams {
            id: "gfm".into(),
            bus: "ibr".into(),
            mva: self.ibr_mva / 4.0,
            p_mw: 0.0,
            ..Default::default()
        });
        let devices = Devices {
            source: vec![SourceParams { id: "north_eq".into(), bus: "north".into(), x: self.x_source }],
            machine: vec![machine],
            gfl: vec![gfl],
            gfm: gfm.into_iter().collect(),
            load: vec![LoadParams { id: "load_c".into(), bus: "dist".into(), alpha: 1.0, beta: 2.0, zone: "central".into() }],
            ltc: vec![LtcParams { id: "ltc_c".into(), branch: "ltc_tr".into(), ..Default::default() }],
            linear: Vec::new(),
            cvr: (case >= 2).then(|| CvrParams { t_activate: self.t_cvr, delta_setpoint: 0.05, ltcs: vec!["ltc_c".into()] }),
        };
        let mut channels: Vec<String> = ["v.central", "v.dist", "v.ibr", "v.gen", "g_c.ifd", "g_c.oel", "g_c.Q"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        channels.extend(["ibr.x1", "ibr.x2", "ibr.ip", "ibr.iq", "ibr.P", "ibr.Q", "ltc_c.tap", "zone.central.P"].map(String::from));
        if case == 4 {
            channels.extend(["gfm.P", "gfm.Q", "gfm.e_mag"].map(String::from));
        }
        Scenario {
            name: format!("case{case}"),
            preset: Some(case),
            simulation: SimulationSettings { t_end: self.t_end, ..Default::default() },
            network: self.network(),
            devices,
            events: vec![EventSpec { kind: EventKind::BranchTrip, t: self.t_trip, target: Some("corridor_b".into()), value: None }],
            outputs: Outputs {
                channels,
                phase_pairs: vec![["ibr.x1".into(), "ibr.x2".into()]],
                phase_window: None,
                eigen_scan: true,
                oscillation_channel: Some("v.ibr".into()),
            },
        }
    }

    /// Builds a case preset with the limiter calibrated to
    /// `ifd_limit_ratio` times the initial field current.
    pub fn build(&self, case: u8) -> Result<Scenario, EngineError> {
        let ifd0 = self.initial_field_current()?;
        let mut s = self.scenario(case);
        s.devices.machine[0].ifd_limit = round4(ifd0 * self.ifd_limit_ratio);
        Ok(s)
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PresetError {
    #[error("preset must be 1, 2, 3 or 4, got {0}")]
    UnknownCase(u8),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Study-case presets: 1 base (8 Hz PLL), 2 with timed voltage reduction,
/// 3 with the PLL detuned to 4 Hz, 4 with a grid-forming unit added.
pub fn build_preset(case: u8) -> Result<Scenario, PresetError> {
    if !(1..=4).contains(&case) {
        return Err(PresetError::UnknownCase(case));
    }
    Ok(CorridorParams::default().build(case)?)
}

/// Short-circuit ratio at `bus` for a device of `mva`, from the Thevenin
/// impedance of the network with machines behind their transient reactance.
pub fn short_circuit_ratio(model: &Model, network: &NetworkModel, bus: usize, mva: f64) -> Result<f64, EngineError> {
    let adm = netmodel::build_admittance(network)?;
    let mut y = adm.entries.clone();
    for s in &model.sources {
        y[(s.bus, s.bus)] += s.z.inv();
    }
    for m in &model.machines {
        y[(m.bus, m.bus)] += C64::new(0.0, m.params.x_p / m.scale).inv();
    }
    let z = y.try_inverse().ok_or(netmodel::NetError::Singular)?;
    let z_th = z[(bus, bus)].norm();
    Ok(model.s_base / (z_th * mva))
}

/// Plain-text summary of the scaled anchors of the corridor system.
pub fn tune_report() -> Result<String, PresetError> {
    let scenario = build_preset(1)?;
    let model = Model::new(&scenario)?;
    let st = model.initial_state();
    let pre = model.zone_loads(&st.discrete, &st.v)[0].1;

    let mut tripped = st.discrete.clone();
    let k = scenario.network.branch_index("corridor_b").expect("preset branch");
    tripped.branch_in_service[k] = false;
    let frozen = model.freeze(&tripped)?;
    let post = crate::analysis::frozen_equilibrium(&model, &frozen, &tripped, &st.y, &st.v);
    let ibr_bus = scenario.network.bus_index("ibr").expect("preset bus");
    let gfl_mva = scenario.devices.gfl[0].mva;
    let scr_pre = short_circuit_ratio(&model, &scenario.network, ibr_bus, gfl_mva)?;
    let scr_post = short_circuit_ratio(&model, &frozen.network, ibr_bus, gfl_mva)?;
    let ltc = &st.discrete.ltcs[0];

    let mut r = String::new();
    let _ = writeln!(r, "corridor system tuning report");
    let _ = writeln!(r, "reference (Nordic test system): central zone load ~5820 MW before the trip, ~5700 MW short-term after it; limiter takeover shortly before 200 s");
    let _ = writeln!(r, "zone load pre-disturbance: {pre:.1} MW");
    match &post {
        Some((y, v)) => {
            let post_load = model.zone_loads(&tripped, v)[0].1;
            let _ = writeln!(r, "zone load short-term post-trip: {post_load:.1} MW (deficit {:.1} MW, {:.2}%)", pre - post_load, 100.0 * (pre - post_load) / pre);
            let ifd = model.field_currents(y, v)[0];
            let _ = writeln!(r, "field current post-trip: {ifd:.4} pu (limit {:.4} pu)", scenario.devices.machine[0].ifd_limit);
            let _ = writeln!(r, "distribution voltage post-trip: {:.4} pu (target {:.4}, deadband {:.3})", v[model.ltcs[0].to_bus].norm(), ltc.v_target, ltc.deadband);
        }
        None => {
            let _ = writeln!(r, "zone load short-term post-trip: no short-term equilibrium found");
        }
    }
    let flag = if scr_post < 1.2 { " [weak: below 1.2]" } else { "" };
    let _ = writeln!(r, "SCR at the inverter bus ({gfl_mva:.0} MVA): {scr_pre:.3} pre-trip, {scr_post:.3} post-trip{flag}");
    let _ = writeln!(r, "tap-exhaustion margin: {} steps from ratio {:.3} to {:.3}", ltc.steps_to_exhaustion(), ltc.tap, ltc.tap_min);
    let _ = writeln!(r, "inverter rating: {:.0} MVA against {:.0} MW zone load (reference: 400 MVA against ~5820 MW)", gfl_mva, pre);
    Ok(r)
}
