#![allow(dead_code)]

pub mod oracles;

use ltdyn_core::machines::MachineParams;
use ltdyn_core::netmodel::{Branch, Bus, BusKind, NetworkModel};
use ltdyn_core::scenario::{Devices, LinearParams, Outputs, Scenario, SimulationSettings, SourceParams};

pub fn bus(id: &str, kind: BusKind, v: f64, p_gen: f64, p_load: f64, q_load: f64) -> Bus {
    Bus { id: id.into(), base_kv: 400.0, kind, v_setpoint: v, p_gen_mw: p_gen, p_load0: p_load, q_load0: q_load }
}

pub fn line(id: &str, from: &str, to: &str, x: f64) -> Branch {
    Branch { id: id.into(), from: from.into(), to: to.into(), r: 0.0, x, b_shunt: 0.0, tap_ratio: 1.0, in_service: true }
}

pub fn settings(dt: f64, t_end: f64) -> SimulationSettings {
    SimulationSettings { dt, t_end, output_every: 1, ..Default::default() }
}

fn quiet_outputs() -> Outputs {
    Outputs { eigen_scan: false, ..Default::default() }
}

/// A stiff source on a single bus plus a network-free linear device.
pub fn linear_scenario(a: Vec<Vec<f64>>, y0: Vec<f64>, dt: f64, t_end: f64) -> Scenario {
    Scenario {
        name: "linear".into(),
        preset: None,
        simulation: settings(dt, t_end),
        network: NetworkModel { s_base_mva: 100.0, buses: vec![bus("n", BusKind::Slack, 1.0, 0.0, 0.0, 0.0)], branches: vec![] },
        devices: Devices {
            source: vec![SourceParams { id: "grid".into(), bus: "n".into(), x: 0.02 }],
            linear: vec![LinearParams { id: "lin".into(), a, y0 }],
            ..Default::default()
        },
        events: vec![],
        outputs: quiet_outputs(),
    }
}

/// Machine `g1` (800 MVA, 500 MW) feeding an infinite bus over two parallel lines.
pub fn smib(dt: f64, t_end: f64) -> Scenario {
    let machine = MachineParams { id: "g1".into(), bus: "gen".into(), mva: 800.0, ..Default::default() };
    Scenario {
        name: "smib".into(),
        preset: None,
        simulation: settings(dt, t_end),
        network: NetworkModel {
            s_base_mva: 100.0,
            buses: vec![bus("inf", BusKind::Slack, 1.0, 0.0, 0.0, 0.0), bus("gen", BusKind::Pv, 1.02, 500.0, 0.0, 0.0)],
            branches: vec![line("l1", "gen", "inf", 0.08), line("l2", "gen", "inf", 0.08)],
        },
        devices: Devices {
            source: vec![SourceParams { id: "grid".into(), bus: "inf".into(), x: 0.01 }],
            machine: vec![machine],
            ..Default::default()
        },
        events: vec![],
        outputs: quiet_outputs(),
    }
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
