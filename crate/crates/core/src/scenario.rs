//! Scenario description: network, device parameter blocks, events and
//! output selection. Everything here is plain data and (de)serializable.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ibr_gfl::GflParams;
use crate::ibr_gfm::GfmParams;
use crate::machines::MachineParams;
use crate::netmodel::NetworkModel;
use crate::slowdyn::{CvrParams, LoadParams, LtcParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("simulation.dt must be positive, got {0}")]
    Dt(f64),
    #[error("simulation.t_end must be positive, got {0}")]
    TEnd(f64),
    #[error("{0}")]
    Reference(String),
    #[error("{0}")]
    Invalid(String),
}

fn default_dt() -> f64 {
    0.002
}
fn default_t_end() -> f64 {
    600.0
}
fn default_eigen_interval() -> f64 {
    5.0
}
fn default_output_every() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// Spacing of the periodic eigenvalue snapshots, s.
    #[serde(default = "default_eigen_interval")]
    pub eigen_interval: f64,
    /// Record every n-th step.
    #[serde(default = "default_output_every")]
    pub output_every: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            t_end: default_t_end(),
            eigen_interval: default_eigen_interval(),
            output_every: default_output_every(),
        }
    }
}

/// Stiff voltage source behind a reactance (equivalent of a strong remote area).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    pub id: String,
    pub bus: String,
    /// Reactance on the system base.
    #[serde(default = "default_source_x")]
    pub x: f64,
}

fn default_source_x() -> f64 {
    0.02
}

/// Network-free linear device dy/dt = A y, used for verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub id: String,
    pub a: Vec<Vec<f64>>,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Devices {
    pub source: Vec<SourceParams>,
    pub machine: Vec<MachineParams>,
    pub gfl: Vec<GflParams>,
    pub gfm: Vec<GfmParams>,
    pub load: Vec<LoadParams>,
    pub ltc: Vec<LtcParams>,
    pub linear: Vec<LinearParams>,
    pub cvr: Option<CvrParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    BranchTrip,
    OelLimit,
    TapStep,
    CvrActivate,
    Custom,
}

impl EventKind {
    /// Tie-break rank for events sharing a time stamp.
    pub fn priority(self) -> u8 {
        match self {
            EventKind::BranchTrip => 0,
            EventKind::OelLimit => 1,
            EventKind::TapStep => 2,
            EventKind::CvrActivate => 3,
            EventKind::Custom => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::BranchTrip => "branch_trip",
            EventKind::OelLimit => "oel_limit",
            EventKind::TapStep => "tap_step",
            EventKind::CvrActivate => "cvr_activate",
            EventKind::Custom => "custom",
        }
    }
}

/// Scheduled event. `target` names the branch, machine, tap changer or load
/// the event acts on; `value` is the tap direction (+1/-1) for tap steps and
/// the load multiplier for custom events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub kind: EventKind,
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// Channels written to the time-series file; empty means all.
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default)]
    pub phase_pairs: Vec<[String; 2]>,
    /// Phase-plane window in seconds; defaults to the final second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_window: Option<[f64; 2]>,
    #[serde(default = "yes")]
    pub eigen_scan: bool,
    /// Channel inspected for sustained oscillations; defaults to the first
    /// grid-following inverter terminal voltage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oscillation_channel: Option<String>,
}

impl Default for Outputs {
    fn default() -> Self {
        Self { channels: Vec::new(), phase_pairs: Vec::new(), phase_window: None, eigen_scan: true, oscillation_channel: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<u8>,
    #[serde(default)]
    pub simulation: SimulationSettings,
    pub network: NetworkModel,
    #[serde(default)]
    pub devices: Devices,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub outputs: Outputs,
}

impl Scenario {
    /// Checks settings and every cross reference.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.simulation.dt > 0.0) {
            return Err(ScenarioError::Dt(self.simulation.dt));
        }
        if !(self.simulation.t_end > 0.0) {
            return Err(ScenarioError::TEnd(self.simulation.t_end));
        }
        if self.simulation.output_every == 0 {
            return Err(ScenarioError::Invalid("simulation.output_every must be at least 1".into()));
        }
        if !(self.simulation.eigen_interval > 0.0) {
            return Err(ScenarioError::Invalid("simulation.eigen_interval must be positive".into()));
        }
        self.network.validate().map_err(|e| ScenarioError::Invalid(format!("network: {e}")))?;
        let net = &self.network;
        let bus = |what: &str, id: &str, b: &str| -> Result<(), ScenarioError> {
            net.bus_index(b)
                .map(|_| ())
                .ok_or_else(|| ScenarioError::Reference(format!("{what} '{id}' refers to unknown bus '{b}'")))
        };
        let d = &self.devices;
        let mut ids: Vec<&str> = Vec::new();
        for s in &d.source {
            bus("source", &s.id, &s.bus)?;
            ids.push(&s.id);
        }
        for m in &d.machine {
            bus("machine", &m.id, &m.bus)?;
            ids.push(&m.id);
        }
        for g in &d.gfl {
            bus("gfl", &g.id, &g.bus)?;
            ids.push(&g.id);
        }
        for g in &d.gfm {
            bus("gfm", &g.id, &g.bus)?;
            ids.push(&g.id);
        }
        for l in &d.load {
            bus("load", &l.id, &l.bus)?;
            ids.push(&l.id);
        }
        for l in &d.ltc {
            if net.branch_index(&l.branch).is_none() {
                return Err(ScenarioError::Reference(format!("ltc '{}' refers to unknown branch '{}'", l.id, l.branch)));
            }
            ids.push(&l.id);
        }
        for l in &d.linear {
            let n = l.y0.len();
            if l.a.len() != n || l.a.iter().any(|r| r.len() != n) {
                return Err(ScenarioError::Invalid(format!("linear '{}': a must be {n}x{n}", l.id)));
            }
            ids.push(&l.id);
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(ScenarioError::Invalid(format!("duplicate device id '{}'", w[0])));
        }
        if let Some(c) = &d.cvr {
            for id in &c.ltcs {
                if !d.ltc.iter().any(|l| &l.id == id) {
                    return Err(ScenarioError::Reference(format!("cvr refers to unknown ltc '{id}'")));
                }
            }
        }
        for (k, e) in self.events.iter().enumerate() {
            if !(e.t >= 0.0) {
                return Err(ScenarioError::Invalid(format!("events[{k}]: negative time")));
            }
            let target = e.target.as_deref();
            let ok = match e.kind {
                EventKind::BranchTrip => target.is_some_and(|t| net.branch_index(t).is_some()),
                EventKind::OelLimit => target.is_some_and(|t| d.machine.iter().any(|m| m.id == t)),
                EventKind::TapStep => target.is_some_and(|t| d.ltc.iter().any(|l| l.id == t)),
                EventKind::CvrActivate => d.cvr.is_some() || !d.ltc.is_empty(),
                EventKind::Custom => {
                    target.is_none_or(|t| d.load.iter().any(|l| l.id == t)) && e.value.is_some_and(|v| v >= 0.0)
                }
            };
            if !ok {
                return Err(ScenarioError::Reference(format!("events[{k}] ({}): missing or unknown target", e.kind.name())));
            }
        }
        for p in &self.outputs.phase_pairs {
            if p[0] == p[1] {
                return Err(ScenarioError::Invalid(format!("phase pair '{}' repeats a channel", p[0])));
            }
        }
        Ok(())
    }
}
