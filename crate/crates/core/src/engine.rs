//! Time-domain engine: compiles a scenario into a state-space model,
//! integrates it with the implicit trapezoidal rule (network solved inside
//! every residual evaluation) and applies discrete events between steps.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::analysis::{self, EigenScan, EigenSnapshot, Verdict};
use crate::ibr_gfl::{self, GflError, GflParams, OuterControlState, PllState};
use crate::ibr_gfm::{self, GfmParams, GfmState};
use crate::machines::{self, AvrState, GovState, LimitFlag, MachineError, MachineParams, MachineState, OelState, OelStatus};
use crate::netmodel::{self, BusLoad, FixedSource, NetError, NetworkModel, NetworkSolver};
use crate::scenario::{EventKind, Scenario, ScenarioError};
use crate::slowdyn::{self, CvrController, CvrMode, LtcState};

type C64 = Complex64;

/// Electrical base frequency, rad/s (50 Hz).
pub const W_BASE: f64 = 2.0 * PI * 50.0;
/// Newton tolerance on the state update.
pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 20;
/// Tolerance of the inner network iteration.
pub const NETWORK_TOL: f64 = 1e-13;
/// Machine speed deviation treated as loss of synchronism, pu.
pub const MAX_SPEED_DEV: f64 = 0.1;
/// PLL frequency deviation treated as loss of synchronism, rad/s.
pub const MAX_PLL_DEV: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("network: {0}")]
    Network(#[from] NetError),
    #[error("machine '{id}': {source}")]
    Machine { id: String, source: MachineError },
    #[error("gfl '{id}': {source}")]
    Gfl { id: String, source: GflError },
    #[error("initialization: {0}")]
    Init(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDev {
    pub id: String,
    pub bus: usize,
    pub z: C64,
    pub emf: C64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineDev {
    pub params: MachineParams,
    pub bus: usize,
    /// Device rating over system base.
    pub scale: f64,
    pub offset: usize,
    pub avr: AvrState,
    pub gov: GovState,
}

impl MachineDev {
    fn n_states(&self) -> usize {
        if self.params.pss.is_some() {
            8
        } else {
            6
        }
    }

    fn state(&self, y: &[f64]) -> MachineState {
        let o = self.offset;
        let (lo, hi) = self.avr.efd_limits;
        MachineState { delta: y[o], omega: y[o + 1], eq_p: y[o + 2], ed_p: y[o + 3], efd: y[o + 4].clamp(lo, hi), ifd: 0.0 }
    }

    fn source(&self) -> FixedSource {
        FixedSource { bus: self.bus, z: C64::new(0.0, self.params.x_p / self.scale), i_max: None }
    }

    fn lag_flags(&self, y: &[f64]) -> (LimitFlag, LimitFlag) {
        let (lo, hi) = self.avr.efd_limits;
        (LimitFlag::of(y[self.offset + 4], lo, hi), LimitFlag::of(y[self.offset + 5], 0.0, self.gov.p_max))
    }

    /// Moves exciter and governor states back inside their bounds.
    fn project(&self, y: &mut [f64]) {
        let (lo, hi) = self.avr.efd_limits;
        let o = self.offset;
        y[o + 4] = y[o + 4].clamp(lo, hi);
        y[o + 5] = y[o + 5].clamp(0.0, self.gov.p_max);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GflDev {
    pub params: GflParams,
    pub bus: usize,
    pub scale: f64,
    pub offset: usize,
    pub kp: f64,
    pub ki: f64,
    pub v_ref: f64,
    pub p_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GfmDev {
    pub params: GfmParams,
    pub bus: usize,
    pub scale: f64,
    pub offset: usize,
    pub v_set: f64,
    pub p_set: f64,
    pub q_set: f64,
}

impl GfmDev {
    fn state(&self, y: &[f64]) -> GfmState {
        let o = self.offset;
        GfmState { theta: y[o], p_filt: y[o + 1], q_filt: y[o + 2], v_set: self.v_set, p_set: self.p_set, q_set: self.q_set }
    }

    fn source(&self) -> FixedSource {
        FixedSource {
            bus: self.bus,
            z: C64::new(0.0, self.params.x_s / self.scale),
            i_max: Some(self.params.i_max * self.scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadDev {
    pub id: String,
    pub bus: usize,
    pub zone: String,
    /// Reference powers in system per unit at `v0`.
    pub p0: f64,
    pub q0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub v0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtcDev {
    pub id: String,
    pub branch: usize,
    pub to_bus: usize,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDev {
    pub id: String,
    pub a: DMatrix<f64>,
    pub offset: usize,
}

/// Slow and discrete part of the state, frozen during a continuous step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteState {
    pub ltcs: Vec<LtcState>,
    pub oels: Vec<OelState>,
    /// Exciter and governor bounds per machine, refreshed after every step.
    pub lag_limits: Vec<(LimitFlag, LimitFlag)>,
    pub cvr: Option<CvrController>,
    pub branch_in_service: Vec<bool>,
    pub load_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub t: f64,
    pub y: Vec<f64>,
    pub discrete: DiscreteState,
    pub v: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalEntry {
    pub t: f64,
    pub kind: EventKind,
    pub target: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Completed,
    /// Implicit step failed to converge even at half step.
    Collapse { t: f64, reason: String },
    /// Loss of synchronism of a machine or a PLL.
    Divergence { t: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub names: Vec<String>,
    /// One vector per channel, aligned with `t`.
    pub data: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(names: Vec<String>) -> Self {
        let data = vec![Vec::new(); names.len()];
        Self { t: Vec::new(), names, data }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.index(name).map(|k| self.data[k].as_slice())
    }

    pub fn push(&mut self, t: f64, values: &[f64]) {
        self.t.push(t);
        for (d, v) in self.data.iter_mut().zip(values) {
            d.push(*v);
        }
    }

    /// Sample indices with `t` inside `[t0, t1]`.
    pub fn window(&self, t0: f64, t1: f64) -> core::ops::Range<usize> {
        let a = self.t.partition_point(|&t| t < t0 - 1e-9);
        let b = self.t.partition_point(|&t| t <= t1 + 1e-9);
        a..b.max(a)
    }
}

/// Network solver for a given discrete state.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub network: NetworkModel,
    pub solver: NetworkSolver,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub scenario: Scenario,
    pub s_base: f64,
    pub sources: Vec<SourceDev>,
    pub machines: Vec<MachineDev>,
    pub gfls: Vec<GflDev>,
    pub gfms: Vec<GfmDev>,
    pub loads: Vec<LoadDev>,
    pub ltcs: Vec<LtcDev>,
    pub linears: Vec<LinearDev>,
    pub state_names: Vec<String>,
    pub channel_names: Vec<String>,
    initial: SimulationState,
}

fn bus_of(net: &NetworkModel, id: &str) -> Result<usize, EngineError> {
    net.bus_index(id).ok_or_else(|| EngineError::Init(format!("unknown bus '{id}'")))
}

impl Model {
    /// Power flow plus device back-solve: the returned model carries an
    /// initial state at rest.
    pub fn new(scenario: &Scenario) -> Result<Self, EngineError> {
        scenario.validate()?;
        let net = &scenario.network;
        let base = net.s_base_mva;
        let pf = netmodel::solve_power_flow(net, 1e-12, 30)?;
        let v = pf.phasors();
        let adm = netmodel::build_admittance(net)?;
        let s_inj = netmodel::bus_injections(&adm, &v);
        let n_bus = net.buses.len();
        let mut s_gen: Vec<C64> =
            (0..n_bus).map(|k| s_inj[k] + C64::new(net.buses[k].p_load0, net.buses[k].q_load0) / base).collect();

        let d = &scenario.devices;
        let mut names = Vec::new();
        let mut offset = 0;

        let mut sources = Vec::new();
        for s in &d.source {
            let bus = bus_of(net, &s.bus)?;
            let z = C64::new(0.0, s.x);
            let i = (s_gen[bus] / v[bus]).conj();
            s_gen[bus] = C64::new(0.0, 0.0);
            sources.push(SourceDev { id: s.id.clone(), bus, z, emf: v[bus] + z * i });
        }

        // Grid-forming units take their own set point when sharing a bus.
        let mut gfms = Vec::new();
        let mut gfm_init = Vec::new();
        for g in &d.gfm {
            let bus = bus_of(net, &g.bus)?;
            let scale = g.mva / base;
            let shared = d.machine.iter().any(|m| m.bus == g.bus) || d.gfl.iter().any(|x| x.bus == g.bus);
            let s = if shared { C64::new(g.p_mw / base, 0.0) } else { s_gen[bus] };
            s_gen[bus] -= s;
            let st = ibr_gfm::init_gfm(v[bus], s / scale, g);
            gfm_init.push(st);
            gfms.push(GfmDev { params: g.clone(), bus, scale, offset: 0, v_set: st.v_set, p_set: st.p_set, q_set: st.q_set });
        }

        let mut y = Vec::new();
        let mut machines = Vec::new();
        let mut oels = Vec::new();
        for m in &d.machine {
            let bus = bus_of(net, &m.bus)?;
            if d.gfl.iter().any(|g| g.bus == m.bus) || d.machine.iter().filter(|x| x.bus == m.bus).count() > 1 {
                return Err(EngineError::Init(format!("bus '{}' has more than one dispatchable unit", m.bus)));
            }
            let scale = m.mva / base;
            let (st, avr, gov) = machines::init_machine(v[bus], s_gen[bus] / scale, m)
                .map_err(|e| EngineError::Machine { id: m.id.clone(), source: e })?;
            s_gen[bus] = C64::new(0.0, 0.0);
            let dev = MachineDev { params: m.clone(), bus, scale, offset, avr, gov };
            for n in ["delta", "omega", "eq_p", "ed_p", "x_avr", "x_gov"] {
                names.push(format!("{}.{n}", m.id));
            }
            y.extend_from_slice(&[st.delta, st.omega, st.eq_p, st.ed_p, avr.x_avr, gov.x_gov]);
            if m.pss.is_some() {
                names.push(format!("{}.x_w", m.id));
                names.push(format!("{}.x_l", m.id));
                y.extend_from_slice(&[0.0, 0.0]);
            }
            offset += dev.n_states();
            oels.push(OelState::new(m.ifd_limit, m.oel_delay));
            machines.push(dev);
        }

        let mut gfls = Vec::new();
        for g in &d.gfl {
            let bus = bus_of(net, &g.bus)?;
            if d.gfl.iter().filter(|x| x.bus == g.bus).count() > 1 {
                return Err(EngineError::Init(format!("bus '{}' has more than one dispatchable unit", g.bus)));
            }
            let scale = g.mva / base;
            let (pll, cc, oc, p_ref) = ibr_gfl::init_gfl(v[bus], s_gen[bus] / scale, g)
                .map_err(|e| EngineError::Gfl { id: g.id.clone(), source: e })?;
            if cc.ip.hypot(cc.iq) > g.i_max + 1e-9 {
                return Err(EngineError::Init(format!("gfl '{}' dispatch exceeds its current limit", g.id)));
            }
            s_gen[bus] = C64::new(0.0, 0.0);
            for n in ["x1", "x2", "ip", "iq", "x_q"] {
                names.push(format!("{}.{n}", g.id));
            }
            y.extend_from_slice(&[pll.x1, pll.x2, cc.ip, cc.iq, oc.x_q]);
            gfls.push(GflDev { params: g.clone(), bus, scale, offset, kp: pll.kp, ki: pll.ki, v_ref: oc.v_ref, p_ref });
            offset += 5;
        }

        for (g, st) in gfms.iter_mut().zip(&gfm_init) {
            g.offset = offset;
            for n in ["theta", "p_filt", "q_filt"] {
                names.push(format!("{}.{n}", g.params.id));
            }
            y.extend_from_slice(&[st.theta, st.p_filt, st.q_filt]);
            offset += 3;
        }

        let mut linears = Vec::new();
        for l in &d.linear {
            let n = l.y0.len();
            let a = DMatrix::from_fn(n, n, |i, j| l.a[i][j]);
            for k in 0..n {
                names.push(format!("{}.y{k}", l.id));
            }
            y.extend_from_slice(&l.y0);
            linears.push(LinearDev { id: l.id.clone(), a, offset });
            offset += n;
        }

        for (k, s) in s_gen.iter().enumerate() {
            if s.norm() > 1e-7 {
                return Err(EngineError::Init(format!(
                    "bus '{}' injects {:.4}+j{:.4} pu with no device to carry it",
                    net.buses[k].id, s.re, s.im
                )));
            }
        }

        let mut loads = Vec::new();
        for (k, b) in net.buses.iter().enumerate() {
            if b.p_load0 == 0.0 && b.q_load0 == 0.0 {
                continue;
            }
            let declared: Vec<_> = d.load.iter().filter(|l| l.bus == b.id).collect();
            if declared.len() > 1 {
                return Err(EngineError::Init(format!("bus '{}' has more than one load block", b.id)));
            }
            let default = slowdyn::LoadParams { id: format!("load.{}", b.id), bus: b.id.clone(), ..Default::default() };
            let p = declared.first().copied().unwrap_or(&default);
            loads.push(LoadDev {
                id: p.id.clone(),
                bus: k,
                zone: p.zone.clone(),
                p0: b.p_load0 / base,
                q0: b.q_load0 / base,
                alpha: p.alpha,
                beta: p.beta,
                v0: v[k].norm(),
            });
        }

        let mut ltcs = Vec::new();
        let mut ltc_states = Vec::new();
        for l in &d.ltc {
            let bi = net.branch_index(&l.branch).ok_or_else(|| EngineError::Init(format!("unknown branch '{}'", l.branch)))?;
            let br = &net.branches[bi];
            let to_bus = bus_of(net, &br.to)?;
            let target = l.v_target.unwrap_or(v[to_bus].norm());
            ltc_states.push(LtcState::new(l, br.tap_ratio, target));
            ltcs.push(LtcDev { id: l.id.clone(), branch: bi, to_bus, enabled: l.enabled });
        }

        let cvr = d.cvr.as_ref().map(|c| CvrController {
            mode: CvrMode::Timed,
            t_activate: c.t_activate,
            delta_setpoint: c.delta_setpoint,
            applied: false,
        });

        let lag_limits = machines.iter().map(|m| m.lag_flags(&y)).collect();
        let discrete = DiscreteState {
            ltcs: ltc_states,
            oels,
            lag_limits,
            cvr,
            branch_in_service: net.branches.iter().map(|b| b.in_service).collect(),
            load_scale: vec![1.0; loads.len()],
        };

        let mut model = Self {
            scenario: scenario.clone(),
            s_base: base,
            sources,
            machines,
            gfls,
            gfms,
            loads,
            ltcs,
            linears,
            state_names: names,
            channel_names: Vec::new(),
            initial: SimulationState { t: 0.0, y, discrete, v },
        };
        model.channel_names = model.build_channel_names();
        // Replace the power-flow voltages by the network solution of the
        // device model so the algebraic state is self-consistent.
        let frozen = model.freeze(&model.initial.discrete)?;
        let v = model.solve_network(&frozen, &model.initial.y, &model.initial.v)?;
        model.initial.v = v;
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn initial_state(&self) -> SimulationState {
        self.initial.clone()
    }

    /// Network model and factored solver for the given discrete state.
    pub fn freeze(&self, disc: &DiscreteState) -> Result<Frozen, EngineError> {
        let mut net = self.scenario.network.clone();
        for (b, &on) in net.branches.iter_mut().zip(&disc.branch_in_service) {
            b.in_service = on;
        }
        for (dev, st) in self.ltcs.iter().zip(&disc.ltcs) {
            net.branches[dev.branch].tap_ratio = st.tap;
        }
        if let Some(k) = net.find_islanded_bus() {
            return Err(NetError::Islanding(net.buses[k].id.clone()).into());
        }
        let adm = netmodel::build_admittance(&net)?;
        let mut fixed: Vec<FixedSource> =
            self.sources.iter().map(|s| FixedSource { bus: s.bus, z: s.z, i_max: None }).collect();
        fixed.extend(self.machines.iter().map(MachineDev::source));
        fixed.extend(self.gfms.iter().map(GfmDev::source));
        let loads: Vec<BusLoad> = self
            .loads
            .iter()
            .zip(&disc.load_scale)
            .map(|(l, &k)| BusLoad { bus: l.bus, p0: l.p0 * k, q0: l.q0 * k, alpha: l.alpha, beta: l.beta, v0: l.v0 })
            .collect();
        let mut solver = NetworkSolver::new(&adm, &fixed, &loads)?;
        solver.tol = NETWORK_TOL;
        solver.max_iter = 200;
        Ok(Frozen { network: net, solver })
    }

    fn emfs(&self, y: &[f64]) -> Vec<C64> {
        let mut e: Vec<C64> = self.sources.iter().map(|s| s.emf).collect();
        for m in &self.machines {
            e.push(machines::transient_emf(&m.state(y)));
        }
        for g in &self.gfms {
            e.push(ibr_gfm::internal_voltage(&g.state(y), &g.params));
        }
        e
    }

    fn injections(&self, y: &[f64], n_bus: usize) -> Vec<C64> {
        let mut inj = vec![C64::new(0.0, 0.0); n_bus];
        for g in &self.gfls {
            let o = g.offset;
            inj[g.bus] += ibr_gfl::injection(y[o + 2], y[o + 3], y[o + 1]) * g.scale;
        }
        inj
    }

    pub fn solve_network(&self, frozen: &Frozen, y: &[f64], v_guess: &[C64]) -> Result<Vec<C64>, NetError> {
        let inj = self.injections(y, v_guess.len());
        frozen.solver.solve(&inj, &self.emfs(y), v_guess)
    }

    /// Kirchhoff residual of `v` for the device state `y`.
    pub fn network_residual(&self, frozen: &Frozen, y: &[f64], v: &[C64]) -> f64 {
        frozen.solver.kirchhoff_residual(&self.injections(y, v.len()), &self.emfs(y), v)
    }

    /// Field current of each machine at the given state.
    pub fn field_currents(&self, y: &[f64], v: &[C64]) -> Vec<f64> {
        self.machines.iter().map(|m| machines::stator(&m.state(y), v[m.bus], &m.params).ifd).collect()
    }

    /// dy/dt with the network already solved.
    pub fn derivatives_at(&self, disc: &DiscreteState, y: &[f64], v: &[C64], out: &mut [f64]) {
        for ((m, oel), &flags) in self.machines.iter().zip(&disc.oels).zip(&disc.lag_limits) {
            let o = m.offset;
            let st = m.state(y);
            let vb = v[m.bus];
            let sq = machines::stator(&st, vb, &m.params);
            let mut pss = 0.0;
            if let Some(p) = &m.params.pss {
                let (dw, dl, sig) = machines::pss_derivatives(p, st.omega, y[o + 6], y[o + 7]);
                out[o + 6] = dw;
                out[o + 7] = dl;
                pss = sig;
            }
            let avr = AvrState { x_avr: y[o + 4], ..m.avr };
            let gov = GovState { x_gov: y[o + 5], ..m.gov };
            let limiter = m.params.oel_enabled.then_some((oel, sq.ifd, m.params.k_oel));
            let u = machines::avr_input(&avr, vb.norm(), pss, limiter);
            let ag = machines::avr_gov_with_flags(&avr, &gov, &st, u, flags);
            let md = machines::machine_derivatives(&st, vb, ag.efd, ag.pm, &m.params, W_BASE);
            out[o..o + 4].copy_from_slice(&md);
            out[o + 4] = ag.d_x_avr;
            out[o + 5] = ag.d_x_gov;
        }
        for g in &self.gfls {
            let o = g.offset;
            let vb = v[g.bus];
            let vm = vb.norm();
            let pll = PllState { x1: y[o], x2: y[o + 1], kp: g.kp, ki: g.ki };
            let (d1, d2) = ibr_gfl::pll_derivatives(&pll, vb);
            let oc = OuterControlState {
                x_q: y[o + 4],
                v_ref: g.v_ref,
                kqp: g.params.kqp,
                kqi: g.params.kqi,
                priority: g.params.priority,
            };
            let (ipc, iqc, sat) = ibr_gfl::outer_control_commands(&oc, vm, g.p_ref, g.params.i_max);
            out[o] = d1;
            out[o + 1] = d2;
            out[o + 2] = (ipc - y[o + 2]) / g.params.t_g;
            out[o + 3] = (iqc - y[o + 3]) / g.params.t_g;
            out[o + 4] = ibr_gfl::outer_integrator_rate(&oc, vm, sat, iqc);
        }
        for g in &self.gfms {
            let o = g.offset;
            let d = ibr_gfm::gfm_derivatives(&g.state(y), &g.params, v[g.bus], W_BASE);
            out[o] = d.d_theta;
            out[o + 1] = d.d_p_filt;
            out[o + 2] = d.d_q_filt;
        }
        for l in &self.linears {
            let n = l.a.nrows();
            for i in 0..n {
                out[l.offset + i] = (0..n).map(|j| l.a[(i, j)] * y[l.offset + j]).sum();
            }
        }
    }

    /// Solves the network for `y` and evaluates dy/dt. Returns the voltages.
    pub fn derivatives(&self, frozen: &Frozen, disc: &DiscreteState, y: &[f64], v_guess: &[C64], out: &mut [f64]) -> Result<Vec<C64>, NetError> {
        let v = self.solve_network(frozen, y, v_guess)?;
        self.derivatives_at(disc, y, &v, out);
        Ok(v)
    }

    /// Central-difference Jacobian of dy/dt with the discrete state frozen.
    pub fn jacobian(&self, frozen: &Frozen, disc: &DiscreteState, y: &[f64], v_guess: &[C64]) -> Result<DMatrix<f64>, NetError> {
        let n = y.len();
        let mut j = DMatrix::zeros(n, n);
        let mut yp = y.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for k in 0..n {
            let h = (1e-6 * y[k].abs()).max(1e-8);
            yp[k] = y[k] + h;
            self.derivatives(frozen, disc, &yp, v_guess, &mut fp)?;
            yp[k] = y[k] - h;
            self.derivatives(frozen, disc, &yp, v_guess, &mut fm)?;
            yp[k] = y[k];
            for i in 0..n {
                j[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(j)
    }

    fn build_channel_names(&self) -> Vec<String> {
        let mut c = Vec::new();
        for b in &self.scenario.network.buses {
            c.push(format!("v.{}", b.id));
        }
        for s in &self.sources {
            c.push(format!("{}.P", s.id));
            c.push(format!("{}.Q", s.id));
        }
        for m in &self.machines {
            for n in ["delta", "omega", "eq_p", "ed_p", "efd", "ifd", "P", "Q", "oel"] {
                c.push(format!("{}.{n}", m.params.id));
            }
        }
        for g in &self.gfls {
            for n in ["x1", "x2", "ip", "iq", "x_q", "P", "Q"] {
                c.push(format!("{}.{n}", g.params.id));
            }
        }
        for g in &self.gfms {
            for n in ["theta", "e_mag", "P", "Q"] {
                c.push(format!("{}.{n}", g.params.id));
            }
        }
        for l in &self.ltcs {
            c.push(format!("{}.tap", l.id));
        }
        for l in &self.loads {
            c.push(format!("{}.P", l.id));
        }
        for z in self.zones() {
            c.push(format!("zone.{z}.P"));
        }
        for l in &self.linears {
            for k in 0..l.a.nrows() {
                c.push(format!("{}.y{k}", l.id));
            }
        }
        c
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Distinct load zones in first-appearance order.
    pub fn zones(&self) -> Vec<String> {
        let mut z: Vec<String> = Vec::new();
        for l in &self.loads {
            if !z.contains(&l.zone) {
                z.push(l.zone.clone());
            }
        }
        z
    }

    /// Active consumption per load, MW.
    pub fn load_powers(&self, disc: &DiscreteState, v: &[C64]) -> Vec<f64> {
        self.loads
            .iter()
            .zip(&disc.load_scale)
            .map(|(l, &k)| {
                let st = slowdyn::LoadState { p0: l.p0 * k, q0: l.q0 * k, alpha: l.alpha, beta: l.beta, v0: l.v0 };
                slowdyn::load_injection(&st, v[l.bus].norm()).0 * self.s_base
            })
            .collect()
    }

    /// Zone consumption in MW, ordered like `zones()`.
    pub fn zone_loads(&self, disc: &DiscreteState, v: &[C64]) -> Vec<(String, f64)> {
        let p = self.load_powers(disc, v);
        self.zones()
            .into_iter()
            .map(|z| {
                let s = self.loads.iter().zip(&p).filter(|(l, _)| l.zone == z).map(|(_, p)| *p).sum();
                (z, s)
            })
            .collect()
    }

    /// Channel values in `channel_names()` order. Powers in MW / MVAr.
    pub fn channels(&self, st: &SimulationState) -> Vec<f64> {
        let y = &st.y;
        let v = &st.v;
        let base = self.s_base;
        let mut c: Vec<f64> = v.iter().map(|x| x.norm()).collect();
        for s in &self.sources {
            let i = (s.emf - v[s.bus]) / s.z;
            let p = v[s.bus] * i.conj() * base;
            c.push(p.re);
            c.push(p.im);
        }
        for (m, oel) in self.machines.iter().zip(&st.discrete.oels) {
            let ms = m.state(y);
            let sq = machines::stator(&ms, v[m.bus], &m.params);
            let i = m.source().current(machines::transient_emf(&ms), v[m.bus]);
            let s = v[m.bus] * i.conj() * base;
            c.extend_from_slice(&[ms.delta, ms.omega, ms.eq_p, ms.ed_p, ms.efd, sq.ifd, s.re, s.im, oel.status.code()]);
        }
        for g in &self.gfls {
            let o = g.offset;
            let i = ibr_gfl::injection(y[o + 2], y[o + 3], y[o + 1]) * g.scale;
            let s = v[g.bus] * i.conj() * base;
            c.extend_from_slice(&[y[o], y[o + 1], y[o + 2], y[o + 3], y[o + 4], s.re, s.im]);
        }
        for g in &self.gfms {
            let gs = g.state(y);
            let d = ibr_gfm::gfm_derivatives(&gs, &g.params, v[g.bus], W_BASE);
            c.extend_from_slice(&[gs.theta, d.e_mag, d.p * g.params.mva, d.q * g.params.mva]);
        }
        for l in &st.discrete.ltcs {
            c.push(l.tap);
        }
        c.extend(self.load_powers(&st.discrete, v));
        c.extend(self.zone_loads(&st.discrete, v).into_iter().map(|(_, p)| p));
        for l in &self.linears {
            c.extend_from_slice(&y[l.offset..l.offset + l.a.nrows()]);
        }
        c
    }

    /// Generation minus load minus branch losses, system per unit.
    pub fn power_balance(&self, frozen: &Frozen, st: &SimulationState) -> f64 {
        let v = &st.v;
        let y = &st.y;
        let emfs = self.emfs(y);
        let mut gen = C64::new(0.0, 0.0);
        for (s, e) in frozen.solver.sources().iter().zip(&emfs) {
            gen += v[s.bus] * s.current(*e, v[s.bus]).conj();
        }
        for (k, i) in self.injections(y, v.len()).iter().enumerate() {
            gen += v[k] * i.conj();
        }
        let load: C64 = frozen.solver.loads().iter().map(|l| l.power(v[l.bus].norm())).sum();
        let adm = netmodel::build_admittance(&frozen.network).expect("network already validated");
        let losses: C64 = netmodel::bus_injections(&adm, v).iter().sum();
        (gen - load - losses).norm()
    }
}

/// Trapezoidal integrator with a reused iteration matrix.
#[derive(Debug, Clone, Default)]
pub struct Integrator {
    lu: Option<(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, f64)>,
    /// Total Newton iterations, for diagnostics.
    pub newton_iterations: u64,
    pub jacobian_updates: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub y: Vec<f64>,
    pub f: Vec<f64>,
    pub v: Vec<C64>,
}

impl Integrator {
    pub fn invalidate(&mut self) {
        self.lu = None;
    }

    fn refresh(&mut self, model: &Model, frozen: &Frozen, disc: &DiscreteState, y: &[f64], v: &[C64], dt: f64) -> Result<(), NetError> {
        let j = model.jacobian(frozen, disc, y, v)?;
        let n = y.len();
        let m = DMatrix::identity(n, n) - j * (0.5 * dt);
        self.lu = Some((m.lu(), dt));
        self.jacobian_updates += 1;
        Ok(())
    }

    fn newton(&mut self, model: &Model, frozen: &Frozen, disc: &DiscreteState, y0: &[f64], f0: &[f64], v0: &[C64], dt: f64) -> Option<(StepResult, usize)> {
        let n = y0.len();
        let mut y: Vec<f64> = y0.iter().zip(f0).map(|(a, b)| a + dt * b).collect();
        let mut f = vec![0.0; n];
        let mut v = v0.to_vec();
        for it in 1..=NEWTON_MAX_ITER {
            v = model.derivatives(frozen, disc, &y, &v, &mut f).ok()?;
            let g = DVector::from_iterator(n, (0..n).map(|i| -(y[i] - y0[i] - 0.5 * dt * (f0[i] + f[i]))));
            let (lu, _) = self.lu.as_ref()?;
            let dy = lu.solve(&g)?;
            let mut norm = 0.0_f64;
            for i in 0..n {
                y[i] += dy[i];
                norm = norm.max(dy[i].abs());
            }
            self.newton_iterations += 1;
            if !norm.is_finite() {
                return None;
            }
            if norm < NEWTON_TOL {
                v = model.derivatives(frozen, disc, &y, &v, &mut f).ok()?;
                return Some((StepResult { y, f, v }, it));
            }
        }
        None
    }

    /// One trapezoidal step. `f0` and `v0` belong to `y0`.
    pub fn step(&mut self, model: &Model, frozen: &Frozen, disc: &DiscreteState, y0: &[f64], f0: &[f64], v0: &[C64], dt: f64) -> Option<StepResult> {
        if y0.is_empty() {
            return Some(StepResult { y: Vec::new(), f: Vec::new(), v: v0.to_vec() });
        }
        let stale = !matches!(self.lu, Some((_, h)) if h == dt);
        if stale {
            self.refresh(model, frozen, disc, y0, v0, dt).ok()?;
        }
        if let Some((r, it)) = self.newton(model, frozen, disc, y0, f0, v0, dt) {
            if it > 6 {
                self.invalidate();
            }
            return Some(r);
        }
        if !stale {
            self.refresh(model, frozen, disc, y0, v0, dt).ok()?;
            if let Some((r, _)) = self.newton(model, frozen, disc, y0, f0, v0, dt) {
                return Some(r);
            }
        }
        None
    }
}

/// Initialized state of a scenario.
pub fn initialize(scenario: &Scenario) -> Result<(Model, SimulationState), EngineError> {
    let m = Model::new(scenario)?;
    let s = m.initial_state();
    Ok((m, s))
}

#[derive(Debug, Clone)]
struct Pending {
    t: f64,
    kind: EventKind,
    order: usize,
    target: Option<String>,
    value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub series: TimeSeries,
    pub journal: Vec<JournalEntry>,
    pub scan: EigenScan,
    pub termination: Termination,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub output: RunOutput,
    pub verdict: Verdict,
    pub report: analysis::RunReport,
}

/// Applies one event to the discrete state. Returns the journal payload.
fn apply_event(model: &Model, disc: &mut DiscreteState, ev: &Pending) -> Result<(String, String), EngineError> {
    let target = ev.target.clone().unwrap_or_default();
    match ev.kind {
        EventKind::BranchTrip => {
            let k = model.scenario.network.branch_index(&target).ok_or_else(|| NetError::UnknownBranch(target.clone()))?;
            if !disc.branch_in_service[k] {
                return Ok((target, "already open".into()));
            }
            let mut trial = disc.clone();
            trial.branch_in_service[k] = false;
            model.freeze(&trial)?;
            disc.branch_in_service[k] = false;
            Ok((target, "opened".into()))
        }
        EventKind::TapStep => {
            let k = model.ltcs.iter().position(|l| l.id == target).ok_or_else(|| EngineError::Init(format!("unknown ltc '{target}'")))?;
            let dir = if ev.value.unwrap_or(-1.0) < 0.0 { -1 } else { 1 };
            let old = disc.ltcs[k].tap;
            match slowdyn::tap_step(&disc.ltcs[k], dir) {
                Some(next) => {
                    disc.ltcs[k] = next;
                    Ok((target, format!("tap {old:.4} -> {:.4}", next.tap)))
                }
                None => Ok((target, format!("clamped at {old:.4}"))),
            }
        }
        EventKind::OelLimit => {
            let k = model.machines.iter().position(|m| m.params.id == target).ok_or_else(|| EngineError::Init(format!("unknown machine '{target}'")))?;
            disc.oels[k].status = OelStatus::Limiting;
            Ok((target, format!("forced, limit {:.4}", disc.oels[k].ifd_limit)))
        }
        EventKind::CvrActivate => {
            let delta = ev.value.or(disc.cvr.map(|c| c.delta_setpoint)).unwrap_or(0.05);
            let mut c = CvrController { mode: CvrMode::Timed, t_activate: 0.0, delta_setpoint: delta, applied: false };
            cvr_on_registered(model, disc, &mut c);
            if let Some(cv) = disc.cvr.as_mut() {
                cv.applied = true;
            }
            Ok(("cvr".into(), format!("setpoints x{:.4}", 1.0 - delta)))
        }
        EventKind::Custom => {
            let k = ev.value.unwrap_or(1.0);
            for (l, s) in model.loads.iter().zip(disc.load_scale.iter_mut()) {
                if ev.target.as_deref().is_none_or(|t| t == l.id) {
                    *s *= k;
                }
            }
            Ok((if target.is_empty() { "loads".into() } else { target }, format!("load scale x{k}")))
        }
    }
}

/// Runs the set-point reduction on the tap changers registered with the
/// controller (all when none are listed).
fn cvr_on_registered(model: &Model, disc: &mut DiscreteState, c: &mut CvrController) -> bool {
    let list = model.scenario.devices.cvr.as_ref().map(|p| p.ltcs.clone()).unwrap_or_default();
    let mut idx: Vec<usize> = Vec::new();
    for (k, l) in model.ltcs.iter().enumerate() {
        if list.is_empty() || list.contains(&l.id) {
            idx.push(k);
        }
    }
    let mut sel: Vec<LtcState> = idx.iter().map(|&k| disc.ltcs[k]).collect();
    let applied = slowdyn::cvr_apply(c, f64::INFINITY, &mut sel);
    for (&k, s) in idx.iter().zip(sel) {
        disc.ltcs[k] = s;
    }
    applied
}

/// Integrates a scenario. Errors only on invalid input; numerical failure
/// ends the run with a collapse or divergence termination.
pub fn simulate(scenario: &Scenario) -> Result<RunOutput, EngineError> {
    let model = Model::new(scenario)?;
    simulate_model(&model)
}

pub fn simulate_model(model: &Model) -> Result<RunOutput, EngineError> {
    let sim = &model.scenario.simulation;
    let dt = sim.dt;
    let n_steps = (sim.t_end / dt).round() as usize;
    let mut st = model.initial_state();
    let mut frozen = model.freeze(&st.discrete)?;
    let mut integ = Integrator::default();
    let mut series = TimeSeries::new(model.channel_names.clone());
    let mut journal: Vec<JournalEntry> = Vec::new();
    let mut scan = EigenScan::default();
    let mut eq_guess = st.y.clone();
    let mut next_snapshot = 0.0;
    // Discrete state matching `frozen`; the per-step updates run ahead of it
    // until the next boundary.
    let mut disc_frozen = st.discrete.clone();
    let do_scan = model.scenario.outputs.eigen_scan && model.n_states() > 0;

    let mut scheduled: Vec<Pending> = model
        .scenario
        .events
        .iter()
        .enumerate()
        .map(|(k, e)| Pending { t: e.t, kind: e.kind, order: k, target: e.target.clone(), value: e.value })
        .collect();
    scheduled.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.kind.priority().cmp(&b.kind.priority())).then(a.order.cmp(&b.order)));
    let mut next_event = 0;
    // Events raised by the discrete updates, journaled at the boundary.
    let mut generated: Vec<(EventKind, String, String)> = Vec::new();

    let mut f = vec![0.0; model.n_states()];
    st.v = model.derivatives(&frozen, &st.discrete, &st.y, &st.v, &mut f)?;
    let mut termination = Termination::Completed;
    let mut steps = 0;

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        st.t = t;

        let mut due: Vec<Pending> = Vec::new();
        while next_event < scheduled.len() && scheduled[next_event].t <= t + 0.5 * dt {
            due.push(scheduled[next_event].clone());
            next_event += 1;
        }
        let mut entries: Vec<(u8, usize, JournalEntry)> = Vec::new();
        for (i, (kind, target, payload)) in generated.drain(..).enumerate() {
            entries.push((kind.priority(), usize::MAX / 2 + i, JournalEntry { t, kind, target, payload }));
        }
        let topology_changed = !due.is_empty() || !entries.is_empty();
        if do_scan && topology_changed {
            // Spectra jump at events; a snapshot on each side pins crossings
            // caused by an event to its time.
            let snap = analysis::snapshot(model, &frozen, &disc_frozen, &eq_guess, &st.v, t);
            if let Some(eq) = &snap.equilibrium {
                eq_guess = eq.clone();
            }
            scan.snapshots.push(EigenSnapshot { equilibrium: None, ..snap });
        }
        for ev in &due {
            let (target, payload) = apply_event(model, &mut st.discrete, ev)?;
            entries.push((ev.kind.priority(), ev.order, JournalEntry { t, kind: ev.kind, target, payload }));
        }
        if topology_changed {
            entries.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
            journal.extend(entries.into_iter().map(|e| e.2));
            frozen = match model.freeze(&st.discrete) {
                Ok(fz) => fz,
                Err(e) => {
                    termination = Termination::Collapse { t, reason: e.to_string() };
                    break;
                }
            };
            disc_frozen = st.discrete.clone();
            integ.invalidate();
            match model.derivatives(&frozen, &st.discrete, &st.y, &st.v, &mut f) {
                Ok(v) => st.v = v,
                Err(e) => {
                    termination = Termination::Collapse { t, reason: e.to_string() };
                    break;
                }
            }
        }

        if do_scan && (topology_changed || t >= next_snapshot - 1e-9) {
            let snap = analysis::snapshot(model, &frozen, &st.discrete, &eq_guess, &st.v, t);
            if let Some(eq) = &snap.equilibrium {
                eq_guess = eq.clone();
            }
            scan.snapshots.push(EigenSnapshot { equilibrium: None, ..snap });
            if t >= next_snapshot - 1e-9 {
                next_snapshot += sim.eigen_interval;
            }
        }

        if k % sim.output_every == 0 {
            series.push(t, &model.channels(&st));
        }
        if k == n_steps {
            break;
        }

        let step = integ.step(model, &frozen, &st.discrete, &st.y, &f, &st.v, dt).or_else(|| {
            // Two half steps with a fresh iteration matrix.
            let mut half = Integrator::default();
            let a = half.step(model, &frozen, &st.discrete, &st.y, &f, &st.v, 0.5 * dt)?;
            half.step(model, &frozen, &st.discrete, &a.y, &a.f, &a.v, 0.5 * dt)
        });
        let Some(r) = step else {
            termination = Termination::Collapse { t, reason: "implicit step did not converge at dt/2".into() };
            break;
        };
        if !matches!(integ.lu, Some((_, h)) if h == dt) {
            integ.invalidate();
        }
        st.y = r.y;
        f = r.f;
        st.v = r.v;
        steps += 1;
        // Refresh the lag bounds; a projected state needs fresh derivatives.
        let mut projected = false;
        for (m, flags) in model.machines.iter().zip(st.discrete.lag_limits.iter_mut()) {
            let o = m.offset;
            let before = (st.y[o + 4], st.y[o + 5]);
            m.project(&mut st.y);
            projected |= before != (st.y[o + 4], st.y[o + 5]);
            let next = m.lag_flags(&st.y);
            if next != *flags {
                integ.invalidate();
            }
            *flags = next;
        }
        if projected {
            match model.derivatives(&frozen, &st.discrete, &st.y, &st.v, &mut f) {
                Ok(v) => st.v = v,
                Err(e) => {
                    termination = Termination::Collapse { t: (k + 1) as f64 * dt, reason: e.to_string() };
                    break;
                }
            }
        }
        let t_new = (k + 1) as f64 * dt;

        if let Some(reason) = divergence(model, &st.y) {
            st.t = t_new;
            series.push(t_new, &model.channels(&st));
            termination = Termination::Divergence { t: t_new, reason };
            break;
        }

        // Discrete updates from the new continuous state.
        for (l, (dev, ltc)) in model.ltcs.iter().zip(st.discrete.ltcs.iter_mut()).enumerate() {
            if !dev.enabled {
                continue;
            }
            let (next, ev) = slowdyn::ltc_update(ltc, st.v[dev.to_bus].norm(), dt);
            *ltc = next;
            if let Some(e) = ev {
                generated.push((EventKind::TapStep, model.ltcs[l].id.clone(), format!("tap {:.4} -> {:.4}", e.old_tap, e.new_tap)));
            }
        }
        let ifd = model.field_currents(&st.y, &st.v);
        for ((m, oel), i) in model.machines.iter().zip(st.discrete.oels.iter_mut()).zip(ifd) {
            if !m.params.oel_enabled {
                continue;
            }
            let (next, ev) = machines::oel_update(oel, i, dt);
            *oel = next;
            if let Some(e) = ev {
                generated.push((EventKind::OelLimit, m.params.id.clone(), format!("ifd {:.4} limit {:.4}", e.ifd, e.ifd_limit)));
            }
        }
        if let Some(mut c) = st.discrete.cvr {
            if !c.applied && t_new >= c.t_activate - 1e-9 {
                cvr_on_registered(model, &mut st.discrete, &mut c);
                st.discrete.cvr = Some(c);
                generated.push((EventKind::CvrActivate, "cvr".into(), format!("setpoints x{:.4}", 1.0 - c.delta_setpoint)));
            }
        }
    }

    Ok(RunOutput { series, journal, scan, termination, steps })
}

fn divergence(model: &Model, y: &[f64]) -> Option<String> {
    for m in &model.machines {
        let w = y[m.offset + 1];
        if !w.is_finite() || w.abs() > MAX_SPEED_DEV {
            return Some(format!("machine {} speed deviation {w:.4} pu", m.params.id));
        }
    }
    for g in &model.gfls {
        let x1 = y[g.offset];
        if !x1.is_finite() || x1.abs() > MAX_PLL_DEV {
            return Some(format!("gfl {} PLL frequency deviation {x1:.2} rad/s", g.params.id));
        }
    }
    None
}

/// Integrates and classifies.
pub fn run_scenario(scenario: &Scenario) -> Result<RunResult, EngineError> {
    let output = simulate(scenario)?;
    let report = analysis::analyze_run(scenario, &output);
    Ok(RunResult { verdict: report.verdict, output, report })
}
