//! Network description, admittance assembly, power flow and the per-step
//! phasor network solution.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type C64 = Complex64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("branch `{branch}` references unknown bus `{bus}`")]
    DanglingBranch { branch: String, bus: String },
    #[error("branch `{0}` has zero impedance")]
    ZeroImpedance(String),
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("unknown bus `{0}`")]
    UnknownBus(String),
    #[error("network needs exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("bus `{0}` would be islanded from the slack bus")]
    Islanding(String),
    #[error("invalid bus `{bus}`: {reason}")]
    InvalidBus { bus: String, reason: &'static str },
    #[error("invalid branch `{branch}`: {reason}")]
    InvalidBranch { branch: String, reason: &'static str },
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },
    #[error("singular matrix")]
    Singular,
    #[error("network solution did not converge in {iterations} iterations (last update {update:.3e})")]
    NetworkDiverged { iterations: usize, update: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: String,
    pub base_kv: f64,
    pub kind: BusKind,
    /// Voltage magnitude held by slack and PV buses.
    #[serde(default = "one")]
    pub v_setpoint: f64,
    /// Total active generation at a PV bus.
    #[serde(default)]
    pub p_gen_mw: f64,
    #[serde(default)]
    pub p_load0: f64,
    #[serde(default)]
    pub q_load0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub id: String,
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_shunt: f64,
    /// Off-nominal ratio on the `from` side.
    #[serde(default = "one")]
    pub tap_ratio: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    #[serde(default = "default_base")]
    pub s_base_mva: f64,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub branches: Vec<Branch>,
}

fn default_base() -> f64 {
    100.0
}

impl NetworkModel {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn branch_index(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> Result<usize, NetError> {
        let slacks: Vec<usize> = (0..self.buses.len())
            .filter(|&i| self.buses[i].kind == BusKind::Slack)
            .collect();
        if slacks.len() != 1 {
            return Err(NetError::SlackCount(slacks.len()));
        }
        Ok(slacks[0])
    }

    /// Checks bus and branch invariants and that every branch end exists.
    pub fn validate(&self) -> Result<(), NetError> {
        self.slack_index()?;
        for b in &self.buses {
            if !(b.base_kv > 0.0) {
                return Err(NetError::InvalidBus { bus: b.id.clone(), reason: "base_kv must be positive" });
            }
            if b.kind != BusKind::Pq && !(0.8..=1.2).contains(&b.v_setpoint) {
                return Err(NetError::InvalidBus { bus: b.id.clone(), reason: "v_setpoint outside [0.8, 1.2]" });
            }
        }
        for br in &self.branches {
            for end in [&br.from, &br.to] {
                if self.bus_index(end).is_none() {
                    return Err(NetError::DanglingBranch { branch: br.id.clone(), bus: end.clone() });
                }
            }
            if br.x == 0.0 && br.r == 0.0 {
                return Err(NetError::ZeroImpedance(br.id.clone()));
            }
            if br.x == 0.0 {
                return Err(NetError::InvalidBranch { branch: br.id.clone(), reason: "x must be nonzero" });
            }
            if !(0.8..=1.2).contains(&br.tap_ratio) {
                return Err(NetError::InvalidBranch { branch: br.id.clone(), reason: "tap_ratio outside [0.8, 1.2]" });
            }
        }
        Ok(())
    }

    /// Returns the first bus that cannot reach the slack through in-service branches.
    pub fn find_islanded_bus(&self) -> Option<usize> {
        let slack = self.slack_index().ok()?;
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            if let (Some(f), Some(t)) = (self.bus_index(&br.from), self.bus_index(&br.to)) {
                adj[f].push(t);
                adj[t].push(f);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([slack]);
        seen[slack] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().position(|s| !s)
    }
}

/// Dense complex bus admittance matrix in system per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub entries: DMatrix<C64>,
}

impl AdmittanceMatrix {
    pub fn dimension(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.entries[(i, j)]
    }
}

/// Pi-model assembly; the tap sits on the `from` side.
pub fn build_admittance(network: &NetworkModel) -> Result<AdmittanceMatrix, NetError> {
    let n = network.buses.len();
    let mut y = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    for br in network.branches.iter().filter(|b| b.in_service) {
        let f = network
            .bus_index(&br.from)
            .ok_or_else(|| NetError::DanglingBranch { branch: br.id.clone(), bus: br.from.clone() })?;
        let t = network
            .bus_index(&br.to)
            .ok_or_else(|| NetError::DanglingBranch { branch: br.id.clone(), bus: br.to.clone() })?;
        let z = C64::new(br.r, br.x);
        if z.norm() == 0.0 {
            return Err(NetError::ZeroImpedance(br.id.clone()));
        }
        let ys = z.inv();
        let half_b = C64::new(0.0, br.b_shunt / 2.0);
        let a = br.tap_ratio;
        y[(f, f)] += (ys + half_b) / (a * a);
        y[(t, t)] += ys + half_b;
        y[(f, t)] -= ys / a;
        y[(t, f)] -= ys / a;
    }
    Ok(AdmittanceMatrix { entries: y })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub mismatch_inf_norm: f64,
    pub iterations: usize,
}

impl PowerFlowSolution {
    pub fn phasors(&self) -> Vec<C64> {
        self.v_mag
            .iter()
            .zip(&self.v_ang)
            .map(|(&m, &a)| C64::from_polar(m, a))
            .collect()
    }
}

/// Complex power injected at every bus, S = V conj(Y V).
pub fn bus_injections(adm: &AdmittanceMatrix, v: &[C64]) -> Vec<C64> {
    let vv = DVector::from_column_slice(v);
    let i = &adm.entries * &vv;
    v.iter().zip(i.iter()).map(|(vk, ik)| vk * ik.conj()).collect()
}

/// Polar Newton-Raphson from a flat start.
pub fn solve_power_flow(network: &NetworkModel, tol: f64, max_iter: usize) -> Result<PowerFlowSolution, NetError> {
    network.validate()?;
    let adm = build_admittance(network)?;
    let n = network.buses.len();
    let base = network.s_base_mva;
    let p_spec: Vec<f64> = network.buses.iter().map(|b| (b.p_gen_mw - b.p_load0) / base).collect();
    let q_spec: Vec<f64> = network.buses.iter().map(|b| -b.q_load0 / base).collect();

    let ang_idx: Vec<usize> = (0..n).filter(|&i| network.buses[i].kind != BusKind::Slack).collect();
    let mag_idx: Vec<usize> = (0..n).filter(|&i| network.buses[i].kind == BusKind::Pq).collect();
    let na = ang_idx.len();
    let nm = mag_idx.len();

    let mut vm: Vec<f64> = network
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Pq { 1.0 } else { b.v_setpoint })
        .collect();
    let mut va = vec![0.0; n];

    let mismatch = |vm: &[f64], va: &[f64]| -> (Vec<f64>, f64) {
        let v: Vec<C64> = (0..n).map(|k| C64::from_polar(vm[k], va[k])).collect();
        let s = bus_injections(&adm, &v);
        let mut f = Vec::with_capacity(na + nm);
        for &k in &ang_idx {
            f.push(s[k].re - p_spec[k]);
        }
        for &k in &mag_idx {
            f.push(s[k].im - q_spec[k]);
        }
        let norm = f.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        (f, norm)
    };

    let (mut f, mut norm) = mismatch(&vm, &va);
    let mut iterations = 0;
    while norm >= tol {
        if iterations >= max_iter || !norm.is_finite() {
            return Err(NetError::PowerFlowDiverged { iterations, mismatch: norm });
        }
        let jac = pf_jacobian(&adm, &vm, &va, &ang_idx, &mag_idx);
        let rhs = DVector::from_iterator(na + nm, f.iter().map(|x| -x));
        let dx = jac.lu().solve(&rhs).ok_or(NetError::Singular)?;
        for (r, &k) in ang_idx.iter().enumerate() {
            va[k] += dx[r];
        }
        for (r, &k) in mag_idx.iter().enumerate() {
            vm[k] += dx[na + r];
        }
        iterations += 1;
        (f, norm) = mismatch(&vm, &va);
    }
    Ok(PowerFlowSolution { v_mag: vm, v_ang: va, mismatch_inf_norm: norm, iterations })
}

fn pf_jacobian(adm: &AdmittanceMatrix, vm: &[f64], va: &[f64], ang_idx: &[usize], mag_idx: &[usize]) -> DMatrix<f64> {
    let n = vm.len();
    let v: Vec<C64> = (0..n).map(|k| C64::from_polar(vm[k], va[k])).collect();
    let y = &adm.entries;
    let ibus: Vec<C64> = (0..n).map(|i| (0..n).map(|k| y[(i, k)] * v[k]).sum()).collect();
    // dS/dθ and dS/d|V| in complex form.
    let ds_dth = |i: usize, k: usize| -> C64 {
        let j = C64::i();
        let mut d = -j * v[i] * (y[(i, k)] * v[k]).conj();
        if i == k {
            d += j * v[i] * ibus[i].conj();
        }
        d
    };
    let ds_dvm = |i: usize, k: usize| -> C64 {
        let vn_k = v[k] / vm[k];
        let mut d = v[i] * (y[(i, k)] * vn_k).conj();
        if i == k {
            d += vn_k * ibus[i].conj();
        }
        d
    };
    let na = ang_idx.len();
    let nm = mag_idx.len();
    let mut jac = DMatrix::zeros(na + nm, na + nm);
    for (r, &i) in ang_idx.iter().enumerate() {
        for (c, &k) in ang_idx.iter().enumerate() {
            jac[(r, c)] = ds_dth(i, k).re;
        }
        for (c, &k) in mag_idx.iter().enumerate() {
            jac[(r, na + c)] = ds_dvm(i, k).re;
        }
    }
    for (r, &i) in mag_idx.iter().enumerate() {
        for (c, &k) in ang_idx.iter().enumerate() {
            jac[(na + r, c)] = ds_dth(i, k).im;
        }
        for (c, &k) in mag_idx.iter().enumerate() {
            jac[(na + r, na + c)] = ds_dvm(i, k).im;
        }
    }
    jac
}

/// Returns an updated copy with the branch switched. Switching to the
/// current status is a no-op.
pub fn apply_branch_event(network: &NetworkModel, branch_id: &str, in_service: bool) -> Result<NetworkModel, NetError> {
    let idx = network
        .branch_index(branch_id)
        .ok_or_else(|| NetError::UnknownBranch(branch_id.into()))?;
    let mut out = network.clone();
    out.branches[idx].in_service = in_service;
    if let Some(bus) = out.find_islanded_bus() {
        return Err(NetError::Islanding(out.buses[bus].id.clone()));
    }
    Ok(out)
}

/// Voltage-dependent load in system per unit: P = p0 (v/v0)^alpha, Q = q0 (v/v0)^beta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusLoad {
    pub bus: usize,
    pub p0: f64,
    pub q0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub v0: f64,
}

impl BusLoad {
    /// Admittance drawing (p0, q0) at v0, embedded in the factored matrix.
    pub fn nominal_admittance(&self) -> C64 {
        C64::new(self.p0, -self.q0) / (self.v0 * self.v0)
    }

    pub fn power(&self, vm: f64) -> C64 {
        if vm <= 0.0 {
            return C64::new(0.0, 0.0);
        }
        let r = vm / self.v0;
        C64::new(self.p0 * r.powf(self.alpha), self.q0 * r.powf(self.beta))
    }

    /// Current drawn from the bus.
    pub fn current(&self, v: C64) -> C64 {
        let vm = v.norm();
        if vm <= 0.0 {
            return C64::new(0.0, 0.0);
        }
        (self.power(vm) / v).conj()
    }
}

/// Voltage source behind an impedance, optionally with a current magnitude clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedSource {
    pub bus: usize,
    pub z: C64,
    pub i_max: Option<f64>,
}

impl FixedSource {
    /// Current injected into the bus for internal voltage `e`.
    pub fn current(&self, e: C64, v: C64) -> C64 {
        let i = (e - v) / self.z;
        match self.i_max {
            Some(limit) if i.norm() > limit => i * (limit / i.norm()),
            _ => i,
        }
    }
}

/// Factored network with Norton admittances of the fixed sources and the
/// nominal load admittances embedded. Rebuild after topology or tap changes.
#[derive(Debug, Clone)]
pub struct NetworkSolver {
    branches: DMatrix<C64>,
    lu: nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>,
    sources: Vec<FixedSource>,
    loads: Vec<BusLoad>,
    pub tol: f64,
    pub max_iter: usize,
}

impl NetworkSolver {
    pub fn new(adm: &AdmittanceMatrix, sources: &[FixedSource], loads: &[BusLoad]) -> Result<Self, NetError> {
        let mut y = adm.entries.clone();
        for s in sources {
            y[(s.bus, s.bus)] += s.z.inv();
        }
        for l in loads {
            y[(l.bus, l.bus)] += l.nominal_admittance();
        }
        let lu = y.lu();
        if !lu.is_invertible() {
            return Err(NetError::Singular);
        }
        Ok(Self {
            branches: adm.entries.clone(),
            lu,
            sources: sources.to_vec(),
            loads: loads.to_vec(),
            tol: 1e-11,
            max_iter: 50,
        })
    }

    pub fn dimension(&self) -> usize {
        self.branches.nrows()
    }

    pub fn sources(&self) -> &[FixedSource] {
        &self.sources
    }

    pub fn loads(&self) -> &[BusLoad] {
        &self.loads
    }

    /// Solves Y V = I(V). `injections` are bus-indexed device currents
    /// (current sources), `emfs` the internal voltages of the fixed sources.
    pub fn solve(&self, injections: &[C64], emfs: &[C64], v_guess: &[C64]) -> Result<Vec<C64>, NetError> {
        let n = self.dimension();
        let mut base = DVector::from_column_slice(injections);
        for (s, e) in self.sources.iter().zip(emfs) {
            base[s.bus] += e / s.z;
        }
        let mut v: Vec<C64> = v_guess.to_vec();
        let mut rhs = base.clone();
        let mut update = f64::INFINITY;
        for _ in 0..self.max_iter {
            rhs.copy_from(&base);
            for l in &self.loads {
                let vb = v[l.bus];
                rhs[l.bus] -= l.current(vb) - l.nominal_admittance() * vb;
            }
            for (s, e) in self.sources.iter().zip(emfs) {
                if s.i_max.is_some() {
                    let vb = v[s.bus];
                    rhs[s.bus] += s.current(*e, vb) - (e - vb) / s.z;
                }
            }
            let next = self.lu.solve(&rhs).ok_or(NetError::Singular)?;
            update = (0..n).fold(0.0_f64, |m, k| m.max((next[k] - v[k]).norm()));
            v.copy_from_slice(next.as_slice());
            if !update.is_finite() {
                break;
            }
            if update < self.tol {
                return Ok(v);
            }
        }
        Err(NetError::NetworkDiverged { iterations: self.max_iter, update })
    }

    /// Infinity norm of Y V minus all device and load currents.
    pub fn kirchhoff_residual(&self, injections: &[C64], emfs: &[C64], v: &[C64]) -> f64 {
        let vv = DVector::from_column_slice(v);
        let mut r = &self.branches * &vv;
        for k in 0..v.len() {
            r[k] -= injections[k];
        }
        for (s, e) in self.sources.iter().zip(emfs) {
            r[s.bus] -= s.current(*e, v[s.bus]);
        }
        for l in &self.loads {
            r[l.bus] += l.current(v[l.bus]);
        }
        r.iter().fold(0.0_f64, |m, x| m.max(x.norm()))
    }
}

/// One-shot network solution with a flat 1.0 pu guess.
pub fn solve_network(
    adm: &AdmittanceMatrix,
    injections: &[C64],
    sources: &[(FixedSource, C64)],
    loads: &[BusLoad],
) -> Result<Vec<C64>, NetError> {
    let (fixed, emfs): (Vec<FixedSource>, Vec<C64>) = sources.iter().copied().unzip();
    if fixed.is_empty() {
        return Err(NetError::Singular);
    }
    let solver = NetworkSolver::new(adm, &fixed, loads)?;
    let guess = vec![C64::new(1.0, 0.0); adm.dimension()];
    solver.solve(injections, &emfs, &guess)
}
