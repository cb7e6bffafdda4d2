//! Frozen-slow linearization, eigenvalue scans, oscillation detection and
//! the final instability verdict.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::engine::{DiscreteState, Frozen, JournalEntry, Model, RunOutput, Termination, TimeSeries};
use crate::netmodel::NetError;
use crate::scenario::{EventKind, Scenario};

type C64 = Complex64;

/// Imaginary-part floor separating oscillatory from real crossings, rad/s.
pub const HOPF_IMAG_FLOOR: f64 = 0.5;
/// Default peak-to-peak threshold for a sustained oscillation.
pub const LIMIT_CYCLE_THRESHOLD: f64 = 1e-3;
/// Allowed envelope change between the last two quarter windows.
pub const ENVELOPE_TOL: f64 = 0.1;
/// Largest relative amplitude drop after a window still counted as
/// sustained by [`oscillation_onset`].
pub const ONSET_DECAY_TOL: f64 = 0.05;
/// Default detection window, s.
pub const DEFAULT_WINDOW: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("unknown channel '{0}'")]
    UnknownChannel(String),
    #[error("window [{0}, {1}] holds no samples")]
    EmptyWindow(f64, f64),
    #[error("window of {length} s is shorter than five expected periods ({needed} s)")]
    WindowTooShort { length: f64, needed: f64 },
    #[error("eigenvalue iteration did not converge")]
    EigenNonConvergence,
    #[error("matrix is not square")]
    NotSquare,
    #[error("network solve failed during perturbation: {0}")]
    NearSingular(NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    SLt1,
    SLt3,
    Collapse,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::SLt1 => "s_lt1",
            Verdict::SLt3 => "s_lt3",
            Verdict::Collapse => "collapse",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Stable => 0,
            Verdict::SLt1 => 10,
            Verdict::SLt3 => 11,
            Verdict::Collapse => 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EigenSnapshot {
    pub t: f64,
    /// Sorted by descending real part; empty when no equilibrium was found.
    pub eigenvalues: Vec<C64>,
    pub equilibrium: Option<Vec<f64>>,
    /// Largest derivative magnitude at the point linearized.
    pub residual: f64,
}

impl EigenSnapshot {
    pub fn rightmost(&self) -> Option<C64> {
        self.eigenvalues.first().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossingKind {
    Hopf,
    Snb,
}

impl CrossingKind {
    pub fn name(self) -> &'static str {
        match self {
            CrossingKind::Hopf => "hopf",
            CrossingKind::Snb => "snb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub t: f64,
    pub kind: CrossingKind,
    /// True when the rightmost real part goes from negative to positive.
    pub destabilizing: bool,
    pub imag: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EigenScan {
    pub snapshots: Vec<EigenSnapshot>,
}

/// Dense real-Schur eigenvalues, conjugate-closed and sorted by descending
/// real part (positive imaginary part first within a pair).
pub fn eigen_spectrum(j: &DMatrix<f64>) -> Result<Vec<C64>, AnalysisError> {
    if j.nrows() != j.ncols() {
        return Err(AnalysisError::NotSquare);
    }
    if j.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::Schur::try_new(j.clone(), f64::EPSILON, 100_000).ok_or(AnalysisError::EigenNonConvergence)?;
    let mut ev: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();
    if ev.iter().any(|e| !e.re.is_finite() || !e.im.is_finite()) {
        return Err(AnalysisError::EigenNonConvergence);
    }
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(ev)
}

/// Jacobian of the fast subsystem with the discrete state frozen and the
/// network re-solved for every perturbation.
pub fn linearize_fast(model: &Model, frozen: &Frozen, disc: &DiscreteState, y: &[f64], v_guess: &[C64]) -> Result<DMatrix<f64>, AnalysisError> {
    model.jacobian(frozen, disc, y, v_guess).map_err(AnalysisError::NearSingular)
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Damped Newton search for dy/dt = 0 with the discrete state frozen.
pub fn frozen_equilibrium(model: &Model, frozen: &Frozen, disc: &DiscreteState, guess: &[f64], v_guess: &[C64]) -> Option<(Vec<f64>, Vec<C64>)> {
    let n = guess.len();
    let mut y = guess.to_vec();
    let mut f = vec![0.0; n];
    let mut v = model.derivatives(frozen, disc, &y, v_guess, &mut f).ok()?;
    let mut norm = inf_norm(&f);
    for _ in 0..60 {
        if norm < 1e-10 {
            return Some((y, v));
        }
        let j = model.jacobian(frozen, disc, &y, &v).ok()?;
        let dy = j.lu().solve(&DVector::from_iterator(n, f.iter().map(|x| -x)))?;
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = (0..n).map(|i| y[i] + lambda * dy[i]).collect();
            let mut ft = vec![0.0; n];
            if let Ok(vt) = model.derivatives(frozen, disc, &trial, &v, &mut ft) {
                let nt = inf_norm(&ft);
                if nt.is_finite() && nt < norm * (1.0 - 1e-4 * lambda) {
                    y = trial;
                    f = ft;
                    v = vt;
                    norm = nt;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-4 {
                return None;
            }
        }
    }
    (norm < 1e-10).then_some((y, v))
}

/// Eigenvalues at the short-term equilibrium of the frozen system, searched
/// from each guess in turn.
pub fn snapshot(model: &Model, frozen: &Frozen, disc: &DiscreteState, guess: &[f64], v_guess: &[C64], t: f64) -> EigenSnapshot {
    let Some((y, v)) = frozen_equilibrium(model, frozen, disc, guess, v_guess) else {
        return EigenSnapshot { t, ..Default::default() };
    };
    let eigenvalues = linearize_fast(model, frozen, disc, &y, &v).ok().and_then(|j| eigen_spectrum(&j).ok()).unwrap_or_default();
    let mut f = vec![0.0; y.len()];
    model.derivatives_at(disc, &y, &v, &mut f);
    EigenSnapshot { t, eigenvalues, residual: inf_norm(&f), equilibrium: Some(y) }
}

/// Sign changes of the rightmost real part between adjacent snapshots.
pub fn detect_crossings(scan: &EigenScan) -> Vec<Crossing> {
    let valid: Vec<(f64, C64)> = scan.snapshots.iter().filter_map(|s| s.rightmost().map(|e| (s.t, e))).collect();
    let mut out = Vec::new();
    for w in valid.windows(2) {
        let (t0, e0) = w[0];
        let (t1, e1) = w[1];
        let up = e0.re < 0.0 && e1.re >= 0.0;
        let down = e0.re >= 0.0 && e1.re < 0.0;
        if !(up || down) {
            continue;
        }
        let s = if e1.re != e0.re { -e0.re / (e1.re - e0.re) } else { 0.5 };
        let imag = e0.im.abs() + s * (e1.im.abs() - e0.im.abs());
        out.push(Crossing {
            t: t0 + s * (t1 - t0),
            kind: if imag > HOPF_IMAG_FLOOR { CrossingKind::Hopf } else { CrossingKind::Snb },
            destabilizing: up,
            imag,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitCycleReport {
    pub exists: bool,
    /// Peak-to-peak of the detrended signal.
    pub amplitude: f64,
    /// Zero when fewer than two upward zero crossings were found.
    pub period: f64,
    pub window: (f64, f64),
    /// Relative change of the RMS envelope between the last two quarters.
    pub envelope_change: f64,
}

fn detrend(t: &[f64], x: &[f64], fit: core::ops::Range<usize>) -> Vec<f64> {
    let (tf, xf) = (&t[fit.clone()], &x[fit]);
    let (slope, tm, xm) = line_fit(tf, xf);
    t.iter().zip(x).map(|(a, b)| b - xm - slope * (a - tm)).collect()
}

/// Least-squares line as (slope, mean t, mean x).
fn line_fit(t: &[f64], x: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let xm = x.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|a| (a - tm) * (a - tm)).sum();
    let sxy: f64 = t.iter().zip(x).map(|(a, b)| (a - tm) * (b - xm)).sum();
    (if sxx > 0.0 { sxy / sxx } else { 0.0 }, tm, xm)
}

/// Removes the line through the per-cycle means; unlike a fit to the raw
/// samples this has no bias from the oscillation itself.
fn detrend_by_cycles(t: &[f64], x: &[f64], ups: &[(usize, f64)]) -> Vec<f64> {
    let (ct, cx): (Vec<f64>, Vec<f64>) = ups
        .windows(2)
        .map(|w| {
            let r = w[0].0..w[1].0;
            let n = r.len() as f64;
            (t[r.clone()].iter().sum::<f64>() / n, x[r].iter().sum::<f64>() / n)
        })
        .unzip();
    let (slope, tm, xm) = line_fit(&ct, &cx);
    t.iter().zip(x).map(|(a, b)| b - xm - slope * (a - tm)).collect()
}

/// Sample indices just after each upward zero crossing, with the
/// interpolated crossing times.
fn upward_crossings(t: &[f64], d: &[f64]) -> Vec<(usize, f64)> {
    let mut ups = Vec::new();
    for k in 1..d.len() {
        if d[k - 1] < 0.0 && d[k] >= 0.0 {
            let s = -d[k - 1] / (d[k] - d[k - 1]);
            ups.push((k, t[k - 1] + s * (t[k] - t[k - 1])));
        }
    }
    ups
}

fn span(x: &[f64]) -> f64 {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    hi - lo
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Oscillation test on samples `(t, x)` restricted to `window`.
pub fn detect_limit_cycle_samples(t: &[f64], x: &[f64], window: (f64, f64), expected_period: f64, threshold: f64) -> Result<LimitCycleReport, AnalysisError> {
    let (t0, t1) = window;
    let needed = 5.0 * expected_period;
    if t1 - t0 < needed - 1e-9 {
        return Err(AnalysisError::WindowTooShort { length: t1 - t0, needed });
    }
    let a = t.partition_point(|&s| s < t0 - 1e-9);
    let b = t.partition_point(|&s| s <= t1 + 1e-9);
    if b <= a + 3 {
        return Err(AnalysisError::EmptyWindow(t0, t1));
    }
    let ts = &t[a..b];
    let xs = &x[a..b];
    let n = ts.len();
    let mut d = detrend(ts, xs, 0..n);
    let mut ups = upward_crossings(ts, &d);
    if ups.len() >= 2 {
        d = detrend_by_cycles(ts, xs, &ups);
        ups = upward_crossings(ts, &d);
    }
    let amplitude = if ups.len() >= 2 {
        let cycles: Vec<f64> = ups.windows(2).map(|w| span(&d[w[0].0..w[1].0])).collect();
        cycles.iter().sum::<f64>() / cycles.len() as f64
    } else {
        span(&d)
    };

    let q3 = rms(&d[n / 2..3 * n / 4]);
    let q4 = rms(&d[3 * n / 4..]);
    let envelope_change = if q3.max(q4) > 0.0 { (q4 - q3).abs() / q3.max(q4) } else { 0.0 };

    let period = if ups.len() >= 2 { (ups[ups.len() - 1].1 - ups[0].1) / (ups.len() - 1) as f64 } else { 0.0 };
    let exists = amplitude > threshold && envelope_change < ENVELOPE_TOL && period > 0.0;
    Ok(LimitCycleReport { exists, amplitude, period, window, envelope_change })
}

/// Oscillation test on a named channel with the default expectation of a
/// one-second window.
pub fn detect_limit_cycle(ts: &TimeSeries, channel: &str, window: (f64, f64)) -> Result<LimitCycleReport, AnalysisError> {
    let x = ts.channel(channel).ok_or_else(|| AnalysisError::UnknownChannel(channel.into()))?;
    detect_limit_cycle_samples(&ts.t, x, window, DEFAULT_WINDOW / 5.0, LIMIT_CYCLE_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrace {
    pub channel_a: String,
    pub channel_b: String,
    pub annotation: Option<String>,
    pub window: (f64, f64),
    /// (t, a, b, annotation value or NaN).
    pub samples: Vec<(f64, f64, f64, f64)>,
}

pub fn extract_phase_trace(ts: &TimeSeries, a: &str, b: &str, window: (f64, f64), annotation: Option<&str>) -> Result<PhaseTrace, AnalysisError> {
    let xa = ts.channel(a).ok_or_else(|| AnalysisError::UnknownChannel(a.into()))?;
    let xb = ts.channel(b).ok_or_else(|| AnalysisError::UnknownChannel(b.into()))?;
    let xc = match annotation {
        Some(c) => Some(ts.channel(c).ok_or_else(|| AnalysisError::UnknownChannel(c.into()))?),
        None => None,
    };
    let r = ts.window(window.0, window.1);
    if r.is_empty() {
        return Err(AnalysisError::EmptyWindow(window.0, window.1));
    }
    let samples = r.map(|k| (ts.t[k], xa[k], xb[k], xc.map_or(f64::NAN, |c| c[k]))).collect();
    Ok(PhaseTrace {
        channel_a: a.into(),
        channel_b: b.into(),
        annotation: annotation.map(String::from),
        window,
        samples,
    })
}

/// Start of the earliest detection window that reports a limit cycle such
/// that no later window drops below threshold or below the window's own
/// amplitude, and no window in between has shrunk against the disjoint
/// window before it (both up to a small tolerance). The amplitude checks
/// reject slowly ringing stable modes, which pass the per-window envelope
/// test.
pub fn oscillation_onset(ts: &TimeSeries, channel: &str, t_stop: f64) -> Option<f64> {
    let x = ts.channel(channel)?;
    let t_first = *ts.t.first()?;
    let step = DEFAULT_WINDOW / 2.0;
    let mut reports = Vec::new();
    let mut t0 = t_first;
    while t0 + DEFAULT_WINDOW <= t_stop + 1e-9 {
        let r = detect_limit_cycle_samples(&ts.t, x, (t0, t0 + DEFAULT_WINDOW), DEFAULT_WINDOW / 5.0, LIMIT_CYCLE_THRESHOLD).ok()?;
        reports.push(r);
        t0 += step;
    }
    let mut onset = None;
    let mut later_min = f64::INFINITY;
    for (k, r) in reports.iter().enumerate().rev() {
        let shrunk = k >= 2 && r.amplitude < reports[k - 2].amplitude * (1.0 - ONSET_DECAY_TOL);
        if r.amplitude <= LIMIT_CYCLE_THRESHOLD || later_min < r.amplitude * (1.0 - ONSET_DECAY_TOL) || shrunk {
            break;
        }
        later_min = later_min.min(r.amplitude);
        if r.exists {
            onset = Some(r.window.0);
        }
    }
    onset
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub verdict: Verdict,
    pub crossings: Vec<Crossing>,
    pub oscillation_channel: Option<String>,
    /// Oscillation test over the last second of the run.
    pub final_cycle: Option<LimitCycleReport>,
    pub onset: Option<f64>,
    pub oel_times: Vec<f64>,
    pub tap_times: Vec<f64>,
    pub termination: Termination,
}

/// Default oscillation channel: the first grid-following inverter terminal
/// voltage, else the first machine speed.
pub fn default_oscillation_channel(scenario: &Scenario) -> Option<String> {
    if let Some(c) = &scenario.outputs.oscillation_channel {
        return Some(c.clone());
    }
    let d = &scenario.devices;
    d.gfl
        .first()
        .map(|g| format!("v.{}", g.bus))
        .or_else(|| d.machine.first().map(|m| format!("{}.omega", m.id)))
}

pub fn classify_instability(ts: &TimeSeries, scan: &EigenScan, journal: &[JournalEntry], termination: &Termination, channel: Option<&str>) -> Verdict {
    match termination {
        Termination::Collapse { .. } => return Verdict::Collapse,
        Termination::Divergence { .. } | Termination::Completed => {}
    }
    let t_stop = match termination {
        Termination::Divergence { t, .. } => *t,
        _ => ts.t.last().copied().unwrap_or(0.0),
    };
    let crossings = detect_crossings(scan);
    let hopf = crossings.iter().find(|c| c.destabilizing && c.kind == CrossingKind::Hopf);
    if let (Some(_), Some(ch)) = (hopf, channel) {
        if oscillation_onset(ts, ch, t_stop).is_some() {
            return Verdict::SLt3;
        }
    }
    let slow_event = |t: f64| journal.iter().any(|e| matches!(e.kind, EventKind::TapStep | EventKind::OelLimit) && e.t <= t);
    if let Termination::Divergence { t, .. } = termination {
        return if slow_event(*t) { Verdict::SLt1 } else { Verdict::Collapse };
    }
    if crossings.iter().any(|c| c.destabilizing && c.kind == CrossingKind::Snb && slow_event(c.t)) {
        return Verdict::SLt1;
    }
    Verdict::Stable
}

pub fn analyze_run(scenario: &Scenario, out: &RunOutput) -> RunReport {
    let channel = default_oscillation_channel(scenario);
    let verdict = classify_instability(&out.series, &out.scan, &out.journal, &out.termination, channel.as_deref());
    let t_end = out.series.t.last().copied().unwrap_or(0.0);
    let final_cycle = channel
        .as_deref()
        .and_then(|c| detect_limit_cycle(&out.series, c, (t_end - DEFAULT_WINDOW, t_end)).ok());
    let onset = channel.as_deref().and_then(|c| oscillation_onset(&out.series, c, t_end));
    let times = |k: EventKind| out.journal.iter().filter(|e| e.kind == k).map(|e| e.t).collect::<Vec<_>>();
    RunReport {
        verdict,
        crossings: detect_crossings(&out.scan),
        oscillation_channel: channel,
        final_cycle,
        onset,
        oel_times: times(EventKind::OelLimit),
        tap_times: times(EventKind::TapStep),
        termination: out.termination.clone(),
    }
}
