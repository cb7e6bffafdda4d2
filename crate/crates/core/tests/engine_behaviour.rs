mod common;

use common::{max_abs, smib};
use ltdyn_core::analysis::{classify_instability, eigen_spectrum, linearize_fast, EigenScan, EigenSnapshot, Verdict};
use ltdyn_core::engine::{initialize, run_scenario, simulate, EngineError, Integrator, JournalEntry, Termination, TimeSeries};
use ltdyn_core::ibr_gfl::GflParams;
use ltdyn_core::netmodel::BusKind;
use ltdyn_core::reduced_system::{build_preset, CorridorParams};
use ltdyn_core::scenario::{EventKind, EventSpec, Scenario};
use num_complex::Complex64 as C;

fn quiet_preset(case: u8, t_end: f64) -> Scenario {
    let mut s = build_preset(case).unwrap();
    s.events.clear();
    s.simulation.t_end = t_end;
    s
}

fn event(kind: EventKind, t: f64, target: Option<&str>, value: Option<f64>) -> EventSpec {
    EventSpec { kind, t, target: target.map(String::from), value }
}

fn assert_flat(ts: &TimeSeries, tol: f64) {
    for (name, x) in ts.names.iter().zip(&ts.data) {
        let drift = x.iter().map(|v| (v - x[0]).abs()).fold(0.0, f64::max);
        assert!(drift < tol, "{name} drifts by {drift:e}");
    }
}

#[test]
fn undisturbed_runs_stay_at_rest() {
    for s in [smib(0.002, 100.0), quiet_preset(1, 100.0), quiet_preset(4, 100.0)] {
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.output.termination, Termination::Completed);
        assert_flat(&r.output.series, 1e-6);
        assert_eq!(r.verdict, Verdict::Stable, "{}", s.name);
        assert!(r.report.crossings.is_empty());
        assert!(r.output.journal.is_empty());
    }
}

#[test]
fn initial_state_is_an_equilibrium() {
    let mut cases = vec![smib(0.002, 1.0)];
    cases.extend((1..=4).map(|c| build_preset(c).unwrap()));
    for s in cases {
        let (model, st) = initialize(&s).unwrap();
        let frozen = model.freeze(&st.discrete).unwrap();
        let mut f = vec![0.0; model.n_states()];
        let v = model.derivatives(&frozen, &st.discrete, &st.y, &st.v, &mut f).unwrap();
        assert!(max_abs(&f) < 1e-8, "{}: derivative norm {:e}", s.name, max_abs(&f));
        assert!(model.network_residual(&frozen, &st.y, &v) < 1e-8);
        assert!(st.discrete.ltcs.iter().all(|l| l.timer == 0.0));

        // One step from rest changes nothing.
        let r = Integrator::default().step(&model, &frozen, &st.discrete, &st.y, &f, &v, s.simulation.dt).unwrap();
        let moved = r.y.iter().zip(&st.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 1e-12, "{}: step from rest moved {moved:e}", s.name);

        // Fast-subsystem spectrum at rest has nothing in the right half plane.
        let j = linearize_fast(&model, &frozen, &st.discrete, &st.y, &st.v).unwrap();
        assert!(eigen_spectrum(&j).unwrap()[0].re <= 1e-6, "{}", s.name);
    }
}

#[test]
fn infeasible_dispatch_is_rejected() {
    let mut s = smib(0.002, 1.0);
    s.network.buses[1].p_gen_mw = 2000.0;
    assert!(initialize(&s).is_err());

    // An inverter cannot carry more than its current limit.
    let mut s = smib(0.002, 1.0);
    s.devices.machine.clear();
    s.devices.gfl.push(GflParams { id: "inv".into(), bus: "gen".into(), mva: 200.0, ..Default::default() });
    s.network.buses[1].p_gen_mw = 300.0;
    assert!(matches!(initialize(&s), Err(EngineError::Init(_))));

    // Generation with nothing to carry it.
    let mut s = smib(0.002, 1.0);
    s.devices.machine.clear();
    assert!(matches!(initialize(&s), Err(EngineError::Init(_))));
}

#[test]
fn power_balances_along_a_transient() {
    let s = smib(0.002, 1.0);
    let (model, mut st) = initialize(&s).unwrap();
    st.y[0] += 0.2;
    let frozen = model.freeze(&st.discrete).unwrap();
    let mut f = vec![0.0; model.n_states()];
    st.v = model.derivatives(&frozen, &st.discrete, &st.y, &st.v, &mut f).unwrap();
    let mut integ = Integrator::default();
    for _ in 0..500 {
        assert!(model.power_balance(&frozen, &st) < 1e-6);
        let r = integ.step(&model, &frozen, &st.discrete, &st.y, &f, &st.v, 0.002).unwrap();
        st.y = r.y;
        st.v = r.v;
        f = r.f;
    }
    assert!(model.power_balance(&frozen, &st) < 1e-6);
}

fn journal_shape(j: &[JournalEntry]) -> Vec<(EventKind, String)> {
    j.iter().map(|e| (e.kind, e.target.clone())).collect()
}

#[test]
fn simultaneous_events_follow_kind_priority_then_declaration() {
    let mut a = quiet_preset(1, 1.0);
    a.events = vec![
        event(EventKind::Custom, 0.5, Some("load_c"), Some(1.01)),
        event(EventKind::TapStep, 0.5, Some("ltc_c"), Some(-1.0)),
        event(EventKind::OelLimit, 0.5, Some("g_c"), None),
        event(EventKind::BranchTrip, 0.5, Some("corridor_b"), None),
        event(EventKind::TapStep, 0.5, Some("ltc_c"), Some(1.0)),
    ];
    let mut b = a.clone();
    b.events.reverse();
    let ra = simulate(&a).unwrap();
    let rb = simulate(&b).unwrap();
    let kinds: Vec<EventKind> = ra.journal.iter().map(|e| e.kind).collect();
    assert_eq!(
        kinds,
        [EventKind::BranchTrip, EventKind::OelLimit, EventKind::TapStep, EventKind::TapStep, EventKind::Custom]
    );
    assert!(ra.journal[2].payload.contains("1.0000 -> 0.9900"));
    assert!(rb.journal[2].payload.contains("1.0000 -> 1.0100"));
    assert_eq!(journal_shape(&ra.journal), journal_shape(&rb.journal));
    // Both tap orders end on the same ratio, so the trajectories agree.
    let tap = |o: &ltdyn_core::engine::RunOutput| *o.series.channel("ltc_c.tap").unwrap().last().unwrap();
    assert_eq!(tap(&ra), tap(&rb));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut s = build_preset(1).unwrap();
    s.simulation.t_end = 60.0;
    assert_eq!(simulate(&s).unwrap(), simulate(&s).unwrap());
}

#[test]
fn forced_tap_beyond_its_range_is_clamped() {
    let mut s = quiet_preset(1, 1.0);
    s.devices.ltc[0].tap_min = 1.0;
    s.events = vec![event(EventKind::TapStep, 0.2, Some("ltc_c"), Some(-1.0))];
    let out = simulate(&s).unwrap();
    assert_eq!(out.journal.len(), 1);
    assert!(out.journal[0].payload.starts_with("clamped"), "{}", out.journal[0].payload);
    assert!(out.series.channel("ltc_c.tap").unwrap().iter().all(|&t| t == 1.0));
    assert_flat(&out.series, 1e-6);
}

#[test]
fn trips_rebuild_the_network() {
    let mut s = smib(0.002, 3.0);
    s.events = vec![event(EventKind::BranchTrip, 1.0, Some("l2"), None), event(EventKind::BranchTrip, 2.0, Some("l2"), None)];
    let out = simulate(&s).unwrap();
    assert_eq!(out.journal[0].payload, "opened");
    assert_eq!(out.journal[1].payload, "already open");
    // Terminal voltage moves once the parallel path is gone.
    let v = out.series.channel("v.gen").unwrap();
    let k = out.series.t.partition_point(|&t| t < 1.05);
    assert!((v[k] - v[0]).abs() > 1e-3);

    // Opening the last path islands the machine.
    s.events[1].target = Some("l1".into());
    assert!(simulate(&s).is_err());
}

#[test]
fn rotor_swings_die_out_after_a_trip() {
    let mut s = smib(0.002, 30.0);
    s.events = vec![event(EventKind::BranchTrip, 1.0, Some("l2"), None)];
    let out = simulate(&s).unwrap();
    let ts = &out.series;
    let w = ts.channel("g1.omega").unwrap();
    let peak = |a: f64, b: f64| ts.window(a, b).map(|k| w[k].abs()).fold(0.0, f64::max);
    let envelope: Vec<f64> = (0..9).map(|k| peak(3.0 + 3.0 * k as f64, 6.0 + 3.0 * k as f64)).collect();
    assert!(envelope.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-9) + 1e-12), "{envelope:?}");
    assert!(envelope[8] < 0.1 * peak(1.0, 3.0));
}

#[test]
fn limiter_holds_field_current_at_its_limit() {
    let mut s = smib(0.002, 120.0);
    let (model, st) = initialize(&s).unwrap();
    let ifd0 = model.field_currents(&st.y, &st.v)[0];
    s.devices.machine[0].ifd_limit = 0.95 * ifd0;
    s.devices.machine[0].oel_delay = 10.0;
    let r = run_scenario(&s).unwrap();
    assert_eq!(r.report.oel_times.len(), 1);
    assert!((r.report.oel_times[0] - 10.0).abs() < 0.01);
    let ifd = *r.output.series.channel("g1.ifd").unwrap().last().unwrap();
    assert!((ifd - 0.95 * ifd0).abs() < 1e-3, "ifd {ifd} vs limit {}", 0.95 * ifd0);
}

#[test]
fn mild_contingency_reaches_a_quiescent_long_term_point() {
    let p = CorridorParams { p_load: 700.0, t_end: 200.0, ..Default::default() };
    let s = p.build(1).unwrap();
    let r = run_scenario(&s).unwrap();
    assert_eq!(r.verdict, Verdict::Stable);
    assert!(r.report.tap_times.iter().all(|&t| t < 100.0));
    let ts = &r.output.series;
    // Continuous states have settled and the tap changer sits in its deadband.
    let tail = ts.window(170.0, 200.0);
    for (name, x) in ts.names.iter().zip(&ts.data) {
        let (lo, hi) = x[tail.clone()].iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!(hi - lo < 1e-5, "{name} still moving");
    }
    let vd = ts.channel("v.dist").unwrap();
    assert!((vd.last().unwrap() - vd[0]).abs() <= s.devices.ltc[0].deadband);
}

#[test]
fn case_one_never_rests_before_the_hopf_crossing() {
    let s = build_preset(1).unwrap();
    let r = run_scenario(&s).unwrap();
    let hopf = r.report.crossings.iter().find(|c| c.destabilizing).unwrap().t;
    let ts = &r.output.series;
    let vd = ts.channel("v.dist").unwrap();
    let db = s.devices.ltc[0].deadband;
    // After the post-trip transient the tap changer timer is always running.
    for k in ts.window(s.events[0].t + 1.0, hopf) {
        assert!((vd[k] - vd[0]).abs() > db, "quiescent at {}", ts.t[k]);
    }
}

#[test]
fn heavy_load_step_collapses() {
    let mut s = build_preset(3).unwrap();
    s.simulation.t_end = 20.0;
    s.events.push(event(EventKind::Custom, 10.0, None, Some(2.5)));
    let r = run_scenario(&s).unwrap();
    assert!(matches!(r.output.termination, Termination::Collapse { .. }), "{:?}", r.output.termination);
    assert_eq!(r.verdict, Verdict::Collapse);
}

fn entry(t: f64, kind: EventKind) -> JournalEntry {
    JournalEntry { t, kind, target: "x".into(), payload: String::new() }
}

fn snapshots(points: &[(f64, f64)]) -> EigenScan {
    EigenScan {
        snapshots: points
            .iter()
            .map(|&(t, re)| EigenSnapshot { t, eigenvalues: vec![C::new(re, 0.0)], equilibrium: None, residual: 0.0 })
            .collect(),
    }
}

#[test]
fn aperiodic_losses_after_slow_events_are_s_lt1() {
    let ts = TimeSeries::new(vec![]);
    let diverged = Termination::Divergence { t: 80.0, reason: "speed".into() };
    let trip_only = [entry(5.0, EventKind::BranchTrip)];
    let with_oel = [entry(5.0, EventKind::BranchTrip), entry(70.0, EventKind::OelLimit)];
    assert_eq!(classify_instability(&ts, &EigenScan::default(), &with_oel, &diverged, None), Verdict::SLt1);
    assert_eq!(classify_instability(&ts, &EigenScan::default(), &trip_only, &diverged, None), Verdict::Collapse);

    let snb = snapshots(&[(60.0, -0.1), (65.0, -0.05), (75.0, 0.05)]);
    let done = Termination::Completed;
    assert_eq!(classify_instability(&ts, &snb, &with_oel, &done, None), Verdict::SLt1);
    assert_eq!(classify_instability(&ts, &snb, &trip_only, &done, None), Verdict::Stable);
    let collapsed = Termination::Collapse { t: 80.0, reason: "network".into() };
    assert_eq!(classify_instability(&ts, &snb, &with_oel, &collapsed, None), Verdict::Collapse);
}

#[test]
fn pure_load_bus_needs_no_device() {
    let mut s = smib(0.002, 1.0);
    s.network.buses[1].kind = BusKind::Pq;
    s.network.buses[1].p_gen_mw = 0.0;
    s.devices.machine.clear();
    s.network.buses[1].p_load0 = 100.0;
    assert!(initialize(&s).is_ok());
}
