mod common;

use std::time::Instant;

use common::oracles::{expm, two_bus_voltage};
use common::{bus, line, linear_scenario, smib};
use ltdyn_core::analysis::linearize_fast;
use ltdyn_core::engine::{initialize, simulate};
use ltdyn_core::netmodel::{solve_power_flow, BusKind, NetworkModel};
use nalgebra::{DMatrix, DVector};

fn final_state(a: &DMatrix<f64>, y0: &[f64], dt: f64, t_end: f64) -> Vec<f64> {
    let rows = (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect()).collect();
    let out = simulate(&linear_scenario(rows, y0.to_vec(), dt, t_end)).unwrap();
    let ts = &out.series;
    assert!((ts.t.last().unwrap() - t_end).abs() < 1e-9);
    (0..y0.len()).map(|k| *ts.channel(&format!("lin.y{k}")).unwrap().last().unwrap()).collect()
}

fn err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

#[test]
fn first_trapezoid_step_on_decay() {
    let a = DMatrix::from_element(1, 1, -1.0);
    let y1 = final_state(&a, &[1.0], 0.1, 0.1);
    assert!((y1[0] - 0.95 / 1.05).abs() < 1e-13, "{}", y1[0]);
}

#[test]
fn second_order_on_scalar_decay() {
    let start = Instant::now();
    let a = DMatrix::from_element(1, 1, -1.0);
    let exact = (-1.0_f64).exp();
    let e: Vec<f64> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&dt| (final_state(&a, &[1.0], dt, 1.0)[0] - exact).abs()).collect();
    for p in orders(&e) {
        assert!((1.8..=2.2).contains(&p), "order {p}, errors {e:?}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn second_order_on_linearized_machine() {
    let s = smib(0.01, 1.0);
    let (model, st) = initialize(&s).unwrap();
    let frozen = model.freeze(&st.discrete).unwrap();
    let a = linearize_fast(&model, &frozen, &st.discrete, &st.y, &st.v).unwrap();
    let n = a.nrows();
    let mut y0 = vec![0.0; n];
    y0[0] = 0.05;
    y0[1] = 1e-3;

    let start = Instant::now();
    let exact: Vec<f64> = (expm(&a) * DVector::from_column_slice(&y0)).iter().copied().collect();
    let e: Vec<f64> = [0.02, 0.01, 0.005].iter().map(|&dt| err(&final_state(&a, &y0, dt, 1.0), &exact)).collect();
    for p in orders(&e) {
        assert!((1.8..=2.2).contains(&p), "order {p}, errors {e:?}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn two_bus_power_flow_matches_closed_form() {
    let start = Instant::now();
    for &(v1, x, p, q) in &[(1.0, 0.1, 50.0, 20.0), (1.05, 0.2, 150.0, 40.0), (0.98, 0.05, 300.0, -60.0), (1.0, 0.3, 120.0, 0.0)] {
        let net = NetworkModel {
            s_base_mva: 100.0,
            buses: vec![bus("a", BusKind::Slack, v1, 0.0, 0.0, 0.0), bus("b", BusKind::Pq, 1.0, 0.0, p, q)],
            branches: vec![line("ab", "a", "b", x)],
        };
        let pf = solve_power_flow(&net, 1e-12, 30).unwrap();
        let v2 = two_bus_voltage(v1, x, p / 100.0, q / 100.0);
        assert!((pf.v_mag[1] - v2).abs() < 1e-8, "{} vs {v2}", pf.v_mag[1]);
        let theta = (-(p / 100.0) * x / (v1 * v2)).asin();
        assert!((pf.v_ang[1] - pf.v_ang[0] - theta).abs() < 1e-8);
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}
