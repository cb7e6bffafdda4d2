//! Independent reference computations shared by the test targets.

use nalgebra::DMatrix;
use num_complex::Complex64 as C;

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.abs().row_sum().max();
    let s = (norm / 0.25).log2().ceil().max(0.0) as i32;
    let b = a / 2.0_f64.powi(s);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Receiving-end voltage of a lossless line feeding a PQ load from a stiff bus.
pub fn two_bus_voltage(v1: f64, x: f64, p: f64, q: f64) -> f64 {
    let b = v1 * v1 - 2.0 * q * x;
    ((b + (b * b - 4.0 * x * x * (p * p + q * q)).sqrt()) / 2.0).sqrt()
}

// Independent eigenvalue oracle: characteristic polynomial by
// Faddeev-LeVerrier, roots by Aberth iteration, then a Newton polish on
// det(A - zI) with a hand-rolled complex elimination.

/// Monic characteristic polynomial, highest degree first.
pub fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut c = vec![1.0];
    let mut m = DMatrix::<f64>::zeros(n, n);
    let id = DMatrix::<f64>::identity(n, n);
    for k in 1..=n {
        m = a * &m + &id * c[k - 1];
        let am = a * &m;
        c.push(-am.trace() / k as f64);
    }
    c
}

fn horner(p: &[f64], z: C) -> (C, C) {
    let mut v = C::new(0.0, 0.0);
    let mut d = C::new(0.0, 0.0);
    for &c in p {
        d = d * z + v;
        v = v * z + c;
    }
    (v, d)
}

fn aberth(p: &[f64]) -> Vec<C> {
    let n = p.len() - 1;
    let r = 1.0 + p[1..].iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let mut z: Vec<C> = (0..n).map(|k| C::from_polar(0.5 * r, 0.4 + 2.0 * std::f64::consts::PI * k as f64 / n as f64)).collect();
    for _ in 0..500 {
        let mut biggest = 0.0_f64;
        for k in 0..n {
            let (v, d) = horner(p, z[k]);
            if v.norm() == 0.0 {
                continue;
            }
            let w = v / d;
            let s: C = (0..n).filter(|&j| j != k).map(|j| (z[k] - z[j]).inv()).sum();
            let step = w / (C::new(1.0, 0.0) - w * s);
            z[k] -= step;
            biggest = biggest.max(step.norm());
        }
        if biggest < 1e-14 {
            break;
        }
    }
    z
}

/// Trace of the inverse of `m` by Gauss-Jordan with partial pivoting.
fn trace_of_inverse(mut m: Vec<Vec<C>>) -> Option<C> {
    let n = m.len();
    let mut inv: Vec<Vec<C>> = (0..n).map(|i| (0..n).map(|j| C::new(if i == j { 1.0 } else { 0.0 }, 0.0)).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].norm().total_cmp(&m[b][col].norm()))?;
        if m[piv][col].norm() == 0.0 {
            return None;
        }
        m.swap(col, piv);
        inv.swap(col, piv);
        let d = m[col][col];
        for j in 0..n {
            m[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                for j in 0..n {
                    let (mc, ic) = (m[col][j], inv[col][j]);
                    m[i][j] -= f * mc;
                    inv[i][j] -= f * ic;
                }
            }
        }
    }
    Some((0..n).map(|i| inv[i][i]).sum())
}

fn polish(a: &DMatrix<f64>, mut z: C) -> C {
    let n = a.nrows();
    for _ in 0..4 {
        let m = (0..n).map(|i| (0..n).map(|j| C::new(a[(i, j)], 0.0) - if i == j { z } else { C::new(0.0, 0.0) }).collect()).collect();
        let Some(tr) = trace_of_inverse(m) else { break };
        let step = tr.inv();
        if !step.re.is_finite() || !step.im.is_finite() {
            break;
        }
        z += step;
        if step.norm() < 1e-15 * z.norm().max(1.0) {
            break;
        }
    }
    z
}

pub fn oracle_eigenvalues(a: &DMatrix<f64>) -> Vec<C> {
    aberth(&char_poly(a)).into_iter().map(|z| polish(a, z)).collect()
}
