#![allow(dead_code)]

pub mod props;

use faer::Mat;
use power_enhancement::factor_ols::FactorFit;
use power_enhancement::quad_tests::{normal_p, Method, TestReport};

pub fn time_labels(t: usize) -> Vec<String> {
    (1..=t).map(|s| format!("t{s}")).collect()
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let m = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= m * a[col][c];
            }
            b[r] -= m * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn report(j0: f64, pivotal: f64) -> TestReport {
    let combined = j0 + pivotal;
    TestReport {
        method: Method::FactorPricing,
        j0,
        pivotal,
        combined,
        p_value: normal_p(combined),
        p_value_pivotal: normal_p(pivotal),
        selected: Vec::new(),
        n_units: 1,
        dimension: 1,
        n_time: 10,
        delta: 1.0,
        rule: None,
        c_used: None,
        diagonal_fallback: false,
    }
}

/// Fit with the given intercepts, unit variances and `a_f,T = 1`.
pub fn fit_stub(theta: Vec<f64>, t: usize) -> FactorFit {
    let n = theta.len();
    FactorFit {
        v_hat: vec![1.0; n],
        theta_hat: theta,
        b_hat: Mat::zeros(n, 1),
        residuals: Mat::zeros(n, t),
        a_ft: 1.0,
        w: vec![0.0],
        f_bar: vec![0.0],
        unit_labels: (0..n).map(|i| format!("a{i}")).collect(),
    }
}
