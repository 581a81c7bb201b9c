//! End-to-end checks of the two testing pipelines against independent
//! oracles.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use power_enhancement::cs_independence::{pair_correlations, power_enhanced_csi, within_ols, CsiConfig};
use power_enhancement::factor_ols::fit_factor_model;
use power_enhancement::panel::{align, load_factor_csv, load_panel_csv, FactorPanel, Layout, MissingPolicy, Panel};
use power_enhancement::quad_tests::{power_enhanced_fp, FpConfig, SelectedLabel};
use power_enhancement::screening::high_criticism_delta;

mod common;
use common::{solve_dense, time_labels};

fn normal_mat(rng: &mut ChaCha8Rng, n: usize, t: usize, sd: f64) -> Mat<f64> {
    Mat::from_fn(n, t, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

fn fp_fixture(seed: u64, n: usize, t: usize, theta: &[f64], noise_sd: &[f64]) -> (Panel, FactorPanel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Mat::from_fn(3, t, |k, _| 0.1 * k as f64 + rng.sample::<f64, _>(StandardNormal));
    let b = normal_mat(&mut rng, n, 3, 1.0);
    let u = normal_mat(&mut rng, n, t, 1.0);
    let y = Mat::from_fn(n, t, |i, s| {
        theta[i] + (0..3).map(|k| b[(i, k)] * f[(k, s)]).sum::<f64>() + noise_sd[i] * u[(i, s)]
    });
    (
        Panel::new(y, (1..=n).map(|i| format!("a{i}")).collect(), time_labels(t)).unwrap(),
        FactorPanel::new(f, vec!["f1".into(), "f2".into(), "f3".into()], time_labels(t)).unwrap(),
    )
}

#[test]
fn within_ols_matches_pooled_normal_equations() {
    let (n, t) = (3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x1 = normal_mat(&mut rng, n, t, 1.0);
    let x2 = normal_mat(&mut rng, n, t, 2.0);
    let y = Mat::from_fn(n, t, |i, s| 1.5 * x1[(i, s)] - 0.5 * x2[(i, s)] + i as f64 + rng.random::<f64>());

    let demean = |m: &Mat<f64>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mean = (0..t).map(|s| m[(i, s)]).sum::<f64>() / t as f64;
                (0..t).map(|s| m[(i, s)] - mean).collect()
            })
            .collect()
    };
    let (yd, a, b) = (demean(&y), demean(&x1), demean(&x2));
    let mut xtx = vec![vec![0.0; 2]; 2];
    let mut xty = vec![0.0; 2];
    for i in 0..n {
        for s in 0..t {
            let r = [a[i][s], b[i][s]];
            for p in 0..2 {
                xty[p] += r[p] * yd[i][s];
                for q in 0..2 {
                    xtx[p][q] += r[p] * r[q];
                }
            }
        }
    }
    let want = solve_dense(xtx, xty);

    let p = |m: Mat<f64>| Panel::from_values(m).unwrap();
    let fit = within_ols(&p(y), &[&p(x1), &p(x2)]).unwrap();
    for k in 0..2 {
        assert!((fit.beta_hat[k] - want[k]).abs() < 1e-10, "{:?} vs {want:?}", fit.beta_hat);
    }
    // residuals are orthogonal to the demeaned regressors
    for reg in [&a, &b] {
        let dot: f64 = (0..n).flat_map(|i| (0..t).map(move |s| (i, s))).map(|(i, s)| reg[i][s] * fit.residuals[(i, s)]).sum();
        assert!(dot.abs() < 1e-10);
    }
}

#[test]
fn pair_correlations_fixture() {
    let rows = [
        [0.3, -1.2, 0.8, 0.1, -0.4, 1.1],
        [1.0, 0.5, -0.7, -0.2, 0.9, -1.3],
        [-0.6, 0.2, 0.4, 1.5, -0.8, 0.05],
        [0.7, -0.9, 1.2, -0.3, 0.6, -0.1],
    ];
    let u = Mat::from_fn(4, 6, |i, s| rows[i][s]);
    let labels: Vec<String> = ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let pc = pair_correlations(u.as_ref(), &labels).unwrap();
    let m = |a: usize, b: usize| rows[a].iter().zip(&rows[b]).map(|(p, q)| p * q).sum::<f64>() / 6.0;
    let mut k = 0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let want = m(i, j) / (m(i, i) * m(j, j)).sqrt();
            assert!((pc.rho_hat[k] - want).abs() < 1e-12);
            assert!((pc.v_hat[k] - (1.0 - want * want).powi(2) / 6.0).abs() < 1e-12);
            k += 1;
        }
    }
    assert_eq!(k, 6);
}

#[test]
fn planted_alpha_is_selected() {
    let (n, t) = (30, 80);
    let mut theta = vec![0.0; n];
    let mut sd = vec![1.0; n];
    sd[0] = 0.05;
    // Scale the planted alpha off the unit's own noise level: with
    // v ~ sd^2 / T, 10 sqrt(v) delta is about 10 * 0.05/9 * 2.8.
    let delta = high_criticism_delta(n, t).unwrap();
    theta[0] = 10.0 * sd[0] / (t as f64).sqrt() * delta;
    let (y, f) = fp_fixture(11, n, t, &theta, &sd);
    let report = power_enhanced_fp(&y, &f, &FpConfig::default()).unwrap();
    assert!(report.selected.iter().any(|s| s.label == SelectedLabel::Unit("a1".into())));
    assert!(report.j0 > 0.0);
    assert_eq!(report.combined, report.j0 + report.pivotal);
}

#[test]
fn null_fixture_has_no_selection() {
    let (n, t) = (40, 120);
    let (y, f) = fp_fixture(3, n, t, &vec![0.0; n], &vec![1.0; n]);
    let report = power_enhanced_fp(&y, &f, &FpConfig::default()).unwrap();
    assert!(report.selected.is_empty());
    assert_eq!(report.j0, 0.0);
    assert_eq!(report.combined, report.pivotal);
    assert_eq!(report.p_value, report.p_value_pivotal);
    assert!(!report.diagonal_fallback);
    assert!(report.c_used.is_some());
}

#[test]
fn report_is_deterministic() {
    let (n, t) = (25, 60);
    let (y, f) = fp_fixture(8, n, t, &vec![0.1; n], &vec![1.0; n]);
    let a = power_enhanced_fp(&y, &f, &FpConfig::default()).unwrap();
    let b = power_enhanced_fp(&y, &f, &FpConfig::default()).unwrap();
    assert_eq!(a.combined.to_bits(), b.combined.to_bits());
    assert_eq!(a.selected, b.selected);
}

#[test]
fn csv_round_trip_gives_same_report() {
    let (n, t) = (12, 40);
    let (y, f) = fp_fixture(21, n, t, &vec![0.0; n], &vec![1.0; n]);
    let dir = tempfile::tempdir().unwrap();
    let (yp, fp) = (dir.path().join("r.csv"), dir.path().join("f.csv"));
    y.write_csv(&yp, Layout::UnitsAsColumns).unwrap();
    f.write_csv(&fp, Layout::UnitsAsColumns).unwrap();
    let y2 = load_panel_csv(&yp, Layout::UnitsAsColumns, MissingPolicy::Reject).unwrap().panel;
    let f2 = load_factor_csv(&fp, Layout::UnitsAsColumns).unwrap();
    let (y2, f2) = align(&y2, &f2).unwrap();
    assert_eq!(y2, y);
    let a = power_enhanced_fp(&y, &f, &FpConfig::default()).unwrap();
    let b = power_enhanced_fp(&y2, &f2, &FpConfig::default()).unwrap();
    assert_eq!(a.combined.to_bits(), b.combined.to_bits());
}

#[test]
fn closed_form_agrees_with_least_squares_intercept() {
    // The closed-form intercept and the LS residuals come from different
    // computations; residuals must have zero mean when the intercept is
    // the LS one.
    let (n, t) = (5, 50);
    let (y, f) = fp_fixture(2, n, t, &[0.5, -0.2, 0.0, 1.0, 0.3], &[1.0; 5]);
    let fit = fit_factor_model(&y, &f).unwrap();
    for j in 0..n {
        let mean: f64 = (0..t).map(|s| fit.residuals[(j, s)]).sum::<f64>() / t as f64;
        assert!(mean.abs() < 1e-12);
        let fitted_mean: f64 = (0..t)
            .map(|s| fit.theta_hat[j] + (0..3).map(|k| fit.b_hat[(j, k)] * f.values()[(k, s)]).sum::<f64>())
            .sum::<f64>()
            / t as f64;
        let ybar: f64 = (0..t).map(|s| y.values()[(j, s)]).sum::<f64>() / t as f64;
        assert!((fitted_mean - ybar).abs() < 1e-10);
    }
}

#[test]
fn csi_planted_pair_and_null() {
    let (n, t) = (12, 300);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = normal_mat(&mut rng, n, t, 1.0);
    let mut u = normal_mat(&mut rng, n, t, 1.0);
    let null_y = Mat::from_fn(n, t, |i, s| -1.0 + 2.0 * x[(i, s)] + 0.1 * i as f64 + u[(i, s)]);
    let xp = Panel::from_values(x.clone()).unwrap();
    let report = power_enhanced_csi(&Panel::from_values(null_y).unwrap(), &[&xp], &CsiConfig::default()).unwrap();
    assert!(report.selected.is_empty(), "{:?}", report.selected);

    for s in 0..t {
        u[(4, s)] = u[(2, s)];
    }
    let y = Mat::from_fn(n, t, |i, s| -1.0 + 2.0 * x[(i, s)] + u[(i, s)]);
    let report = power_enhanced_csi(&Panel::from_values(y).unwrap(), &[&xp], &CsiConfig::default()).unwrap();
    assert!(report
        .selected
        .iter()
        .any(|s| s.label == SelectedLabel::Pair("u3".into(), "u5".into())));
    assert!(report.combined >= report.pivotal);
}
