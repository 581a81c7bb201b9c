//! Property suites shared by the `properties` and `acceptance` targets.
//! Each returns `Err` with a description of the first counterexample.

use faer::Mat;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use power_enhancement::cs_independence::{bfk_j1, pair_correlations};
use power_enhancement::factor_ols::fit_factor_model;
use power_enhancement::panel::{FactorPanel, Panel};
use power_enhancement::quad_tests::{feasible_wald, quadratic_form};
use power_enhancement::screening::screen;
use power_enhancement::sparse_cov::{choose_c, CGrid, ThresholdRule, SCAD_A};

use super::{fit_stub, report, solve_dense, time_labels};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn vec_pair(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(0.01f64..5.0, n),
        )
    })
}

pub fn screening_monotone() -> Result<(), String> {
    run(1000, (vec_pair(40), 0.1f64..5.0, 0.1f64..5.0), |((theta, v), d1, d2)| {
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let a = screen(&theta, &v, hi).unwrap();
        let b = screen(&theta, &v, lo).unwrap();
        prop_assert!(a.selected.iter().all(|j| b.selected.contains(j)));
        prop_assert!(a.j0 <= b.j0);
        Ok(())
    })
}

pub fn screening_scale_equivariant() -> Result<(), String> {
    run(1000, (vec_pair(40), 0.1f64..5.0, 0.01f64..100.0), |((theta, v), delta, c)| {
        let a = screen(&theta, &v, delta).unwrap();
        let th2: Vec<f64> = theta.iter().map(|x| c * x).collect();
        let v2: Vec<f64> = v.iter().map(|x| c * c * x).collect();
        let b = screen(&th2, &v2, delta).unwrap();
        // Rounding may move an index lying within a few ulps of the boundary.
        let near = |j: usize| ((a.standardized[j] - delta) / delta).abs() < 1e-12;
        for j in 0..theta.len() {
            if !near(j) {
                prop_assert_eq!(a.selected.contains(&j), b.selected.contains(&j));
            }
        }
        if a.selected == b.selected && a.j0 > 0.0 {
            prop_assert!(((a.j0 - b.j0) / a.j0).abs() < 1e-10);
        }
        Ok(())
    })
}

pub fn screening_boundary_excluded() -> Result<(), String> {
    let strat = (prop::collection::vec(0.01f64..5.0, 1..30), 0.1f64..5.0, any::<prop::sample::Index>());
    run(1000, strat, |(v, delta, k)| {
        let j = k.index(v.len());
        let mut theta = vec![0.0; v.len()];
        theta[j] = v[j].sqrt() * delta;
        let r = screen(&theta, &v, delta).unwrap();
        prop_assert!(!r.selected.contains(&j));
        Ok(())
    })
}

pub fn screening_empty_iff_zero() -> Result<(), String> {
    run(1000, (vec_pair(40), 0.1f64..5.0), |((theta, v), delta)| {
        let r = screen(&theta, &v, delta).unwrap();
        prop_assert_eq!(r.selected.is_empty(), r.j0 == 0.0);
        prop_assert!(r.j0 >= 0.0);
        Ok(())
    })
}

/// The three shrinkage conditions, `|h| <= |x|`, and idempotence of the
/// hard rule.
pub fn thresholding_conditions() -> Result<(), String> {
    const TAU_MIN: f64 = 0.01;
    run(10_000, (-10.0f64..10.0, TAU_MIN..2.0), |(x, tau)| {
        for rule in [ThresholdRule::Hard, ThresholdRule::Soft, ThresholdRule::Scad] {
            let h = rule.apply(x, tau);
            if x.abs() < tau {
                prop_assert_eq!(h, 0.0);
            }
            prop_assert!((h - x).abs() <= tau * (1.0 + 1e-12));
            // Beyond b tau with b = SCAD_A, hard and SCAD return x exactly;
            // soft moves by tau, i.e. a tau^2 with a = 1 / TAU_MIN here.
            if x.abs() > SCAD_A * tau {
                let a = if rule == ThresholdRule::Soft { 1.0 / TAU_MIN } else { 0.0 };
                prop_assert!((h - x).abs() <= a * tau * tau * (1.0 + 1e-12));
            }
            prop_assert!(h.abs() <= x.abs());
        }
        let once = ThresholdRule::Hard.apply(x, tau);
        prop_assert_eq!(ThresholdRule::Hard.apply(once, tau), once);
        Ok(())
    })
}

/// Residuals from blocks of 4 with equicorrelation drawn from `U(0, 0.6)`.
fn block_sparse_residuals(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Mat<f64> {
    let mut u = Mat::zeros(n, t);
    let mut start = 0;
    while start < n {
        let m = 4.min(n - start);
        let rho: f64 = rng.random::<f64>() * 0.6;
        for s in 0..t {
            let common: f64 = rng.sample(StandardNormal);
            for i in 0..m {
                let e: f64 = rng.sample(StandardNormal);
                u[(start + i, s)] = rho.sqrt() * common + (1.0 - rho).sqrt() * e;
            }
        }
        start += m;
    }
    u
}

fn sample_cov(u: &Mat<f64>) -> Mat<f64> {
    let t = u.ncols() as f64;
    let g = u * u.transpose();
    Mat::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] / t)
}

pub fn chosen_covariance_pd() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let n = rng.random_range(4..60);
        let t = rng.random_range(10..80);
        let s = sample_cov(&block_sparse_residuals(&mut rng, n, t));
        for rule in [ThresholdRule::Hard, ThresholdRule::Soft, ThresholdRule::Scad] {
            let est = choose_c(s.as_ref(), t, rule, &CGrid::default())
                .map_err(|e| format!("case {case} ({n}x{t}, {rule:?}): {e}"))?;
            if !(est.min_eigen > 0.0) {
                return Err(format!("case {case} {rule:?}: min eigenvalue {}", est.min_eigen));
            }
            let prod = &est.sigma_hat * &est.inverse;
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    let err = (prod[(i, j)] - target).abs();
                    if err > 1e-8 {
                        return Err(format!("case {case} {rule:?}: |S S^-1 - I| = {err:e} at ({i},{j})"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Intercept from the normal equations of `[1, f_t'] -> y`.
fn oracle_intercept(y: &[f64], f: &[Vec<f64>]) -> f64 {
    let p = f.len() + 1;
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (s, ys) in y.iter().enumerate() {
        let r: Vec<f64> = std::iter::once(1.0).chain(f.iter().map(|fk| fk[s])).collect();
        for a in 0..p {
            xty[a] += r[a] * ys;
            for b in 0..p {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    solve_dense(xtx, xty)[0]
}

pub fn ols_matches_normal_equations() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for case in 0..100 {
        let k = rng.random_range(1..5);
        let t = rng.random_range(k + 3..80);
        let n = rng.random_range(1..6);
        let f: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let mean = rng.random_range(-1.0..1.0);
                (0..t).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let y: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..t).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let returns = Panel::new(
            Mat::from_fn(n, t, |i, s| y[i][s]),
            (0..n).map(|i| format!("a{i}")).collect(),
            time_labels(t),
        )
        .unwrap();
        let factors = FactorPanel::new(
            Mat::from_fn(k, t, |i, s| f[i][s]),
            (0..k).map(|i| format!("f{i}")).collect(),
            time_labels(t),
        )
        .unwrap();
        let fit = fit_factor_model(&returns, &factors).map_err(|e| format!("case {case}: {e}"))?;
        for j in 0..n {
            let want = oracle_intercept(&y[j], &f);
            let got = fit.theta_hat[j];
            if (got - want).abs() > 1e-8 * want.abs().max(1.0) {
                return Err(format!("case {case}, unit {j}: {got} vs {want}"));
            }
        }
    }
    Ok(())
}

fn brute_rho(u: &Mat<f64>, i: usize, j: usize) -> f64 {
    let t = u.ncols();
    let m = |a: usize, b: usize| (0..t).map(|s| u[(a, s)] * u[(b, s)]).sum::<f64>() / t as f64;
    m(i, j) / (m(i, i).sqrt() * m(j, j).sqrt())
}

pub fn pair_correlations_brute_force() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for n in 2..=10 {
        for _ in 0..20 {
            let t = rng.random_range(3..40);
            let u = Mat::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal));
            let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let pc = pair_correlations(u.as_ref(), &labels).map_err(|e| e.to_string())?;
            let mut k = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let want = brute_rho(&u, i, j);
                    if (pc.rho_hat[k] - want).abs() > 1e-12 {
                        return Err(format!("n={n} pair ({i},{j}): {} vs {want}", pc.rho_hat[k]));
                    }
                    k += 1;
                }
            }
        }
    }
    Ok(())
}

pub fn correlation_scale_invariant() -> Result<(), String> {
    run(200, (any::<u64>(), 0.001f64..1000.0, 0usize..5), |(seed, c, which)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t) = (5, 12);
        let u = Mat::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scaled = Mat::from_fn(n, t, |i, s| if i == which { c * u[(i, s)] } else { u[(i, s)] });
        let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let a = pair_correlations(u.as_ref(), &labels).unwrap();
        let b = pair_correlations(scaled.as_ref(), &labels).unwrap();
        for (x, y) in a.rho_hat.iter().zip(&b.rho_hat) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn j1_order_invariant() -> Result<(), String> {
    run(200, (prop::collection::vec(-1.0f64..1.0, 10), 2usize..500, any::<u64>()), |(mut rho, t, seed)| {
        let a = bfk_j1(&rho, 5, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..rho.len()).rev() {
            rho.swap(i, rng.random_range(0..=i));
        }
        let b = bfk_j1(&rho, 5, t).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        Ok(())
    })
}

pub fn combined_dominates_pivotal() -> Result<(), String> {
    run(1000, (0.0f64..1e6, -50.0f64..50.0, 0.001f64..0.5), |(j0, pivotal, level)| {
        let r = report(j0, pivotal);
        prop_assert!(r.combined >= r.pivotal);
        if r.pivotal_rejects(level) {
            prop_assert!(r.rejects(level));
        }
        Ok(())
    })
}

pub fn wald_permutation_invariant() -> Result<(), String> {
    run(200, any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t) = (6, 30);
        let u = Mat::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = sample_cov(&u);
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let est = choose_c(s.as_ref(), t, ThresholdRule::Soft, &CGrid::default()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let inv_p = Mat::from_fn(n, n, |i, j| est.inverse[(perm[i], perm[j])]);
        let th_p: Vec<f64> = perm.iter().map(|&i| theta[i]).collect();
        let a = quadratic_form(&theta, est.inverse.as_ref());
        let b = quadratic_form(&th_p, inv_p.as_ref());
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));

        let mut est_p = est.clone();
        est_p.inverse = inv_p;
        let w1 = feasible_wald(&fit_stub(theta, t), &est).unwrap();
        let w2 = feasible_wald(&fit_stub(th_p, t), &est_p).unwrap();
        prop_assert!((w1 - w2).abs() <= 1e-10 * w1.abs().max(1.0));
        Ok(())
    })
}

/// Every suite, by name.
pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("screening monotonicity", screening_monotone),
        ("screening scale equivariance", screening_scale_equivariant),
        ("screening strict boundary", screening_boundary_excluded),
        ("empty set iff J0 = 0", screening_empty_iff_zero),
        ("thresholding conditions", thresholding_conditions),
        ("chosen covariance PD and inverse", chosen_covariance_pd),
        ("OLS closed form vs normal equations", ols_matches_normal_equations),
        ("pair correlations vs brute force", pair_correlations_brute_force),
        ("correlation scale invariance", correlation_scale_invariant),
        ("J1 pair order invariance", j1_order_invariant),
        ("combined dominates pivotal", combined_dominates_pivotal),
        ("Wald permutation invariance", wald_permutation_invariant),
    ]
}
