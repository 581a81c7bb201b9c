//! Cross-sectional independence of panel regression errors.
//!
//! The panel `y_it = alpha + x_it' beta + mu_i + u_it` is fitted by within-OLS
//! (time-demeaning absorbs `alpha` and `mu_i`). The `n(n-1)/2` residual
//! correlations are screened with `J0`, and the bias-corrected quadratic `J1`
//! serves as the pivotal statistic.

use std::path::Path;

use faer::prelude::*;
use faer::{Mat, MatRef, Side};

use crate::panel::Panel;
use crate::quad_tests::{Method, SelectedItem, SelectedLabel, TestError, TestReport};
use crate::screening::{high_criticism_delta, screen_allow_degenerate};

#[derive(Debug, thiserror::Error)]
pub enum CsiError {
    #[error("at least one regressor is required")]
    NoRegressors,
    #[error("regressor {index} is {got_n}x{got_t}, expected {n}x{t}")]
    ShapeMismatch { index: usize, n: usize, t: usize, got_n: usize, got_t: usize },
    #[error("regressor {0} does not share the time labels of y")]
    TimeLabels(usize),
    #[error("need at least two units, got {0}")]
    TooFewUnits(usize),
    #[error("need T >= p + 2 (T = {t}, p = {p})")]
    TooFewPeriods { t: usize, p: usize },
    #[error("singular pooled design: {0}")]
    SingularDesign(String),
    #[error("zero residual variance for unit {0:?}")]
    ZeroVariance(String),
    #[error("expected {expected} correlations for n = {n}, got {got}")]
    LengthMismatch { expected: usize, got: usize, n: usize },
    #[error("need T >= 2, got {0}")]
    BadT(usize),
    #[error(transparent)]
    Test(#[from] TestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct WithinFit {
    pub beta_hat: Vec<f64>,
    /// n x T residuals of the demeaned regression.
    pub residuals: Mat<f64>,
    pub demeaned: bool,
}

fn demean(m: MatRef<'_, f64>) -> Mat<f64> {
    let t = m.ncols() as f64;
    let means: Vec<f64> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|s| m[(i, s)]).sum::<f64>() / t)
        .collect();
    Mat::from_fn(m.nrows(), m.ncols(), |i, s| m[(i, s)] - means[i])
}

pub fn within_ols(y: &Panel, x: &[&Panel]) -> Result<WithinFit, CsiError> {
    let p = x.len();
    if p == 0 {
        return Err(CsiError::NoRegressors);
    }
    let (n, t) = (y.n_units(), y.n_periods());
    for (index, xk) in x.iter().enumerate() {
        if xk.n_units() != n || xk.n_periods() != t {
            return Err(CsiError::ShapeMismatch {
                index,
                n,
                t,
                got_n: xk.n_units(),
                got_t: xk.n_periods(),
            });
        }
        if xk.time_labels() != y.time_labels() {
            return Err(CsiError::TimeLabels(index));
        }
    }
    if t < p + 2 {
        return Err(CsiError::TooFewPeriods { t, p });
    }

    let yd = demean(y.values().as_ref());
    let xd: Vec<Mat<f64>> = x.iter().map(|xk| demean(xk.values().as_ref())).collect();
    let dot = |a: &Mat<f64>, b: &Mat<f64>| -> f64 {
        let mut s = 0.0;
        for j in 0..t {
            for i in 0..n {
                s += a[(i, j)] * b[(i, j)];
            }
        }
        s
    };

    let gram = Mat::from_fn(p, p, |a, b| dot(&xd[a], &xd[b]));
    let xty = Mat::from_fn(p, 1, |a, _| dot(&xd[a], &yd));

    // A regressor that is constant within every unit vanishes after
    // demeaning; compare against its raw size to decide.
    for (k, xk) in x.iter().enumerate() {
        let raw = xk.values();
        let raw_ss: f64 = (0..t)
            .flat_map(|j| (0..n).map(move |i| (i, j)))
            .map(|(i, j)| raw[(i, j)].powi(2))
            .sum();
        if !(gram[(k, k)] > 1e-24 * raw_ss.max(1.0)) {
            return Err(CsiError::SingularDesign(format!(
                "regressor {k} is constant over time within every unit"
            )));
        }
    }
    let scale: Vec<f64> = (0..p).map(|k| gram[(k, k)].sqrt()).collect();
    let corr = Mat::from_fn(p, p, |a, b| gram[(a, b)] / (scale[a] * scale[b]));
    let eig = corr
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| CsiError::SingularDesign("eigen decomposition failed".into()))?;
    if !(eig[0] > 1e-12) {
        return Err(CsiError::SingularDesign(format!(
            "demeaned regressors are collinear (smallest normalized eigenvalue {:.3e})",
            eig[0]
        )));
    }
    let llt = gram
        .llt(Side::Lower)
        .map_err(|_| CsiError::SingularDesign("pooled Gram matrix is not positive definite".into()))?;
    let sol = llt.solve(&xty);
    let beta_hat: Vec<f64> = (0..p).map(|k| sol[(k, 0)]).collect();

    let residuals = Mat::from_fn(n, t, |i, s| {
        yd[(i, s)] - (0..p).map(|k| xd[k][(i, s)] * beta_hat[k]).sum::<f64>()
    });
    Ok(WithinFit {
        beta_hat,
        residuals,
        demeaned: true,
    })
}

#[derive(Debug, Clone)]
pub struct PairCorrelations {
    /// Pair order (0,1), (0,2), ..., (0,n-1), (1,2), ...
    pub rho_hat: Vec<f64>,
    /// `(1 - rho^2)^2 / T`.
    pub v_hat: Vec<f64>,
    pub sigma_hat_diag: Vec<f64>,
    pub n: usize,
    pub t: usize,
}

pub fn n_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Position of the pair `(i, j)`, `i < j < n`, in the stacked order.
pub fn pair_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

pub fn pair_from_index(k: usize, n: usize) -> (usize, usize) {
    debug_assert!(k < n_pairs(n));
    let mut i = 0;
    let mut start = 0;
    loop {
        let row = n - i - 1;
        if k < start + row {
            return (i, i + 1 + (k - start));
        }
        start += row;
        i += 1;
    }
}

/// Every pairwise residual correlation, with `1/T` uncentered moments.
pub fn pair_correlations(residuals: MatRef<'_, f64>, unit_labels: &[String]) -> Result<PairCorrelations, CsiError> {
    let (n, t) = (residuals.nrows(), residuals.ncols());
    if n < 2 {
        return Err(CsiError::TooFewUnits(n));
    }
    if t < 2 {
        return Err(CsiError::BadT(t));
    }
    let tf = t as f64;
    let gram = residuals * residuals.transpose();
    let sigma_hat_diag: Vec<f64> = (0..n).map(|i| gram[(i, i)] / tf).collect();
    if let Some(i) = sigma_hat_diag.iter().position(|&s| !(s > 0.0)) {
        let label = unit_labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        return Err(CsiError::ZeroVariance(label));
    }
    let sd: Vec<f64> = sigma_hat_diag.iter().map(|s| s.sqrt()).collect();
    let mut rho_hat = Vec::with_capacity(n_pairs(n));
    for i in 0..n {
        for j in (i + 1)..n {
            let r = (gram[(i, j)] / tf) / (sd[i] * sd[j]);
            rho_hat.push(r.clamp(-1.0, 1.0));
        }
    }
    let v_hat = rho_hat.iter().map(|r| (1.0 - r * r).powi(2) / tf).collect();
    Ok(PairCorrelations {
        rho_hat,
        v_hat,
        sigma_hat_diag,
        n,
        t,
    })
}

/// `sqrt(1/(n(n-1))) * sum_{i<j} (T rho_ij^2 - 1) - n / (2(T-1))`
pub fn bfk_j1(rho_hat: &[f64], n: usize, t: usize) -> Result<f64, CsiError> {
    if rho_hat.len() != n_pairs(n) || n < 2 {
        return Err(CsiError::LengthMismatch {
            expected: n_pairs(n),
            got: rho_hat.len(),
            n,
        });
    }
    if t < 2 {
        return Err(CsiError::BadT(t));
    }
    let (nf, tf) = (n as f64, t as f64);
    let sum: f64 = rho_hat.iter().map(|r| tf * r * r - 1.0).sum();
    Ok((1.0 / (nf * (nf - 1.0))).sqrt() * sum - nf / (2.0 * (tf - 1.0)))
}

#[derive(Debug, Clone, Default)]
pub struct CsiConfig {
    pub delta_override: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CsiAnalysis {
    pub report: TestReport,
    pub fit: WithinFit,
    pub pairs: PairCorrelations,
}

pub fn power_enhanced_csi(y: &Panel, x: &[&Panel], config: &CsiConfig) -> Result<TestReport, CsiError> {
    analyze_csi(y, x, config).map(|a| a.report)
}

pub fn analyze_csi(y: &Panel, x: &[&Panel], config: &CsiConfig) -> Result<CsiAnalysis, CsiError> {
    let fit = within_ols(y, x)?;
    let labels = y.unit_labels();
    let pairs = pair_correlations(fit.residuals.as_ref(), labels)?;
    let (n, t) = (pairs.n, pairs.t);
    let dim = n_pairs(n);
    let delta = match config.delta_override {
        Some(d) => d,
        None => high_criticism_delta(dim, t).map_err(TestError::from)?,
    };
    let scr = screen_allow_degenerate(&pairs.rho_hat, &pairs.v_hat, delta).map_err(TestError::from)?;
    let j1 = bfk_j1(&pairs.rho_hat, n, t)?;

    let selected = scr
        .selected
        .iter()
        .map(|&k| {
            let (i, j) = pair_from_index(k, n);
            let r = pairs.rho_hat[k];
            SelectedItem {
                index: k,
                label: SelectedLabel::Pair(labels[i].clone(), labels[j].clone()),
                estimate: r,
                tstat: r.signum() * scr.standardized[k],
            }
        })
        .collect();
    let report = TestReport::assemble(Method::CrossSectionalIndependence, scr.j0, j1, selected, n, dim, t, delta);
    Ok(CsiAnalysis { report, fit, pairs })
}

/// Writes `unit_i,unit_j,rho_hat,tstat` for the selected pairs.
pub fn write_selected_pairs_csv(path: &Path, report: &TestReport) -> Result<(), CsiError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_i", "unit_j", "rho_hat", "tstat"])?;
    for item in &report.selected {
        if let SelectedLabel::Pair(a, b) = &item.label {
            w.write_record([a.clone(), b.clone(), item.estimate.to_string(), item.tstat.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
