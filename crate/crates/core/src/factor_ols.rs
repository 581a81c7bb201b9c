//! Time-series OLS of each asset on the observable factors.
//!
//! For the model `y_jt = theta_j + b_j' f_t + u_jt` the intercept has the
//! closed form
//!
//! ```text
//! theta_j = (1 / (T a)) * sum_t y_jt (1 - f_t' w)
//! w       = ((1/T) sum_t f_t f_t')^{-1} f_bar
//! a       = 1 - f_bar' w
//! ```
//!
//! and its conditional variance is estimated by
//! `v_j = ((1/T) sum_t u_jt^2) / (T a)`.

use faer::prelude::*;
use faer::{Mat, Side};

use crate::panel::{FactorPanel, Panel};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("need T > K + 1 (T = {t}, K = {k})")]
    TooFewPeriods { t: usize, k: usize },

    #[error("returns and factors are not aligned: {0}")]
    NotAligned(String),

    #[error("factor second-moment matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularFactors { condition: f64 },

    #[error("degenerate factors: a_f,T = {0} is not positive")]
    DegenerateFactors(f64),

    #[error("zero residual variance for unit {0:?}")]
    DegenerateResiduals(String),
}

#[derive(Debug, Clone, Copy)]
pub struct OlsOptions {
    /// Largest accepted condition number of `(1/T) sum f f'`.
    pub cond_cap: f64,
}

impl Default for OlsOptions {
    fn default() -> Self {
        Self { cond_cap: 1e12 }
    }
}

/// Per-unit OLS output.
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub theta_hat: Vec<f64>,
    /// N x K loadings.
    pub b_hat: Mat<f64>,
    /// N x T residuals.
    pub residuals: Mat<f64>,
    pub v_hat: Vec<f64>,
    pub a_ft: f64,
    pub w: Vec<f64>,
    pub f_bar: Vec<f64>,
    pub unit_labels: Vec<String>,
}

impl FactorFit {
    pub fn n_units(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn n_periods(&self) -> usize {
        self.residuals.ncols()
    }
}

pub fn fit_factor_model(returns: &Panel, factors: &FactorPanel) -> Result<FactorFit, FitError> {
    fit_factor_model_with(returns, factors, &OlsOptions::default())
}

pub fn fit_factor_model_with(
    returns: &Panel,
    factors: &FactorPanel,
    opts: &OlsOptions,
) -> Result<FactorFit, FitError> {
    let (n, t, k) = (returns.n_units(), returns.n_periods(), factors.n_factors());
    if factors.n_periods() != t {
        return Err(FitError::NotAligned(format!(
            "{t} return periods vs {} factor periods",
            factors.n_periods()
        )));
    }
    if returns.time_labels() != factors.time_labels() {
        return Err(FitError::NotAligned("time labels differ".into()));
    }
    if t <= k + 1 {
        return Err(FitError::TooFewPeriods { t, k });
    }
    let f = factors.values();
    let y = returns.values();
    let tf = t as f64;

    let f_bar: Vec<f64> = (0..k)
        .map(|i| (0..t).map(|s| f[(i, s)]).sum::<f64>() / tf)
        .collect();
    let moment = Mat::from_fn(k, k, |i, j| (0..t).map(|s| f[(i, s)] * f[(j, s)]).sum::<f64>() / tf);

    let eig = moment
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| FitError::SingularFactors { condition: f64::INFINITY })?;
    let (lo, hi) = (eig[0], eig[k - 1]);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= opts.cond_cap) {
        return Err(FitError::SingularFactors { condition });
    }

    let llt = moment
        .llt(Side::Lower)
        .map_err(|_| FitError::SingularFactors { condition })?;
    let fbar_col = Mat::from_fn(k, 1, |i, _| f_bar[i]);
    let w_col = llt.solve(&fbar_col);
    let w: Vec<f64> = (0..k).map(|i| w_col[(i, 0)]).collect();
    let a_ft = 1.0 - f_bar.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    // a_f,T = 0 exactly when some factor combination is constant, i.e.
    // collinear with the intercept; allow for rounding.
    if !(a_ft > 1e-10) {
        return Err(FitError::DegenerateFactors(a_ft));
    }

    // weights 1 - f_t'w
    let c: Vec<f64> = (0..t)
        .map(|s| 1.0 - (0..k).map(|i| f[(i, s)] * w[i]).sum::<f64>())
        .collect();
    let theta_hat: Vec<f64> = (0..n)
        .map(|j| (0..t).map(|s| y[(j, s)] * c[s]).sum::<f64>() / (tf * a_ft))
        .collect();

    // Shared design [1, f_t'] factored once; every unit is a right-hand side.
    let design = Mat::from_fn(t, k + 1, |s, col| if col == 0 { 1.0 } else { f[(col - 1, s)] });
    let qr = design.qr();
    let rhs = y.transpose().to_owned();
    let coef = qr.solve_lstsq(&rhs);

    let b_hat = Mat::from_fn(n, k, |j, i| coef[(i + 1, j)]);
    let residuals = Mat::from_fn(n, t, |j, s| {
        let fitted = coef[(0, j)] + (0..k).map(|i| coef[(i + 1, j)] * f[(i, s)]).sum::<f64>();
        y[(j, s)] - fitted
    });
    let v_hat = (0..n)
        .map(|j| {
            let ss = (0..t).map(|s| residuals[(j, s)].powi(2)).sum::<f64>() / tf;
            ss / (tf * a_ft)
        })
        .collect();

    Ok(FactorFit {
        theta_hat,
        b_hat,
        residuals,
        v_hat,
        a_ft,
        w,
        f_bar,
        unit_labels: returns.unit_labels().to_vec(),
    })
}

/// `theta_j / v_j^{1/2}` for every unit.
pub fn alpha_tstats(fit: &FactorFit) -> Result<Vec<f64>, FitError> {
    fit.theta_hat
        .iter()
        .zip(&fit.v_hat)
        .enumerate()
        .map(|(j, (&th, &v))| {
            if v > 0.0 {
                Ok(th / v.sqrt())
            } else {
                Err(FitError::DegenerateResiduals(fit.unit_labels[j].clone()))
            }
        })
        .collect()
}
