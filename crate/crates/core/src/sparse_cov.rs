//! Thresholded estimation of a sparse residual covariance and its inverse.
//!
//! Off-diagonal sample moments are shrunk entry by entry with the adaptive
//! threshold `tau_ij = C * sqrt(s_ii * s_jj * log(N) / T)`; the diagonal is
//! kept as is. The constant `C` is picked from a grid as the smallest value
//! giving a positive definite estimate, plus one grid step.

use std::io::Write;
use std::path::Path;

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CovError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("need at least 2 time points, got {0}")]
    TooFewPeriods(usize),

    #[error("diagonal entry {index} is not positive ({value})")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("invalid threshold grid: {0}")]
    BadGrid(String),

    #[error("no threshold constant on the grid gives a positive definite estimate (min eigenvalue {min_eigen_at_max:.3e} at C = {c_max})")]
    NotPositiveDefinite { c_max: f64, min_eigen_at_max: f64 },

    #[error("negative threshold constant {0}")]
    NegativeConstant(f64),
}

/// Entrywise shrinkage applied to off-diagonal sample covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    Hard,
    #[default]
    Soft,
    Scad,
}

/// SCAD concavity parameter.
pub const SCAD_A: f64 = 3.7;

impl ThresholdRule {
    pub fn apply(self, x: f64, tau: f64) -> f64 {
        let ax = x.abs();
        match self {
            ThresholdRule::Hard => {
                if ax > tau {
                    x
                } else {
                    0.0
                }
            }
            ThresholdRule::Soft => x.signum() * (ax - tau).max(0.0),
            ThresholdRule::Scad => {
                if ax <= 2.0 * tau {
                    x.signum() * (ax - tau).max(0.0)
                } else if ax <= SCAD_A * tau {
                    ((SCAD_A - 1.0) * x - x.signum() * SCAD_A * tau) / (SCAD_A - 2.0)
                } else {
                    x
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ThresholdRule::Hard => "hard",
            ThresholdRule::Soft => "soft",
            ThresholdRule::Scad => "scad",
        }
    }
}

/// How the threshold constant is picked once positive definiteness is
/// secured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CSelection {
    /// Smallest positive definite grid point plus one step.
    MinPd,
    /// Cross-validated choice at or above the `MinPd` constant.
    #[default]
    #[value(name = "cv")]
    #[serde(rename = "cv")]
    CrossValidated,
}

impl CSelection {
    pub fn name(self) -> &'static str {
        match self {
            CSelection::MinPd => "min-pd",
            CSelection::CrossValidated => "cv",
        }
    }
}

impl std::str::FromStr for CSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "min-pd" => Ok(Self::MinPd),
            "cv" => Ok(Self::CrossValidated),
            other => Err(format!("unknown C selection {other:?}")),
        }
    }
}

impl std::str::FromStr for ThresholdRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "scad" => Ok(Self::Scad),
            other => Err(format!("unknown threshold rule {other:?}")),
        }
    }
}

/// Grid `c_min, c_min + step, ..., c_max` of candidate threshold constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CGrid {
    pub c_min: f64,
    pub c_max: f64,
    pub step: f64,
}

impl Default for CGrid {
    fn default() -> Self {
        Self {
            c_min: 0.0,
            c_max: 3.0,
            step: 0.05,
        }
    }
}

impl CGrid {
    pub fn validate(&self) -> Result<(), CovError> {
        if !(self.c_min >= 0.0) || !(self.step > 0.0) || !(self.c_max >= self.c_min) {
            return Err(CovError::BadGrid(format!(
                "c_min={} c_max={} step={}",
                self.c_min, self.c_max, self.step
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let n = ((self.c_max - self.c_min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.c_min + k as f64 * self.step).collect()
    }
}

impl std::str::FromStr for CGrid {
    type Err = String;

    /// `min:max:step`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected min:max:step, got {s:?}"));
        }
        let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
        let g = CGrid {
            c_min: p(parts[0])?,
            c_max: p(parts[1])?,
            step: p(parts[2])?,
        };
        g.validate().map_err(|e| e.to_string())?;
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub struct SparseCovEstimate {
    pub sigma_hat: Mat<f64>,
    pub inverse: Mat<f64>,
    /// Threshold constant actually used; `+inf` for the diagonal estimate.
    pub c_used: f64,
    pub rule: ThresholdRule,
    pub kept_offdiag: usize,
    pub min_eigen: f64,
}

impl SparseCovEstimate {
    /// Working-independence estimate `diag(s)`: every off-diagonal entry is
    /// thresholded away.
    pub fn diagonal(s: MatRef<'_, f64>, rule: ThresholdRule) -> Result<Self, CovError> {
        let n = check_square(s)?;
        check_diagonal(s)?;
        let sigma_hat = Mat::from_fn(n, n, |i, j| if i == j { s[(i, i)] } else { 0.0 });
        let inverse = Mat::from_fn(n, n, |i, j| if i == j { 1.0 / s[(i, i)] } else { 0.0 });
        let min_eigen = (0..n).map(|i| s[(i, i)]).fold(f64::INFINITY, f64::min);
        Ok(Self {
            sigma_hat,
            inverse,
            c_used: f64::INFINITY,
            rule,
            kept_offdiag: 0,
            min_eigen,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma_hat.nrows()
    }
}

/// Zero pattern summary of a square matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SparsityDiag {
    /// Largest number of nonzeros in any row, diagonal included.
    pub m_n: usize,
    /// Total number of nonzero off-diagonal entries.
    pub d_n: usize,
}

fn check_square(m: MatRef<'_, f64>) -> Result<usize, CovError> {
    if m.nrows() != m.ncols() {
        return Err(CovError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn check_diagonal(s: MatRef<'_, f64>) -> Result<(), CovError> {
    for i in 0..s.nrows() {
        let d = s[(i, i)];
        if !(d > 0.0) {
            return Err(CovError::NonPositiveDiagonal { index: i, value: d });
        }
    }
    Ok(())
}

/// `(1/T) U U'` for an N x T residual matrix.
pub fn sample_residual_cov(residuals: MatRef<'_, f64>) -> Result<Mat<f64>, CovError> {
    let t = residuals.ncols();
    if t < 2 {
        return Err(CovError::TooFewPeriods(t));
    }
    let mut s = residuals * residuals.transpose();
    let n = s.nrows();
    let inv_t = 1.0 / t as f64;
    for j in 0..n {
        for i in j..n {
            let v = s[(i, j)] * inv_t;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

pub fn threshold_cov(
    s: MatRef<'_, f64>,
    t: usize,
    rule: ThresholdRule,
    c: f64,
) -> Result<Mat<f64>, CovError> {
    let n = check_square(s)?;
    check_diagonal(s)?;
    if !(c >= 0.0) {
        return Err(CovError::NegativeConstant(c));
    }
    if t < 1 {
        return Err(CovError::TooFewPeriods(t));
    }
    Ok(threshold_unchecked(s, n, t, rule, c))
}

fn threshold_unchecked(s: MatRef<'_, f64>, n: usize, t: usize, rule: ThresholdRule, c: f64) -> Mat<f64> {
    let scale = (n as f64).ln() / t as f64;
    let mut out = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = s[(j, j)];
        for i in (j + 1)..n {
            let tau = c * (s[(i, i)] * s[(j, j)] * scale).sqrt();
            let v = rule.apply(s[(i, j)], tau);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn count_offdiag(m: MatRef<'_, f64>) -> usize {
    let n = m.nrows();
    let mut k = 0;
    for j in 0..n {
        for i in 0..n {
            if i != j && m[(i, j)] != 0.0 {
                k += 1;
            }
        }
    }
    k
}

fn min_eigenvalue(m: MatRef<'_, f64>) -> f64 {
    m.self_adjoint_eigenvalues(Side::Lower)
        .map(|ev| ev.first().copied().unwrap_or(f64::NAN))
        .unwrap_or(f64::NAN)
}

/// `lambda_min(m) > eps`, decided by attempting a Cholesky factorization of
/// `m - eps I`.
fn exceeds_min_eigen(m: &Mat<f64>, eps: f64) -> bool {
    let n = m.nrows();
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] -= eps;
    }
    shifted.llt(Side::Lower).is_ok()
}

/// Default positive-definiteness margin: `1e-6` times the mean sample variance.
pub fn default_eps_pd(s: MatRef<'_, f64>) -> f64 {
    let n = s.nrows().max(1);
    1e-6 * (0..s.nrows()).map(|i| s[(i, i)]).sum::<f64>() / n as f64
}

pub fn choose_c(
    s: MatRef<'_, f64>,
    t: usize,
    rule: ThresholdRule,
    grid: &CGrid,
) -> Result<SparseCovEstimate, CovError> {
    choose_c_with_margin(s, t, rule, grid, default_eps_pd(s))
}

pub fn choose_c_with_margin(
    s: MatRef<'_, f64>,
    t: usize,
    rule: ThresholdRule,
    grid: &CGrid,
    eps_pd: f64,
) -> Result<SparseCovEstimate, CovError> {
    let n = check_square(s)?;
    check_diagonal(s)?;
    grid.validate()?;
    if t < 1 {
        return Err(CovError::TooFewPeriods(t));
    }

    let mut first_pd = None;
    for c in grid.points() {
        let m = threshold_unchecked(s, n, t, rule, c);
        if exceeds_min_eigen(&m, eps_pd) {
            first_pd = Some((c, m));
            break;
        }
    }
    let (c_first, m_first) = match first_pd {
        Some(found) => found,
        None => {
            let m = threshold_unchecked(s, n, t, rule, grid.c_max);
            return Err(CovError::NotPositiveDefinite {
                c_max: grid.c_max,
                min_eigen_at_max: min_eigenvalue(m.as_ref()),
            });
        }
    };

    // One step of safety margin. Positive definiteness is not monotone in C
    // for every rule, so keep the first hit if the margin step loses it.
    let c_margin = c_first + grid.step;
    let m_margin = threshold_unchecked(s, n, t, rule, c_margin);
    let (c_used, sigma_hat) = if exceeds_min_eigen(&m_margin, eps_pd) {
        (c_margin, m_margin)
    } else {
        (c_first, m_first)
    };

    finish(sigma_hat, c_used, rule, grid)
}

fn finish(sigma_hat: Mat<f64>, c_used: f64, rule: ThresholdRule, grid: &CGrid) -> Result<SparseCovEstimate, CovError> {
    let inverse = sigma_hat
        .llt(Side::Lower)
        .map(|l| l.inverse())
        .map_err(|_| CovError::NotPositiveDefinite {
            c_max: grid.c_max,
            min_eigen_at_max: f64::NAN,
        })?;
    let min_eigen = min_eigenvalue(sigma_hat.as_ref());
    let kept_offdiag = count_offdiag(sigma_hat.as_ref());
    Ok(SparseCovEstimate {
        sigma_hat,
        inverse,
        c_used,
        rule,
        kept_offdiag,
        min_eigen,
    })
}

/// Number of validation folds used by [`choose_c_cv`].
pub const CV_FOLDS: usize = 5;

/// Picks C from residuals by cross-validation over the grid points at or
/// above the [`choose_c`] constant, so the result is never less
/// conservative than that rule.
///
/// Each of [`CV_FOLDS`] folds holds out a contiguous block of
/// `floor(T / ln T)` periods, spread evenly over the sample. The loss is the
/// squared Frobenius distance between the off-diagonal part of the
/// thresholded training covariance and the raw held-out covariance. Ties go
/// to the smaller C. Falls back to the [`choose_c`] estimate when T is too
/// short to split or the minimizer is not positive definite.
pub fn choose_c_cv(
    residuals: MatRef<'_, f64>,
    rule: ThresholdRule,
    grid: &CGrid,
) -> Result<SparseCovEstimate, CovError> {
    let s = sample_residual_cov(residuals)?;
    choose_c_cv_with_margin(residuals, rule, grid, default_eps_pd(s.as_ref()))
}

pub fn choose_c_cv_with_margin(
    residuals: MatRef<'_, f64>,
    rule: ThresholdRule,
    grid: &CGrid,
    eps_pd: f64,
) -> Result<SparseCovEstimate, CovError> {
    let t = residuals.ncols();
    let s = sample_residual_cov(residuals)?;
    let floor = choose_c_with_margin(s.as_ref(), t, rule, grid, eps_pd)?;

    let tf = t as f64;
    let held = if t > 2 { (tf / tf.ln()).floor() as usize } else { 0 };
    let candidates: Vec<f64> = grid
        .points()
        .into_iter()
        .filter(|&c| c > floor.c_used + 1e-9 * grid.step)
        .collect();
    if held < 2 || t - held < 2 || candidates.is_empty() {
        return Ok(floor);
    }

    // Training moments are the full-sample moments minus the held-out block.
    let n = s.nrows();
    let root_scale = ((n as f64).ln() / (t - held) as f64).sqrt();
    let mut folds = Vec::with_capacity(CV_FOLDS);
    for k in 0..CV_FOLDS {
        let start = k * (t - held) / (CV_FOLDS - 1);
        let block = residuals.subcols(start, held);
        let val_sum = block * block.transpose();
        let train = Mat::from_fn(n, n, |i, j| (s[(i, j)] * tf - val_sum[(i, j)]) / (t - held) as f64);
        let val = Mat::from_fn(n, n, |i, j| val_sum[(i, j)] / held as f64);
        if check_diagonal(train.as_ref()).is_err() {
            return Ok(floor);
        }
        let root: Vec<f64> = (0..n).map(|i| train[(i, i)].sqrt()).collect();
        folds.push((train, val, root));
    }

    // One pass over the folds accumulates the loss of every candidate.
    let cs: Vec<f64> = std::iter::once(floor.c_used).chain(candidates).collect();
    let mut losses = vec![0.0; cs.len()];
    for (train, val, root) in &folds {
        for j in 0..n {
            let rj = root_scale * root[j];
            let (tc, vc) = (&train.col_as_slice(j)[j + 1..], &val.col_as_slice(j)[j + 1..]);
            for ((x, v), r) in tc.iter().zip(vc).zip(&root[j + 1..]) {
                let base = rj * r;
                for (l, c) in losses.iter_mut().zip(&cs) {
                    let e = rule.apply(*x, c * base) - v;
                    *l += e * e;
                }
            }
        }
    }
    let mut best = (losses[0], cs[0]);
    for (&l, &c) in losses.iter().zip(&cs).skip(1) {
        if l < best.0 {
            best = (l, c);
        }
    }
    if best.1 == floor.c_used {
        return Ok(floor);
    }
    let m = threshold_unchecked(s.as_ref(), n, t, rule, best.1);
    if !exceeds_min_eigen(&m, eps_pd) {
        return Ok(floor);
    }
    finish(m, best.1, rule, grid)
}

pub fn sparsity_diag(m: MatRef<'_, f64>) -> Result<SparsityDiag, CovError> {
    let n = check_square(m)?;
    let mut m_n = 0;
    let mut d_n = 0;
    for i in 0..n {
        let mut row = 0;
        for j in 0..n {
            if m[(i, j)] != 0.0 {
                row += 1;
                if i != j {
                    d_n += 1;
                }
            }
        }
        m_n = m_n.max(row);
    }
    Ok(SparsityDiag { m_n, d_n })
}

/// Dump a square matrix as CSV in full symmetric storage, for debugging.
pub fn write_matrix_csv(path: &Path, m: MatRef<'_, f64>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}
