//! Screening set and the power enhancement component `J0`.
//!
//! An index is screened in when its estimate exceeds `delta` noise standard
//! deviations, `|theta_j| > v_j^{1/2} delta`, where `delta` is the high
//! criticism `log(log T) sqrt(log N)`. `J0` sums the squared standardized
//! estimates of the screened-in indices and scales by `sqrt(N)`, so it is zero
//! whenever nothing survives.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScreenError {
    #[error("high criticism needs N >= 2 and T >= 3 (N = {n}, T = {t})")]
    BadDimensions { n: usize, t: usize },

    #[error("length mismatch: {estimates} estimates, {variances} variances")]
    LengthMismatch { estimates: usize, variances: usize },

    #[error("empty estimate vector")]
    Empty,

    #[error("variance at index {index} is not positive ({value})")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("threshold must be positive, got {0}")]
    BadDelta(f64),

    #[error("grey band needs lo < hi, got ({lo}, {hi})")]
    BadBand { lo: f64, hi: f64 },
}

/// `log(log T) * sqrt(log N)` on real arguments.
pub fn high_criticism(n: f64, t: f64) -> f64 {
    t.ln().ln() * n.ln().sqrt()
}

pub fn high_criticism_delta(n: usize, t: usize) -> Result<f64, ScreenError> {
    if n < 2 || t < 3 {
        return Err(ScreenError::BadDimensions { n, t });
    }
    Ok(high_criticism(n as f64, t as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeningResult {
    pub delta: f64,
    /// Screened-in indices, ascending, 0-based.
    pub selected: Vec<usize>,
    pub j0: f64,
    /// `|theta_j| / v_j^{1/2}`.
    pub standardized: Vec<f64>,
}

impl ScreeningResult {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

fn validate(theta: &[f64], v: &[f64], delta: f64) -> Result<(), ScreenError> {
    if theta.len() != v.len() {
        return Err(ScreenError::LengthMismatch {
            estimates: theta.len(),
            variances: v.len(),
        });
    }
    if theta.is_empty() {
        return Err(ScreenError::Empty);
    }
    if !(delta > 0.0) {
        return Err(ScreenError::BadDelta(delta));
    }
    Ok(())
}

pub fn screen(theta: &[f64], v: &[f64], delta: f64) -> Result<ScreeningResult, ScreenError> {
    validate(theta, v, delta)?;
    if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
        return Err(ScreenError::NonPositiveVariance { index, value });
    }
    Ok(screen_unchecked(theta, v, delta))
}

/// Like [`screen`] but a zero variance with a nonzero estimate counts as an
/// infinitely significant index (standardized magnitude `+inf`) instead of an
/// error. Used for correlations, where `v = 0` exactly when `|rho| = 1`.
pub fn screen_allow_degenerate(
    theta: &[f64],
    v: &[f64],
    delta: f64,
) -> Result<ScreeningResult, ScreenError> {
    validate(theta, v, delta)?;
    if let Some((index, &value)) = v
        .iter()
        .enumerate()
        .find(|(i, &x)| x < 0.0 || x.is_nan() || (x == 0.0 && theta[*i] == 0.0))
    {
        return Err(ScreenError::NonPositiveVariance { index, value });
    }
    Ok(screen_unchecked(theta, v, delta))
}

fn screen_unchecked(theta: &[f64], v: &[f64], delta: f64) -> ScreeningResult {
    let mut selected = Vec::new();
    let mut sum = 0.0;
    let standardized = theta
        .iter()
        .zip(v)
        .enumerate()
        .map(|(j, (&th, &vj))| {
            let sd = vj.sqrt();
            if th.abs() > sd * delta {
                selected.push(j);
                sum += if vj > 0.0 { th * th / vj } else { f64::INFINITY };
            }
            if sd > 0.0 {
                th.abs() / sd
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let j0 = if selected.is_empty() {
        0.0
    } else {
        (theta.len() as f64).sqrt() * sum
    };
    ScreeningResult {
        delta,
        selected,
        j0,
        standardized,
    }
}

/// Multipliers bounding the grey area `lo * delta < |theta|/v^{1/2} <= hi * delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GreyBand {
    pub lo: f64,
    pub hi: f64,
}

impl Default for GreyBand {
    fn default() -> Self {
        Self {
            lo: 1.0 / 3.0,
            hi: 2.0,
        }
    }
}

/// Population counterparts of the screening set, available in simulation.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct OracleSets {
    /// `{j : |theta_j| > 2 v_j^{1/2} delta}`
    pub s_theta: Vec<usize>,
    pub grey: Vec<usize>,
}

pub fn oracle_sets(
    theta: &[f64],
    v: &[f64],
    delta: f64,
    band: GreyBand,
) -> Result<OracleSets, ScreenError> {
    if !(band.lo < band.hi) {
        return Err(ScreenError::BadBand {
            lo: band.lo,
            hi: band.hi,
        });
    }
    validate(theta, v, delta)?;
    let mut out = OracleSets::default();
    for (j, (&th, &vj)) in theta.iter().zip(v).enumerate() {
        if !(vj > 0.0) {
            return Err(ScreenError::NonPositiveVariance { index: j, value: vj });
        }
        let sd = vj.sqrt();
        let z = th.abs() / sd;
        if th.abs() > 2.0 * sd * delta {
            out.s_theta.push(j);
        }
        if z > band.lo * delta && z <= band.hi * delta {
            out.grey.push(j);
        }
    }
    Ok(out)
}
