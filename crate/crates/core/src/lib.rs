//! Power-enhanced tests for high-dimensional hypotheses.
//!
//! A pivotal quadratic statistic (feasible Wald for factor pricing alphas,
//! the bias-corrected `J1` for cross-sectional independence) is combined
//! with a screening statistic `J0 >= 0` that is zero with high probability
//! under the null and explodes under sparse alternatives. The sum keeps the
//! size of the pivotal test and gains power against sparse violations.

pub mod cli;
pub mod config;
pub mod cs_independence;
pub mod factor_ols;
pub mod montecarlo;
pub mod panel;
pub mod rolling;
pub mod screening;
pub mod sparse_cov;

pub use cs_independence::{power_enhanced_csi, CsiConfig};
pub use panel::{FactorPanel, Panel};
pub use quad_tests::{power_enhanced_fp, FpConfig, TestReport};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Panel(#[from] panel::PanelError),
    #[error(transparent)]
    Fit(#[from] factor_ols::FitError),
    #[error(transparent)]
    Screen(#[from] screening::ScreenError),
    #[error(transparent)]
    Cov(#[from] sparse_cov::CovError),
    #[error(transparent)]
    Test(#[from] quad_tests::TestError),
    #[error(transparent)]
    Csi(#[from] cs_independence::CsiError),
    #[error(transparent)]
    Sim(#[from] montecarlo::SimError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Rolling(#[from] rolling::RollingError),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
