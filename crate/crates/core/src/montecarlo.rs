//! Simulation designs and the replication engine for size and power studies.
//!
//! Replication `r` draws from `ChaCha8Rng` seeded with the master seed on
//! stream `r`, so results do not depend on how replications are scheduled
//! across threads.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef, Side};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::cs_independence::{analyze_csi, n_pairs, pair_index, CsiConfig};
use crate::panel::{FactorPanel, Panel};
use crate::quad_tests::{analyze_fp, FpConfig, TestReport};
use crate::screening::{oracle_sets, GreyBand, OracleSets};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid design: {0}")]
    InvalidSpec(String),
    #[error("method {method} does not apply to the {model} model")]
    MethodMismatch { method: &'static str, model: &'static str },
    #[error("reps must be at least 1")]
    NoReps,
    #[error("significance level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("covariance factorization failed: {0}")]
    Factorization(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("every replication failed; first error: {0}")]
    AllFailed(String),
}

/// Replication generator for `(master_seed, rep)`.
pub fn rep_rng(master_seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep);
    rng
}

/// `floor(x)` tolerant of values like `4.999999999` that are integers in
/// exact arithmetic.
fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// How "i <= N/T" is turned into a count of nonzero intercepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CountRule {
    #[default]
    Floor,
    Round,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FpAlternative {
    Null,
    /// `theta_i = 0.3` for the first `N/T` assets.
    SparseHa1,
    /// `theta_i = sqrt(log N / T)` for the first `N^0.4` assets.
    WeakHa2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CsiAlternative {
    Null,
    Spatial,
}

/// Symmetric block-diagonal matrix stored block by block.
#[derive(Debug, Clone)]
pub struct BlockDiag {
    pub blocks: Vec<Mat<f64>>,
}

impl BlockDiag {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| (0..b.nrows()).map(move |i| b[(i, i)]))
            .collect()
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let n = self.dim();
        let mut out = Mat::zeros(n, n);
        let mut off = 0;
        for b in &self.blocks {
            for j in 0..b.ncols() {
                for i in 0..b.nrows() {
                    out[(off + i, off + j)] = b[(i, j)];
                }
            }
            off += b.nrows();
        }
        out
    }

    pub fn min_eigen(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                b.self_adjoint_eigenvalues(Side::Lower)
                    .map(|e| e[0])
                    .unwrap_or(f64::NAN)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Draws `cols` independent `N(0, self)` vectors as columns.
    pub fn sample<R: Rng + ?Sized>(&self, cols: usize, rng: &mut R) -> Result<Mat<f64>, SimError> {
        let n = self.dim();
        let mut out = Mat::zeros(n, cols);
        let mut off = 0;
        for b in &self.blocks {
            let l = lower_factor(b.as_ref())?;
            let m = b.nrows();
            let mut z = vec![0.0; m];
            for s in 0..cols {
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                for i in 0..m {
                    out[(off + i, s)] = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
                }
            }
            off += m;
        }
        Ok(out)
    }
}

fn lower_factor(m: MatRef<'_, f64>) -> Result<Mat<f64>, SimError> {
    let llt = m
        .llt(Side::Lower)
        .map_err(|e| SimError::Factorization(format!("{e:?}")))?;
    Ok(llt.L().to_owned())
}

fn symmetrize(a: [[f64; 3]; 3]) -> Mat<f64> {
    Mat::from_fn(3, 3, |i, j| 0.5 * (a[i][j] + a[j][i]))
}

fn sample_mvn<R: Rng + ?Sized>(mean: &[f64], l: &Mat<f64>, rng: &mut R) -> Vec<f64> {
    let k = mean.len();
    let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    (0..k)
        .map(|i| mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FpDgpSpec {
    pub n: usize,
    pub t: usize,
    pub mu_b: [f64; 3],
    pub sigma_b: [[f64; 3]; 3],
    pub mu_f: [f64; 3],
    pub sigma_f: [[f64; 3]; 3],
    pub block_size: usize,
    /// Block correlations are `U(0, rho_max)`.
    pub rho_max: f64,
    /// Variance of each coordinate of `v_i` in the diagonal `1 + |v_i|^2`.
    pub diag_noise_var: f64,
    pub alternative: FpAlternative,
    pub count_rule: CountRule,
}

impl FpDgpSpec {
    /// Loadings and factor moments calibrated to Fama-French daily data.
    pub fn table1(n: usize, t: usize, alternative: FpAlternative) -> Self {
        Self {
            n,
            t,
            mu_b: [0.9833, -0.1233, 0.0839],
            sigma_b: [
                [0.0921, -0.0178, 0.0436],
                [-0.0178, 0.0862, -0.0211],
                [0.0436, -0.0211, 0.7624],
            ],
            mu_f: [0.0260, 0.0211, -0.0043],
            sigma_f: [
                [3.2351, 0.1783, 0.7783],
                [0.1783, 0.5069, 0.0102],
                [0.7783, 0.0102, 0.6586],
            ],
            block_size: 4,
            rho_max: 0.5,
            diag_noise_var: 0.01,
            alternative,
            count_rule: CountRule::Floor,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n < 2 || self.t < 5 {
            return Err(SimError::InvalidSpec(format!("need N >= 2 and T >= 5, got N = {}, T = {}", self.n, self.t)));
        }
        if self.block_size == 0 {
            return Err(SimError::InvalidSpec("block size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rho_max) {
            return Err(SimError::InvalidSpec(format!("rho_max must lie in [0, 1), got {}", self.rho_max)));
        }
        for (name, m) in [("Sigma_B", self.sigma_b), ("Sigma_f", self.sigma_f)] {
            lower_factor(symmetrize(m).as_ref())
                .map_err(|_| SimError::InvalidSpec(format!("{name} is not positive definite")))?;
        }
        Ok(())
    }

    pub fn n_nonzero(&self) -> usize {
        let (n, t) = (self.n as f64, self.t as f64);
        match self.alternative {
            FpAlternative::Null => 0,
            FpAlternative::SparseHa1 => match self.count_rule {
                CountRule::Floor => floor_count(n / t),
                CountRule::Round => (n / t).round() as usize,
            },
            FpAlternative::WeakHa2 => match self.count_rule {
                CountRule::Floor => floor_count(n.powf(0.4)),
                CountRule::Round => n.powf(0.4).round() as usize,
            },
        }
        .min(self.n)
    }

    pub fn theta(&self) -> Vec<f64> {
        let value = match self.alternative {
            FpAlternative::Null => 0.0,
            FpAlternative::SparseHa1 => 0.3,
            FpAlternative::WeakHa2 => ((self.n as f64).ln() / self.t as f64).sqrt(),
        };
        let k = self.n_nonzero();
        (0..self.n).map(|i| if i < k { value } else { 0.0 }).collect()
    }

    /// Population `1 - mu_f' (Sigma_f + mu_f mu_f')^{-1} mu_f`.
    pub fn population_a_f(&self) -> f64 {
        let sf = symmetrize(self.sigma_f);
        let mu = self.mu_f;
        let m = Mat::from_fn(3, 3, |i, j| sf[(i, j)] + mu[i] * mu[j]);
        let x = m
            .llt(Side::Lower)
            .expect("validated second moment")
            .solve(&Mat::from_fn(3, 1, |i, _| mu[i]));
        1.0 - (0..3).map(|i| mu[i] * x[(i, 0)]).sum::<f64>()
    }

    pub fn scenario_name(&self) -> String {
        let alt = match self.alternative {
            FpAlternative::Null => "fp-null",
            FpAlternative::SparseHa1 => "fp-ha1",
            FpAlternative::WeakHa2 => "fp-ha2",
        };
        alt.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct FpDataset {
    pub returns: Panel,
    pub factors: FactorPanel,
    /// N x 3 loadings.
    pub loadings: Mat<f64>,
    pub theta: Vec<f64>,
    pub sigma_u: BlockDiag,
}

fn labels(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}{i}")).collect()
}

pub fn gen_fp_dataset(spec: &FpDgpSpec, seed: u64) -> Result<FpDataset, SimError> {
    gen_fp_dataset_with(spec, &mut rep_rng(seed, 0))
}

pub fn gen_fp_dataset_with<R: Rng + ?Sized>(spec: &FpDgpSpec, rng: &mut R) -> Result<FpDataset, SimError> {
    spec.validate()?;
    let (n, t) = (spec.n, spec.t);
    let lb = lower_factor(symmetrize(spec.sigma_b).as_ref())?;
    let lf = lower_factor(symmetrize(spec.sigma_f).as_ref())?;

    let b: Vec<Vec<f64>> = (0..n).map(|_| sample_mvn(&spec.mu_b, &lb, rng)).collect();
    let f: Vec<Vec<f64>> = (0..t).map(|_| sample_mvn(&spec.mu_f, &lf, rng)).collect();

    let sd_v = spec.diag_noise_var.sqrt();
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let m = spec.block_size.min(n - start);
        let rho: f64 = rng.random::<f64>() * spec.rho_max;
        let diag: Vec<f64> = (0..m)
            .map(|_| {
                1.0 + (0..3)
                    .map(|_| (sd_v * rng.sample::<f64, _>(StandardNormal)).powi(2))
                    .sum::<f64>()
            })
            .collect();
        blocks.push(Mat::from_fn(m, m, |i, j| if i == j { diag[i] } else { rho }));
        start += m;
    }
    let sigma_u = BlockDiag { blocks };
    let u = sigma_u.sample(t, rng)?;

    let theta = spec.theta();
    let y = Mat::from_fn(n, t, |i, s| {
        theta[i] + (0..3).map(|k| b[i][k] * f[s][k]).sum::<f64>() + u[(i, s)]
    });
    let times = labels("t", t);
    let returns = Panel::new(y, labels("a", n), times.clone())
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let factors = FactorPanel::new(
        Mat::from_fn(3, t, |k, s| f[s][k]),
        vec!["mkt".into(), "smb".into(), "hml".into()],
        times,
    )
    .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    Ok(FpDataset {
        returns,
        factors,
        loadings: Mat::from_fn(n, 3, |i, k| b[i][k]),
        theta,
        sigma_u,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CsiDgpSpec {
    pub n: usize,
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    /// AR coefficient of the regressor.
    pub xi: f64,
    pub mu_sd: f64,
    pub x_init: f64,
    pub kappa: f64,
    pub spatial_rho: f64,
    pub block_size: usize,
    pub alternative: CsiAlternative,
}

impl CsiDgpSpec {
    pub fn new(n: usize, t: usize, alternative: CsiAlternative) -> Self {
        Self {
            n,
            t,
            alpha: -1.0,
            beta: 2.0,
            xi: 0.7,
            mu_sd: 0.5,
            x_init: 0.5,
            kappa: 0.5,
            spatial_rho: 0.2,
            block_size: 4,
            alternative,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n < 2 || self.t < 3 {
            return Err(SimError::InvalidSpec(format!("need n >= 2 and T >= 3, got n = {}, T = {}", self.n, self.t)));
        }
        if self.block_size == 0 {
            return Err(SimError::InvalidSpec("block size must be positive".into()));
        }
        if !(self.spatial_rho.abs() < 1.0) {
            return Err(SimError::InvalidSpec(format!("spatial rho must lie in (-1, 1), got {}", self.spatial_rho)));
        }
        if self.alternative == CsiAlternative::Spatial && self.n_active_blocks() > self.n_blocks() {
            return Err(SimError::InvalidSpec("more active blocks than blocks".into()));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.n.div_ceil(self.block_size)
    }

    pub fn n_active_blocks(&self) -> usize {
        match self.alternative {
            CsiAlternative::Null => 0,
            CsiAlternative::Spatial => floor_count((self.n as f64).powf(0.3)),
        }
    }

    pub fn scenario_name(&self) -> String {
        match self.alternative {
            CsiAlternative::Null => "csi-null",
            CsiAlternative::Spatial => "csi-spatial",
        }
        .to_string()
    }
}

#[derive(Debug, Clone)]
pub struct CsiDataset {
    pub y: Panel,
    pub x: Panel,
    /// Error covariance, block-diagonal over consecutive groups of units.
    pub sigma_u: BlockDiag,
    /// Block numbers carrying spatial correlation, ascending.
    pub active_blocks: Vec<usize>,
}

pub fn gen_csi_dataset(spec: &CsiDgpSpec, seed: u64) -> Result<CsiDataset, SimError> {
    gen_csi_dataset_with(spec, &mut rep_rng(seed, 0))
}

pub fn gen_csi_dataset_with<R: Rng + ?Sized>(spec: &CsiDgpSpec, rng: &mut R) -> Result<CsiDataset, SimError> {
    spec.validate()?;
    let (n, t) = (spec.n, spec.t);
    let mu: Vec<f64> = (0..n).map(|_| spec.mu_sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut x = Mat::zeros(n, t);
    for i in 0..n {
        x[(i, 0)] = spec.x_init;
        for s in 1..t {
            x[(i, s)] = spec.xi * x[(i, s - 1)] + mu[i] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let xbar = (0..t).map(|s| x[(i, s)]).sum::<f64>() / t as f64;
            (1.0 + spec.kappa * xbar).powi(2)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let var: Vec<f64> = raw.iter().map(|r| r / mean).collect();

    let mut active_blocks = match spec.alternative {
        CsiAlternative::Null => Vec::new(),
        CsiAlternative::Spatial => {
            rand::seq::index::sample(rng, spec.n_blocks(), spec.n_active_blocks()).into_vec()
        }
    };
    active_blocks.sort_unstable();

    let mut blocks = Vec::with_capacity(spec.n_blocks());
    for blk in 0..spec.n_blocks() {
        let start = blk * spec.block_size;
        let m = spec.block_size.min(n - start);
        let active = active_blocks.binary_search(&blk).is_ok();
        blocks.push(Mat::from_fn(m, m, |a, b| {
            let corr = if a == b {
                1.0
            } else if active {
                spec.spatial_rho.powi((a as i32 - b as i32).abs())
            } else {
                0.0
            };
            corr * (var[start + a] * var[start + b]).sqrt()
        }));
    }
    let sigma_u = BlockDiag { blocks };
    let u = sigma_u.sample(t, rng)?;
    let y = Mat::from_fn(n, t, |i, s| spec.alpha + spec.beta * x[(i, s)] + mu[i] + u[(i, s)]);

    let units = labels("i", n);
    let times = labels("t", t);
    let err = |e: crate::panel::PanelError| SimError::InvalidSpec(e.to_string());
    Ok(CsiDataset {
        y: Panel::new(y, units.clone(), times.clone()).map_err(err)?,
        x: Panel::new(x, units, times).map_err(err)?,
        sigma_u,
        active_blocks,
    })
}

#[derive(Debug, Clone)]
pub enum Scenario {
    FactorPricing { spec: FpDgpSpec, config: FpConfig },
    Csi { spec: CsiDgpSpec, config: CsiConfig },
}

impl Scenario {
    pub fn fp(spec: FpDgpSpec) -> Self {
        Scenario::FactorPricing {
            spec,
            config: FpConfig::default(),
        }
    }

    pub fn csi(spec: CsiDgpSpec) -> Self {
        Scenario::Csi {
            spec,
            config: CsiConfig::default(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Scenario::FactorPricing { spec, .. } => spec.scenario_name(),
            Scenario::Csi { spec, .. } => spec.scenario_name(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Scenario::FactorPricing { spec, .. } => (spec.n, spec.t),
            Scenario::Csi { spec, .. } => (spec.n, spec.t),
        }
    }

    pub fn is_null(&self) -> bool {
        match self {
            Scenario::FactorPricing { spec, .. } => spec.alternative == FpAlternative::Null,
            Scenario::Csi { spec, .. } => spec.alternative == CsiAlternative::Null,
        }
    }

    fn model(&self) -> &'static str {
        match self {
            Scenario::FactorPricing { .. } => "factor pricing",
            Scenario::Csi { .. } => "cross-sectional independence",
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match self {
            Scenario::FactorPricing { spec, .. } => spec.validate(),
            Scenario::Csi { spec, .. } => spec.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    /// Feasible Wald alone.
    Wald,
    /// Bias-corrected quadratic alone.
    J1,
    /// Screening statistic plus the pivotal statistic of the model.
    #[value(name = "pe")]
    #[serde(rename = "pe")]
    PowerEnhanced,
}

impl TestMethod {
    pub fn name(self) -> &'static str {
        match self {
            TestMethod::Wald => "wald",
            TestMethod::J1 => "j1",
            TestMethod::PowerEnhanced => "pe",
        }
    }

    fn check(self, scenario: &Scenario) -> Result<(), SimError> {
        let ok = match (self, scenario) {
            (TestMethod::Wald, Scenario::Csi { .. }) => false,
            (TestMethod::J1, Scenario::FactorPricing { .. }) => false,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::MethodMismatch {
                method: self.name(),
                model: scenario.model(),
            })
        }
    }

    pub fn rejects(self, report: &TestReport, level: f64) -> bool {
        match self {
            TestMethod::Wald | TestMethod::J1 => report.pivotal_rejects(level),
            TestMethod::PowerEnhanced => report.rejects(level),
        }
    }
}

/// Per-replication membership of the fitted screening set relative to the
/// population sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScreeningFlags {
    pub empty: bool,
    /// `S(theta)` is contained in the fitted set.
    pub sure: bool,
    /// The fitted set equals `S(theta)`.
    pub exact: bool,
    /// Every fitted index outside `S(theta)` lies in the grey area.
    pub extras_in_grey: bool,
}

pub fn screening_flags(oracle: &OracleSets, selected: &[usize]) -> ScreeningFlags {
    let sure = oracle.s_theta.iter().all(|j| selected.binary_search(j).is_ok());
    let extras_in_grey = selected
        .iter()
        .filter(|j| oracle.s_theta.binary_search(j).is_err())
        .all(|j| oracle.grey.binary_search(j).is_ok());
    ScreeningFlags {
        empty: selected.is_empty(),
        sure,
        exact: sure && selected.len() == oracle.s_theta.len(),
        extras_in_grey,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct ScreeningRates {
    pub empty: f64,
    pub sure: f64,
    pub exact: f64,
    pub extras_in_grey: f64,
}

pub fn screening_diagnostics(flags: &[ScreeningFlags]) -> ScreeningRates {
    if flags.is_empty() {
        return ScreeningRates::default();
    }
    let r = flags.len() as f64;
    let rate = |f: fn(&ScreeningFlags) -> bool| flags.iter().filter(|x| f(x)).count() as f64 / r;
    ScreeningRates {
        empty: rate(|x| x.empty),
        sure: rate(|x| x.sure),
        exact: rate(|x| x.exact),
        extras_in_grey: rate(|x| x.extras_in_grey),
    }
}

/// Population intercepts and variances of the factor design:
/// `v_j = (Sigma_u)_jj / (T a_f)`.
pub fn fp_oracle(spec: &FpDgpSpec, data: &FpDataset, delta: f64) -> OracleSets {
    let denom = spec.t as f64 * spec.population_a_f();
    let v: Vec<f64> = data.sigma_u.diag().iter().map(|s| s / denom).collect();
    oracle_sets(&data.theta, &v, delta, GreyBand::default()).unwrap_or_default()
}

/// Population correlations of the panel errors with `v = (1 - rho^2)^2 / T`.
pub fn csi_oracle(data: &CsiDataset, delta: f64) -> OracleSets {
    let n = data.y.n_units();
    let t = data.y.n_periods() as f64;
    let mut rho = vec![0.0; n_pairs(n)];
    let mut off = 0;
    for b in &data.sigma_u.blocks {
        for i in 0..b.nrows() {
            for j in (i + 1)..b.nrows() {
                rho[pair_index(off + i, off + j, n)] = b[(i, j)] / (b[(i, i)] * b[(j, j)]).sqrt();
            }
        }
        off += b.nrows();
    }
    let v: Vec<f64> = rho.iter().map(|r| (1.0 - r * r).powi(2) / t).collect();
    oracle_sets(&rho, &v, delta, GreyBand::default()).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct RepRecord {
    pub rep: u64,
    pub j0: f64,
    pub pivotal: f64,
    pub combined: f64,
    pub p_value: f64,
    pub p_value_pivotal: f64,
    pub selected: Vec<usize>,
    pub diagonal_fallback: bool,
    pub flags: ScreeningFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizePowerRow {
    pub method: String,
    pub scenario: String,
    #[serde(rename = "T")]
    pub t: usize,
    /// Assets for factor pricing, panel units for independence tests.
    #[serde(rename = "N")]
    pub n: usize,
    pub reject_freq: f64,
    pub empty_s_freq: f64,
    /// Replications that produced a report.
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub scenario: String,
    pub rows: Vec<SizePowerRow>,
    pub records: Vec<RepRecord>,
    /// `(rep, message)` for replications that failed and were excluded.
    pub failures: Vec<(u64, String)>,
    pub screening: ScreeningRates,
}

impl ExperimentResult {
    pub fn row(&self, method: TestMethod) -> Option<&SizePowerRow> {
        self.rows.iter().find(|r| r.method == method.name())
    }
}

fn run_rep(scenario: &Scenario, master_seed: u64, rep: u64) -> Result<RepRecord, String> {
    let mut rng = rep_rng(master_seed, rep);
    let (report, oracle) = match scenario {
        Scenario::FactorPricing { spec, config } => {
            let data = gen_fp_dataset_with(spec, &mut rng).map_err(|e| e.to_string())?;
            let a = analyze_fp(&data.returns, &data.factors, config).map_err(|e| e.to_string())?;
            let oracle = fp_oracle(spec, &data, a.report.delta);
            (a.report, oracle)
        }
        Scenario::Csi { spec, config } => {
            let data = gen_csi_dataset_with(spec, &mut rng).map_err(|e| e.to_string())?;
            let a = analyze_csi(&data.y, &[&data.x], config).map_err(|e| e.to_string())?;
            let oracle = csi_oracle(&data, a.report.delta);
            (a.report, oracle)
        }
    };
    let selected: Vec<usize> = report.selected.iter().map(|s| s.index).collect();
    Ok(RepRecord {
        rep,
        j0: report.j0,
        pivotal: report.pivotal,
        combined: report.combined,
        p_value: report.p_value,
        p_value_pivotal: report.p_value_pivotal,
        flags: screening_flags(&oracle, &selected),
        selected,
        diagonal_fallback: report.diagonal_fallback,
    })
}

fn record_rejects(method: TestMethod, r: &RepRecord, level: f64) -> bool {
    match method {
        TestMethod::Wald | TestMethod::J1 => r.p_value_pivotal < level,
        TestMethod::PowerEnhanced => r.p_value < level,
    }
}

/// Runs `reps` replications. `threads = 0` uses rayon's default pool size.
pub fn run_experiment(
    scenario: &Scenario,
    methods: &[TestMethod],
    reps: usize,
    level: f64,
    master_seed: u64,
    threads: usize,
) -> Result<ExperimentResult, SimError> {
    if reps == 0 {
        return Err(SimError::NoReps);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(SimError::BadLevel(level));
    }
    scenario.validate()?;
    for m in methods {
        m.check(scenario)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    let outcomes: Vec<Result<RepRecord, String>> = pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|rep| run_rep(scenario, master_seed, rep))
            .collect()
    });

    let mut records = Vec::with_capacity(reps);
    let mut failures = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failures.push((rep as u64, e));
            }
        }
    }
    if records.is_empty() {
        return Err(SimError::AllFailed(failures[0].1.clone()));
    }
    let fallbacks = records.iter().filter(|r| r.diagonal_fallback).count();
    if fallbacks > 0 {
        log::warn!("{fallbacks} replications used the diagonal covariance fallback");
    }

    let ok = records.len() as f64;
    let empty = records.iter().filter(|r| r.selected.is_empty()).count() as f64 / ok;
    let (n, t) = scenario.dims();
    let name = scenario.name();
    let rows: Vec<SizePowerRow> = methods
        .iter()
        .map(|&m| SizePowerRow {
            method: m.name().to_string(),
            scenario: name.clone(),
            t,
            n,
            reject_freq: records.iter().filter(|r| record_rejects(m, r, level)).count() as f64 / ok,
            empty_s_freq: empty,
            reps: records.len(),
            seed: master_seed,
        })
        .collect();
    if scenario.is_null() {
        size_soft_check(&rows, level);
    }
    let flags: Vec<ScreeningFlags> = records.iter().map(|r| r.flags).collect();
    Ok(ExperimentResult {
        scenario: name,
        rows,
        records,
        failures,
        screening: screening_diagnostics(&flags),
    })
}

/// Logs a warning for null rejection rates more than three binomial
/// standard errors from the nominal level.
pub fn size_soft_check(rows: &[SizePowerRow], level: f64) -> Vec<String> {
    let mut out = Vec::new();
    for row in rows {
        let se = (level * (1.0 - level) / row.reps as f64).sqrt();
        if (row.reject_freq - level).abs() > 3.0 * se {
            let msg = format!(
                "{} size {:.4} in {} is more than 3 standard errors ({:.4}) from {level}",
                row.method, row.reject_freq, row.scenario, se
            );
            log::warn!("{msg}");
            out.push(msg);
        }
    }
    out
}

pub fn write_rows_csv<W: std::io::Write>(w: W, rows: &[SizePowerRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
