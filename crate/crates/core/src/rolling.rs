//! Rolling-window factor pricing tests.
//!
//! Each window of `window` consecutive shared periods is tested separately,
//! keeping only the assets observed in every period of that window. Windows
//! advance one period at a time.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::panel::{common_time_indices, FactorPanel, MissingPolicy, PanelError, RawPanel};
use crate::quad_tests::{analyze_fp, FpConfig};

#[derive(Debug, thiserror::Error)]
pub enum RollingError {
    #[error("window of {window} periods is longer than the {available} periods shared by returns and factors")]
    WindowTooLong { window: usize, available: usize },
    #[error("window must exceed K + 1 = {0}")]
    WindowTooShort(usize),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct RollingRecord {
    pub window_end: String,
    /// Assets complete within the window.
    pub n_units: usize,
    pub j0: f64,
    pub p_wald: f64,
    pub p_pe: f64,
    pub n_selected: usize,
    /// Selected asset labels, `;`-separated in CSV output.
    pub selected: Vec<String>,
    pub mean_abs_theta_all: f64,
    /// NaN when nothing is selected.
    pub mean_abs_theta_selected: f64,
    pub c_used: Option<f64>,
    pub diagonal_fallback: bool,
    /// Set when the window could not be tested; numeric fields are NaN.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

fn summarize(xs: impl Iterator<Item = f64>) -> Summary {
    let mut v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Summary {
            mean: f64::NAN,
            median: f64::NAN,
        };
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
    Summary {
        mean: v.iter().sum::<f64>() / k as f64,
        median,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RollingSummary {
    pub windows: usize,
    pub failed_windows: usize,
    pub n_units: Summary,
    pub n_selected: Summary,
    pub p_wald: Summary,
    pub p_pe: Summary,
    pub reject_wald: f64,
    pub reject_pe: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RollingResult {
    pub window: usize,
    pub level: f64,
    pub records: Vec<RollingRecord>,
    pub summary: RollingSummary,
}

fn failed_record(window_end: String, n_units: usize, error: String) -> RollingRecord {
    RollingRecord {
        window_end,
        n_units,
        j0: f64::NAN,
        p_wald: f64::NAN,
        p_pe: f64::NAN,
        n_selected: 0,
        selected: Vec::new(),
        mean_abs_theta_all: f64::NAN,
        mean_abs_theta_selected: f64::NAN,
        c_used: None,
        diagonal_fallback: false,
        error: Some(error),
    }
}

fn run_window(returns: &RawPanel, factors: &FactorPanel, rcols: &[usize], fcols: &[usize], config: &FpConfig) -> RollingRecord {
    let end = returns.time_labels()[*rcols.last().expect("nonempty window")].clone();
    let panel = match returns.complete_case(rcols, MissingPolicy::DropUnit) {
        Ok((p, _)) => p,
        Err(e) => return failed_record(end, 0, e.to_string()),
    };
    let n = panel.n_units();
    if n <= rcols.len() {
        log::warn!("window ending {end}: N = {n} does not exceed T = {}", rcols.len());
    }
    let f = match factors.select_times(fcols) {
        Ok(f) => f,
        Err(e) => return failed_record(end, n, e.to_string()),
    };
    match analyze_fp(&panel, &f, config) {
        Ok(a) => {
            let theta = &a.fit.theta_hat;
            let r = &a.report;
            let sel: Vec<f64> = r.selected.iter().map(|s| s.estimate.abs()).collect();
            RollingRecord {
                window_end: end,
                n_units: n,
                j0: r.j0,
                p_wald: r.p_value_pivotal,
                p_pe: r.p_value,
                n_selected: r.selected.len(),
                selected: r.selected.iter().map(|s| s.label.to_string()).collect(),
                mean_abs_theta_all: theta.iter().map(|x| x.abs()).sum::<f64>() / theta.len() as f64,
                mean_abs_theta_selected: if sel.is_empty() {
                    f64::NAN
                } else {
                    sel.iter().sum::<f64>() / sel.len() as f64
                },
                c_used: r.c_used,
                diagonal_fallback: r.diagonal_fallback,
                error: None,
            }
        }
        Err(e) => failed_record(end, n, e.to_string()),
    }
}

/// Tests every window of length `window` over the periods shared by `returns`
/// and `factors`. `threads = 0` uses rayon's default pool.
pub fn run_rolling(
    returns: &RawPanel,
    factors: &FactorPanel,
    window: usize,
    level: f64,
    config: &FpConfig,
    threads: usize,
) -> Result<RollingResult, RollingError> {
    let common = common_time_indices(returns.time_labels(), factors.time_labels());
    if window > common.len() {
        return Err(RollingError::WindowTooLong {
            window,
            available: common.len(),
        });
    }
    let k = factors.n_factors();
    if window <= k + 1 {
        return Err(RollingError::WindowTooShort(k + 1));
    }
    let (rc, fc): (Vec<usize>, Vec<usize>) = common.into_iter().unzip();
    let starts: Vec<usize> = (0..=rc.len() - window).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let records: Vec<RollingRecord> = pool.install(|| {
        starts
            .par_iter()
            .map(|&s| run_window(returns, factors, &rc[s..s + window], &fc[s..s + window], config))
            .collect()
    });
    for r in &records {
        if let Some(e) = &r.error {
            log::warn!("window ending {} failed: {e}", r.window_end);
        }
    }

    let ok: Vec<&RollingRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let frac = |f: &dyn Fn(&RollingRecord) -> bool| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().filter(|r| f(r)).count() as f64 / ok.len() as f64
        }
    };
    let summary = RollingSummary {
        windows: records.len(),
        failed_windows: records.len() - ok.len(),
        n_units: summarize(ok.iter().map(|r| r.n_units as f64)),
        n_selected: summarize(ok.iter().map(|r| r.n_selected as f64)),
        p_wald: summarize(ok.iter().map(|r| r.p_wald)),
        p_pe: summarize(ok.iter().map(|r| r.p_pe)),
        reject_wald: frac(&|r| r.p_wald < level),
        reject_pe: frac(&|r| r.p_pe < level),
    };
    Ok(RollingResult {
        window,
        level,
        records,
        summary,
    })
}

fn opt_num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

/// Writes the per-window records as CSV through a temporary file renamed into
/// place, so readers never see a partial table.
pub fn write_rolling_csv(path: &Path, result: &RollingResult) -> Result<(), RollingError> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record([
            "window_end",
            "n_units",
            "j0",
            "p_wald",
            "p_pe",
            "n_selected",
            "selected",
            "mean_abs_theta_all",
            "mean_abs_theta_selected",
            "c_used",
            "diagonal_fallback",
            "error",
        ])?;
        for r in &result.records {
            w.write_record([
                r.window_end.clone(),
                r.n_units.to_string(),
                opt_num(r.j0),
                opt_num(r.p_wald),
                opt_num(r.p_pe),
                r.n_selected.to_string(),
                r.selected.join(";"),
                opt_num(r.mean_abs_theta_all),
                opt_num(r.mean_abs_theta_selected),
                r.c_used.map(opt_num).unwrap_or_default(),
                r.diagonal_fallback.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_summary<W: Write>(mut out: W, result: &RollingResult) -> std::io::Result<()> {
    let s = &result.summary;
    writeln!(out, "windows: {} (window length {}, {} failed)", s.windows, result.window, s.failed_windows)?;
    writeln!(out, "{:<12} {:>12} {:>12}", "", "mean", "median")?;
    for (name, v) in [
        ("N", s.n_units),
        ("|S|", s.n_selected),
        ("p_wald", s.p_wald),
        ("p_pe", s.p_pe),
    ] {
        writeln!(out, "{name:<12} {:>12.4} {:>12.4}", v.mean, v.median)?;
    }
    writeln!(out, "rejection rate at {}: wald {:.4}, pe {:.4}", result.level, s.reject_wald, s.reject_pe)
}
