//! `petest` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use faer::Mat;

use crate::config::ExperimentConfig;
use crate::cs_independence::{power_enhanced_csi, write_selected_pairs_csv, CsiConfig};
use crate::montecarlo::{run_experiment, write_rows_csv, ExperimentResult};
use crate::panel::{align, load_factor_csv, load_panel_csv, read_raw_panel, Layout, MissingPolicy, Panel, PanelError};
use crate::quad_tests::{power_enhanced_fp, FpConfig, Method, TestReport};
use crate::rolling::{run_rolling, write_rolling_csv, write_summary};
use crate::sparse_cov::{CGrid, CSelection, ThresholdRule};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "petest", version, about = "Power-enhanced high-dimensional tests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test that all factor pricing intercepts are zero.
    TestFp(TestFpArgs),
    /// Test cross-sectional independence of panel regression errors.
    TestCsi(TestCsiArgs),
    /// Run a size/power experiment described by a config file.
    Simulate(SimulateArgs),
    /// Rolling-window factor pricing tests.
    Rolling(RollingArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Orientation of the input CSV files.
    #[arg(long, value_enum, default_value_t = Layout::UnitsAsRows)]
    pub layout: Layout,
    /// Handling of units with blank cells.
    #[arg(long, value_enum, default_value_t = MissingPolicy::Reject)]
    pub missing: MissingPolicy,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long, value_enum, default_value_t = ThresholdRule::Soft)]
    pub rule: ThresholdRule,
    /// Candidate threshold constants as min:max:step.
    #[arg(long, default_value = "0:3:0.05")]
    pub c_grid: CGrid,
    /// How C is picked: cross-validated above the smallest positive definite
    /// point, or that point plus one grid step.
    #[arg(long, value_enum, default_value_t = CSelection::CrossValidated)]
    pub c_select: CSelection,
}

impl ThresholdArgs {
    fn fp_config(&self, delta_override: Option<f64>) -> FpConfig {
        FpConfig {
            rule: self.rule,
            grid: self.c_grid,
            c_selection: self.c_select,
            delta_override,
            ..FpConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TestFpArgs {
    /// Asset returns, one labelled row per asset by default.
    pub returns: PathBuf,
    /// Factor realizations in the same format.
    pub factors: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    /// Replace the screening threshold (expert use).
    #[arg(long)]
    pub delta_override: Option<f64>,
    /// Write the report as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TestCsiArgs {
    /// Dependent variable panel.
    pub y: PathBuf,
    /// One or more regressor panels with the same units and periods as y.
    #[arg(required = true)]
    pub x: Vec<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long)]
    pub delta_override: Option<f64>,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    /// Write the selected pairs (unit_i, unit_j, rho_hat, tstat) as CSV.
    #[arg(long)]
    pub pairs_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config replication count.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// CSV destination; the table goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replication statistics as JSON.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RollingArgs {
    pub returns: PathBuf,
    pub factors: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub window: usize,
    #[arg(long, value_enum, default_value_t = Layout::UnitsAsRows)]
    pub layout: Layout,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long)]
    pub delta_override: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Per-window CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

fn check_level(level: f64) -> Result<(), Error> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("--level must lie in (0, 1), got {level}")))
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Human-readable report, stable across runs for identical inputs.
pub fn render_report(report: &TestReport, level: f64) -> String {
    let piv = report.method.pivotal_name();
    let mut s = String::new();
    let title = match report.method {
        Method::FactorPricing => "factor pricing intercepts",
        Method::CrossSectionalIndependence => "cross-sectional independence",
    };
    s += &format!("test: {title} (J = J0 + {piv})\n");
    match report.method {
        Method::FactorPricing => s += &format!("N = {}, T = {}\n", report.n_units, report.n_time),
        Method::CrossSectionalIndependence => {
            s += &format!("n = {}, T = {}, pairs = {}\n", report.n_units, report.n_time, report.dimension)
        }
    }
    s += &format!("delta: {:.6}\n", report.delta);
    if let Some(rule) = report.rule {
        match report.c_used {
            Some(c) => s += &format!("threshold: {}, C = {c:.2}\n", rule.name()),
            None => s += &format!("threshold: {}, diagonal fallback\n", rule.name()),
        }
    }
    s += &format!("{:<8}{:.6}\n", "J0:", report.j0);
    s += &format!("{:<8}{:.6}\n", format!("{piv}:"), report.pivotal);
    s += &format!("{:<8}{:.6}\n", "J:", report.combined);
    s += &format!("p-value ({piv}): {:.6}\n", report.p_value_pivotal);
    s += &format!("p-value (J): {:.6}\n", report.p_value);
    s += &format!(
        "reject at {level}: {piv} {}, J {}\n",
        yes_no(report.pivotal_rejects(level)),
        yes_no(report.rejects(level))
    );
    if report.selected.is_empty() {
        s += "selected: (none)\n";
    } else {
        s += &format!("selected: {}\n", report.selected.len());
        for item in &report.selected {
            s += &format!("  {}  estimate {:.6}  t {:.3}\n", item.label, item.estimate, item.tstat);
        }
    }
    s
}

fn run_test_fp(args: &TestFpArgs) -> Result<(), Error> {
    check_level(args.level)?;
    let loaded = load_panel_csv(&args.returns, args.input.layout, args.input.missing)?;
    if !loaded.dropped.is_empty() {
        log::warn!("dropped {} units with missing values", loaded.dropped_count());
    }
    let factors = load_factor_csv(&args.factors, args.input.layout)?;
    let (returns, factors) = align(&loaded.panel, &factors)?;
    let report = power_enhanced_fp(&returns, &factors, &args.threshold.fp_config(args.delta_override))?;
    print!("{}", render_report(&report, args.level));
    if let Some(p) = &args.json_out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn select_units(p: &Panel, keep: &[String]) -> Result<Panel, PanelError> {
    let idx: Vec<usize> = keep
        .iter()
        .map(|l| p.unit_labels().iter().position(|u| u == l).expect("label present"))
        .collect();
    let v = p.values();
    Panel::new(
        Mat::from_fn(idx.len(), p.n_periods(), |i, t| v[(idx[i], t)]),
        keep.to_vec(),
        p.time_labels().to_vec(),
    )
}

fn run_test_csi(args: &TestCsiArgs) -> Result<(), Error> {
    check_level(args.level)?;
    let y = load_panel_csv(&args.y, args.input.layout, args.input.missing)?.panel;
    let xs: Vec<Panel> = args
        .x
        .iter()
        .map(|p| load_panel_csv(p, args.input.layout, args.input.missing).map(|l| l.panel))
        .collect::<Result<_, _>>()?;
    // Units must line up across files; with drop-unit, keep those complete
    // in every file, in the order of y.
    let keep: Vec<String> = y
        .unit_labels()
        .iter()
        .filter(|u| xs.iter().all(|x| x.unit_labels().contains(u)))
        .cloned()
        .collect();
    let same_set = keep.len() == y.n_units() && xs.iter().all(|x| x.n_units() == keep.len());
    if !same_set && args.input.missing != MissingPolicy::DropUnit {
        return Err(Error::Usage("y and regressor files do not share the same units".into()));
    }
    if keep.len() < y.n_units() {
        log::warn!("dropped {} units not present in every file", y.n_units() - keep.len());
    }
    let y = select_units(&y, &keep)?;
    let xs = xs.iter().map(|x| select_units(x, &keep)).collect::<Result<Vec<_>, _>>()?;
    let xrefs: Vec<&Panel> = xs.iter().collect();
    let report = power_enhanced_csi(&y, &xrefs, &CsiConfig { delta_override: args.delta_override })?;
    print!("{}", render_report(&report, args.level));
    if let Some(p) = &args.json_out {
        write_json(p, &report)?;
    }
    if let Some(p) = &args.pairs_out {
        write_selected_pairs_csv(p, &report)?;
    }
    Ok(())
}

fn render_simulation(results: &[ExperimentResult]) -> String {
    let mut s = format!(
        "{:<12} {:>6} {:>6} {:<6} {:>10} {:>10} {:>6} {:>8}\n",
        "scenario", "N", "T", "method", "reject", "S empty", "reps", "failed"
    );
    for res in results {
        for r in &res.rows {
            s += &format!(
                "{:<12} {:>6} {:>6} {:<6} {:>10.4} {:>10.4} {:>6} {:>8}\n",
                r.scenario,
                r.n,
                r.t,
                r.method,
                r.reject_freq,
                r.empty_s_freq,
                r.reps,
                res.failures.len()
            );
        }
    }
    s
}

fn run_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.reps {
        if reps == 0 {
            return Err(Error::Usage("--reps must be at least 1".into()));
        }
        cfg.reps = reps;
    }
    if let Some(th) = args.threads {
        cfg.threads = th;
    }
    let mut results = Vec::new();
    for sc in cfg.scenarios()? {
        let (n, t) = sc.dims();
        log::info!("running {} N={n} T={t} reps={}", sc.name(), cfg.reps);
        results.push(run_experiment(&sc, &cfg.methods, cfg.reps, cfg.level, cfg.seed, cfg.threads)?);
    }

    let mut csv_bytes = Vec::new();
    writeln!(csv_bytes, "# petest simulate {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(csv_bytes, "# seed: {}", cfg.seed)?;
    writeln!(csv_bytes, "# level: {}", cfg.level)?;
    writeln!(
        csv_bytes,
        "# rule: {}, c_grid: {}:{}:{}, c_select: {}, pd_margin: 1e-6 x mean variance, nonzero_count: {:?}",
        cfg.rule.name(),
        cfg.grid.c_min,
        cfg.grid.c_max,
        cfg.grid.step,
        cfg.c_selection.name(),
        cfg.nonzero_count
    )?;
    let rows: Vec<_> = results.iter().flat_map(|r| r.rows.clone()).collect();
    write_rows_csv(&mut csv_bytes, &rows)?;

    match &args.out {
        Some(p) => {
            write_atomic(p, &csv_bytes)?;
            print!("{}", render_simulation(&results));
        }
        None => std::io::stdout().write_all(&csv_bytes)?,
    }
    if let Some(p) = &args.json_out {
        write_json(p, &results)?;
    }
    Ok(())
}

fn run_rolling_cmd(args: &RollingArgs) -> Result<(), Error> {
    check_level(args.level)?;
    let raw = read_raw_panel(&args.returns, args.layout)?;
    let factors = load_factor_csv(&args.factors, args.layout)?;
    let result = run_rolling(
        &raw,
        &factors,
        args.window,
        args.level,
        &args.threshold.fp_config(args.delta_override),
        args.threads,
    )?;
    if let Some(p) = &args.out {
        write_rolling_csv(p, &result)?;
    }
    if let Some(p) = &args.json_out {
        write_json(p, &result)?;
    }
    write_summary(std::io::stdout().lock(), &result)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::TestFp(a) => run_test_fp(a),
        Command::TestCsi(a) => run_test_csi(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Rolling(a) => run_rolling_cmd(a),
    }
}
