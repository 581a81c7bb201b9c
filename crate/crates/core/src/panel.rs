//! Panel ingestion: rectangular unit-by-time matrices read from labelled CSV
//! files, plus the factor panel that accompanies asset returns.
//!
//! Two on-disk layouts are accepted. In the units-as-rows layout the header
//! row carries time labels and the first column carries unit labels; the
//! units-as-columns layout is the transpose (dates down the side, tickers
//! across the top), which is how most return files are stored. A blank cell
//! is a missing observation.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("line {line}, column {column}: cannot parse {value:?} as a finite number")]
    Parse {
        line: usize,
        column: usize,
        value: String,
    },

    #[error("line {line} has {found} fields, expected {expected}")]
    Ragged {
        line: usize,
        found: usize,
        expected: usize,
    },

    #[error("missing value for {unit:?} at {time:?}")]
    Missing { unit: String, time: String },

    #[error("duplicate {kind} label {label:?}")]
    DuplicateLabel { kind: &'static str, label: String },

    #[error("panel is empty: {0}")]
    Empty(String),

    #[error("panel needs at least {required} time points, got {found}")]
    TooFewPeriods { required: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("insufficient overlap: {common} shared time labels, need at least {required}")]
    InsufficientOverlap { common: usize, required: usize },

    #[error("factor panel needs K >= 1 and K + 1 < T (K = {k}, T = {t})")]
    FactorDims { k: usize, t: usize },
}

/// Orientation of a panel CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Header row holds time labels; each following row is one unit.
    #[default]
    UnitsAsRows,
    /// Header row holds unit labels; each following row is one time point.
    UnitsAsColumns,
}

/// What to do with units that have at least one blank cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    DropUnit,
}

fn check_unique(labels: &[String], kind: &'static str) -> Result<(), PanelError> {
    let mut seen = HashSet::with_capacity(labels.len());
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(PanelError::DuplicateLabel {
                kind,
                label: l.clone(),
            });
        }
    }
    Ok(())
}

fn check_finite(values: &Mat<f64>) -> Result<(), PanelError> {
    for j in 0..values.ncols() {
        for i in 0..values.nrows() {
            if !values[(i, j)].is_finite() {
                return Err(PanelError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Complete observation matrix: rows are cross-sectional units, columns are
/// time points.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: Mat<f64>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl Panel {
    pub fn new(
        values: Mat<f64>,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self, PanelError> {
        if values.nrows() == 0 {
            return Err(PanelError::Empty("no units".into()));
        }
        if values.ncols() < 2 {
            return Err(PanelError::TooFewPeriods {
                required: 2,
                found: values.ncols(),
            });
        }
        if unit_labels.len() != values.nrows() || time_labels.len() != values.ncols() {
            return Err(PanelError::Shape(format!(
                "{}x{} values with {} unit labels and {} time labels",
                values.nrows(),
                values.ncols(),
                unit_labels.len(),
                time_labels.len()
            )));
        }
        check_unique(&unit_labels, "unit")?;
        check_unique(&time_labels, "time")?;
        check_finite(&values)?;
        Ok(Self {
            values,
            unit_labels,
            time_labels,
        })
    }

    /// Panel with generated labels `u1..un` and `t1..tT`.
    pub fn from_values(values: Mat<f64>) -> Result<Self, PanelError> {
        let units = (1..=values.nrows()).map(|i| format!("u{i}")).collect();
        let times = (1..=values.ncols()).map(|t| format!("t{t}")).collect();
        Self::new(values, units, times)
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.values.ncols()
    }

    /// Sub-panel on the given time columns, in the given order.
    pub fn select_times(&self, cols: &[usize]) -> Result<Self, PanelError> {
        let values = Mat::from_fn(self.n_units(), cols.len(), |i, j| self.values[(i, cols[j])]);
        let times = cols.iter().map(|&c| self.time_labels[c].clone()).collect();
        Self::new(values, self.unit_labels.clone(), times)
    }

    pub fn write_csv(&self, path: &Path, layout: Layout) -> Result<(), PanelError> {
        write_labelled(
            path,
            layout,
            &self.unit_labels,
            &self.time_labels,
            |i, t| Some(self.values[(i, t)]),
        )
    }
}

/// Observable factor returns: rows are factors, columns are time points.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPanel {
    values: Mat<f64>,
    factor_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl FactorPanel {
    pub fn new(
        values: Mat<f64>,
        factor_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self, PanelError> {
        let (k, t) = (values.nrows(), values.ncols());
        if k == 0 || k + 1 >= t {
            return Err(PanelError::FactorDims { k, t });
        }
        if factor_labels.len() != k || time_labels.len() != t {
            return Err(PanelError::Shape(format!(
                "{k}x{t} factor values with {} factor labels and {} time labels",
                factor_labels.len(),
                time_labels.len()
            )));
        }
        check_unique(&factor_labels, "factor")?;
        check_unique(&time_labels, "time")?;
        check_finite(&values)?;
        Ok(Self {
            values,
            factor_labels,
            time_labels,
        })
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn factor_labels(&self) -> &[String] {
        &self.factor_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn n_factors(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_times(&self, cols: &[usize]) -> Result<Self, PanelError> {
        let values = Mat::from_fn(self.n_factors(), cols.len(), |i, j| self.values[(i, cols[j])]);
        let times = cols.iter().map(|&c| self.time_labels[c].clone()).collect();
        Self::new(values, self.factor_labels.clone(), times)
    }

    pub fn write_csv(&self, path: &Path, layout: Layout) -> Result<(), PanelError> {
        write_labelled(
            path,
            layout,
            &self.factor_labels,
            &self.time_labels,
            |i, t| Some(self.values[(i, t)]),
        )
    }
}

/// Panel as read from disk, blanks kept as `None`. Row-major, units by time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    cells: Vec<Option<f64>>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl RawPanel {
    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn n_periods(&self) -> usize {
        self.time_labels.len()
    }

    pub fn get(&self, unit: usize, time: usize) -> Option<f64> {
        self.cells[unit * self.time_labels.len() + time]
    }

    /// Restrict to the given time columns, applying the missing-value policy
    /// within those columns only. Returns the panel and the dropped unit labels.
    pub fn complete_case(
        &self,
        cols: &[usize],
        policy: MissingPolicy,
    ) -> Result<(Panel, Vec<String>), PanelError> {
        let mut keep = Vec::with_capacity(self.unit_labels.len());
        let mut dropped = Vec::new();
        for (i, label) in self.unit_labels.iter().enumerate() {
            match cols.iter().find(|&&t| self.get(i, t).is_none()) {
                None => keep.push(i),
                Some(&t) => match policy {
                    MissingPolicy::Reject => {
                        return Err(PanelError::Missing {
                            unit: label.clone(),
                            time: self.time_labels[t].clone(),
                        })
                    }
                    MissingPolicy::DropUnit => dropped.push(label.clone()),
                },
            }
        }
        if keep.is_empty() {
            return Err(PanelError::Empty(format!(
                "all {} units dropped for missing values",
                dropped.len()
            )));
        }
        let values = Mat::from_fn(keep.len(), cols.len(), |r, c| {
            self.get(keep[r], cols[c]).expect("complete case")
        });
        let units = keep.iter().map(|&i| self.unit_labels[i].clone()).collect();
        let times = cols.iter().map(|&c| self.time_labels[c].clone()).collect();
        Ok((Panel::new(values, units, times)?, dropped))
    }

    pub fn into_panel(self, policy: MissingPolicy) -> Result<(Panel, Vec<String>), PanelError> {
        let cols: Vec<usize> = (0..self.time_labels.len()).collect();
        self.complete_case(&cols, policy)
    }
}

/// Result of [`load_panel_csv`]: the panel and the units removed under
/// [`MissingPolicy::DropUnit`].
#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: Panel,
    pub dropped: Vec<String>,
}

impl LoadedPanel {
    pub fn dropped_count(&self) -> usize {
        self.dropped.len()
    }
}

fn parse_cell(raw: &str, line: usize, column: usize) -> Result<Option<f64>, PanelError> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(PanelError::Parse {
            line,
            column,
            value: s.to_string(),
        }),
    }
}

/// Read a labelled CSV into a [`RawPanel`] without applying any missing-value
/// policy.
pub fn read_raw_panel(path: &Path, layout: Layout) -> Result<RawPanel, PanelError> {
    let file = std::fs::File::open(path).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(PanelError::Empty(format!("{} has no header", path.display()))),
    };
    let col_labels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let width = header.len();

    let mut row_labels = Vec::new();
    let mut cells = Vec::new();
    for (idx, rec) in records.enumerate() {
        let rec = rec?;
        let line = idx + 2;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(PanelError::Ragged {
                line,
                found: rec.len(),
                expected: width,
            });
        }
        row_labels.push(rec[0].trim().to_string());
        for (c, raw) in rec.iter().enumerate().skip(1) {
            cells.push(parse_cell(raw, line, c + 1)?);
        }
    }
    if row_labels.is_empty() || col_labels.is_empty() {
        return Err(PanelError::Empty(format!("{} has no data cells", path.display())));
    }

    let (unit_labels, time_labels, cells) = match layout {
        Layout::UnitsAsRows => (row_labels, col_labels, cells),
        Layout::UnitsAsColumns => {
            let (nt, nu) = (row_labels.len(), col_labels.len());
            let mut transposed = Vec::with_capacity(cells.len());
            for u in 0..nu {
                for t in 0..nt {
                    transposed.push(cells[t * nu + u]);
                }
            }
            (col_labels, row_labels, transposed)
        }
    };
    check_unique(&unit_labels, "unit")?;
    check_unique(&time_labels, "time")?;
    Ok(RawPanel {
        cells,
        unit_labels,
        time_labels,
    })
}

pub fn load_panel_csv(
    path: &Path,
    layout: Layout,
    missing: MissingPolicy,
) -> Result<LoadedPanel, PanelError> {
    let (panel, dropped) = read_raw_panel(path, layout)?.into_panel(missing)?;
    Ok(LoadedPanel { panel, dropped })
}

/// Factor files use the same format; any blank cell is an error.
pub fn load_factor_csv(path: &Path, layout: Layout) -> Result<FactorPanel, PanelError> {
    let raw = read_raw_panel(path, layout)?;
    let (p, _) = raw.into_panel(MissingPolicy::Reject)?;
    FactorPanel::new(p.values, p.unit_labels, p.time_labels)
}

/// Pairs of column indices `(in a, in b)` for the time labels shared by both
/// axes, ordered as they appear in `a`.
pub fn common_time_indices(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let pos: HashMap<&str, usize> = b.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    a.iter()
        .enumerate()
        .filter_map(|(i, s)| pos.get(s.as_str()).map(|&j| (i, j)))
        .collect()
}

/// Restrict returns and factors to their shared time labels, in the order of
/// the returns panel. Labels are matched exactly.
pub fn align(returns: &Panel, factors: &FactorPanel) -> Result<(Panel, FactorPanel), PanelError> {
    let common = common_time_indices(returns.time_labels(), factors.time_labels());
    let required = factors.n_factors() + 2;
    if common.len() < required {
        return Err(PanelError::InsufficientOverlap {
            common: common.len(),
            required,
        });
    }
    let (ra, fa): (Vec<usize>, Vec<usize>) = common.into_iter().unzip();
    Ok((returns.select_times(&ra)?, factors.select_times(&fa)?))
}

fn write_labelled(
    path: &Path,
    layout: Layout,
    row_labels: &[String],
    time_labels: &[String],
    cell: impl Fn(usize, usize) -> Option<f64>,
) -> Result<(), PanelError> {
    let io_err = |source| PanelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut lines: Vec<Vec<String>> = Vec::new();
    match layout {
        Layout::UnitsAsRows => {
            let mut head = vec![String::new()];
            head.extend(time_labels.iter().cloned());
            lines.push(head);
            for (i, l) in row_labels.iter().enumerate() {
                let mut row = vec![l.clone()];
                row.extend((0..time_labels.len()).map(|t| fmt(cell(i, t))));
                lines.push(row);
            }
        }
        Layout::UnitsAsColumns => {
            let mut head = vec![String::new()];
            head.extend(row_labels.iter().cloned());
            lines.push(head);
            for (t, l) in time_labels.iter().enumerate() {
                let mut row = vec![l.clone()];
                row.extend((0..row_labels.len()).map(|i| fmt(cell(i, t))));
                lines.push(row);
            }
        }
    }
    let mut w = csv::Writer::from_writer(&mut out);
    for l in &lines {
        w.write_record(l)?;
    }
    w.flush().map_err(io_err)?;
    drop(w);
    out.flush().map_err(io_err)
}
