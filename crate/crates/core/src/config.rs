//! Flat `key = value` experiment files.
//!
//! ```text
//! # null size, two sample lengths
//! model = fp
//! N = 500
//! T = 300, 500
//! alternative = null
//! reps = 500
//! seed = 20240101
//! ```
//!
//! `N`, `T` and `alternative` accept comma lists; one scenario is run for
//! every combination.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::cs_independence::CsiConfig;
use crate::montecarlo::{
    CountRule, CsiAlternative, CsiDgpSpec, FpAlternative, FpDgpSpec, Scenario, TestMethod,
};
use crate::quad_tests::FpConfig;
use crate::sparse_cov::{CGrid, CSelection, ThresholdRule};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Fp,
    Csi,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub model: Model,
    pub n: Vec<usize>,
    pub t: Vec<usize>,
    /// Alternative names as written; parsed per model.
    pub alternatives: Vec<String>,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<TestMethod>,
    pub rule: ThresholdRule,
    pub grid: CGrid,
    pub c_selection: CSelection,
    pub level: f64,
    pub threads: usize,
    pub nonzero_count: CountRule,
    pub delta_override: Option<f64>,
}

const KEYS: &[&str] = &[
    "model", "n", "t", "alternative", "reps", "seed", "methods", "rule", "c_min", "c_max", "c_step",
    "c_select", "level", "threads", "nonzero_count", "delta_override",
];

struct Entry {
    line: usize,
    value: String,
}

fn bad(line: usize, key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_one<T: FromStr>(entries: &HashMap<String, Entry>, key: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match entries.get(key) {
        None => Ok(None),
        Some(e) => e.value.parse().map(Some).map_err(|err| bad(e.line, key, &e.value, err)),
    }
}

fn parse_list<T: FromStr>(entries: &HashMap<String, Entry>, key: &str) -> Result<Option<Vec<T>>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let Some(e) = entries.get(key) else {
        return Ok(None);
    };
    let items = e
        .value
        .split(',')
        .map(str::trim)
        .map(|s| s.parse::<T>().map_err(|err| bad(e.line, key, s, err)))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(bad(e.line, key, &e.value, "empty list"));
    }
    Ok(Some(items))
}

fn value_enum<V: clap::ValueEnum>(s: &str) -> Result<V, String> {
    V::from_str(s, true)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        text.parse()
    }

    /// One scenario per `(alternative, N, T)` combination, in that nesting
    /// order.
    pub fn scenarios(&self) -> Result<Vec<Scenario>, ConfigError> {
        let mut out = Vec::new();
        for alt in &self.alternatives {
            for &n in &self.n {
                for &t in &self.t {
                    out.push(match self.model {
                        Model::Fp => {
                            let a: FpAlternative = value_enum(alt).map_err(ConfigError::Invalid)?;
                            let mut spec = FpDgpSpec::table1(n, t, a);
                            spec.count_rule = self.nonzero_count;
                            Scenario::FactorPricing {
                                spec,
                                config: FpConfig {
                                    rule: self.rule,
                                    grid: self.grid,
                                    c_selection: self.c_selection,
                                    delta_override: self.delta_override,
                                    ..FpConfig::default()
                                },
                            }
                        }
                        Model::Csi => {
                            let a: CsiAlternative = value_enum(alt).map_err(ConfigError::Invalid)?;
                            Scenario::Csi {
                                spec: CsiDgpSpec::new(n, t, a),
                                config: CsiConfig {
                                    delta_override: self.delta_override,
                                },
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut entries: HashMap<String, Entry> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = k.trim().to_ascii_lowercase();
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            if entries.contains_key(&key) {
                return Err(ConfigError::Duplicate { line, key });
            }
            entries.insert(
                key,
                Entry {
                    line,
                    value: v.trim().to_string(),
                },
            );
        }

        let model = match entries.get("model") {
            None => return Err(ConfigError::Missing("model")),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "fp" => Model::Fp,
                "csi" => Model::Csi,
                _ => return Err(bad(e.line, "model", &e.value, "expected fp or csi")),
            },
        };
        let n = parse_list(&entries, "n")?.ok_or(ConfigError::Missing("N"))?;
        let t = parse_list(&entries, "t")?.ok_or(ConfigError::Missing("T"))?;
        let alternatives: Vec<String> = parse_list(&entries, "alternative")?.unwrap_or_else(|| vec!["null".into()]);
        for alt in &alternatives {
            let ok = match model {
                Model::Fp => value_enum::<FpAlternative>(alt).map(|_| ()),
                Model::Csi => value_enum::<CsiAlternative>(alt).map(|_| ()),
            };
            if let Err(reason) = ok {
                let e = &entries["alternative"];
                return Err(bad(e.line, "alternative", alt, reason));
            }
        }

        let methods = match entries.get("methods") {
            None => match model {
                Model::Fp => vec![TestMethod::Wald, TestMethod::PowerEnhanced],
                Model::Csi => vec![TestMethod::J1, TestMethod::PowerEnhanced],
            },
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .map(|s| value_enum::<TestMethod>(s).map_err(|r| bad(e.line, "methods", s, r)))
                .collect::<Result<_, _>>()?,
        };
        let rule = match entries.get("rule") {
            None => ThresholdRule::default(),
            Some(e) => e.value.parse().map_err(|r| bad(e.line, "rule", &e.value, r))?,
        };
        let c_selection = match entries.get("c_select") {
            None => CSelection::default(),
            Some(e) => e.value.parse().map_err(|r| bad(e.line, "c_select", &e.value, r))?,
        };
        let nonzero_count = match entries.get("nonzero_count") {
            None => CountRule::default(),
            Some(e) => value_enum(&e.value).map_err(|r| bad(e.line, "nonzero_count", &e.value, r))?,
        };
        let mut grid = CGrid::default();
        if let Some(v) = parse_one(&entries, "c_min")? {
            grid.c_min = v;
        }
        if let Some(v) = parse_one(&entries, "c_max")? {
            grid.c_max = v;
        }
        if let Some(v) = parse_one(&entries, "c_step")? {
            grid.step = v;
        }
        grid.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let cfg = ExperimentConfig {
            model,
            n,
            t,
            alternatives,
            reps: parse_one(&entries, "reps")?.unwrap_or(500),
            seed: parse_one(&entries, "seed")?.unwrap_or(0),
            methods,
            rule,
            grid,
            c_selection,
            level: parse_one(&entries, "level")?.unwrap_or(0.05),
            threads: parse_one(&entries, "threads")?.unwrap_or(0),
            nonzero_count,
            delta_override: parse_one(&entries, "delta_override")?,
        };
        if cfg.reps == 0 {
            return Err(ConfigError::Invalid("reps must be at least 1".into()));
        }
        if !(cfg.level > 0.0 && cfg.level < 1.0) {
            return Err(ConfigError::Invalid(format!("level must lie in (0, 1), got {}", cfg.level)));
        }
        if cfg.methods.is_empty() {
            return Err(ConfigError::Invalid("no methods given".into()));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg: ExperimentConfig = "model = fp\nN = 500\nT = 300\n".parse().unwrap();
        assert_eq!(cfg.reps, 500);
        assert_eq!(cfg.methods, vec![TestMethod::Wald, TestMethod::PowerEnhanced]);
        assert_eq!(cfg.rule, ThresholdRule::Soft);
        assert_eq!(cfg.c_selection, CSelection::CrossValidated);
        assert_eq!(cfg.scenarios().unwrap().len(), 1);
    }

    #[test]
    fn c_select_reaches_the_pipeline() {
        let cfg: ExperimentConfig = "model = fp\nN = 50\nT = 30\nc_select = min-pd\n".parse().unwrap();
        match &cfg.scenarios().unwrap()[0] {
            Scenario::FactorPricing { config, .. } => assert_eq!(config.c_selection, CSelection::MinPd),
            other => panic!("{other:?}"),
        }
        let err = "model = fp\nN = 50\nT = 30\nc_select = max\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 4, .. }));
    }

    #[test]
    fn lists_expand_to_product() {
        let text = "# comment\nmodel = csi\nn = 100, 200\nT = 50,100,200\nalternative = null, spatial\nmethods = j1, pe\n";
        let cfg: ExperimentConfig = text.parse().unwrap();
        let sc = cfg.scenarios().unwrap();
        assert_eq!(sc.len(), 12);
        assert_eq!(sc[0].name(), "csi-null");
        assert_eq!(sc[11].name(), "csi-spatial");
        assert_eq!(sc[11].dims(), (200, 200));
    }

    #[test]
    fn errors_cite_lines() {
        let err = "model = fp\nN = 500\nT = abc\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 3, .. }));
        let err = "model = fp\nfoo = 1\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, .. }));
        let err = "model = fp\nN 500\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
        let err = "model = fp\nN = 5\nT = 9\nalternative = spatial\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 4, .. }));
        assert!(matches!(
            "N = 5\nT = 9\n".parse::<ExperimentConfig>().unwrap_err(),
            ConfigError::Missing("model")
        ));
    }
}
