//! Flag table, config-file parsing and precedence (CLI > file > defaults).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const ESTIMATOR_KEYS: &[Key] = &[
    key("seed", Some("1"), "Root seed for every random stream"),
    key("trees", Some("500"), "Trees per forest (B)"),
    key("k", Some("5"), "Minimum honest leaf size"),
    key("omega", Some("0.05"), "Minimum child fraction of the parent's honest points"),
    key("pi", Some("0.05"), "Probability of a random-feature split"),
    key("mtry", None, "Candidate features per split [default: ceil(sqrt(d))]"),
    key("subsample", None, "Subsample size per tree [default: ceil(n/2)]"),
    key("shared-trees", Some("false"), "Use one second-moment forest for both weight sets"),
    key("cv-folds", Some("5"), "Cross-validation folds for the threshold"),
    key("grid-size", Some("20"), "Positive grid values for the threshold search"),
    key("lambda-mode", Some("per-point"), "Threshold selection: per-point or shared"),
    key("c-n", None, "PD-correction margin [default: 1e-4 times the largest diagonal entry]"),
    key("cv-trees", None, "Trees per forest inside CV folds [default: max(B/5, 50), at most B]"),
];

pub const SIMULATE_KEYS: &[Key] = &[
    key("model", Some("1"), "Benchmark model: 1, 2, 3 or 4"),
    key("p", Some("100"), "Response dimension"),
    key("d", Some("10"), "Covariate dimension"),
    key("n", Some("100"), "Samples per replication"),
    key("reps", Some("10"), "Replications"),
    key("methods", Some("fdcm:soft,static:soft"), "Comma-separated method descriptors"),
    key("out-dir", Some("."), "Directory for report.csv, per_rep.csv and table.txt"),
];

const LAYOUT_KEYS: &[Key] = &[
    key("response-cols", Some("y*"), "Response columns: names or prefix* patterns, comma-separated"),
    key("covariate-cols", Some("u*"), "Covariate columns: names or prefix* patterns, comma-separated"),
    key("date-col", None, "Optional date column"),
    key("lag", Some("0"), "Pair covariates at row t with responses at row t + lag"),
];

pub const ESTIMATE_KEYS: &[Key] = &[
    key("train", None, "Training CSV"),
    key("query", None, "Query-point CSV with one covariate vector per row"),
    key("method", Some("mfdcm:soft"), "Method descriptor"),
    key("stage", Some("corrected"), "Emitted stage: raw, thresholded or corrected"),
    key("out-dir", Some("."), "Directory for sigma_*.csv and manifest.csv"),
];

pub const BACKTEST_KEYS: &[Key] = &[
    key("panel", None, "Panel CSV"),
    key("method", Some("mfdcm:soft"), "Method descriptor"),
    key("window", Some("250"), "Training window in rows"),
    key("refit-every", Some("1"), "Refit the estimator every this many days"),
    key("out-dir", Some("."), "Directory for returns.csv, weights.csv and summary.txt"),
];

pub fn layout_keys() -> &'static [Key] {
    LAYOUT_KEYS
}

pub fn subcommand(name: &'static str, about: &'static str, groups: &[&'static [Key]]) -> Command {
    let mut cmd = Command::new(name).about(about);
    for group in groups {
        for k in *group {
            let mut arg = Arg::new(k.name).long(k.name).value_name("VALUE").help(k.help);
            if let Some(d) = k.default {
                arg = arg.default_value(d);
            }
            cmd = cmd.arg(arg);
        }
    }
    cmd
}

/// Usage or validation failure; maps to exit code 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl<E: Display> From<E> for Invalid {
    fn from(e: E) -> Self {
        Invalid(e.to_string())
    }
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, Invalid> {
    let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("config file {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Invalid(format!("config line {}: expected key = value", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// The effective settings of one run.
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(
        matches: &ArgMatches,
        groups: &[&'static [Key]],
        file: &BTreeMap<String, String>,
        all_keys: &[&'static str],
    ) -> Result<Self, Invalid> {
        for k in file.keys() {
            if !all_keys.contains(&k.as_str()) {
                return Err(Invalid(format!("unknown config key `{k}`")));
            }
        }
        let mut values = BTreeMap::new();
        for group in groups {
            for k in *group {
                let from_cli = matches.value_source(k.name) == Some(ValueSource::CommandLine);
                let cli = matches.get_one::<String>(k.name).cloned();
                let value = if from_cli {
                    cli
                } else {
                    file.get(k.name).cloned().or(cli)
                };
                if let Some(v) = value {
                    values.insert(k.name.to_string(), v);
                }
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn required(&self, key: &str) -> Result<&str, Invalid> {
        self.raw(key).ok_or_else(|| Invalid(format!("--{key} is required")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Invalid>
    where
        T::Err: Display,
    {
        let raw = self.required(key)?;
        raw.parse().map_err(|e| Invalid(format!("--{key} `{raw}`: {e}")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Invalid>
    where
        T::Err: Display,
    {
        self.raw(key).map(|_| self.get(key)).transpose()
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    /// `# key = value` lines, sorted by key. The output directory is left
    /// out so reruns into different directories stay byte-identical.
    pub fn header(&self, command: &str) -> String {
        let mut out = format!("# command = {command}\n");
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "out-dir") {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out
    }
}
