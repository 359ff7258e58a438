use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{losses, median_over_test_points, sparsity_rates};
use super::models::{sample_dataset, test_points, true_cov, ModelSpec};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, FittedMethod, MethodKind, MethodSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub reps: usize,
    pub test_points: Vec<Vec<f64>>,
    pub methods: Vec<MethodSpec>,
    pub estimator: EstimatorConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    /// A config using the frozen test points for the model's dimension.
    pub fn new(model: ModelSpec, reps: usize, methods: Vec<MethodSpec>, estimator: EstimatorConfig, seed: u64) -> Self {
        Self {
            model,
            reps,
            test_points: test_points(model.d),
            methods,
            estimator,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.reps == 0 {
            return Err(Error::config("reps must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("at least one method is required"));
        }
        if self.test_points.is_empty() || self.test_points.iter().any(|u| u.len() != self.model.d) {
            return Err(Error::config("test points must be non-empty with length d"));
        }
        for m in &self.methods {
            m.rule.validate()?;
            if let MethodKind::Kernel { covariate } = m.kind {
                if covariate >= self.model.d {
                    return Err(Error::config(format!("method {m} smooths a covariate beyond d = {}", self.model.d)));
                }
            }
        }
        Ok(())
    }
}

/// Medians over test points for one method in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub mfl: f64,
    pub msl: f64,
    pub mtpr: Option<f64>,
    pub mfpr: Option<f64>,
    /// Test points where the spectral loss exceeded the Frobenius loss.
    pub spectral_violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample SD with denominator reps − 1; zero for a single rep.
    pub sd: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodSpec,
    pub mfl: Stat,
    pub msl: Stat,
    pub mtpr: Option<Stat>,
    pub mfpr: Option<Stat>,
    pub per_rep: Vec<RepMetrics>,
    /// Wall-clock seconds summed over reps, fit time included.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: ModelSpec,
    pub reps: usize,
    pub methods: Vec<MethodSummary>,
    pub spectral_violations: usize,
}

fn evaluate(estimates: &[DMatrix<f64>], truths: &[DMatrix<f64>], sparsity: bool) -> Result<RepMetrics> {
    let mut fro = Vec::with_capacity(estimates.len());
    let mut spec = Vec::with_capacity(estimates.len());
    let mut tpr = Vec::new();
    let mut fpr = Vec::new();
    let mut spectral_violations = 0;
    for (e, t) in estimates.iter().zip(truths) {
        let (f, s) = losses(e, t)?;
        spectral_violations += usize::from(s > f);
        fro.push(f);
        spec.push(s);
        if sparsity {
            let (a, b) = sparsity_rates(e, t)?;
            tpr.push(a);
            fpr.push(b);
        }
    }
    Ok(RepMetrics {
        mfl: median_over_test_points(&fro)?,
        msl: median_over_test_points(&spec)?,
        mtpr: if sparsity { Some(median_over_test_points(&tpr)?) } else { None },
        mfpr: if sparsity { Some(median_over_test_points(&fpr)?) } else { None },
        spectral_violations,
    })
}

fn run_rep(config: &ExperimentConfig, truths: &[DMatrix<f64>], rep: usize) -> Result<Vec<(RepMetrics, f64)>> {
    let rep_seed = rng::derive_seed(config.seed, "rep", rep as u64);
    let data = sample_dataset(&config.model, &mut rng::substream(rep_seed, "data", 0))?;
    let est_config = config.estimator.with_seed(rng::derive_seed(rep_seed, "estimator", 0));
    let sparsity = config.model.id.has_varying_sparsity();

    // One fit per model family, shared by every rule and variant of it.
    let mut kinds: Vec<MethodKind> = Vec::new();
    for m in &config.methods {
        if !kinds.contains(&m.kind) {
            kinds.push(m.kind);
        }
    }
    let mut fitted = BTreeMap::new();
    for (slot, kind) in kinds.iter().enumerate() {
        let start = Instant::now();
        let f = FittedMethod::fit(*kind, &data, &est_config)?;
        fitted.insert(slot, (f, start.elapsed().as_secs_f64()));
    }
    config
        .methods
        .iter()
        .map(|m| {
            let slot = kinds.iter().position(|k| *k == m.kind).expect("kind registered");
            let (f, fit_seconds) = &fitted[&slot];
            let start = Instant::now();
            let estimates = config
                .test_points
                .par_iter()
                .map(|u| Ok(f.estimate_spec(u, m)?.final_matrix().clone()))
                .collect::<Result<Vec<_>>>()?;
            let metrics = evaluate(&estimates, truths, sparsity)?;
            Ok((metrics, fit_seconds + start.elapsed().as_secs_f64()))
        })
        .collect()
}

/// Runs `reps` replications: a fresh dataset per rep from substream
/// `("rep", r)`, every method estimated at every test point, and per-rep
/// medians aggregated into means and SDs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let truths = config
        .test_points
        .iter()
        .map(|u| true_cov(&config.model, u))
        .collect::<Result<Vec<_>>>()?;
    let reps = (0..config.reps)
        .into_par_iter()
        .map(|r| run_rep(config, &truths, r))
        .collect::<Result<Vec<_>>>()?;

    let mut spectral_violations = 0;
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let per_rep: Vec<RepMetrics> = reps.iter().map(|r| r[k].0).collect();
            let seconds = reps.iter().map(|r| r[k].1).sum();
            spectral_violations += per_rep.iter().map(|r| r.spectral_violations).sum::<usize>();
            let collect = |f: fn(&RepMetrics) -> Option<f64>| -> Option<Stat> {
                per_rep.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| Stat::of(&v))
            };
            MethodSummary {
                method: *m,
                mfl: Stat::of(&per_rep.iter().map(|r| r.mfl).collect::<Vec<_>>()),
                msl: Stat::of(&per_rep.iter().map(|r| r.msl).collect::<Vec<_>>()),
                mtpr: collect(|r| r.mtpr),
                mfpr: collect(|r| r.mfpr),
                per_rep,
                seconds,
            }
        })
        .collect();
    Ok(ExperimentReport {
        model: config.model,
        reps: config.reps,
        methods,
        spectral_violations,
    })
}

impl ExperimentReport {
    fn metric_rows(&self) -> Vec<(String, &'static str, Stat)> {
        let mut rows = Vec::new();
        for m in &self.methods {
            let name = m.method.to_string();
            rows.push((name.clone(), "MFL", m.mfl));
            rows.push((name.clone(), "MSL", m.msl));
            if let (Some(t), Some(f)) = (m.mtpr, m.mfpr) {
                rows.push((name.clone(), "MTPR", t));
                rows.push((name, "MFPR", f));
            }
        }
        rows
    }

    /// `method,metric,mean,sd` rows. Runtimes are left out so reruns are
    /// byte-identical.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Serde(e.to_string());
        writeln!(w, "method,metric,mean,sd").map_err(io)?;
        for (method, metric, s) in self.metric_rows() {
            writeln!(w, "{method},{metric},{},{}", s.mean, s.sd).map_err(io)?;
        }
        Ok(())
    }

    /// `method,rep,MFL,MSL,MTPR,MFPR` rows; sparsity columns are empty for
    /// models without a varying zero pattern.
    pub fn write_per_rep_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Serde(e.to_string());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(w, "method,rep,MFL,MSL,MTPR,MFPR").map_err(io)?;
        for m in &self.methods {
            for (r, v) in m.per_rep.iter().enumerate() {
                writeln!(w, "{},{r},{},{},{},{}", m.method, v.mfl, v.msl, opt(v.mtpr), opt(v.mfpr)).map_err(io)?;
            }
        }
        Ok(())
    }

    /// Human-readable `mean(sd)` table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let sparsity = self.methods.iter().any(|m| m.mtpr.is_some());
        let _ = write!(out, "{:<20} {:>14} {:>14}", "method", "MFL", "MSL");
        if sparsity {
            let _ = write!(out, " {:>14} {:>14}", "MTPR", "MFPR");
        }
        out.push('\n');
        let cell = |s: Stat| format!("{:.2}({:.2})", s.mean, s.sd);
        for m in &self.methods {
            let _ = write!(out, "{:<20} {:>14} {:>14}", m.method.to_string(), cell(m.mfl), cell(m.msl));
            if let (Some(t), Some(f)) = (m.mtpr, m.mfpr) {
                let _ = write!(out, " {:>14} {:>14}", cell(t), cell(f));
            }
            out.push('\n');
        }
        out
    }
}
