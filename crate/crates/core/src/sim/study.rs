//! Replicate studies: bias, MSE, coverage and interval width per category.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_dataset, oracle_nuisances, replicate_seed, true_psi, SimConfig, TrueParams};
use crate::adjusted::Method;
use crate::centering::CenteringSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::{make_folds, NuisanceFits};
use crate::pipeline::{estimate_with_nuisances, fit_default_nuisances, Estimand, EstimateOptions};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    Psi1Plugin,
    Psi2Tmle,
    Psi2Onestep,
    /// Reference estimator that always reports 0.
    Zero,
}

impl SimMethod {
    fn adjusted(self) -> bool {
        matches!(self, SimMethod::Psi2Tmle | SimMethod::Psi2Onestep)
    }
}

impl fmt::Display for SimMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimMethod::Psi1Plugin => "psi1_plugin",
            SimMethod::Psi2Tmle => "psi2_tmle",
            SimMethod::Psi2Onestep => "psi2_onestep",
            SimMethod::Zero => "zero",
        })
    }
}

impl FromStr for SimMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psi1_plugin" => Ok(SimMethod::Psi1Plugin),
            "psi2_tmle" => Ok(SimMethod::Psi2Tmle),
            "psi2_onestep" => Ok(SimMethod::Psi2Onestep),
            "zero" => Ok(SimMethod::Zero),
            other => Err(Error::config(format!(
                "unknown study method '{other}' (expected psi1_plugin, psi2_tmle or psi2_onestep)"
            ))),
        }
    }
}

/// Where the adjusted estimators get their nuisances from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceSource {
    #[default]
    Learned,
    /// The true conditional laws of the simulation.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub method: SimMethod,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub sim_lower: Vec<f64>,
    pub sim_upper: Vec<f64>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    fn failed(replicate: usize, seed: u64, method: SimMethod, jn: usize, msg: String) -> Self {
        let nan = vec![f64::NAN; jn];
        Self {
            replicate,
            seed,
            method,
            estimate: nan.clone(),
            se: nan.clone(),
            ci_lower: nan.clone(),
            ci_upper: nan.clone(),
            sim_lower: nan.clone(),
            sim_upper: nan,
            error: Some(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    /// 1-based category index.
    pub j: usize,
    pub truth: f64,
    /// Replicates with a finite estimate.
    pub n_defined: usize,
    pub mean: f64,
    pub bias: f64,
    pub bias_mc_se: f64,
    pub variance: f64,
    pub mse: f64,
    pub mse_mc_se: f64,
    /// Replicates with a finite interval.
    pub n_intervals: usize,
    pub coverage_marginal: f64,
    pub coverage_simultaneous: f64,
    pub width_marginal: f64,
    pub width_simultaneous: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: SimMethod,
    pub n_failed: usize,
    pub categories: Vec<CategorySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub total_seconds: f64,
    pub mean_replicate_seconds: f64,
    pub max_replicate_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub target: Estimand,
    pub centering: CenteringSpec,
    pub nuisance_source: NuisanceSource,
    pub truth: TrueParams,
    /// Truth of the target estimand on the observed scale.
    pub target_truth: Vec<f64>,
    pub methods: Vec<MethodSummary>,
    pub replicates: Vec<ReplicateRecord>,
    pub runtime: RuntimeStats,
}

impl SimReport {
    pub fn summary(&self, method: SimMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Truth of `target` on the observed scale.
pub fn target_truth(t: &TrueParams, target: Estimand) -> Vec<f64> {
    match target {
        Estimand::Psi1 => t.psi1_observed(),
        Estimand::Psi1g => t.psi1g.clone(),
        Estimand::Psi2 => t.psi2_observed(),
        Estimand::Psi2g => t.psi2g.clone(),
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    // a constant sample has that constant as its exact mean
    if v.iter().all(|x| *x == v[0]) {
        return v[0];
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn summarize(method: SimMethod, records: &[&ReplicateRecord], truth: &[f64]) -> MethodSummary {
    let categories = truth
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let est: Vec<f64> = records.iter().map(|r| r.estimate[j]).filter(|v| v.is_finite()).collect();
            let sq: Vec<f64> = est.iter().map(|e| (e - t).powi(2)).collect();
            let k = est.len() as f64;
            let m = mean(&est);
            let ints: Vec<&&ReplicateRecord> = records
                .iter()
                .filter(|r| r.ci_lower[j].is_finite() && r.ci_upper[j].is_finite() && r.sim_lower[j].is_finite())
                .collect();
            let frac = |hit: &dyn Fn(&ReplicateRecord) -> bool| {
                if ints.is_empty() {
                    f64::NAN
                } else {
                    ints.iter().filter(|r| hit(r)).count() as f64 / ints.len() as f64
                }
            };
            let widths = |lo: &dyn Fn(&ReplicateRecord) -> f64, hi: &dyn Fn(&ReplicateRecord) -> f64| {
                mean(&ints.iter().map(|r| hi(r) - lo(r)).collect::<Vec<_>>())
            };
            CategorySummary {
                j: j + 1,
                truth: t,
                n_defined: est.len(),
                mean: m,
                bias: m - t,
                bias_mc_se: (sample_var(&est) / k).sqrt(),
                variance: sample_var(&est),
                mse: mean(&sq),
                mse_mc_se: (sample_var(&sq) / k).sqrt(),
                n_intervals: ints.len(),
                coverage_marginal: frac(&|r| r.ci_lower[j] <= t && t <= r.ci_upper[j]),
                coverage_simultaneous: frac(&|r| r.sim_lower[j] <= t && t <= r.sim_upper[j]),
                width_marginal: widths(&|r| r.ci_lower[j], &|r| r.ci_upper[j]),
                width_simultaneous: widths(&|r| r.sim_lower[j], &|r| r.sim_upper[j]),
            }
        })
        .collect();
    MethodSummary { method, n_failed: records.iter().filter(|r| r.error.is_some()).count(), categories }
}

fn estimator_options(cfg: &SimConfig, method: SimMethod, target: Estimand, g: &CenteringSpec, seed: u64) -> EstimateOptions {
    let (estimand, m) = match (method, target.centered()) {
        (SimMethod::Psi1Plugin, false) => (Estimand::Psi1, Method::Plugin),
        (SimMethod::Psi1Plugin, true) => (Estimand::Psi1g, Method::Plugin),
        (SimMethod::Psi2Onestep, c) => (if c { Estimand::Psi2g } else { Estimand::Psi2 }, Method::Onestep),
        (_, c) => (if c { Estimand::Psi2g } else { Estimand::Psi2 }, Method::Tmle),
    };
    EstimateOptions {
        estimand,
        method: Some(m),
        centering: Some(if target.centered() { *g } else { CenteringSpec::None }),
        seed,
        ..cfg.estimator.clone()
    }
}

fn nuisances_for(cfg: &SimConfig, source: NuisanceSource, d: &Dataset, latent: &super::LatentDraw, seed: u64) -> Result<NuisanceFits> {
    let opts = EstimateOptions { seed, ..cfg.estimator.clone() };
    match source {
        NuisanceSource::Learned => fit_default_nuisances(d, &opts),
        NuisanceSource::Oracle => {
            let folds = make_folds(d.n(), opts.k, d.exposure(), derive_seed(seed, &[0xF0]))?;
            oracle_nuisances(cfg, d, latent, folds)
        }
    }
}

fn run_replicate(
    cfg: &SimConfig,
    r: usize,
    methods: &[SimMethod],
    target: Estimand,
    g: &CenteringSpec,
    source: NuisanceSource,
) -> (Vec<ReplicateRecord>, f64) {
    let start = Instant::now();
    let seed = replicate_seed(cfg, r);
    let fit_seed = derive_seed(cfg.seed, &[r as u64, 1]);
    let jn = cfg.j;
    let drawn = draw_dataset(cfg, seed);
    let nuisances = match &drawn {
        Ok((d, latent)) if methods.iter().any(|m| m.adjusted()) => Some(nuisances_for(cfg, source, d, latent, fit_seed)),
        _ => None,
    };
    let records = methods
        .iter()
        .map(|&m| {
            if m == SimMethod::Zero {
                let zero = vec![0.0; jn];
                let nan = vec![f64::NAN; jn];
                return ReplicateRecord {
                    replicate: r,
                    seed,
                    method: m,
                    estimate: zero,
                    se: nan.clone(),
                    ci_lower: nan.clone(),
                    ci_upper: nan.clone(),
                    sim_lower: nan.clone(),
                    sim_upper: nan,
                    error: None,
                };
            }
            let d = match &drawn {
                Ok((d, _)) => d,
                Err(e) => return ReplicateRecord::failed(r, seed, m, jn, e.to_string()),
            };
            let fits = match (m.adjusted(), &nuisances) {
                (true, Some(Ok(f))) => Some(f),
                (true, Some(Err(e))) => return ReplicateRecord::failed(r, seed, m, jn, e.to_string()),
                _ => None,
            };
            let opts = estimator_options(cfg, m, target, g, fit_seed);
            match estimate_with_nuisances(d, &opts, fits) {
                Ok(res) => ReplicateRecord {
                    replicate: r,
                    seed,
                    method: m,
                    estimate: res.estimate,
                    se: res.se,
                    ci_lower: res.ci_marginal.column(0).to_vec(),
                    ci_upper: res.ci_marginal.column(1).to_vec(),
                    sim_lower: res.ci_simultaneous.column(0).to_vec(),
                    sim_upper: res.ci_simultaneous.column(1).to_vec(),
                    error: None,
                },
                Err(e) => ReplicateRecord::failed(r, seed, m, jn, e.to_string()),
            }
        })
        .collect();
    (records, start.elapsed().as_secs_f64())
}

/// Runs `cfg.replicates` replicates in parallel and aggregates per method and
/// category against the truth of `target` centered with `g`. The Zero
/// reference estimator is always included.
pub fn run_study(cfg: &SimConfig, methods: &[SimMethod], target: Estimand, g: &CenteringSpec) -> Result<SimReport> {
    run_study_with(cfg, methods, target, g, NuisanceSource::Learned)
}

pub fn run_study_with(
    cfg: &SimConfig,
    methods: &[SimMethod],
    target: Estimand,
    g: &CenteringSpec,
    source: NuisanceSource,
) -> Result<SimReport> {
    cfg.validate()?;
    cfg.estimator.validate()?;
    if target.centered() && g.is_none() {
        return Err(Error::config(format!("target {target} requires a centering function")));
    }
    if cfg.replicates == 0 {
        return Err(Error::config("replicates must be positive"));
    }
    let mut methods: Vec<SimMethod> = methods.iter().copied().filter(|m| *m != SimMethod::Zero).collect();
    methods.dedup();
    methods.push(SimMethod::Zero);
    let truth = true_psi(cfg, if target.centered() { g } else { &CenteringSpec::None })?;
    let target_truth = target_truth(&truth, target);

    let start = Instant::now();
    let out: Vec<(Vec<ReplicateRecord>, f64)> =
        (0..cfg.replicates).into_par_iter().map(|r| run_replicate(cfg, r, &methods, target, g, source)).collect();
    let total = start.elapsed().as_secs_f64();
    let times: Vec<f64> = out.iter().map(|o| o.1).collect();
    let replicates: Vec<ReplicateRecord> = out.into_iter().flat_map(|o| o.0).collect();

    let summaries = methods
        .iter()
        .map(|&m| {
            let recs: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.method == m).collect();
            summarize(m, &recs, &target_truth)
        })
        .collect();
    Ok(SimReport {
        config: cfg.clone(),
        target,
        centering: if target.centered() { *g } else { CenteringSpec::None },
        nuisance_source: source,
        truth,
        target_truth,
        methods: summaries,
        replicates,
        runtime: RuntimeStats {
            total_seconds: total,
            mean_replicate_seconds: times.iter().sum::<f64>() / times.len() as f64,
            max_replicate_seconds: times.iter().copied().fold(0.0, f64::max),
        },
    })
}
