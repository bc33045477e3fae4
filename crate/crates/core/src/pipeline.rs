//! End-to-end estimation: nuisances, estimator, centering and inference.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adjusted::{
    center_adjusted, estimate_onestep2, estimate_plugin2, estimate_tmle2, tmle_target, AdjustedEstimate, Method, TmleMode,
};
use crate::centering::{CenteringSpec, DEFAULT_SMEDIAN_EPS};
use crate::data::{validate, Dataset, StatusReason};
use crate::error::{Error, Result};
use crate::inference::{infer, DEFAULT_ALPHA, DEFAULT_B};
use crate::learners::{fit_nuisances, make_folds, LearnerMenu, LearnerWeightRecord, NuisanceFits};
use crate::rng::derive_seed;
use crate::unadjusted::estimate_psi1_centered;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Psi1,
    Psi1g,
    Psi2,
    #[default]
    Psi2g,
}

impl Estimand {
    pub fn adjusted(self) -> bool {
        matches!(self, Estimand::Psi2 | Estimand::Psi2g)
    }

    pub fn centered(self) -> bool {
        matches!(self, Estimand::Psi1g | Estimand::Psi2g)
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimand::Psi1 => "psi1",
            Estimand::Psi1g => "psi1g",
            Estimand::Psi2 => "psi2",
            Estimand::Psi2g => "psi2g",
        })
    }
}

impl FromStr for Estimand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psi1" => Ok(Estimand::Psi1),
            "psi1g" => Ok(Estimand::Psi1g),
            "psi2" => Ok(Estimand::Psi2),
            "psi2g" => Ok(Estimand::Psi2g),
            other => Err(Error::config(format!("unknown estimand '{other}' (expected psi1, psi1g, psi2 or psi2g)"))),
        }
    }
}

/// Every tunable that affects estimation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub estimand: Estimand,
    /// `None` selects the default for the estimand (tmle or plugin).
    pub method: Option<Method>,
    pub tmle_mode: TmleMode,
    /// `None` selects the default for the estimand (smoothed median or none).
    pub centering: Option<CenteringSpec>,
    pub k: usize,
    pub v: usize,
    pub b: usize,
    pub alpha: f64,
    pub seed: u64,
    pub learners: LearnerMenu,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            estimand: Estimand::default(),
            method: None,
            tmle_mode: TmleMode::default(),
            centering: None,
            k: 5,
            v: 5,
            b: DEFAULT_B,
            alpha: DEFAULT_ALPHA,
            seed: 1,
            learners: LearnerMenu::default(),
        }
    }
}

impl EstimateOptions {
    pub fn resolved_method(&self) -> Result<Method> {
        match (self.estimand.adjusted(), self.method) {
            (true, m) => Ok(m.unwrap_or_default()),
            (false, None | Some(Method::Plugin)) => Ok(Method::Plugin),
            (false, Some(m)) => Err(Error::config(format!(
                "estimand {} only supports the plugin method, got {m}",
                self.estimand
            ))),
        }
    }

    pub fn resolved_centering(&self) -> Result<CenteringSpec> {
        match (self.estimand.centered(), self.centering) {
            (true, None) => Ok(CenteringSpec::SmoothedMedian { eps: DEFAULT_SMEDIAN_EPS }),
            (true, Some(CenteringSpec::None)) => {
                Err(Error::config(format!("estimand {} requires a centering function", self.estimand)))
            }
            (true, Some(g)) => Ok(g),
            (false, None | Some(CenteringSpec::None)) => Ok(CenteringSpec::None),
            (false, Some(g)) => Err(Error::config(format!(
                "estimand {} is uncentered; centering '{g}' needs {}g",
                self.estimand, self.estimand
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_method()?;
        self.resolved_centering()?;
        if self.k < 2 {
            return Err(Error::config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.v < 2 {
            return Err(Error::config(format!("v must be at least 2, got {}", self.v)));
        }
        if self.b < 1 {
            return Err(Error::config("b must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.learners.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub n_at_lower_bound: usize,
    pub n_at_upper_bound: usize,
}

/// Per-arm summary of total outcome per sample (a sequencing-depth check).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSummary {
    pub arm: u8,
    pub n: usize,
    pub mean_total: f64,
    pub median_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub learner_weights: Vec<LearnerWeightRecord>,
    pub propensity: Option<PropensitySummary>,
    pub depth: Vec<DepthSummary>,
    pub fold_warnings: Vec<String>,
    pub nuisance_flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimand: Estimand,
    pub method: Method,
    pub centering: CenteringSpec,
    pub n: usize,
    pub category_names: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_marginal: Array2<f64>,
    pub ci_simultaneous: Array2<f64>,
    pub p_values: Vec<f64>,
    pub crit_marginal: f64,
    pub crit_simultaneous: f64,
    pub estimable: Vec<bool>,
    /// Semicolon-separated notes per category, empty when clean.
    pub flags: Vec<String>,
    #[serde(skip)]
    pub influence: Option<Array2<f64>>,
    pub diagnostics: Diagnostics,
}

fn depth_summary(d: &Dataset) -> Vec<DepthSummary> {
    (0..2u8)
        .map(|arm| {
            let mut totals: Vec<f64> = d
                .outcomes()
                .rows()
                .into_iter()
                .zip(d.exposure())
                .filter(|(_, &a)| a == arm)
                .map(|(r, _)| r.sum())
                .collect();
            totals.sort_by(f64::total_cmp);
            let k = totals.len();
            let median = match k {
                0 => f64::NAN,
                _ if k % 2 == 1 => totals[k / 2],
                _ => 0.5 * (totals[k / 2 - 1] + totals[k / 2]),
            };
            DepthSummary { arm, n: k, mean_total: totals.iter().sum::<f64>() / k as f64, median_total: median }
        })
        .collect()
}

fn propensity_summary(f: &NuisanceFits) -> PropensitySummary {
    use crate::learners::PI_BOUNDS;
    let p = &f.propensity;
    PropensitySummary {
        min: p.iter().copied().fold(f64::INFINITY, f64::min),
        mean: p.mean().unwrap_or(f64::NAN),
        max: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n_at_lower_bound: p.iter().filter(|&&v| v <= PI_BOUNDS.0).count(),
        n_at_upper_bound: p.iter().filter(|&&v| v >= PI_BOUNDS.1).count(),
    }
}

/// Fits the cross-fitted nuisances for the adjusted estimators.
pub fn fit_default_nuisances(d: &Dataset, opts: &EstimateOptions) -> Result<NuisanceFits> {
    let folds = make_folds(d.n(), opts.k, d.exposure(), derive_seed(opts.seed, &[0xF0]))?;
    fit_nuisances(d, &folds, &opts.learners, opts.v, derive_seed(opts.seed, &[0x5E]))
}

/// Runs the configured estimator, fitting nuisances when needed.
pub fn estimate(d: &Dataset, opts: &EstimateOptions) -> Result<EstimateResult> {
    opts.validate()?;
    let nuisances = if opts.estimand.adjusted() { Some(fit_default_nuisances(d, opts)?) } else { None };
    estimate_with_nuisances(d, opts, nuisances.as_ref())
}

/// Runs the configured estimator with precomputed nuisances (required for
/// the adjusted estimands, ignored otherwise).
pub fn estimate_with_nuisances(d: &Dataset, opts: &EstimateOptions, nuisances: Option<&NuisanceFits>) -> Result<EstimateResult> {
    opts.validate()?;
    let method = opts.resolved_method()?;
    let g = opts.resolved_centering()?;
    let jn = d.n_categories();
    let mut notes: Vec<Vec<String>> = vec![Vec::new(); jn];
    for s in validate(d) {
        if s.reason != StatusReason::Ok {
            let why = match s.reason {
                StatusReason::AllZeroInArm0 => "all zero in arm 0",
                StatusReason::AllZeroInArm1 => "all zero in arm 1",
                _ => "all zero",
            };
            notes[s.category_index].push(format!("not estimable: {why}"));
        }
    }

    let (psi, influence, estimable, defined) = if opts.estimand.adjusted() {
        let fits = nuisances.ok_or_else(|| Error::invalid("adjusted estimands need nuisance fits"))?;
        let est: AdjustedEstimate = match method {
            Method::Plugin => estimate_plugin2(d, fits)?,
            Method::Onestep => estimate_onestep2(d, fits)?,
            Method::Tmle => estimate_tmle2(d, &tmle_target(d, fits, opts.tmle_mode)?)?,
        };
        for f in &est.flags {
            let arm = f.arm.map(|a| format!(" (arm {a})")).unwrap_or_default();
            notes[f.category].push(format!("{}{arm}", f.message));
        }
        let est = center_adjusted(est, &g)?;
        let estimable = est.estimable();
        (est.psi, est.influence, estimable, est.defined)
    } else {
        let est = estimate_psi1_centered(d, &g)?;
        let estimable = est.estimable();
        (est.psi, Some(est.influence), estimable, est.defined)
    };
    if !defined {
        for n in notes.iter_mut() {
            n.push("centering undefined: it depends on a non-estimable category".into());
        }
    }

    let (se, ci_m, ci_s, p, crit_m, crit_s) = match &influence {
        Some(phi) => {
            let r = infer(&psi, phi, &estimable, opts.alpha, opts.b, derive_seed(opts.seed, &[0x3A7]))?;
            for (j, deg) in r.degenerate.iter().enumerate() {
                if *deg {
                    notes[j].push("zero standard error".into());
                }
            }
            (r.se, r.ci_marginal, r.ci_simultaneous, r.p_values, r.crit_marginal, r.crit_simultaneous)
        }
        None => {
            let nan = Array2::from_elem((jn, 2), f64::NAN);
            (vec![f64::NAN; jn], nan.clone(), nan, vec![f64::NAN; jn], f64::NAN, f64::NAN)
        }
    };
    let estimable: Vec<bool> = estimable.iter().zip(&psi).map(|(&e, v)| e && v.is_finite()).collect();

    let diagnostics = Diagnostics {
        learner_weights: nuisances.map(|f| f.weights.clone()).unwrap_or_default(),
        propensity: nuisances.map(propensity_summary),
        depth: depth_summary(d),
        fold_warnings: nuisances.map(|f| f.folds.warnings.clone()).unwrap_or_default(),
        nuisance_flags: nuisances
            .map(|f| {
                f.flags
                    .iter()
                    .map(|fl| format!("fold {} category {}: {}", fl.fold, d.category_names()[fl.category], fl.message))
                    .collect()
            })
            .unwrap_or_default(),
    };
    Ok(EstimateResult {
        estimand: opts.estimand,
        method,
        centering: g,
        n: d.n(),
        category_names: d.category_names().to_vec(),
        estimate: psi,
        se,
        ci_marginal: ci_m,
        ci_simultaneous: ci_s,
        p_values: p,
        crit_marginal: crit_m,
        crit_simultaneous: crit_s,
        estimable,
        flags: notes.into_iter().map(|v| v.join("; ")).collect(),
        influence,
        diagnostics,
    })
}
