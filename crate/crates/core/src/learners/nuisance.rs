use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::FoldAssignment;
use super::superlearner::{fit_superlearner, EnsembleFit};
use super::{LearnerSpec, Task};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Truncation applied to propensity predictions.
pub const PI_BOUNDS: (f64, f64) = (0.025, 0.975);
/// Truncation applied to presence-probability predictions.
pub const Q_BOUNDS: (f64, f64) = (1e-6, 1.0 - 1e-6);

/// Candidate learners for each nuisance regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerMenu {
    pub propensity: Vec<LearnerSpec>,
    pub presence: Vec<LearnerSpec>,
    pub intensity: Vec<LearnerSpec>,
}

impl Default for LearnerMenu {
    fn default() -> Self {
        Self {
            propensity: LearnerSpec::default_binary_menu(),
            presence: LearnerSpec::default_binary_menu(),
            intensity: LearnerSpec::default_regression_menu(),
        }
    }
}

impl LearnerMenu {
    /// Every nuisance estimated by its training-sample mean.
    pub fn constant() -> Self {
        Self {
            propensity: vec![LearnerSpec::SampleMean],
            presence: vec![LearnerSpec::SampleMean],
            intensity: vec![LearnerSpec::SampleMean],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list, task) in [
            ("propensity", &self.propensity, Task::Binary),
            ("presence", &self.presence, Task::Binary),
            ("intensity", &self.intensity, Task::RegressionNonneg),
        ] {
            if list.is_empty() {
                return Err(Error::config(format!("{name} learner menu is empty")));
            }
            for l in list {
                l.validate()?;
                if !l.supports(task) {
                    return Err(Error::config(format!("learner {l} cannot be used for the {name} regression")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceTask {
    Propensity,
    Presence,
    Intensity,
}

/// Ensemble weights of one SuperLearner fit, kept for the diagnostics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerWeightRecord {
    pub fold: usize,
    pub category: Option<usize>,
    pub task: NuisanceTask,
    pub learners: Vec<String>,
    pub weights: Vec<f64>,
    pub cv_risk: Vec<f64>,
    pub ensemble_cv_risk: f64,
    pub failures: Vec<String>,
}

impl LearnerWeightRecord {
    fn new(fold: usize, category: Option<usize>, task: NuisanceTask, fit: &EnsembleFit) -> Self {
        Self {
            fold,
            category,
            task,
            learners: fit.candidates.iter().map(ToString::to_string).collect(),
            weights: fit.weights.clone(),
            cv_risk: fit.cv_risk.clone(),
            ensemble_cv_risk: fit.ensemble_cv_risk,
            failures: fit.failures.iter().map(|(c, m)| format!("{}: {m}", fit.candidates[*c])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFlag {
    pub fold: usize,
    pub category: usize,
    pub arm: Option<u8>,
    pub message: String,
}

/// Cross-fitted nuisance predictions.
///
/// Each row `i` holds the predictions of the models trained without the fold
/// containing `i`, evaluated at that row's covariates: `propensity[i]` is
/// π̂(X_i), and `presence[a][[i, j]]`, `intensity[a][[i, j]]` are q̂_j(a, X_i)
/// and m̂_j(a, X_i).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFits {
    pub folds: FoldAssignment,
    pub propensity: Array1<f64>,
    pub presence: [Array2<f64>; 2],
    pub intensity: [Array2<f64>; 2],
    #[serde(default)]
    pub weights: Vec<LearnerWeightRecord>,
    #[serde(default)]
    pub flags: Vec<NuisanceFlag>,
}

impl NuisanceFits {
    /// Wraps externally supplied nuisance values (oracle or fixed), applying
    /// the usual truncation.
    pub fn from_parts(
        folds: FoldAssignment,
        propensity: Array1<f64>,
        presence: [Array2<f64>; 2],
        intensity: [Array2<f64>; 2],
    ) -> Result<Self> {
        let n = folds.n();
        if propensity.len() != n {
            return Err(Error::invalid("propensity length does not match the fold assignment"));
        }
        let dim = presence[0].dim();
        if dim.0 != n || presence.iter().chain(intensity.iter()).any(|m| m.dim() != dim) {
            return Err(Error::invalid("nuisance matrices must all be n x J"));
        }
        let bad = propensity.iter().chain(presence.iter().flatten()).chain(intensity.iter().flatten());
        if bad.into_iter().any(|v| !v.is_finite()) || intensity.iter().flatten().any(|v| *v < 0.0) {
            return Err(Error::invalid("nuisance values must be finite, with nonnegative intensities"));
        }
        Ok(Self {
            folds,
            propensity: propensity.mapv(|p| p.clamp(PI_BOUNDS.0, PI_BOUNDS.1)),
            presence: presence.map(|q| q.mapv(|v| v.clamp(Q_BOUNDS.0, Q_BOUNDS.1))),
            intensity,
            weights: Vec::new(),
            flags: Vec::new(),
        })
    }

    /// Nuisances given directly as conditional means μ(a, X_i); presence is
    /// set to its upper bound and intensity to μ divided by it.
    pub fn from_means(folds: FoldAssignment, propensity: Array1<f64>, mean: [Array2<f64>; 2]) -> Result<Self> {
        let q = Q_BOUNDS.1;
        let presence = [Array2::from_elem(mean[0].dim(), q), Array2::from_elem(mean[1].dim(), q)];
        let intensity = mean.map(|m| m / q);
        Self::from_parts(folds, propensity, presence, intensity)
    }

    pub fn n(&self) -> usize {
        self.propensity.len()
    }

    pub fn n_categories(&self) -> usize {
        self.presence[0].ncols()
    }

    /// μ̂(a, X_i) = m̂(a, X_i) q̂(a, X_i) as an n x J matrix.
    pub fn mean(&self, a: u8) -> Array2<f64> {
        let a = usize::from(a);
        &self.intensity[a] * &self.presence[a]
    }
}

/// Design matrix (A, X) with the exposure column set to `a` when given.
fn exposure_design(d: &Dataset, a: Option<f64>) -> Array2<f64> {
    let n = d.n();
    let mut z = Array2::zeros((n, d.n_covariates() + 1));
    for i in 0..n {
        z[[i, 0]] = a.unwrap_or(f64::from(d.exposure()[i]));
    }
    z.slice_mut(s![.., 1..]).assign(&d.covariates());
    z
}

struct CategoryFit {
    fold: usize,
    category: usize,
    rows: Vec<usize>,
    q: [Vec<f64>; 2],
    m: [Vec<f64>; 2],
    records: Vec<LearnerWeightRecord>,
    flags: Vec<NuisanceFlag>,
}

const TASK_PRESENCE: u64 = 1;
const TASK_INTENSITY: u64 = 2;
const TASK_PROPENSITY: u64 = 3;

fn fit_category(
    d: &Dataset,
    folds: &FoldAssignment,
    menu: &LearnerMenu,
    designs: &[Array2<f64>; 3],
    fold: usize,
    j: usize,
    v: usize,
    seed: u64,
) -> Result<CategoryFit> {
    let [z, z0, z1] = designs;
    let train = folds.rows_out(fold);
    let test = folds.rows_in(fold);
    let w = d.outcome_column(j);
    let zt = z.select(Axis(0), &train);
    let ones = Array1::<f64>::ones(train.len());
    let mut records = Vec::new();
    let mut flags = Vec::new();

    let present: Array1<f64> = train.iter().map(|&i| f64::from(w[i] > 0.0)).collect();
    let qfit = fit_superlearner(
        Task::Binary,
        &menu.presence,
        zt.view(),
        present.view(),
        ones.view(),
        v,
        derive_seed(seed, &[fold as u64, j as u64, TASK_PRESENCE]),
    )?;
    records.push(LearnerWeightRecord::new(fold, Some(j), NuisanceTask::Presence, &qfit));

    let pos: Vec<usize> = train.iter().copied().filter(|&i| w[i] > 0.0).collect();
    let a = d.exposure();
    let arm_has_pos = [0u8, 1].map(|arm| pos.iter().any(|&i| a[i] == arm));
    let grand = if pos.is_empty() { 0.0 } else { pos.iter().map(|&i| w[i]).sum::<f64>() / pos.len() as f64 };
    // Intensity predictions are bounded by the observed positive outcomes; an
    // unpenalized log-link fit on a handful of positives can otherwise
    // extrapolate by many orders of magnitude.
    let (m_lo, m_hi) = pos
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(w[i]), hi.max(w[i])));
    let mfit = if pos.is_empty() {
        None
    } else {
        let zp = z.select(Axis(0), &pos);
        let wp: Array1<f64> = pos.iter().map(|&i| w[i]).collect();
        let fit = fit_superlearner(
            Task::RegressionNonneg,
            &menu.intensity,
            zp.view(),
            wp.view(),
            Array1::<f64>::ones(pos.len()).view(),
            v,
            derive_seed(seed, &[fold as u64, j as u64, TASK_INTENSITY]),
        )?;
        records.push(LearnerWeightRecord::new(fold, Some(j), NuisanceTask::Intensity, &fit));
        Some(fit)
    };

    let mut q = [Vec::new(), Vec::new()];
    let mut m = [Vec::new(), Vec::new()];
    for arm in 0..2usize {
        let za = if arm == 0 { z0 } else { z1 };
        let zv = za.select(Axis(0), &test);
        q[arm] = qfit.predict(zv.view()).iter().map(|p| p.clamp(Q_BOUNDS.0, Q_BOUNDS.1)).collect();
        m[arm] = match (&mfit, arm_has_pos[arm]) {
            (Some(fit), true) => {
                fit.predict(zv.view()).iter().map(|v| v.clamp(m_lo, m_hi)).collect()
            }
            _ => {
                flags.push(NuisanceFlag {
                    fold,
                    category: j,
                    arm: Some(arm as u8),
                    message: format!(
                        "no positive training rows in arm {arm}; intensity set to the positive grand mean {grand}"
                    ),
                });
                vec![grand; test.len()]
            }
        };
    }
    Ok(CategoryFit { fold, category: j, rows: test, q, m, records, flags })
}

/// Cross-fits π̂, q̂_j and m̂_j with SuperLearner ensembles.
///
/// Fits for different (fold, category) pairs run in parallel; each draws its
/// randomness from a seed derived from its own indices, so results do not
/// depend on the thread count.
pub fn fit_nuisances(
    d: &Dataset,
    folds: &FoldAssignment,
    menu: &LearnerMenu,
    v: usize,
    seed: u64,
) -> Result<NuisanceFits> {
    menu.validate()?;
    let (n, jn) = (d.n(), d.n_categories());
    if folds.n() != n {
        return Err(Error::invalid("fold assignment does not match the dataset"));
    }
    if v < 2 {
        return Err(Error::config(format!("need at least 2 inner folds, got {v}")));
    }
    let designs = [exposure_design(d, None), exposure_design(d, Some(0.0)), exposure_design(d, Some(1.0))];
    let x = d.covariates();
    let a: Array1<f64> = d.exposure().iter().map(|&v| f64::from(v)).collect();

    let pi_fits: Vec<(Vec<usize>, Vec<f64>, LearnerWeightRecord)> = (0..folds.k)
        .into_par_iter()
        .map(|k| {
            let train = folds.rows_out(k);
            let test = folds.rows_in(k);
            let xt = x.select(Axis(0), &train);
            let at: Array1<f64> = train.iter().map(|&i| a[i]).collect();
            let fit = fit_superlearner(
                Task::Binary,
                &menu.propensity,
                xt.view(),
                at.view(),
                Array1::<f64>::ones(train.len()).view(),
                v,
                derive_seed(seed, &[k as u64, 0, TASK_PROPENSITY]),
            )?;
            let pred = fit.predict(x.select(Axis(0), &test).view());
            let rec = LearnerWeightRecord::new(k, None, NuisanceTask::Propensity, &fit);
            Ok((test, pred.iter().map(|p| p.clamp(PI_BOUNDS.0, PI_BOUNDS.1)).collect(), rec))
        })
        .collect::<Result<_>>()?;

    let pairs: Vec<(usize, usize)> = (0..folds.k).flat_map(|k| (0..jn).map(move |j| (k, j))).collect();
    let cat_fits: Vec<CategoryFit> = pairs
        .into_par_iter()
        .map(|(k, j)| fit_category(d, folds, menu, &designs, k, j, v, seed))
        .collect::<Result<_>>()?;

    let mut propensity = Array1::zeros(n);
    let mut weights = Vec::new();
    for (rows, pred, rec) in pi_fits {
        for (t, &i) in rows.iter().enumerate() {
            propensity[i] = pred[t];
        }
        weights.push(rec);
    }
    let mut presence = [Array2::zeros((n, jn)), Array2::zeros((n, jn))];
    let mut intensity = [Array2::zeros((n, jn)), Array2::zeros((n, jn))];
    let mut flags = Vec::new();
    for fit in cat_fits {
        for arm in 0..2 {
            for (t, &i) in fit.rows.iter().enumerate() {
                presence[arm][[i, fit.category]] = fit.q[arm][t];
                intensity[arm][[i, fit.category]] = fit.m[arm][t];
            }
        }
        debug_assert!(fit.rows.iter().all(|&i| folds.fold_of[i] == fit.fold));
        weights.extend(fit.records);
        flags.extend(fit.flags);
    }
    Ok(NuisanceFits { folds: folds.clone(), propensity, presence, intensity, weights, flags })
}
