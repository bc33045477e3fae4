//! Covariate-adjusted estimators of the log fold-difference of marginalized
//! means: plug-in, cross-fitted one-step, and targeted (single- or
//! two-stage fluctuation).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::centering::{apply_centering, CenteringSpec};
use crate::data::{validate, CategoryStatus, Dataset};
use crate::error::{Error, Result};
use crate::glm::{expit, logit, solve_fluct_logistic, solve_fluct_poisson};
use crate::learners::{NuisanceFits, Q_BOUNDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TmleMode {
    SingleStage,
    #[default]
    TwoStage,
}

impl fmt::Display for TmleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TmleMode::SingleStage => "single-stage",
            TmleMode::TwoStage => "two-stage",
        })
    }
}

impl FromStr for TmleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single-stage" | "single_stage" | "single" => Ok(TmleMode::SingleStage),
            "two-stage" | "two_stage" | "two" => Ok(TmleMode::TwoStage),
            other => Err(Error::config(format!("unknown tmle mode '{other}' (expected two-stage or single-stage)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Plugin,
    Onestep,
    #[default]
    Tmle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Plugin => "plugin",
            Method::Onestep => "onestep",
            Method::Tmle => "tmle",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plugin" | "plug-in" => Ok(Method::Plugin),
            "onestep" | "one-step" => Ok(Method::Onestep),
            "tmle" => Ok(Method::Tmle),
            other => Err(Error::config(format!("unknown method '{other}' (expected tmle, onestep or plugin)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFlag {
    pub category: usize,
    pub arm: Option<u8>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedEstimate {
    pub method: Method,
    /// Log fold-difference per category; `NaN` where undefined.
    pub psi: Vec<f64>,
    /// Influence function rows; `None` for the plug-in, which has no
    /// asymptotic validity claim.
    pub influence: Option<Array2<f64>>,
    /// Marginalized means (1/n) Σᵢ μ̂(a, Xᵢ); row `a` for arm `a`.
    pub g_computation: Array2<f64>,
    pub status: Vec<CategoryStatus>,
    pub flags: Vec<CategoryFlag>,
    pub centering: CenteringSpec,
    pub defined: bool,
}

impl AdjustedEstimate {
    pub fn estimable(&self) -> Vec<bool> {
        self.status.iter().map(|s| s.estimable).collect()
    }
}

/// Fluctuated nuisances and the fitted fluctuation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetedNuisances {
    pub mode: TmleMode,
    /// Multiplier exp(β̃) per arm (rows) and category (columns), applied to
    /// m̂ in two-stage mode and to μ̂ in single-stage mode.
    pub poisson_fluct: Array2<f64>,
    /// Logit-scale shift of q̂ per arm and category (0 in single-stage mode,
    /// +∞ when every weighted row in the arm is positive).
    pub logistic_fluct: Array2<f64>,
    pub propensity: Array1<f64>,
    /// Targeted means μ̂*(a, Xᵢ) as n x J matrices.
    pub mean: [Array2<f64>; 2],
    pub flags: Vec<CategoryFlag>,
}

fn arm_weight(a_i: u8, arm: u8, pi: f64) -> f64 {
    match (a_i == arm, arm) {
        (false, _) => 0.0,
        (true, 1) => 1.0 / pi,
        (true, _) => 1.0 / (1.0 - pi),
    }
}

fn check_shapes(d: &Dataset, propensity: ArrayView1<'_, f64>, mean: &[Array2<f64>; 2]) -> Result<()> {
    let dim = (d.n(), d.n_categories());
    if propensity.len() != d.n() || mean[0].dim() != dim || mean[1].dim() != dim {
        return Err(Error::invalid("nuisances do not match the dataset dimensions"));
    }
    Ok(())
}

/// Marginalized means (1/n) Σᵢ μ(a, Xᵢ) as a 2 x J matrix.
pub fn g_computation(mean: &[Array2<f64>; 2]) -> Array2<f64> {
    let jn = mean[0].ncols();
    let mut g = Array2::zeros((2, jn));
    for a in 0..2 {
        for j in 0..jn {
            g[[a, j]] = mean[a].column(j).mean().unwrap_or(f64::NAN);
        }
    }
    g
}

/// Empirical means P_n φ̄_{a,j}: the weighted residual averages
/// (1/n) Σᵢ 1{Aᵢ=a}/π_a(Xᵢ) (Wᵢⱼ − μ(a, Xᵢ)); row `a`, column `j`.
pub fn arm_scores(d: &Dataset, propensity: ArrayView1<'_, f64>, mean: &[Array2<f64>; 2]) -> Result<Array2<f64>> {
    check_shapes(d, propensity, mean)?;
    let (n, jn) = (d.n(), d.n_categories());
    let w = d.outcomes();
    let mut s = Array2::zeros((2, jn));
    for i in 0..n {
        let ai = d.exposure()[i];
        let wt = arm_weight(ai, ai, propensity[i]);
        for j in 0..jn {
            s[[usize::from(ai), j]] += wt * (w[[i, j]] - mean[usize::from(ai)][[i, j]]);
        }
    }
    Ok(s / n as f64)
}

/// Efficient influence function of the adjusted log fold-difference,
/// evaluated at the given propensity, conditional means and marginalized
/// means. Columns with a nonpositive marginalized mean are zero.
pub fn eif_psi2(
    d: &Dataset,
    propensity: ArrayView1<'_, f64>,
    mean: &[Array2<f64>; 2],
    g_comp: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_shapes(d, propensity, mean)?;
    let (n, jn) = (d.n(), d.n_categories());
    if g_comp.dim() != (2, jn) {
        return Err(Error::invalid("g-computation matrix must be 2 x J"));
    }
    let w = d.outcomes();
    let mut phi = Array2::zeros((n, jn));
    for j in 0..jn {
        let (g0, g1) = (g_comp[[0, j]], g_comp[[1, j]]);
        if !(g0 > 0.0 && g1 > 0.0) {
            continue;
        }
        for i in 0..n {
            let ai = d.exposure()[i];
            let resid = w[[i, j]] - mean[usize::from(ai)][[i, j]];
            let bar = |arm: u8| {
                let g = g_comp[[usize::from(arm), j]];
                arm_weight(ai, arm, propensity[i]) * resid + mean[usize::from(arm)][[i, j]] - g
            };
            phi[[i, j]] = bar(1) / g1 - bar(0) / g0;
        }
    }
    Ok(phi)
}

fn log_ratio(g: &Array2<f64>, j: usize) -> Option<f64> {
    let (g0, g1) = (g[[0, j]], g[[1, j]]);
    (g0 > 0.0 && g1 > 0.0 && g0.is_finite() && g1.is_finite()).then(|| (g1 / g0).ln())
}

fn finish(
    d: &Dataset,
    method: Method,
    g_comp: Array2<f64>,
    psi_of: impl Fn(usize) -> Option<f64>,
    influence: Option<Array2<f64>>,
    mut flags: Vec<CategoryFlag>,
) -> AdjustedEstimate {
    let jn = d.n_categories();
    let mut status = validate(d);
    let mut psi = vec![f64::NAN; jn];
    let mut influence = influence;
    for j in 0..jn {
        let flagged = flags.iter().any(|f| f.category == j);
        let value = if status[j].estimable && !flagged { psi_of(j) } else { None };
        match value {
            Some(v) if v.is_finite() => psi[j] = v,
            _ => {
                if status[j].estimable && !flagged {
                    flags.push(CategoryFlag { category: j, arm: None, message: "log fold-difference undefined".into() });
                }
                status[j].estimable = false;
                if let Some(phi) = influence.as_mut() {
                    phi.column_mut(j).fill(0.0);
                }
            }
        }
    }
    AdjustedEstimate {
        method,
        psi,
        influence,
        g_computation: g_comp,
        status,
        flags,
        centering: CenteringSpec::None,
        defined: true,
    }
}

/// Plug-in estimate from cross-fitted conditional means.
pub fn estimate_plugin2(d: &Dataset, nuisances: &NuisanceFits) -> Result<AdjustedEstimate> {
    let mean = [nuisances.mean(0), nuisances.mean(1)];
    check_shapes(d, nuisances.propensity.view(), &mean)?;
    let g = g_computation(&mean);
    let gc = g.clone();
    Ok(finish(d, Method::Plugin, g, |j| log_ratio(&gc, j), None, Vec::new()))
}

/// Cross-fitted one-step estimate: the average over folds of the fold-level
/// plug-in plus the fold-level mean of the influence function.
pub fn estimate_onestep2(d: &Dataset, nuisances: &NuisanceFits) -> Result<AdjustedEstimate> {
    let mean = [nuisances.mean(0), nuisances.mean(1)];
    let pi = nuisances.propensity.view();
    check_shapes(d, pi, &mean)?;
    let folds = &nuisances.folds;
    if folds.n() != d.n() {
        return Err(Error::invalid("fold assignment does not match the dataset"));
    }
    let (n, jn) = (d.n(), d.n_categories());
    let w = d.outcomes();
    let mut sum = vec![0.0; jn];
    let mut influence = Array2::zeros((n, jn));
    let mut flags = Vec::new();
    let mut used_folds = 0usize;
    for k in 0..folds.k {
        let rows = folds.rows_in(k);
        if rows.is_empty() {
            continue;
        }
        used_folds += 1;
        let nk = rows.len() as f64;
        let mut gk = Array2::<f64>::zeros((2, jn));
        for &i in &rows {
            for a in 0..2 {
                for j in 0..jn {
                    gk[[a, j]] += mean[a][[i, j]] / nk;
                }
            }
        }
        for j in 0..jn {
            let Some(plugin) = log_ratio(&gk, j) else {
                if !flags.iter().any(|f: &CategoryFlag| f.category == j) {
                    flags.push(CategoryFlag {
                        category: j,
                        arm: None,
                        message: format!("fold {k} has a nonpositive marginalized mean; one-step log undefined"),
                    });
                }
                continue;
            };
            let (g0, g1) = (gk[[0, j]], gk[[1, j]]);
            let mut corr = 0.0;
            for &i in &rows {
                let ai = d.exposure()[i];
                let resid = w[[i, j]] - mean[usize::from(ai)][[i, j]];
                let bar1 = arm_weight(ai, 1, pi[i]) * resid + mean[1][[i, j]] - g1;
                let bar0 = arm_weight(ai, 0, pi[i]) * resid + mean[0][[i, j]] - g0;
                let phi = bar1 / g1 - bar0 / g0;
                influence[[i, j]] = phi;
                corr += phi / nk;
            }
            sum[j] += plugin + corr;
        }
    }
    let g = g_computation(&mean);
    let kk = used_folds as f64;
    Ok(finish(d, Method::Onestep, g, |j| Some(sum[j] / kk), Some(influence), flags))
}

/// Pooled fluctuation of the cross-fitted nuisances so that the empirical
/// mean of each arm's influence component vanishes.
///
/// Single-stage mode rescales μ̂(a, ·) by the closed-form intercept-only
/// Poisson root. Two-stage mode first rescales m̂(a, ·) on positive rows, then
/// shifts logit q̂(a, ·) by the root of a logistic score weighted by
/// 1{A=a}/π_a · m̂*(a, X); together these zero the weighted residual
/// Σ 1{A=a}/π_a (W − m̂* q̂*) exactly.
pub fn tmle_target(d: &Dataset, nuisances: &NuisanceFits, mode: TmleMode) -> Result<TargetedNuisances> {
    let (n, jn) = (d.n(), d.n_categories());
    let pi = nuisances.propensity.clone();
    let base_mean = [nuisances.mean(0), nuisances.mean(1)];
    check_shapes(d, pi.view(), &base_mean)?;
    let a = d.exposure();
    let w = d.outcomes();
    let mut poisson_fluct = Array2::from_elem((2, jn), 1.0);
    let mut logistic_fluct = Array2::zeros((2, jn));
    let mut mean = [Array2::zeros((n, jn)), Array2::zeros((n, jn))];
    let mut flags = Vec::new();

    for arm in 0..2u8 {
        let ai = usize::from(arm);
        let rows: Vec<usize> = (0..n).filter(|&i| a[i] == arm).collect();
        let weights: Vec<f64> = rows.iter().map(|&i| arm_weight(arm, arm, pi[i])).collect();
        for j in 0..jn {
            let mut flag = |msg: String| flags.push(CategoryFlag { category: j, arm: Some(arm), message: msg });
            match mode {
                TmleMode::SingleStage => {
                    let y: Vec<f64> = rows.iter().map(|&i| w[[i, j]]).collect();
                    let off: Vec<f64> = rows.iter().map(|&i| base_mean[ai][[i, j]]).collect();
                    let mult = match solve_fluct_poisson(&y, &off, &weights) {
                        Ok(m) if m > 0.0 && m.is_finite() => m,
                        Ok(_) => {
                            flag("no positive outcomes in this arm; fluctuation undefined".into());
                            1.0
                        }
                        Err(e) => {
                            flag(e.to_string());
                            1.0
                        }
                    };
                    poisson_fluct[[ai, j]] = mult;
                    for i in 0..n {
                        mean[ai][[i, j]] = mult * base_mean[ai][[i, j]];
                    }
                }
                TmleMode::TwoStage => {
                    let m_hat = &nuisances.intensity[ai];
                    let q_hat = &nuisances.presence[ai];
                    let pos: Vec<usize> = (0..rows.len()).filter(|&t| w[[rows[t], j]] > 0.0).collect();
                    let mult = if pos.is_empty() {
                        flag("no positive outcomes in this arm; intensity fluctuation fixed at 1".into());
                        1.0
                    } else {
                        let y: Vec<f64> = pos.iter().map(|&t| w[[rows[t], j]]).collect();
                        let off: Vec<f64> = pos.iter().map(|&t| m_hat[[rows[t], j]]).collect();
                        let wt: Vec<f64> = pos.iter().map(|&t| weights[t]).collect();
                        match solve_fluct_poisson(&y, &off, &wt) {
                            Ok(m) if m > 0.0 && m.is_finite() => m,
                            Ok(_) | Err(_) => {
                                flag("intensity predictions vanish on positive rows; fluctuation fixed at 1".into());
                                1.0
                            }
                        }
                    };
                    poisson_fluct[[ai, j]] = mult;
                    let y: Vec<f64> = rows.iter().map(|&i| f64::from(w[[i, j]] > 0.0)).collect();
                    let off: Vec<f64> = rows.iter().map(|&i| logit(q_hat[[i, j]].clamp(Q_BOUNDS.0, Q_BOUNDS.1))).collect();
                    let wt: Vec<f64> = rows.iter().zip(&weights).map(|(&i, wi)| wi * mult * m_hat[[i, j]]).collect();
                    let beta = if wt.iter().sum::<f64>() > 0.0 {
                        match solve_fluct_logistic(&y, &off, &wt) {
                            // every weighted row is positive: the score root sits at q* = 1
                            Ok(f) if f.capped && f.beta > 0.0 => f64::INFINITY,
                            Ok(f) => {
                                if f.capped {
                                    flag("presence fluctuation hit its bound".into());
                                }
                                f.beta
                            }
                            Err(e) => {
                                flag(e.to_string());
                                0.0
                            }
                        }
                    } else {
                        if !pos.is_empty() {
                            flag("zero weighted intensity; presence fluctuation undefined".into());
                        }
                        0.0
                    };
                    logistic_fluct[[ai, j]] = beta;
                    for i in 0..n {
                        let q_star = if beta == f64::INFINITY {
                            1.0
                        } else {
                            expit(logit(q_hat[[i, j]].clamp(Q_BOUNDS.0, Q_BOUNDS.1)) + beta)
                        };
                        mean[ai][[i, j]] = mult * m_hat[[i, j]] * q_star;
                    }
                }
            }
        }
    }
    Ok(TargetedNuisances { mode, poisson_fluct, logistic_fluct, propensity: pi, mean, flags })
}

/// Targeted estimate: log ratio of the marginalized targeted means, with the
/// influence function evaluated at the targeted fits.
pub fn estimate_tmle2(d: &Dataset, targeted: &TargetedNuisances) -> Result<AdjustedEstimate> {
    check_shapes(d, targeted.propensity.view(), &targeted.mean)?;
    let g = g_computation(&targeted.mean);
    let phi = eif_psi2(d, targeted.propensity.view(), &targeted.mean, &g)?;
    let gc = g.clone();
    Ok(finish(d, Method::Tmle, g, |j| log_ratio(&gc, j), Some(phi), targeted.flags.clone()))
}

/// Applies a centering functional to an adjusted estimate and its influence function.
pub fn center_adjusted(est: AdjustedEstimate, g: &CenteringSpec) -> Result<AdjustedEstimate> {
    let estimable = est.estimable();
    let zero;
    let infl = match &est.influence {
        Some(phi) => phi,
        None => {
            zero = Array2::zeros((0, est.psi.len()));
            &zero
        }
    };
    let c = apply_centering(&est.psi, infl, g, &estimable)?;
    let influence = est.influence.as_ref().map(|_| c.influence);
    Ok(AdjustedEstimate { psi: c.psi, influence, centering: *g, defined: c.defined, ..est })
}

/// Centered targeted estimate.
pub fn estimate_psi2_centered(d: &Dataset, targeted: &TargetedNuisances, g: &CenteringSpec) -> Result<AdjustedEstimate> {
    center_adjusted(estimate_tmle2(d, targeted)?, g)
}
