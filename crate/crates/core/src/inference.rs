//! Influence-function covariance, Wald intervals and max-T simultaneous
//! calibration.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_B: usize = 10_000;
pub const DEFAULT_ALPHA: f64 = 0.05;
const CHUNK: usize = 1_000;

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Two-sided standard normal multiplier z_{1−α/2}.
pub fn z_two_sided(alpha: f64) -> f64 {
    standard_normal().inverse_cdf(1.0 - alpha / 2.0)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Σ̂ = (1/n) Σᵢ IF[i,·]ᵀ IF[i,·], without mean-centering.
pub fn covariance_from_if(influence: &Array2<f64>) -> Array2<f64> {
    let n = influence.nrows().max(1) as f64;
    influence.t().dot(influence) / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldIntervals {
    pub se: Vec<f64>,
    /// J x 2 matrix of (lower, upper).
    pub ci: Array2<f64>,
    pub p_values: Vec<f64>,
    /// Categories whose standard error is zero (degenerate interval).
    pub degenerate: Vec<bool>,
}

/// Marginal Wald intervals `ψ ± z·√(Σ̂ⱼⱼ/n)` and two-sided normal p-values.
///
/// A zero standard error gives the interval [ψ, ψ] and a p-value of 1 when
/// ψ = 0 and 0 otherwise; undefined estimates give `NaN` throughout.
pub fn wald_intervals(psi: &[f64], sigma: &Array2<f64>, n: usize, alpha: f64) -> Result<WaldIntervals> {
    check_alpha(alpha)?;
    let jn = psi.len();
    if sigma.dim() != (jn, jn) {
        return Err(Error::invalid("covariance must be J x J"));
    }
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let z = z_two_sided(alpha);
    let norm = standard_normal();
    let mut se = vec![f64::NAN; jn];
    let mut ci = Array2::from_elem((jn, 2), f64::NAN);
    let mut p_values = vec![f64::NAN; jn];
    let mut degenerate = vec![false; jn];
    for j in 0..jn {
        if !psi[j].is_finite() {
            continue;
        }
        let s = (sigma[[j, j]].max(0.0) / n as f64).sqrt();
        se[j] = s;
        ci[[j, 0]] = psi[j] - z * s;
        ci[[j, 1]] = psi[j] + z * s;
        if s > 0.0 {
            p_values[j] = (2.0 * norm.sf((psi[j] / s).abs())).min(1.0);
        } else {
            degenerate[j] = true;
            p_values[j] = if psi[j] == 0.0 { 1.0 } else { 0.0 };
        }
    }
    Ok(WaldIntervals { se, ci, p_values, degenerate })
}

/// Symmetric square root of a correlation matrix with eigenvalues floored at 0.
fn correlation_root(corr: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(corr.clone());
    let mut v = eig.eigenvectors.clone();
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        v.column_mut(k).scale_mut(s);
    }
    v * eig.eigenvectors.transpose()
}

/// Empirical (1 − α) quantile of max_j |Z_j| for Z ~ N(0, corr), from `b`
/// draws generated in fixed-size chunks with per-chunk derived seeds.
pub fn maxt_quantile_from_correlation(corr: &DMatrix<f64>, b: usize, alpha: f64, seed: u64) -> Result<f64> {
    check_alpha(alpha)?;
    if b == 0 {
        return Err(Error::config("number of max-T draws must be positive"));
    }
    if corr.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("max-T: non-finite correlation entries"));
    }
    let jn = corr.nrows();
    let root = correlation_root(corr);
    let n_chunks = b.div_ceil(CHUNK);
    let mut maxima: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut r = rng::stream(seed, &[0x3A7, c as u64]);
            let count = CHUNK.min(b - c * CHUNK);
            let mut eps = vec![0.0; jn];
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut r);
                }
                let mut m = 0.0f64;
                for row in 0..jn {
                    let z: f64 = (0..jn).map(|k| root[(row, k)] * eps[k]).sum();
                    m = m.max(z.abs());
                }
                out.push(m);
            }
            out
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let rank = ((1.0 - alpha) * b as f64).ceil() as usize;
    Ok(maxima[rank.clamp(1, b) - 1])
}

/// Max-T critical value from the correlation of the influence columns.
///
/// Only columns flagged usable with positive variance enter; with fewer than
/// two such columns the marginal multiplier is returned. The result is never
/// below z_{1−α/2}, so simultaneous intervals contain marginal ones.
pub fn maxt_critical(influence: &Array2<f64>, usable: &[bool], b: usize, alpha: f64, seed: u64) -> Result<f64> {
    check_alpha(alpha)?;
    let sigma = covariance_from_if(influence);
    if usable.len() != sigma.nrows() {
        return Err(Error::invalid("usable mask length must equal J"));
    }
    let cols: Vec<usize> = (0..usable.len()).filter(|&j| usable[j] && sigma[[j, j]] > 0.0).collect();
    let z = z_two_sided(alpha);
    if cols.len() < 2 {
        return Ok(z);
    }
    let k = cols.len();
    let corr = DMatrix::from_fn(k, k, |r, c| {
        let (a, bb) = (cols[r], cols[c]);
        sigma[[a, bb]] / (sigma[[a, a]] * sigma[[bb, bb]]).sqrt()
    });
    Ok(maxt_quantile_from_correlation(&corr, b, alpha, seed)?.max(z))
}

/// `ψ ± crit·se` per category.
pub fn simultaneous_intervals(psi: &[f64], se: &[f64], crit: f64) -> Array2<f64> {
    let mut ci = Array2::from_elem((psi.len(), 2), f64::NAN);
    for j in 0..psi.len() {
        if psi[j].is_finite() && se[j].is_finite() {
            ci[[j, 0]] = psi[j] - crit * se[j];
            ci[[j, 1]] = psi[j] + crit * se[j];
        }
    }
    ci
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub sigma: Array2<f64>,
    pub se: Vec<f64>,
    pub ci_marginal: Array2<f64>,
    pub ci_simultaneous: Array2<f64>,
    pub p_values: Vec<f64>,
    pub crit_marginal: f64,
    pub crit_simultaneous: f64,
    pub alpha: f64,
    pub b: usize,
    pub degenerate: Vec<bool>,
}

/// Full inference pass: covariance, marginal intervals and max-T intervals.
pub fn infer(psi: &[f64], influence: &Array2<f64>, usable: &[bool], alpha: f64, b: usize, seed: u64) -> Result<InferenceResult> {
    if influence.ncols() != psi.len() || usable.len() != psi.len() {
        return Err(Error::invalid("inference: dimension mismatch"));
    }
    let sigma = covariance_from_if(influence);
    let wald = wald_intervals(psi, &sigma, influence.nrows(), alpha)?;
    let usable: Vec<bool> = usable.iter().zip(psi).map(|(&u, p)| u && p.is_finite()).collect();
    let crit = maxt_critical(influence, &usable, b, alpha, seed)?;
    let ci_simultaneous = simultaneous_intervals(psi, &wald.se, crit);
    Ok(InferenceResult {
        sigma,
        se: wald.se,
        ci_marginal: wald.ci,
        ci_simultaneous,
        p_values: wald.p_values,
        crit_marginal: z_two_sided(alpha),
        crit_simultaneous: crit,
        alpha,
        b,
        degenerate: wald.degenerate,
    })
}
