//! Shift-equivariant centering functions `g` with `g(y + z·1) = g(y) + z`,
//! their gradients, and the delta-method map applied to estimates and
//! influence functions.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SMEDIAN_EPS: f64 = 0.1;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CenteringSpec {
    None,
    /// Zero-based index of the reference category.
    Reference { index: usize },
    Mean,
    /// Minimizer of a pseudo-Huber loss with scale `eps`.
    SmoothedMedian { eps: f64 },
}

impl CenteringSpec {
    /// Parses `none`, `mean`, `ref:<name-or-1-based-index>` or `smedian:<eps>`.
    pub fn parse(s: &str, category_names: &[String]) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(CenteringSpec::None),
            "mean" => return Ok(CenteringSpec::Mean),
            "smedian" => return Ok(CenteringSpec::SmoothedMedian { eps: DEFAULT_SMEDIAN_EPS }),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("ref:") {
            if let Some(pos) = category_names.iter().position(|c| c == rest) {
                return Ok(CenteringSpec::Reference { index: pos });
            }
            let idx: usize = rest
                .parse()
                .map_err(|_| Error::config(format!("unknown reference category {rest:?}")))?;
            if idx == 0 || idx > category_names.len() {
                return Err(Error::config(format!(
                    "reference index {idx} out of range 1..={}",
                    category_names.len()
                )));
            }
            return Ok(CenteringSpec::Reference { index: idx - 1 });
        }
        if let Some(rest) = s.strip_prefix("smedian:") {
            let eps: f64 = rest
                .parse()
                .map_err(|_| Error::config(format!("invalid smoothed-median scale {rest:?}")))?;
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::config("smoothed-median scale must be positive"));
            }
            return Ok(CenteringSpec::SmoothedMedian { eps });
        }
        Err(Error::config(format!(
            "unknown centering {s:?}; expected none, mean, ref:<category> or smedian:<eps>"
        )))
    }

    pub fn is_none(&self) -> bool {
        matches!(self, CenteringSpec::None)
    }
}

impl fmt::Display for CenteringSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CenteringSpec::None => write!(f, "none"),
            CenteringSpec::Reference { index } => write!(f, "ref:{}", index + 1),
            CenteringSpec::Mean => write!(f, "mean"),
            CenteringSpec::SmoothedMedian { eps } => write!(f, "smedian:{eps}"),
        }
    }
}

fn check_input(g: &CenteringSpec, y: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::invalid("centering needs at least one value"));
    }
    if let CenteringSpec::Reference { index } = g {
        if *index >= y.len() {
            return Err(Error::invalid(format!("reference index {} out of range for J={}", index + 1, y.len())));
        }
        if !y[*index].is_finite() {
            return Err(Error::invalid("non-finite reference value"));
        }
        return Ok(());
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("centering input must be finite"));
    }
    Ok(())
}

#[inline]
fn huber_d1(u: f64, eps: f64) -> f64 {
    u / (1.0 + (u / eps).powi(2)).sqrt()
}

#[inline]
fn huber_d2(u: f64, eps: f64) -> f64 {
    (1.0 + (u / eps).powi(2)).powf(-1.5)
}

fn median(y: &[f64]) -> f64 {
    let mut v = y.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Root of `Σ ρ'(y_j − m) = 0`: Newton from the median, safeguarded by bisection.
fn smoothed_median(y: &[f64], eps: f64) -> f64 {
    let score = |m: f64| y.iter().map(|&v| huber_d1(v - m, eps)).sum::<f64>();
    let (mut lo, mut hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo == 0.0 {
        return lo;
    }
    let mut m = median(y);
    for _ in 0..NEWTON_MAX_ITER {
        let s = score(m);
        if s.abs() <= NEWTON_TOL {
            break;
        }
        // score is decreasing in m
        if s > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
        let slope: f64 = y.iter().map(|&v| huber_d2(v - m, eps)).sum();
        let mut next = m + s / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == m || hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
            m = next;
            break;
        }
        m = next;
    }
    m
}

/// Evaluates `g(y)`.
pub fn center_value(g: &CenteringSpec, y: &[f64]) -> Result<f64> {
    check_input(g, y)?;
    Ok(match *g {
        CenteringSpec::None => 0.0,
        CenteringSpec::Reference { index } => y[index],
        CenteringSpec::Mean => y.iter().sum::<f64>() / y.len() as f64,
        CenteringSpec::SmoothedMedian { eps } => smoothed_median(y, eps),
    })
}

/// Evaluates `∇g(y)`; the smoothed-median gradient comes from implicit differentiation.
pub fn center_gradient(g: &CenteringSpec, y: &[f64]) -> Result<Vec<f64>> {
    check_input(g, y)?;
    let k = y.len();
    Ok(match *g {
        CenteringSpec::None => vec![0.0; k],
        CenteringSpec::Reference { index } => {
            let mut e = vec![0.0; k];
            e[index] = 1.0;
            e
        }
        CenteringSpec::Mean => vec![1.0 / k as f64; k],
        CenteringSpec::SmoothedMedian { eps } => {
            let m = smoothed_median(y, eps);
            let curv: Vec<f64> = y.iter().map(|&v| huber_d2(v - m, eps)).collect();
            let total: f64 = curv.iter().sum();
            curv.into_iter().map(|c| c / total).collect()
        }
    })
}

/// Centered estimates and influence function.
#[derive(Debug, Clone)]
pub struct Centered {
    pub psi: Vec<f64>,
    pub influence: Array2<f64>,
    /// False when a non-estimable category would receive nonzero gradient weight.
    pub defined: bool,
}

/// Applies `psi ↦ psi − g(psi)·1` and `IF[i,·] ↦ IF[i,·] − (IF[i,·]·∇g)·1`.
///
/// `estimable[j] = false` marks categories whose estimate is undefined.
pub fn apply_centering(psi: &[f64], influence: &Array2<f64>, g: &CenteringSpec, estimable: &[bool]) -> Result<Centered> {
    let k = psi.len();
    if influence.ncols() != k || estimable.len() != k {
        return Err(Error::invalid("centering: dimension mismatch"));
    }
    if g.is_none() {
        return Ok(Centered { psi: psi.to_vec(), influence: influence.clone(), defined: true });
    }
    let needs_all = !matches!(g, CenteringSpec::Reference { .. });
    let usable = match g {
        CenteringSpec::Reference { index } => *index < k && estimable[*index] && psi[*index].is_finite(),
        _ => estimable.iter().zip(psi).all(|(&e, v)| e && v.is_finite()),
    };
    if !usable {
        return Ok(Centered {
            psi: vec![f64::NAN; k],
            influence: Array2::zeros(influence.dim()),
            defined: false,
        });
    }
    let shift = center_value(g, psi)?;
    let grad = center_gradient(g, psi)?;
    let psi_g: Vec<f64> = psi
        .iter()
        .zip(estimable)
        .map(|(v, &e)| if e || needs_all { v - shift } else { f64::NAN })
        .collect();
    let mut out = influence.clone();
    for mut row in out.rows_mut() {
        let dot: f64 = row.iter().zip(&grad).map(|(a, b)| a * b).sum();
        for (j, v) in row.iter_mut().enumerate() {
            *v = if estimable[j] { *v - dot } else { 0.0 };
        }
    }
    if let CenteringSpec::Reference { index } = g {
        // exact zeros at the reference, free of rounding
        out.column_mut(*index).fill(0.0);
    }
    let mut psi_g = psi_g;
    if let CenteringSpec::Reference { index } = g {
        psi_g[*index] = 0.0;
    }
    Ok(Centered { psi: psi_g, influence: out, defined: true })
}
