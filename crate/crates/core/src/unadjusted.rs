//! Unadjusted log fold-difference of arm means and its influence function.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::centering::{apply_centering, CenteringSpec};
use crate::data::{validate, CategoryStatus, Dataset};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnadjustedEstimate {
    /// Log ratio of arm means per category; `NaN` where undefined.
    pub psi: Vec<f64>,
    /// Influence function, one row per sample; zero columns where undefined.
    pub influence: Array2<f64>,
    /// Row 0 holds the unexposed means, row 1 the exposed means.
    pub arm_means: Array2<f64>,
    pub status: Vec<CategoryStatus>,
    pub centering: CenteringSpec,
    /// False when centering put weight on an undefined category.
    pub defined: bool,
}

impl UnadjustedEstimate {
    pub fn estimable(&self) -> Vec<bool> {
        self.status.iter().map(|s| s.estimable).collect()
    }
}

pub fn estimate_psi1(d: &Dataset) -> UnadjustedEstimate {
    let (n, jn) = (d.n(), d.n_categories());
    let a = d.exposure();
    let n1 = d.n_exposed() as f64;
    let n0 = n as f64 - n1;
    let p_hat = n1 / n as f64;
    let w = d.outcomes();

    let mut arm_means = Array2::<f64>::zeros((2, jn));
    for (i, row) in w.rows().into_iter().enumerate() {
        let arm = usize::from(a[i]);
        for (j, v) in row.iter().enumerate() {
            arm_means[[arm, j]] += v;
        }
    }
    for j in 0..jn {
        arm_means[[0, j]] /= n0;
        arm_means[[1, j]] /= n1;
    }

    let mut status = validate(d);
    let mut psi = vec![f64::NAN; jn];
    let mut influence = Array2::zeros((n, jn));
    for j in 0..jn {
        let (m0, m1) = (arm_means[[0, j]], arm_means[[1, j]]);
        if !(m0 > 0.0 && m1 > 0.0) {
            status[j].estimable = false;
            continue;
        }
        psi[j] = (m1 / m0).ln();
        for i in 0..n {
            let wij = w[[i, j]];
            influence[[i, j]] = if a[i] == 1 {
                (wij - m1) / (p_hat * m1)
            } else {
                -(wij - m0) / ((1.0 - p_hat) * m0)
            };
        }
    }
    UnadjustedEstimate { psi, influence, arm_means, status, centering: CenteringSpec::None, defined: true }
}

/// Centered unadjusted estimate `ψ − g(ψ)` with the matching influence map.
pub fn estimate_psi1_centered(d: &Dataset, g: &CenteringSpec) -> Result<UnadjustedEstimate> {
    let base = estimate_psi1(d);
    let c = apply_centering(&base.psi, &base.influence, g, &base.estimable())?;
    Ok(UnadjustedEstimate { psi: c.psi, influence: c.influence, centering: *g, defined: c.defined, ..base })
}
