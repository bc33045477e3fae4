//! Candidate learners, cross-validated convex stacking and cross-fitted
//! nuisance estimation.

mod boost;
mod folds;
mod nuisance;
mod superlearner;

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, expit};

pub use boost::{BoostedTrees, Loss};
pub use folds::{make_folds, FoldAssignment};
pub use nuisance::{
    fit_nuisances, LearnerMenu, LearnerWeightRecord, NuisanceFits, NuisanceFlag, NuisanceTask, PI_BOUNDS, Q_BOUNDS,
};
pub use superlearner::{fit_superlearner, simplex_objective, simplex_weights, EnsembleFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Nonnegative response, predictions on the mean scale.
    RegressionNonneg,
    /// 0/1 response, predictions are probabilities.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum LearnerSpec {
    SampleMean,
    GlmLogLink,
    GlmLogLinkRidge { lambda: f64 },
    BoostedStumps { trees: usize, depth: usize, shrinkage: f64 },
    LogisticGlm,
    LogisticRidge { lambda: f64 },
    LogisticBoostedStumps { trees: usize, depth: usize, shrinkage: f64 },
}

pub const DEFAULT_TREES: usize = 200;
pub const DEFAULT_DEPTH: usize = 2;
pub const DEFAULT_SHRINKAGE: f64 = 0.1;
pub const DEFAULT_RIDGE: f64 = 1.0;

impl LearnerSpec {
    pub fn supports(&self, task: Task) -> bool {
        use LearnerSpec::*;
        match self {
            SampleMean => true,
            GlmLogLink | GlmLogLinkRidge { .. } | BoostedStumps { .. } => task == Task::RegressionNonneg,
            LogisticGlm | LogisticRidge { .. } | LogisticBoostedStumps { .. } => task == Task::Binary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use LearnerSpec::*;
        let ok = match *self {
            SampleMean | GlmLogLink | LogisticGlm => true,
            GlmLogLinkRidge { lambda } | LogisticRidge { lambda } => lambda > 0.0 && lambda.is_finite(),
            BoostedStumps { trees, depth, shrinkage } | LogisticBoostedStumps { trees, depth, shrinkage } => {
                trees > 0 && depth > 0 && shrinkage > 0.0 && shrinkage.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("learner {self} needs strictly positive hyperparameters")))
        }
    }

    pub fn default_regression_menu() -> Vec<LearnerSpec> {
        vec![
            LearnerSpec::SampleMean,
            LearnerSpec::GlmLogLink,
            LearnerSpec::GlmLogLinkRidge { lambda: DEFAULT_RIDGE },
            LearnerSpec::BoostedStumps { trees: DEFAULT_TREES, depth: DEFAULT_DEPTH, shrinkage: DEFAULT_SHRINKAGE },
        ]
    }

    pub fn default_binary_menu() -> Vec<LearnerSpec> {
        vec![
            LearnerSpec::SampleMean,
            LearnerSpec::LogisticGlm,
            LearnerSpec::LogisticRidge { lambda: DEFAULT_RIDGE },
            LearnerSpec::LogisticBoostedStumps {
                trees: DEFAULT_TREES,
                depth: DEFAULT_DEPTH,
                shrinkage: DEFAULT_SHRINKAGE,
            },
        ]
    }

    /// Fits the learner on weighted rows.
    pub fn fit(
        &self,
        task: Task,
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        w: ArrayView1<'_, f64>,
    ) -> Result<FittedModel> {
        if !self.supports(task) {
            return Err(Error::config(format!("learner {self} does not support task {task:?}")));
        }
        let total: f64 = w.sum();
        if y.is_empty() || !(total > 0.0) {
            return Err(Error::invalid("learner: empty training set"));
        }
        match *self {
            LearnerSpec::SampleMean => {
                let mean = y.iter().zip(w.iter()).map(|(y, w)| y * w).sum::<f64>() / total;
                Ok(FittedModel::Constant(mean))
            }
            LearnerSpec::GlmLogLink => fit_glm(task, x, y, w, 0.0),
            LearnerSpec::GlmLogLinkRidge { lambda } => fit_glm(task, x, y, w, lambda),
            LearnerSpec::LogisticGlm => fit_glm(task, x, y, w, 0.0),
            LearnerSpec::LogisticRidge { lambda } => fit_glm(task, x, y, w, lambda),
            LearnerSpec::BoostedStumps { trees, depth, shrinkage } => {
                BoostedTrees::fit(x, y, w, Loss::Squared, trees, depth, shrinkage).map(FittedModel::Boosted)
            }
            LearnerSpec::LogisticBoostedStumps { trees, depth, shrinkage } => {
                BoostedTrees::fit(x, y, w, Loss::Logistic, trees, depth, shrinkage).map(FittedModel::Boosted)
            }
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerSpec::SampleMean => write!(f, "sample_mean"),
            LearnerSpec::GlmLogLink => write!(f, "glm_log_link"),
            LearnerSpec::GlmLogLinkRidge { lambda } => write!(f, "glm_log_link_ridge({lambda})"),
            LearnerSpec::BoostedStumps { trees, depth, shrinkage } => {
                write!(f, "boosted_stumps({trees},{depth},{shrinkage})")
            }
            LearnerSpec::LogisticGlm => write!(f, "logistic_glm"),
            LearnerSpec::LogisticRidge { lambda } => write!(f, "logistic_ridge({lambda})"),
            LearnerSpec::LogisticBoostedStumps { trees, depth, shrinkage } => {
                write!(f, "logistic_boosted_stumps({trees},{depth},{shrinkage})")
            }
        }
    }
}

/// Column centering and scaling learned on training rows; constant columns are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    columns: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows() as f64;
        let mut columns = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for (k, col) in x.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                columns.push(k);
                center.push(m);
                scale.push(sd);
            }
        }
        Self { columns, center, scale }
    }

    fn transform(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.columns.len()));
        for (c, &k) in self.columns.iter().enumerate() {
            for i in 0..x.nrows() {
                out[[i, c]] = (x[[i, k]] - self.center[c]) / self.scale[c];
            }
        }
        out
    }
}

fn fit_glm(task: Task, x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, ridge: f64) -> Result<FittedModel> {
    let std = Standardizer::fit(x);
    let z = std.transform(x);
    let offset = Array1::zeros(y.len());
    let fit = match task {
        Task::RegressionNonneg => glm::fit_weighted_poisson(z.view(), y, w, offset.view(), ridge)?,
        Task::Binary => glm::fit_weighted_logistic(z.view(), y, w, offset.view(), ridge)?,
    };
    if !fit.converged {
        return Err(Error::numerical(format!(
            "glm did not converge after {} iterations (score norm {:.3e})",
            fit.iterations, fit.final_score_norm
        )));
    }
    Ok(FittedModel::Glm { task, standardizer: std, coefficients: fit.coefficients })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    Constant(f64),
    Glm { task: Task, standardizer: Standardizer, coefficients: Vec<f64> },
    Boosted(BoostedTrees),
}

impl FittedModel {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        match self {
            FittedModel::Constant(c) => Array1::from_elem(x.nrows(), *c),
            FittedModel::Glm { task, standardizer, coefficients } => {
                let z = standardizer.transform(x);
                z.rows()
                    .into_iter()
                    .map(|row| {
                        let eta = coefficients[0] + row.iter().zip(&coefficients[1..]).map(|(a, b)| a * b).sum::<f64>();
                        match task {
                            Task::RegressionNonneg => eta.min(700.0).exp(),
                            Task::Binary => expit(eta),
                        }
                    })
                    .collect()
            }
            FittedModel::Boosted(b) => x.rows().into_iter().map(|r| b.predict_row(r)).collect(),
        }
    }
}
