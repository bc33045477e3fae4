//! Output files: result tables, diagnostics, simulation summaries and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Provenance, RunConfig};
use crate::error::{Error, Result};
use crate::pipeline::EstimateResult;
use crate::sim::SimReport;

/// Serializes non-finite floats as missing values and reads missing values
/// back as `NaN`, so tables round-trip through CSV and JSON.
mod nan_as_missing {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub category: String,
    #[serde(with = "nan_as_missing")]
    pub estimate: f64,
    #[serde(with = "nan_as_missing")]
    pub se: f64,
    #[serde(with = "nan_as_missing")]
    pub ci_lower: f64,
    #[serde(with = "nan_as_missing")]
    pub ci_upper: f64,
    #[serde(with = "nan_as_missing")]
    pub sim_lower: f64,
    #[serde(with = "nan_as_missing")]
    pub sim_upper: f64,
    #[serde(with = "nan_as_missing")]
    pub p_value: f64,
    pub estimable: bool,
    pub flags: String,
}

/// Structured form of the results, written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub estimand: String,
    pub method: String,
    pub centering: String,
    pub n: usize,
    #[serde(with = "nan_as_missing")]
    pub crit_marginal: f64,
    #[serde(with = "nan_as_missing")]
    pub crit_simultaneous: f64,
    pub rows: Vec<ResultRow>,
}

impl ResultsDocument {
    pub fn from_result(r: &EstimateResult) -> Self {
        let rows = (0..r.category_names.len())
            .map(|j| ResultRow {
                category: r.category_names[j].clone(),
                estimate: r.estimate[j],
                se: r.se[j],
                ci_lower: r.ci_marginal[[j, 0]],
                ci_upper: r.ci_marginal[[j, 1]],
                sim_lower: r.ci_simultaneous[[j, 0]],
                sim_upper: r.ci_simultaneous[[j, 1]],
                p_value: r.p_values[j],
                estimable: r.estimable[j],
                flags: r.flags[j].clone(),
            })
            .collect();
        Self {
            estimand: r.estimand.to_string(),
            method: r.method.to_string(),
            centering: r.centering.to_string(),
            n: r.n,
            crit_marginal: r.crit_marginal,
            crit_simultaneous: r.crit_simultaneous,
            rows,
        }
    }
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::File { path: path.to_path_buf(), message: e.to_string() }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| file_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| file_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| file_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| file_err(path, e))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| file_err(path, e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_results_json(path: &Path) -> Result<ResultsDocument> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerWeightRow {
    pub fold: usize,
    pub category: String,
    pub task: String,
    pub learner: String,
    pub weight: f64,
    #[serde(with = "nan_as_missing")]
    pub cv_risk: f64,
}

fn learner_weight_rows(r: &EstimateResult) -> Vec<LearnerWeightRow> {
    let mut rows = Vec::new();
    for rec in &r.diagnostics.learner_weights {
        let category = rec.category.map(|j| r.category_names[j].clone()).unwrap_or_default();
        let task = serde_json::to_value(rec.task).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        for ((learner, w), risk) in rec.learners.iter().zip(&rec.weights).zip(&rec.cv_risk) {
            rows.push(LearnerWeightRow {
                fold: rec.fold,
                category: category.clone(),
                task: task.clone(),
                learner: learner.clone(),
                weight: *w,
                cv_risk: *risk,
            });
        }
    }
    rows
}

pub fn write_manifest(path: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let mut c = cfg.clone();
    c.provenance = Some(Provenance::current(command));
    // the output directory is where the manifest lives, not part of the run
    c.output.out = None;
    fs::write(path, c.to_toml_string()?)?;
    Ok(())
}

/// Paths written by [`write_estimate_outputs`].
#[derive(Debug, Clone)]
pub struct EstimateOutputs {
    pub results_csv: PathBuf,
    pub results_json: PathBuf,
    pub diagnostics_json: PathBuf,
    pub learner_weights_csv: PathBuf,
    pub manifest: PathBuf,
}

impl EstimateOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            results_csv: dir.join("results.csv"),
            results_json: dir.join("results.json"),
            diagnostics_json: dir.join("diagnostics.json"),
            learner_weights_csv: dir.join("learner_weights.csv"),
            manifest: dir.join("manifest.toml"),
        }
    }
}

pub fn write_estimate_outputs(dir: &Path, r: &EstimateResult, cfg: &RunConfig) -> Result<EstimateOutputs> {
    fs::create_dir_all(dir)?;
    let out = EstimateOutputs::in_dir(dir);
    let doc = ResultsDocument::from_result(r);
    write_csv(&out.results_csv, &doc.rows)?;
    write_json(&out.results_json, &doc)?;
    write_json(&out.diagnostics_json, &r.diagnostics)?;
    write_csv(&out.learner_weights_csv, &learner_weight_rows(r))?;
    write_manifest(&out.manifest, cfg, "estimate")?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummaryRow {
    pub method: String,
    pub j: usize,
    pub truth: f64,
    pub n_defined: usize,
    pub n_failed: usize,
    #[serde(with = "nan_as_missing")]
    pub mean: f64,
    #[serde(with = "nan_as_missing")]
    pub bias: f64,
    #[serde(with = "nan_as_missing")]
    pub bias_mc_se: f64,
    #[serde(with = "nan_as_missing")]
    pub variance: f64,
    #[serde(with = "nan_as_missing")]
    pub mse: f64,
    #[serde(with = "nan_as_missing")]
    pub mse_mc_se: f64,
    #[serde(with = "nan_as_missing")]
    pub coverage_marginal: f64,
    #[serde(with = "nan_as_missing")]
    pub coverage_simultaneous: f64,
    #[serde(with = "nan_as_missing")]
    pub width_marginal: f64,
    #[serde(with = "nan_as_missing")]
    pub width_simultaneous: f64,
}

/// Long-format plot data: one row per method and category index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub method: String,
    pub j: usize,
    #[serde(with = "nan_as_missing")]
    pub mse: f64,
    #[serde(with = "nan_as_missing")]
    pub log_mse: f64,
    #[serde(with = "nan_as_missing")]
    pub coverage: f64,
    #[serde(with = "nan_as_missing")]
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub method: String,
    pub j: usize,
    #[serde(with = "nan_as_missing")]
    pub estimate: f64,
    #[serde(with = "nan_as_missing")]
    pub se: f64,
    #[serde(with = "nan_as_missing")]
    pub ci_lower: f64,
    #[serde(with = "nan_as_missing")]
    pub ci_upper: f64,
    #[serde(with = "nan_as_missing")]
    pub sim_lower: f64,
    #[serde(with = "nan_as_missing")]
    pub sim_upper: f64,
    pub error: String,
}

pub fn sim_summary_rows(rep: &SimReport) -> Vec<SimSummaryRow> {
    rep.methods
        .iter()
        .flat_map(|m| {
            m.categories.iter().map(move |c| SimSummaryRow {
                method: m.method.to_string(),
                j: c.j,
                truth: c.truth,
                n_defined: c.n_defined,
                n_failed: m.n_failed,
                mean: c.mean,
                bias: c.bias,
                bias_mc_se: c.bias_mc_se,
                variance: c.variance,
                mse: c.mse,
                mse_mc_se: c.mse_mc_se,
                coverage_marginal: c.coverage_marginal,
                coverage_simultaneous: c.coverage_simultaneous,
                width_marginal: c.width_marginal,
                width_simultaneous: c.width_simultaneous,
            })
        })
        .collect()
}

pub fn plot_rows(rep: &SimReport) -> Vec<PlotRow> {
    rep.methods
        .iter()
        .flat_map(|m| {
            m.categories.iter().map(move |c| PlotRow {
                method: m.method.to_string(),
                j: c.j,
                mse: c.mse,
                log_mse: c.mse.ln(),
                coverage: c.coverage_marginal,
                width: c.width_marginal,
            })
        })
        .collect()
}

fn replicate_rows(rep: &SimReport) -> Vec<ReplicateRow> {
    rep.replicates
        .iter()
        .flat_map(|r| {
            (0..r.estimate.len()).map(move |j| ReplicateRow {
                replicate: r.replicate,
                method: r.method.to_string(),
                j: j + 1,
                estimate: r.estimate[j],
                se: r.se[j],
                ci_lower: r.ci_lower[j],
                ci_upper: r.ci_upper[j],
                sim_lower: r.sim_lower[j],
                sim_upper: r.sim_upper[j],
                error: r.error.clone().unwrap_or_default(),
            })
        })
        .collect()
}

pub fn write_sim_outputs(dir: &Path, rep: &SimReport, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("sim_summary.csv"), &sim_summary_rows(rep))?;
    write_csv(&dir.join("plot_data.csv"), &plot_rows(rep))?;
    write_csv(&dir.join("replicates.csv"), &replicate_rows(rep))?;
    write_json(&dir.join("sim_report.json"), rep)?;
    write_manifest(&dir.join("manifest.toml"), cfg, "simulate")
}
