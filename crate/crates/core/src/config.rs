//! Run configuration read from a TOML file; command-line flags override it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adjusted::{Method, TmleMode};
use crate::centering::CenteringSpec;
use crate::data::IngestSchema;
use crate::error::{Error, Result};
use crate::inference::{DEFAULT_ALPHA, DEFAULT_B};
use crate::learners::LearnerMenu;
use crate::pipeline::{Estimand, EstimateOptions};
use crate::sim::{MeanKind, NuisanceSource, SimConfig, SimMethod};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub counts: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub exposure: Option<String>,
    pub covariates: Vec<String>,
    pub sample_id: Option<String>,
    pub delimiter: Option<char>,
}

impl DataConfig {
    pub fn schema(&self) -> Result<IngestSchema> {
        let exposure = self.exposure.clone().ok_or_else(|| Error::config("missing exposure column (--exposure)"))?;
        let mut s = IngestSchema::new(exposure, self.covariates.clone());
        s.sample_id = self.sample_id.clone();
        if let Some(d) = self.delimiter {
            s.delimiter = d;
        }
        Ok(s)
    }

    pub fn paths(&self) -> Result<(&Path, &Path)> {
        let counts = self.counts.as_deref().ok_or_else(|| Error::config("missing outcome table (--counts)"))?;
        let meta = self.meta.as_deref().ok_or_else(|| Error::config("missing metadata table (--meta)"))?;
        Ok((counts, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub estimand: Estimand,
    pub method: Option<Method>,
    pub tmle_mode: TmleMode,
    /// Centering as text (`none`, `mean`, `ref:<category>`, `smedian:<eps>`);
    /// reference names are resolved against the loaded categories.
    pub center: Option<String>,
    pub k: usize,
    pub v: usize,
    pub b: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        let d = EstimateOptions::default();
        Self {
            estimand: d.estimand,
            method: None,
            tmle_mode: d.tmle_mode,
            center: None,
            k: d.k,
            v: d.v,
            b: DEFAULT_B,
            alpha: DEFAULT_ALPHA,
            seed: d.seed,
        }
    }
}

impl EstimateConfig {
    /// Builds estimator options, resolving the centering against `category_names`.
    pub fn options(&self, learners: &LearnerMenu, category_names: &[String]) -> Result<EstimateOptions> {
        let centering = self.center.as_deref().map(|c| CenteringSpec::parse(c, category_names)).transpose()?;
        let opts = EstimateOptions {
            estimand: self.estimand,
            method: self.method,
            tmle_mode: self.tmle_mode,
            centering,
            k: self.k,
            v: self.v,
            b: self.b,
            alpha: self.alpha,
            seed: self.seed,
            learners: learners.clone(),
        };
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub mean: MeanKind,
    pub n: Option<usize>,
    pub j: Option<usize>,
    pub reps: Option<usize>,
    pub seed: u64,
    /// 51 categories and 500 replicates unless `j` or `reps` are given.
    pub full_scale: bool,
    pub fix_permutations: bool,
    pub methods: Vec<SimMethod>,
    /// Study target; its centering comes from `center` (mean by default).
    pub target: Estimand,
    pub center: Option<String>,
    pub nuisances: NuisanceSource,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            mean: MeanKind::GammaA,
            n: None,
            j: None,
            reps: None,
            seed: 1,
            full_scale: false,
            fix_permutations: false,
            methods: vec![SimMethod::Psi1Plugin, SimMethod::Psi2Tmle, SimMethod::Psi2Onestep],
            target: Estimand::Psi2g,
            center: None,
            nuisances: NuisanceSource::Learned,
        }
    }
}

impl SimulateConfig {
    /// Resolves the study configuration; estimator settings come from the
    /// estimate section and the learner menu.
    pub fn sim_config(&self, est: &EstimateConfig, learners: &LearnerMenu) -> Result<SimConfig> {
        let base = if self.full_scale { SimConfig::full_scale(self.mean) } else { SimConfig::default() };
        let cfg = SimConfig {
            n: self.n.unwrap_or(base.n),
            j: self.j.unwrap_or(base.j),
            replicates: self.reps.unwrap_or(base.replicates),
            mean_kind: self.mean,
            seed: self.seed,
            fix_permutations: self.fix_permutations,
            estimator: EstimateOptions {
                tmle_mode: est.tmle_mode,
                k: est.k,
                v: est.v,
                b: est.b,
                alpha: est.alpha,
                learners: learners.clone(),
                ..EstimateOptions::default()
            },
            ..base
        };
        cfg.validate()?;
        cfg.estimator.validate()?;
        Ok(cfg)
    }

    pub fn centering(&self, j: usize) -> Result<CenteringSpec> {
        if !self.target.centered() {
            return Ok(CenteringSpec::None);
        }
        let names: Vec<String> = (1..=j).map(|k| format!("c{k}")).collect();
        match self.center.as_deref() {
            None => Ok(CenteringSpec::Mean),
            Some(c) => CenteringSpec::parse(c, &names),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub out: Option<PathBuf>,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
}

/// Build information recorded in run manifests; ignored on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub package: String,
    pub version: String,
    pub command: String,
}

impl Provenance {
    pub fn current(command: &str) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub estimate: EstimateConfig,
    pub learners: LearnerMenu,
    pub simulate: SimulateConfig,
    pub output: OutputConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            estimate: EstimateConfig::default(),
            learners: LearnerMenu::default(),
            simulate: SimulateConfig::default(),
            output: OutputConfig::default(),
            provenance: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot serialize configuration: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.data.counts = Some("w.csv".into());
        c.data.covariates = vec!["age".into(), "site".into()];
        c.estimate.center = Some("ref:taxonA".into());
        c.estimate.method = Some(Method::Onestep);
        c.provenance = Some(Provenance::current("estimate"));
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c = RunConfig::from_toml_str(
            r#"
            [estimate]
            estimand = "psi1g"
            center = "mean"
            k = 3
            [learners]
            propensity = [{ id = "sample_mean" }]
            presence = [{ id = "sample_mean" }]
            intensity = [{ id = "glm_log_link_ridge", lambda = 0.5 }]
            "#,
        )
        .unwrap();
        assert_eq!(c.estimate.estimand, Estimand::Psi1g);
        assert_eq!(c.estimate.k, 3);
        assert_eq!(c.estimate.v, 5);
        assert!(RunConfig::from_toml_str("[estimate]\nfolds = 3").is_err());
    }

    #[test]
    fn options_check_compatibility() {
        let names = vec!["a".to_string(), "b".to_string()];
        let e = EstimateConfig { estimand: Estimand::Psi1, method: Some(Method::Tmle), ..EstimateConfig::default() };
        assert!(e.options(&LearnerMenu::default(), &names).is_err());
        let e = EstimateConfig { center: Some("ref:b".into()), ..EstimateConfig::default() };
        let o = e.options(&LearnerMenu::default(), &names).unwrap();
        assert_eq!(o.centering, Some(CenteringSpec::Reference { index: 1 }));
    }

    #[test]
    fn simulate_scales() {
        let s = SimulateConfig { full_scale: true, ..SimulateConfig::default() };
        let c = s.sim_config(&EstimateConfig::default(), &LearnerMenu::default()).unwrap();
        assert_eq!((c.j, c.replicates, c.n), (51, 500, 100));
        let s = SimulateConfig::default();
        let c = s.sim_config(&EstimateConfig::default(), &LearnerMenu::default()).unwrap();
        assert_eq!((c.j, c.replicates), (11, 300));
    }
}
