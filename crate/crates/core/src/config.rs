//! Run configuration shared by the library pipeline and the command line.
//!
//! A config is a TOML document; every key has a default, so an empty file
//! is a valid desk-scale run. Artifacts carry hashes of the config sections
//! that determine them, which lets later stages reject stale inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::scm::ScmSettings;
use crate::selectors::{GumbelConfig, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Preferential-attachment graph with standard-normal covariates.
    Synthetic { nodes: usize, attachment: usize },
    /// Edge list, optionally with a CSV of node covariates. Without one,
    /// covariates are synthesized.
    File { edges: PathBuf, features: Option<PathBuf> },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic { nodes: 1000, attachment: 3 }
    }
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Synthetic { nodes, attachment } => format!("synthetic-n{nodes}-m{attachment}"),
            DatasetSpec::File { edges, .. } => {
                edges.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "file".into())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImConfig {
    pub simulations: usize,
    pub p_ic: f64,
}

impl Default for ImConfig {
    fn default() -> Self {
        ImConfig { simulations: 100, p_ic: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub budgets: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub methods: Vec<Method>,
    /// Percentage of nodes placed in the source group.
    pub split_percent: f64,
    pub samples: usize,
    pub covariate_dim: usize,
    /// Random subsets in the RMSE pool.
    pub pool_size: usize,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub scm: ScmSettings,
    pub estimator: EstimatorConfig,
    pub gumbel: GumbelConfig,
    pub im: ImConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![1, 2, 3, 4, 5],
            budgets: vec![5, 10, 15, 20, 30, 50],
            lambdas: vec![0.5],
            methods: vec![
                Method::CaumaxD,
                Method::CaumaxG,
                Method::Degree,
                Method::Im,
                Method::Random,
                Method::OracleGreedy,
            ],
            split_percent: 15.0,
            samples: 2000,
            covariate_dim: 8,
            pool_size: 200,
            out_dir: PathBuf::from("caumax-out"),
            dataset: DatasetSpec::default(),
            scm: ScmSettings::default(),
            estimator: EstimatorConfig::default(),
            gumbel: GumbelConfig::default(),
            im: ImConfig::default(),
        }
    }
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn toml_of<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config sections serialize")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml_of(self)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if self.seeds.is_empty() {
            return usage("at least one seed is required".into());
        }
        if self.methods.is_empty() {
            return usage("at least one method is required".into());
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return usage("lambda list must be non-empty and non-negative".into());
        }
        if !(self.split_percent > 0.0 && self.split_percent <= 100.0) {
            return usage(format!("split_percent {} outside (0, 100]", self.split_percent));
        }
        if self.samples == 0 || self.covariate_dim == 0 || self.pool_size == 0 {
            return usage("samples, covariate_dim and pool_size must be positive".into());
        }
        if let DatasetSpec::Synthetic { nodes, attachment } = self.dataset {
            if attachment == 0 || nodes <= attachment + 1 {
                return usage(format!("synthetic graph needs nodes > attachment + 1 ≥ 2, got {nodes}/{attachment}"));
            }
        }
        self.estimator.validate()?;
        self.gumbel.validate()?;
        if self.im.simulations == 0 || !(self.im.p_ic > 0.0 && self.im.p_ic <= 1.0) {
            return usage("im.simulations must be positive and im.p_ic in (0, 1]".into());
        }
        Ok(())
    }

    pub fn max_budget(&self) -> usize {
        self.budgets.iter().copied().max().unwrap_or(0)
    }

    /// Hash of everything that determines the network and observational data.
    pub fn data_hash(&self) -> String {
        let d = toml_of(&self.dataset);
        let s = toml_of(&self.scm);
        let rest = format!("{:?}|{}|{}", self.split_percent, self.samples, self.covariate_dim);
        digest(&["data", &d, &s, &rest])
    }

    pub fn model_hash(&self) -> String {
        digest(&["model", &self.data_hash(), &toml_of(&self.estimator)])
    }

    pub fn selection_hash(&self) -> String {
        let lists = format!("{:?}|{:?}|{:?}", self.methods, self.budgets, self.lambdas);
        digest(&["select", &self.model_hash(), &toml_of(&self.gumbel), &toml_of(&self.im), &lists])
    }

    pub fn evaluation_hash(&self) -> String {
        digest(&["evaluate", &self.selection_hash(), &self.pool_size.to_string()])
    }
}
