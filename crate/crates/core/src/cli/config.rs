use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ArchConfig;
use crate::costmodel::{EnergyParams, Metric};
use crate::error::{Error, Result};
use crate::runtime::BranchPolicy;
use crate::training::TrainConfig;

/// Run configuration as written by the user: a sectioned TOML file whose
/// every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub cost: CostSection,
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Preset name, or a path to an architecture TOML file.
    pub arch: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    /// Metric of the resource term during training.
    pub metric: String,
    /// Metric for evaluation, budgets and reports.
    pub report_metric: String,
    pub energy: EnergyParams,
    pub policy: BranchPolicy,
}

/// A named schedule plus per-field overrides of [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub preset: String,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            data: DataSection::default(),
            cost: CostSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { arch: "toy".into() }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { preset: "synthetic".into(), root: None }
    }
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection { metric: "uniform".into(), report_metric: "flops".into(), energy: EnergyParams::default(), policy: BranchPolicy::Always }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { preset: "toy".into(), overrides: toml::Table::new() }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<String>,
    pub data_root: Option<PathBuf>,
    pub arch: Option<String>,
    pub metric: Option<String>,
    pub target_skip: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("run config: {}", e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(d) = &o.dataset {
            self.data.preset = d.clone();
        }
        if let Some(r) = &o.data_root {
            self.data.root = Some(r.clone());
        }
        if let Some(a) = &o.arch {
            self.model.arch = a.clone();
        }
        if let Some(m) = &o.metric {
            self.cost.metric = m.clone();
        }
        if let Some(t) = o.target_skip {
            self.train.overrides.insert("target_skip".into(), toml::Value::Float(t));
        }
    }

    /// Materializes every default and validates the result.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let arch = if looks_like_path(&self.model.arch) {
            let text = std::fs::read_to_string(&self.model.arch)
                .map_err(|e| Error::Config(format!("cannot read architecture file {}: {}", self.model.arch, e)))?;
            ArchConfig::from_toml(&text)?
        } else {
            ArchConfig::preset(&self.model.arch)?
        };
        arch.validate()?;
        if self.train.overrides.contains_key("seed") {
            return Err(Error::Config("set the seed at the top level, not under [train]".into()));
        }
        let mut table = toml::Table::try_from(TrainConfig::preset(&self.train.preset)?)
            .map_err(|e| Error::Config(format!("training preset: {}", e)))?;
        for (k, v) in &self.train.overrides {
            table.insert(k.clone(), v.clone());
        }
        let mut train: TrainConfig = table.try_into().map_err(|e| Error::Config(format!("[train]: {}", e)))?;
        train.seed = self.seed;
        train.validate()?;
        let resolved = ResolvedConfig {
            seed: self.seed,
            arch_source: self.model.arch.clone(),
            arch,
            dataset: self.data.preset.clone(),
            data_root: self.data.root.clone(),
            metric: Metric::parse(&self.cost.metric, self.cost.energy)?,
            report_metric: Metric::parse(&self.cost.report_metric, self.cost.energy)?,
            policy: self.cost.policy,
            train,
        };
        if matches!(resolved.report_metric, Metric::Uniform) {
            return Err(Error::Config("report_metric must be flops or energy".into()));
        }
        Ok(resolved)
    }
}

fn looks_like_path(s: &str) -> bool {
    s.ends_with(".toml") || s.contains('/') || s.contains('\\')
}

/// Everything a run depends on, with defaults filled in. The output
/// directory is deliberately absent so identical experiments written to
/// different directories echo identical configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub arch_source: String,
    pub arch: ArchConfig,
    pub dataset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub metric: Metric,
    pub report_metric: Metric,
    pub policy: BranchPolicy,
    pub train: TrainConfig,
}

impl ResolvedConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {}", e)))
    }
}
