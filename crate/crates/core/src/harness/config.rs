// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignTrainConfig, SelectionMetric};
use crate::divergence::DivergenceParams;
use crate::error::{Error, Result};
use crate::neural::MlpConfig;
use crate::synthdata::{DatasetConfig, Scheme, DEFAULT_TRAIN_FRACTION};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "REPDIV_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "das")]
    Das,
    #[serde(rename = "cl")]
    Cl,
    #[serde(rename = "das+cl")]
    DasCl,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "das" => Ok(LossKind::Das),
            "cl" => Ok(LossKind::Cl),
            "das+cl" => Ok(LossKind::DasCl),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected das, cl or das+cl)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Das => "das",
            LossKind::Cl => "cl",
            LossKind::DasCl => "das+cl",
        })
    }
}

/// Loss weights of one alignment training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossMode {
    DasOnly,
    ClOnly,
    DasPlusCl(f64),
}

impl LossMode {
    pub fn kind(self) -> LossKind {
        match self {
            LossMode::DasOnly => LossKind::Das,
            LossMode::ClOnly => LossKind::Cl,
            LossMode::DasPlusCl(_) => LossKind::DasCl,
        }
    }

    /// `(behavioral_weight, cl_weight)`.
    pub fn weights(self) -> (f64, f64) {
        match self {
            LossMode::DasOnly => (1.0, 0.0),
            LossMode::ClOnly => (0.0, 1.0),
            LossMode::DasPlusCl(eps) => (1.0, eps),
        }
    }

    /// Behavioural trainings keep the best-IIA alignment, CL-only trainings
    /// the lowest row EMD.
    pub fn selection_metric(self) -> SelectionMetric {
        match self {
            LossMode::ClOnly => SelectionMetric::BestEmd,
            _ => SelectionMetric::BestIia,
        }
    }

    pub fn cl_eps(self) -> f64 {
        self.weights().1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Balanced intervention samples used for IIA, split evenly over classes.
    pub iia_samples: usize,
    /// Cap on each side of a divergence comparison.
    pub divergence_samples: usize,
    /// Skip the nearest-neighbour, pairing, local and KDE metrics.
    pub emd_only: bool,
    pub divergence: DivergenceParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iia_samples: 2000, divergence_samples: 1000, emd_only: false, divergence: DivergenceParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub loss: LossKind,
    /// Weight of the CL term when `loss = "das+cl"`.
    pub cl_eps: f64,
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub output_dir: Option<PathBuf>,
    /// Also write model and alignment checkpoints.
    pub save_checkpoints: bool,
    pub dataset: DatasetConfig,
    pub mlp: MlpConfig,
    pub align: AlignTrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Default,
            loss: LossKind::Das,
            cl_eps: 1.0,
            seeds: vec![0, 1, 2, 3, 4],
            train_fraction: DEFAULT_TRAIN_FRACTION,
            output_dir: None,
            save_checkpoints: true,
            dataset: DatasetConfig::default(),
            mlp: MlpConfig::default(),
            align: AlignTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn loss_mode(&self) -> LossMode {
        match self.loss {
            LossKind::Das => LossMode::DasOnly,
            LossKind::Cl => LossMode::ClOnly,
            LossKind::DasCl => LossMode::DasPlusCl(self.cl_eps),
        }
    }

    pub fn set_loss_mode(&mut self, mode: LossMode) {
        self.loss = mode.kind();
        if let LossMode::DasPlusCl(eps) = mode {
            self.cl_eps = eps;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.mlp.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.cl_eps > 0.0) && self.loss == LossKind::DasCl {
            return Err(Error::Config("cl_eps must be positive for das+cl".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.mlp.input_dim != self.dataset.dim() {
            return Err(Error::Config(format!(
                "mlp.input_dim is {} but the dataset has {} dimensions",
                self.mlp.input_dim,
                self.dataset.dim()
            )));
        }
        if self.mlp.n_classes != self.dataset.grid().n_classes() {
            return Err(Error::Config(format!(
                "mlp.n_classes is {} but the grid has {} classes",
                self.mlp.n_classes,
                self.dataset.grid().n_classes()
            )));
        }
        if self.eval.iia_samples == 0 || self.eval.divergence_samples == 0 {
            return Err(Error::Config("evaluation sample counts must be positive".into()));
        }
        self.align_for(0, 0).validate()
    }

    /// Alignment settings for one seed and trained partition, with the loss
    /// weights and selection rule of the configured loss mode.
    pub fn align_for(&self, seed: u64, partition: usize) -> AlignTrainConfig {
        let mode = self.loss_mode();
        let (behavioral_weight, cl_weight) = mode.weights();
        AlignTrainConfig {
            behavioral_weight,
            cl_weight,
            selection_metric: mode.selection_metric(),
            seed: seed.wrapping_mul(2).wrapping_add(partition as u64),
            ..self.align.clone()
        }
    }

    /// `--out`, then the config, then `$REPDIV_OUT`, then `./repdiv-out`.
    pub fn resolve_output(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("repdiv-out"))
    }
}

/// Replace the value at a dotted key path such as `align.learning_rate`.
pub fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}`: not a table above `{part}`")))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        node = table.entry((*part).to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config("empty key".into()))
}

/// Apply `key=value` overrides (values in TOML syntax) to a config.
pub fn with_overrides(config: &ExperimentConfig, overrides: &[(String, toml::Value)]) -> Result<ExperimentConfig> {
    let mut value = toml::Value::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
    for (key, v) in overrides {
        set_dotted(&mut value, key, v.clone())?;
    }
    let out: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override: {e}")))?;
    out.validate()?;
    Ok(out)
}

/// Parse a TOML scalar or array, treating bare words as strings.
pub fn parse_toml_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}
