//! Run configuration: a TOML file whose keys can be overridden by flags.

use std::path::{Path, PathBuf};

use imgprep_core::eval::default_qf_grid;
use imgprep_core::labeling::{GroupMode, ScoreSign};
use imgprep_core::metrics::ProxyWeights;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means one per logical core.
    pub workers: usize,
    pub out: PathBuf,
    /// Corpus manifest (JSON lines of `{id, path, split}`).
    pub corpus: Option<PathBuf>,
    /// Network checkpoint; defaults to `<out>/unet.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub score_sign: ScoreSign,
    pub operators: OperatorConfig,
    pub groups: GroupConfig,
    pub codec: CodecConfig,
    pub metric: MetricConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out: PathBuf::from("imgprep-out"),
            corpus: None,
            checkpoint: None,
            score_sign: ScoreSign::Default,
            operators: OperatorConfig::default(),
            groups: GroupConfig::default(),
            codec: CodecConfig::default(),
            metric: MetricConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    /// Pool members in enumeration order.
    pub pool: Vec<String>,
    pub nlm_h: f64,
    pub nlm_template: usize,
    pub nlm_search: usize,
    pub deblock_strength: f64,
    pub reencode_quality: u8,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            pool: ["nlm", "detail", "deblock", "reencode"].map(String::from).to_vec(),
            nlm_h: 10.0,
            nlm_template: 7,
            nlm_search: 21,
            deblock_strength: 0.5,
            reencode_quality: 84,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    pub mode: GroupMode,
    pub k_max: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self { mode: GroupMode::Combinations, k_max: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub name: String,
    pub qf: u8,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { name: "jpeg".into(), qf: 75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub name: String,
    pub proxy: ProxyWeights,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { name: "proxy-nr".into(), proxy: ProxyWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub base_channels: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Only labels from this corpus split are used.
    pub split: String,
    /// Zero the final projection before training so the net starts as
    /// the identity map.
    pub identity_init: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 4, lr: 1e-4, base_channels: 16, patch_size: 64, patch_stride: 32, split: "train".into(), identity_init: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Operator ids (or `unet`) compared against the Original row.
    pub preprocessors: Vec<String>,
    pub codecs: Vec<String>,
    pub qf_grid: Vec<u8>,
    /// Restrict to one corpus split; all entries when unset.
    pub split: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { preprocessors: vec!["nlm".into(), "unet".into()], codecs: vec!["jpeg".into()], qf_grid: default_qf_grid(), split: None }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("unet.ckpt"))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(1..=100).contains(&self.codec.qf) {
            return Err(format!("qf must be in 1..=100, got {}", self.codec.qf));
        }
        if self.eval.qf_grid.iter().any(|q| !(1..=100).contains(q)) {
            return Err("eval.qf_grid values must be in 1..=100".into());
        }
        if self.train.batch_size == 0 {
            return Err("train.batch_size must be >= 1".into());
        }
        if self.train.patch_size == 0 || self.train.patch_size % 4 != 0 {
            return Err(format!("train.patch_size must be a positive multiple of 4, got {}", self.train.patch_size));
        }
        if self.train.patch_stride == 0 {
            return Err("train.patch_stride must be >= 1".into());
        }
        Ok(())
    }
}
