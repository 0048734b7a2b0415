//! Run configuration: paper defaults, config files, flag overrides.
//!
//! Precedence is strict: command-line flags beat config-file values,
//! which beat the built-in defaults reproducing the published training
//! settings. A config file is TOML; a run manifest (JSON, written by
//! `train` and `ablate`) can be re-fed through `--config` and yields the
//! same resolved configuration, so splits and schedules reproduce.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use drvnet::data::Dataset;
use drvnet::evaluation::RunSummary;
use drvnet::loss::LossWeights;
use drvnet::network::{ModelConfig, SPATIAL_MULTIPLE};
use drvnet::training::{Phase, TrainSchedule};
use drvnet::{Error, Result};

// ---------------------------------------------------------------------------
// Ablation variants
// ---------------------------------------------------------------------------

/// The four ablation arms. The first three train the backbone alone
/// under different loss weightings; `FullBcd` is the complete cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone under binary cross-entropy only (λ₂ = 0).
    Bc,
    /// Backbone under Dice only (λ₁ = 0).
    D,
    /// Backbone under the composite loss.
    Bcd,
    /// Backbone plus fine-tune tail under the composite loss.
    FullBcd,
}

impl Variant {
    /// Ablation-table order.
    pub const ALL: [Variant; 4] = [Variant::Bc, Variant::D, Variant::Bcd, Variant::FullBcd];

    /// Row label in the consolidated ablation table.
    pub fn row_name(self) -> &'static str {
        match self {
            Variant::Bc => "Backbone with BC",
            Variant::D => "Backbone with D",
            Variant::Bcd => "Backbone with BC&D",
            Variant::FullBcd => "Full Net. with BC&D",
        }
    }

    /// Short tag used for directory names and config files.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Bc => "bc",
            Variant::D => "d",
            Variant::Bcd => "bcd",
            Variant::FullBcd => "full_bcd",
        }
    }

    /// Only the full cascade trains the fine-tune tail.
    pub fn tail_enabled(self) -> bool {
        matches!(self, Variant::FullBcd)
    }

    /// λ-weighting of the composite loss for this arm.
    pub fn weights(self, lambda1: f64, lambda2: f64, dice_smoothing: f64) -> LossWeights {
        let (lambda1, lambda2) = match self {
            Variant::Bc => (lambda1, 0.0),
            Variant::D => (0.0, lambda2),
            Variant::Bcd | Variant::FullBcd => (lambda1, lambda2),
        };
        LossWeights { lambda1, lambda2, dice_smoothing }
    }
}

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

/// Everything a run needs beyond the dataset files themselves. Defaults
/// reproduce the published settings; the optional fields are desk-scale
/// overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset name: drive | chasedb | stare (case-insensitive).
    pub dataset: String,
    /// Root of the dataset directory tree.
    pub data_root: PathBuf,
    /// Output directory for checkpoints, logs and reports.
    pub out: PathBuf,
    /// Base seed; run `i` uses `seed + i` unless `seeds` is given.
    pub seed: u64,
    /// Number of independent seeded runs.
    pub runs: usize,
    /// Explicit seed list; takes precedence over `seed`/`runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub variant: Variant,
    /// Binarization threshold for masks and confusion counts.
    pub threshold: f64,
    /// Channel width of encoder level 0.
    pub base_channels: usize,
    /// Dropout rate inside the dense sub-blocks.
    pub dropout: f64,
    /// λ₁ weight of the BCE term.
    pub lambda1: f64,
    /// λ₂ weight of the Dice term.
    pub lambda2: f64,
    /// Additive smoothing of the soft Dice ratio.
    pub dice_smoothing: f64,
    /// Initial learning rate.
    pub lr: f64,
    /// Epoch interval between learning-rate divisions.
    pub decay_every: usize,
    /// Factor the learning rate is divided by at each step.
    pub decay_factor: f64,
    /// Epochs per phase, overriding the 150/100 defaults.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Mini-batch size, overriding the per-dataset default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Center-crop every sample to this square side (multiple of 8)
    /// instead of padding to the full dataset geometry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    /// Restrict STARE cross-validation to a single fold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let loss = LossWeights::default();
        RunConfig {
            dataset: "drive".into(),
            data_root: PathBuf::from("."),
            out: PathBuf::from("runs"),
            seed: 1,
            runs: 1,
            seeds: None,
            variant: Variant::FullBcd,
            threshold: 0.5,
            base_channels: model.base_channels,
            dropout: model.dropout_rate,
            lambda1: loss.lambda1,
            lambda2: loss.lambda2,
            dice_smoothing: loss.dice_smoothing,
            lr: 1e-3,
            decay_every: 50,
            decay_factor: 10.0,
            epochs: None,
            batch_size: None,
            patch: None,
            fold: None,
        }
    }
}

impl RunConfig {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_label(&self.dataset)
    }

    /// The seeds the run set will use, in execution order.
    pub fn effective_seeds(&self) -> Result<Vec<u64>> {
        if let Some(list) = &self.seeds {
            if list.is_empty() {
                return Err(Error::Config("explicit seed list is empty".into()));
            }
            return Ok(list.clone());
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        (0..self.runs as u64)
            .map(|i| {
                self.seed
                    .checked_add(i)
                    .ok_or_else(|| Error::Config("seed + runs overflows".into()))
            })
            .collect()
    }

    pub fn model_config(&self, tail_enabled: bool) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            base_channels: self.base_channels,
            dropout_rate: self.dropout,
            tail_enabled,
            ..ModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loss weights for the configured variant.
    pub fn weights(&self) -> LossWeights {
        self.variant
            .weights(self.lambda1, self.lambda2, self.dice_smoothing)
    }

    /// Per-phase schedule with the configured overrides applied.
    pub fn schedule(&self, phase: Phase, dataset: Dataset, seed: u64) -> Result<TrainSchedule> {
        let mut s = TrainSchedule::for_phase(phase, dataset, seed);
        s.initial_lr = self.lr;
        s.decay_every = self.decay_every;
        s.decay_factor = self.decay_factor;
        if let Some(e) = self.epochs {
            s.total_epochs = e;
        }
        if let Some(b) = self.batch_size {
            s.batch_size = b;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let dataset = self.dataset()?;
        if !self.threshold.is_finite() || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if let Some(p) = self.patch {
            if p == 0 || p % SPATIAL_MULTIPLE != 0 {
                return Err(Error::Config(format!(
                    "patch side {p} must be a positive multiple of {SPATIAL_MULTIPLE}"
                )));
            }
        }
        if self.fold.is_some() && dataset != Dataset::Stare {
            return Err(Error::Config(
                "--fold applies only to STARE cross-validation".into(),
            ));
        }
        self.weights().validate()?;
        self.model_config(self.variant.tail_enabled())?;
        self.effective_seeds()?;
        Ok(())
    }

    /// Hash of the canonical JSON form; identifies the exact settings in
    /// manifests.
    pub fn sha256(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            acc.push_str(&format!("{b:02x}"));
            acc
        })
    }
}

// ---------------------------------------------------------------------------
// Command-line overrides
// ---------------------------------------------------------------------------

/// Flag-level settings; `None` means the flag was absent and the
/// config-file or default value stands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Dataset to operate on: drive | chasedb | stare
    #[arg(long, value_name = "NAME")]
    pub dataset: Option<String>,
    /// Root directory of the dataset tree
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Output directory for checkpoints, logs and reports
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Ablation arm to run
    #[arg(long, value_enum, value_name = "ARM")]
    pub variant: Option<Variant>,
    /// Number of independent seeded runs (seed, seed+1, …)
    #[arg(long, value_name = "N")]
    pub seeds: Option<usize>,
    /// Base seed for splits, initialization and shuffling
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Restrict STARE cross-validation to fold K
    #[arg(long, value_name = "K")]
    pub fold: Option<usize>,
    /// Binarization threshold
    #[arg(long, value_name = "T")]
    pub threshold: Option<f64>,
    /// Channel width of encoder level 0
    #[arg(long, value_name = "N")]
    pub base_channels: Option<usize>,
    /// Dropout rate inside the dense sub-blocks
    #[arg(long, value_name = "P")]
    pub dropout: Option<f64>,
    /// Epochs per phase (desk-scale override)
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Center-crop samples to a square of this side (multiple of 8)
    #[arg(long, value_name = "SIDE")]
    pub patch: Option<usize>,
    /// λ₁ weight of the BCE term
    #[arg(long, value_name = "V")]
    pub lambda1: Option<f64>,
    /// λ₂ weight of the Dice term
    #[arg(long, value_name = "V")]
    pub lambda2: Option<f64>,
    /// Initial learning rate
    #[arg(long, value_name = "V")]
    pub lr: Option<f64>,
    /// Epoch interval between learning-rate divisions
    #[arg(long, value_name = "N")]
    pub decay_every: Option<usize>,
    /// Factor the learning rate is divided by at each step
    #[arg(long, value_name = "V")]
    pub decay_factor: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.data_root {
            cfg.data_root = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        // Seed flags take over seed selection entirely, dropping any
        // explicit list the file may carry.
        if self.seed.is_some() || self.seeds.is_some() {
            cfg.seeds = None;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.seeds {
            cfg.runs = v;
        }
        if let Some(v) = self.fold {
            cfg.fold = Some(v);
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.base_channels {
            cfg.base_channels = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = Some(v);
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = Some(v);
        }
        if let Some(v) = self.patch {
            cfg.patch = Some(v);
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.decay_every {
            cfg.decay_every = v;
        }
        if let Some(v) = self.decay_factor {
            cfg.decay_factor = v;
        }
    }
}

/// Resolve the configuration for one invocation: defaults, then the
/// config file (if any), then flags.
pub fn resolve(config_path: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let mut cfg = match config_path {
        None => RunConfig::default(),
        Some(p) => read_config_file(p)?,
    };
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a TOML config file, or pull the embedded config back out of a
/// JSON run manifest.
fn read_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{} is not valid JSON: {e}", path.display())))?;
        let node = match value.get("config") {
            Some(embedded) => embedded.clone(),
            None => value,
        };
        serde_json::from_value(node)
            .map_err(|e| Error::Config(format!("invalid config in {}: {e}", path.display())))
    } else {
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Artifact paths for one completed training run, relative to the output
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold: Option<usize>,
    pub dir: String,
    pub variant: Variant,
    pub split: String,
    pub backbone_best: String,
    /// Absent when the run adopted another run's backbone checkpoint.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub backbone_last: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub full_best: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub full_last: Option<String>,
    /// SHA-256 over the backbone parameters of the best checkpoint.
    pub backbone_digest: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_val_backbone: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_val_full: Option<f64>,
    pub wall_secs: f64,
}

impl RunRecord {
    /// The checkpoint evaluation should use: the refined cascade when
    /// present, the backbone otherwise.
    pub fn eval_checkpoint(&self) -> &str {
        self.full_best.as_deref().unwrap_or(&self.backbone_best)
    }
}

/// Machine-readable record of a `train` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("invalid manifest {}: {e}", path.display())))
    }
}

/// One row of the consolidated ablation study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub variant: Variant,
    pub row: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tail_enabled: bool,
    pub dir: String,
    pub checkpoint: String,
    /// SHA-256 over the backbone parameters of `checkpoint`; the full
    /// cascade must report the same digest as the BC&D backbone it
    /// reuses.
    pub backbone_digest: String,
    pub metrics: RunSummary,
}

/// Machine-readable record of an `ablate` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationManifest {
    pub config: RunConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub arms: Vec<AblationArm>,
}

impl AblationManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
