//! Experiment configuration: one TOML file describes a run end to end.
//!
//! Profiles fill in schedule defaults (`desk` for CPU-scale runs, `paper`
//! for full-scale hyperparameters); explicit fields always win. Validation
//! is table-driven and runs before any dataset or model is touched.

use crate::mining::{PinHyperparams, PromptTemplate};
use crate::model::FreezePreset;
use crate::train::{AugmentMode, AugmentVariant, Locality, MixSource, ScheduleConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
}

/// Named hyperparameter profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(ConfigError::Validation(vec![format!(
                "unknown profile `{other}` (expected desk or paper)"
            )])),
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        match self {
            Profile::Desk => ScheduleConfig::desk(),
            Profile::Paper => ScheduleConfig::paper(),
        }
    }

    pub fn crop(&self) -> usize {
        match self {
            Profile::Desk => 64,
            Profile::Paper => 768,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub manifest: PathBuf,
    pub class_names: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_eval_splits")]
    pub eval_splits: Vec<String>,
}

fn default_train_split() -> String {
    "train".to_string()
}

fn default_eval_splits() -> Vec<String> {
    vec!["eval_source".to_string(), "eval_shifted".to_string()]
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ModeConfig {
    #[serde(default = "default_variant")]
    pub variant: VariantName,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default = "default_true")]
    pub mix: bool,
    #[serde(default = "default_mix_source")]
    pub mix_source: MixSourceName,
    #[serde(default = "default_locality")]
    pub locality: LocalityName,
    #[serde(default = "default_one")]
    pub apply_prob: f64,
    #[serde(default)]
    pub per_channel_alpha: bool,
    /// Replace bank-based randomization by whole-map vanilla mixing.
    #[serde(default)]
    pub vanilla_mixstyle: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            variant: VariantName::Language,
            snr_db: None,
            mix: true,
            mix_source: MixSourceName::Mined,
            locality: LocalityName::LocalPerPatch,
            apply_prob: 1.0,
            per_channel_alpha: false,
            vanilla_mixstyle: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Language,
    Noise,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSourceName {
    Mined,
    Source,
    SourceAndMined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalityName {
    LocalPerPatch,
    GlobalPerMap,
}

fn default_variant() -> VariantName {
    VariantName::Language
}

fn default_mix_source() -> MixSourceName {
    MixSourceName::Mined
}

fn default_locality() -> LocalityName {
    LocalityName::LocalPerPatch
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

impl ModeConfig {
    pub fn to_mode(&self) -> AugmentMode {
        AugmentMode {
            variant: match self.variant {
                VariantName::Language => AugmentVariant::Language,
                VariantName::Noise => AugmentVariant::Noise {
                    snr_db: self.snr_db.unwrap_or(f64::INFINITY),
                },
                VariantName::None => AugmentVariant::None,
            },
            mix: self.mix,
            mix_source: match self.mix_source {
                MixSourceName::Mined => MixSource::Mined,
                MixSourceName::Source => MixSource::Source,
                MixSourceName::SourceAndMined => MixSource::SourceAndMined,
            },
            locality: match self.locality {
                LocalityName::LocalPerPatch => Locality::LocalPerPatch,
                LocalityName::GlobalPerMap => Locality::GlobalPerMap,
            },
            apply_prob: self.apply_prob,
            per_channel_alpha: self.per_channel_alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MiningConfigSection {
    #[serde(default = "default_pin_steps")]
    pub pin_steps: usize,
    #[serde(default = "default_pin_step_size")]
    pub pin_step_size: f64,
    /// Mine one style per whole map under a shared key instead of class-wise.
    #[serde(default)]
    pub global: bool,
    #[serde(default = "default_true")]
    pub template_use_fragment: bool,
    #[serde(default = "default_true")]
    pub template_use_class_name: bool,
    /// Use only the first n fragments of the prompt set.
    #[serde(default)]
    pub cardinality: Option<usize>,
}

impl Default for MiningConfigSection {
    fn default() -> Self {
        Self {
            pin_steps: default_pin_steps(),
            pin_step_size: default_pin_step_size(),
            global: false,
            template_use_fragment: true,
            template_use_class_name: true,
            cardinality: None,
        }
    }
}

fn default_pin_steps() -> usize {
    100
}

fn default_pin_step_size() -> f64 {
    1.0
}

impl MiningConfigSection {
    pub fn pin(&self) -> PinHyperparams {
        PinHyperparams {
            steps: self.pin_steps,
            step_size: self.pin_step_size,
        }
    }

    pub fn template(&self) -> PromptTemplate {
        PromptTemplate {
            use_fragment: self.template_use_fragment,
            use_class_name: self.template_use_class_name,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
pub struct ScheduleOverrides {
    pub iterations: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr_decoder: Option<f64>,
    pub lr_backbone: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub poly_power: Option<f64>,
    pub crop: Option<usize>,
}

/// The declarative description of one run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub profile: Profile,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Seeds for multi-run experiments; defaults to `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default = "default_encoder")]
    pub encoder: String,
    /// Prompt-set file; required for language mining.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    /// Random-character prompt set, used by the prompt-construction sweep.
    #[serde(default)]
    pub prompts_rcp: Option<PathBuf>,
    /// Mined bank path: output of `mine`, input of `train`.
    #[serde(default)]
    pub bank: Option<PathBuf>,
    /// Checkpoints consumed by `eval`.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default = "default_grid")]
    pub grid_m: usize,
    #[serde(default = "default_freeze")]
    pub freeze: String,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default)]
    pub mining: MiningConfigSection,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default = "default_true")]
    pub hflip: bool,
    #[serde(default = "default_true")]
    pub color_jitter: bool,
}

fn default_seed() -> u64 {
    0
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_encoder() -> String {
    "tiny".to_string()
}

fn default_grid() -> usize {
    4
}

fn default_freeze() -> String {
    "famix".to_string()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.anchor_paths(base);
        Ok(config)
    }

    /// Resolves relative paths against the config file's directory.
    fn anchor_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        anchor(&mut self.out_dir);
        anchor(&mut self.dataset.manifest);
        anchor(&mut self.dataset.class_names);
        if let Some(p) = &mut self.prompts {
            anchor(p);
        }
        if let Some(p) = &mut self.prompts_rcp {
            anchor(p);
        }
        if let Some(p) = &mut self.bank {
            anchor(p);
        }
        for p in &mut self.checkpoints {
            anchor(p);
        }
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn resolved_schedule(&self) -> ScheduleConfig {
        let mut s = self.profile.schedule();
        let o = &self.schedule;
        if let Some(v) = o.iterations {
            s.iterations = v;
        }
        if let Some(v) = o.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = o.lr_decoder {
            s.lr_decoder = v;
        }
        if let Some(v) = o.lr_backbone {
            s.lr_backbone = v;
        }
        if let Some(v) = o.momentum {
            s.momentum = v;
        }
        if let Some(v) = o.weight_decay {
            s.weight_decay = v;
        }
        if let Some(v) = o.poly_power {
            s.poly_power = v;
        }
        s
    }

    pub fn crop(&self) -> usize {
        self.schedule.crop.unwrap_or_else(|| self.profile.crop())
    }

    pub fn freeze_preset(&self) -> Result<FreezePreset, ConfigError> {
        FreezePreset::parse(&self.freeze)
            .map_err(|e| ConfigError::Validation(vec![e.to_string()]))
    }

    /// Every check that can run before touching datasets or models. Checks
    /// are a flat table so tests can tick them off one by one.
    pub fn validate(&self, needs: Needs) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mode = self.mode.to_mode();
        if let Err(e) = mode.validate() {
            errors.push(e.to_string());
        }
        if FreezePreset::parse(&self.freeze).is_err() {
            errors.push(format!("unknown freeze preset `{}`", self.freeze));
        }
        if !matches!(self.encoder.as_str(), "tiny" | "stub") {
            errors.push(format!("unknown encoder `{}`", self.encoder));
        }
        if self.resolved_seeds().is_empty() {
            errors.push("at least one seed required".to_string());
        }
        let side = (self.grid_m as f64).sqrt().round() as usize;
        if side * side != self.grid_m || self.grid_m == 0 {
            errors.push(format!("grid_m {} is not a positive square", self.grid_m));
        } else {
            let crop = self.crop();
            if !crop.is_multiple_of(4) || !(crop / 4).is_multiple_of(side) {
                errors.push(format!(
                    "crop {crop} incompatible with grid_m {}: stride-4 features must divide into a {side}x{side} grid",
                    self.grid_m
                ));
            }
        }
        if self.mode.variant == VariantName::Noise && self.mode.snr_db.is_none() {
            errors.push("mode.variant = noise requires mode.snr_db".to_string());
        }
        if self.mode.vanilla_mixstyle {
            if self.resolved_schedule().batch_size < 2 {
                errors.push("vanilla_mixstyle needs batch_size >= 2".to_string());
            }
            if self.mode.variant != VariantName::None || self.mode.mix {
                errors.push(
                    "vanilla_mixstyle replaces bank randomization; set mode.variant = none and mode.mix = false"
                        .to_string(),
                );
            }
        }
        if !self.dataset.manifest.exists() {
            errors.push(format!(
                "dataset manifest {} does not exist",
                self.dataset.manifest.display()
            ));
        }
        if !self.dataset.class_names.exists() {
            errors.push(format!(
                "class-names file {} does not exist",
                self.dataset.class_names.display()
            ));
        }
        if needs.prompts {
            match &self.prompts {
                None => errors.push("a prompt-set path is required".to_string()),
                Some(p) if !p.exists() => {
                    errors.push(format!("prompt set {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        if needs.mined_bank && mode.needs_mined_bank() && !self.mode.vanilla_mixstyle {
            match &self.bank {
                None => errors.push(
                    "mode samples mined styles (mix_source includes the augmented set) but no bank path is configured"
                        .to_string(),
                ),
                Some(p) if !p.exists() => {
                    errors.push(format!("style bank {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        if needs.checkpoints {
            if self.checkpoints.is_empty() {
                errors.push("eval requires at least one checkpoint".to_string());
            }
            for p in &self.checkpoints {
                if !p.exists() {
                    errors.push(format!("checkpoint {} does not exist", p.display()));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(errors))
        }
    }
}

/// Which external inputs a command relies on, so validation can demand them.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub prompts: bool,
    pub mined_bank: bool,
    pub checkpoints: bool,
}

impl Needs {
    pub fn mine() -> Self {
        Self {
            prompts: true,
            ..Self::default()
        }
    }

    pub fn train() -> Self {
        Self {
            mined_bank: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self {
            checkpoints: true,
            ..Self::default()
        }
    }
}
