//! JSON experiment configuration.
//!
//! Every section has defaults, so `{}` is a valid config. Digests are SHA-256
//! over the canonical (sorted-key, compact) JSON rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::numerics::hex;
use crate::schedule::{make_schedule, DiffusionSchedule, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_expansion: usize,
    pub text_vocab: usize,
    pub text_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 4,
            d_model: 64,
            heads: 4,
            depth: 8,
            ffn_expansion: 4,
            text_vocab: 32,
            text_len: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(invalid(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.ffn_expansion == 0 || self.text_len == 0 {
            return Err(invalid("depth, channels, ffn_expansion and text_len must be positive"));
        }
        let scene_tokens = 2 * crate::scenes::PALETTE_SIZE + 1;
        if self.text_vocab < scene_tokens {
            return Err(invalid(format!(
                "text_vocab {} cannot hold the {scene_tokens} scene tokens",
                self.text_vocab
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(invalid("d_model must be even for the sinusoidal time embedding"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self, in_channels: usize) -> usize {
        self.patch * self.patch * in_channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub objective: Objective,
    pub sample_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 250,
            beta_min: 1e-4,
            beta_max: 0.02,
            objective: Objective::EpsilonPrediction,
            sample_steps: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }
}

/// Sub-layer composition of a converter block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConverterSetting {
    /// Self-attention, cross-attention, FFN with x4 expansion.
    A,
    /// Self-attention, FFN x4.
    B,
    /// FFN x4 only.
    C,
    /// Self-attention only.
    D,
    /// Self-attention, FFN x1.
    #[default]
    E,
}

impl ConverterSetting {
    pub const ALL: [ConverterSetting; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn as_char(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
            Self::E => 'E',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'A' => Ok(Self::A),
            'B' => Ok(Self::B),
            'C' => Ok(Self::C),
            'D' => Ok(Self::D),
            'E' => Ok(Self::E),
            other => Err(invalid(format!("unknown converter setting `{other}`"))),
        }
    }
}

impl std::str::FromStr for ConverterSetting {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Self::from_char(c),
            _ => Err(invalid(format!("unknown converter setting `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Pretrained,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterConfig {
    pub setting: ConverterSetting,
    /// `None` means half the backbone depth (at least one).
    pub n_groups: Option<usize>,
    pub gre: bool,
    pub stack_n: usize,
    pub init: InitKind,
    pub init_seed: u64,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        Self {
            setting: ConverterSetting::E,
            n_groups: None,
            gre: true,
            stack_n: 1,
            init: InitKind::Pretrained,
            init_seed: 0,
        }
    }
}

impl ConverterConfig {
    pub fn groups_for(&self, depth: usize) -> usize {
        self.n_groups.unwrap_or((depth / 2).max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// `None` picks 1e-4 for epsilon prediction and 3e-4 for flow matching.
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 32,
            learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            iterations: 5000,
            ..Self::default()
        }
    }

    pub fn lr(&self, objective: Objective) -> f64 {
        self.learning_rate.unwrap_or(match objective {
            Objective::EpsilonPrediction => 1e-4,
            Objective::FlowMatching => 3e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(invalid("iterations and batch_size must be at least 1"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(invalid(format!("learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Text prompt used in task modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPrompt {
    #[default]
    Empty,
    DepthMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub mode: crate::tasks::TaskMode,
    pub prompt: TaskPrompt,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            mode: crate::tasks::TaskMode::Depth,
            prompt: TaskPrompt::Empty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { count: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub converters: ConverterConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            schedule: ScheduleConfig::default(),
            converters: ConverterConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn canonical_digest<T: Serialize>(value: &T) -> String {
    // serde_json's default map is a BTreeMap, so keys come out sorted
    let v = serde_json::to_value(value).expect("config is serializable");
    let text = serde_json::to_string(&v).expect("value is serializable");
    hex(&Sha256::digest(text.as_bytes()))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.schedule.build()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.converters.stack_n == 0 {
            return Err(invalid("stack_n must be at least 1"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::to_value(self).expect("serializable")).expect("serializable")
    }

    /// Digest of the whole experiment.
    pub fn digest(&self) -> String {
        canonical_digest(self)
    }

    /// Digest of the sections that define backbone weights' meaning
    /// (architecture and noise schedule). Stored in checkpoints.
    pub fn model_digest(&self) -> String {
        #[derive(Serialize)]
        struct Model<'a> {
            backbone: &'a BackboneConfig,
            schedule: &'a ScheduleConfig,
        }
        canonical_digest(&Model {
            backbone: &self.backbone,
            schedule: &self.schedule,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.pretrain.iterations, 5000);
        assert_eq!(cfg.train.iterations, 3000);
        assert_eq!(cfg.converters.groups_for(cfg.backbone.depth), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn schedule_keys_are_surfaced() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"schedule": {"timesteps": 100, "beta_min": 0.001, "beta_max": 0.1,
                 "objective": "flow_matching", "sample_steps": 4}}"#,
        )
        .unwrap();
        assert_eq!(cfg.schedule.objective, Objective::FlowMatching);
        assert_eq!(cfg.train.lr(cfg.schedule.objective), 3e-4);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"schedule": {"bogus": 1}}"#).is_err());
    }

    #[test]
    fn digest_is_key_order_independent() {
        let a: ExperimentConfig = serde_json::from_str(r#"{"eval": {"count": 3, "seed": 1}}"#).unwrap();
        let b: ExperimentConfig = serde_json::from_str(r#"{"eval": {"seed": 1, "count": 3}}"#).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.train.iterations = 7;
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.model_digest(), c.model_digest());
        c.backbone.depth = 4;
        assert_ne!(a.model_digest(), c.model_digest());
    }

    #[test]
    fn invalid_backbone() {
        let mut b = BackboneConfig::default();
        b.patch = 5;
        assert!(b.validate().is_err());
        let mut b = BackboneConfig::default();
        b.heads = 3;
        assert!(b.validate().is_err());
    }

    #[test]
    fn setting_parse() {
        assert_eq!("e".parse::<ConverterSetting>().unwrap(), ConverterSetting::E);
        assert!("F".parse::<ConverterSetting>().is_err());
        assert!("AB".parse::<ConverterSetting>().is_err());
    }
}
