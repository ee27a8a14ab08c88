//! Hyper-parameters, model shape and the experiment file that bundles them.
//!
//! The experiment file is TOML. Every field has a default, so a file only
//! needs the keys it overrides:
//!
//! ```toml
//! seed = 7
//!
//! [hyper]
//! lambda1 = 0.5
//! epochs = 20
//!
//! [model]
//! feature_width = 32
//!
//! [data]
//! label_ratio = 0.1
//! sample_mode = "strided"
//! ```
//!
//! `AU_SPREAD_SEED` in the environment overrides `seed` after the file is read.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{SampleMode, SynthConfig};

pub const SEED_ENV: &str = "AU_SPREAD_SEED";

/// Direction of the distillation KL term relative to the ensemble target `q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(q || p)`: cross-entropy of each model toward the ensemble target.
    #[default]
    TargetToModel,
    /// `KL(p || q)`.
    ModelToTarget,
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target-to-model" | "forward" => Ok(Self::TargetToModel),
            "model-to-target" | "reverse" => Ok(Self::ModelToTarget),
            other => Err(Error::config(format!("unknown KL direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub ramp_omega: f64,
    pub ramp_mu: f64,
    pub ramp_sigma: f64,
    pub warmup_epochs: usize,
    pub clip_len: usize,
    /// Networks per distillation loss; only 2 is meaningful.
    pub z: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate from `lr` towards 0 over `epochs`,
    /// stepping once per epoch. Off means a constant rate.
    pub lr_cosine: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// First epoch (1-based) whose pseudo labels may pass the temporal gate.
    pub tpl_start_epoch: usize,
    /// When false every pseudo label past the warm-up is admitted and the
    /// perturbation head is not consulted.
    pub tpl_enabled: bool,
    pub kl_direction: KlDirection,
    /// Weight pseudo-label BCE with the positive weights of the supervised
    /// term. Off uses unit weights, which keeps early false positives from
    /// being amplified by self-training.
    pub pseudo_positive_weights: bool,
    /// Photometric jitter on branch-B clips during training.
    pub augment: bool,
    /// Also train on windows that carry no visible label (pseudo-label and
    /// temporal terms only) once `unlabeled_start_epoch` is reached.
    pub unlabeled_clips: bool,
    pub unlabeled_start_epoch: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 0.2,
            lambda4: 0.25,
            alpha: 0.5,
            temperature: 1.0,
            ramp_omega: 2.0,
            ramp_mu: 0.0,
            ramp_sigma: 5.0,
            warmup_epochs: 5,
            clip_len: 5,
            z: 2,
            lr: 0.01,
            lr_cosine: false,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 2,
            tpl_start_epoch: 3,
            tpl_enabled: true,
            kl_direction: KlDirection::TargetToModel,
            pseudo_positive_weights: true,
            augment: true,
            unlabeled_clips: false,
            unlabeled_start_epoch: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.alpha];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.ramp_sigma == 0.0 || !self.ramp_sigma.is_finite() {
            return Err(Error::config("ramp sigma must be non-zero"));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::config("warm-up must last at least one epoch"));
        }
        if self.clip_len < 2 {
            return Err(Error::config("clip length must be at least 2"));
        }
        if self.z != 2 {
            return Err(Error::config("each distillation loss pairs exactly two networks (z = 2)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train for at least one epoch"));
        }
        Ok(())
    }
}

/// How the spatial and temporal token sequences are mixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    Transformer,
    /// Per-token residual MLP with no cross-token mixing.
    Mlp,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::config(format!("unknown encoder `{other}`"))),
        }
    }
}

/// How the temporal teacher's tokens are reduced to one AU prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalPooling {
    #[default]
    Mean,
    KeyFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_aus: usize,
    pub clip_len: usize,
    pub image_size: usize,
    pub image_channels: usize,
    /// Output channels of the 3x3 convolution blocks.
    pub backbone_widths: Vec<usize>,
    /// Stride of each block (1 or 2); same length as `backbone_widths`.
    pub backbone_strides: Vec<usize>,
    /// Width of every per-AU and per-frame token.
    pub feature_width: usize,
    /// Attention heads; the leading dimension of the recorded attention maps.
    pub channels: usize,
    /// Per-head width; attention logits are scaled by `1/sqrt(head_dim)`.
    pub head_dim: usize,
    pub encoder_layers: usize,
    pub ffn_width: usize,
    pub student_dropout: f64,
    pub encoder: EncoderKind,
    pub temporal_pooling: TemporalPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_aus: 5,
            clip_len: 5,
            image_size: 16,
            image_channels: 1,
            backbone_widths: vec![8, 16, 32],
            backbone_strides: vec![2, 2, 1],
            feature_width: 32,
            channels: 4,
            head_dim: 8,
            encoder_layers: 2,
            ffn_width: 64,
            student_dropout: 0.2,
            encoder: EncoderKind::Transformer,
            temporal_pooling: TemporalPooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_aus < 2 {
            return Err(Error::config("at least two action units are required"));
        }
        if self.clip_len < 2 {
            return Err(Error::config("clip length must be at least 2"));
        }
        if self.head_dim == 0 || self.channels == 0 {
            return Err(Error::config("attention head count and head width must be positive"));
        }
        if self.channels * self.head_dim != self.feature_width {
            return Err(Error::config(format!(
                "feature width {} must equal heads ({}) x head width ({})",
                self.feature_width, self.channels, self.head_dim
            )));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::config("backbone needs at least one non-empty block"));
        }
        if self.backbone_strides.len() != self.backbone_widths.len()
            || self.backbone_strides.iter().any(|s| !(1..=2).contains(s))
        {
            return Err(Error::config("every backbone block needs a stride of 1 or 2"));
        }
        if self.feature_map_size() == 0 {
            return Err(Error::config("image too small for the backbone strides"));
        }
        if self.image_size == 0 || self.image_channels == 0 {
            return Err(Error::config("image size and channels must be positive"));
        }
        if self.ffn_width == 0 {
            return Err(Error::config("ffn width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.student_dropout) {
            return Err(Error::config("dropout rate must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Pixels per frame.
    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * self.image_channels
    }

    /// Side length of the backbone's output feature map (padding 1, kernel 3).
    pub fn feature_map_size(&self) -> usize {
        self.backbone_strides
            .iter()
            .fold(self.image_size, |size, &s| if s == 2 { size.div_ceil(2) } else { size })
    }
}

/// Named training variants used by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Transformers replaced by per-token MLPs (KSM + TPL).
    NoSil,
    /// Spatial and temporal distillation losses removed (SIL + TPL).
    NoKsm,
    /// No perturbation head and no pseudo-label gate (SIL + KSM).
    NoTpl,
    /// Supervised BCE on the ensemble output only.
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoSil,
        Ablation::NoKsm,
        Ablation::NoTpl,
        Ablation::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSil => "no-sil",
            Ablation::NoKsm => "no-ksm",
            Ablation::NoTpl => "no-tpl",
            Ablation::Baseline => "baseline",
        }
    }

    /// Row label in the style of the module-combination table.
    pub fn modules(self) -> &'static str {
        match self {
            Ablation::Full => "SIL+KSM+TPL",
            Ablation::NoSil => "KSM+TPL",
            Ablation::NoKsm => "SIL+TPL",
            Ablation::NoTpl => "SIL+KSM",
            Ablation::Baseline => "baseline",
        }
    }

    pub fn apply(self, hyper: &mut HyperParams, model: &mut ModelConfig) {
        match self {
            Ablation::Full => {}
            Ablation::NoSil => model.encoder = EncoderKind::Mlp,
            Ablation::NoKsm => {
                hyper.lambda1 = 0.0;
                hyper.lambda2 = 0.0;
            }
            Ablation::NoTpl => {
                hyper.lambda3 = 0.0;
                hyper.tpl_enabled = false;
            }
            Ablation::Baseline => {
                hyper.lambda1 = 0.0;
                hyper.lambda2 = 0.0;
                hyper.lambda3 = 0.0;
                hyper.lambda4 = 0.0;
                hyper.alpha = 0.0;
            }
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing corpus directory. When absent the corpus is generated from `synth`.
    pub corpus: Option<PathBuf>,
    pub synth: SynthConfig,
    pub label_ratio: f64,
    pub sample_mode: SampleMode,
    /// Fraction of sequences held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            synth: SynthConfig::default(),
            label_ratio: 0.1,
            sample_mode: SampleMode::Strided,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    /// Write `epoch_<E>.ckpt` every this many epochs (the last epoch is always written).
    pub checkpoint_every: usize,
    /// Evaluate every k-th frame of the held-out sequences.
    pub eval_stride: usize,
    pub eval_batch_size: usize,
    /// Score the validation split every this many epochs (early and final epochs always are).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 10,
            eval_stride: 1,
            eval_batch_size: 64,
            eval_every: 1,
        }
    }
}

impl RunConfig {
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub hyper: HyperParams,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: Ablation::Full,
            hyper: HyperParams::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Applies `AU_SPREAD_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            self.seed = value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={value} is not an integer")))?;
        }
        Ok(())
    }

    /// Hyper-parameters and model shape after the ablation is applied.
    pub fn resolved(&self) -> (HyperParams, ModelConfig) {
        let mut hyper = self.hyper.clone();
        let mut model = self.model.clone();
        self.ablation.apply(&mut hyper, &mut model);
        (hyper, model)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.model.validate()?;
        self.data.synth.validate()?;
        if self.hyper.clip_len != self.model.clip_len {
            return Err(Error::config(format!(
                "clip length differs between hyper ({}) and model ({})",
                self.hyper.clip_len, self.model.clip_len
            )));
        }
        if self.data.synth.num_aus != self.model.num_aus {
            return Err(Error::config("data and model disagree on the number of AUs"));
        }
        if self.data.synth.image_size != self.model.image_size
            || self.data.synth.channels != self.model.image_channels
        {
            return Err(Error::config("data and model disagree on the frame shape"));
        }
        if !(self.data.label_ratio > 0.0 && self.data.label_ratio <= 1.0) {
            return Err(Error::config("label ratio must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("validation fraction must lie in [0, 1)"));
        }
        if self.run.eval_stride == 0 || self.run.eval_batch_size == 0 || self.run.eval_every == 0 {
            return Err(Error::config("evaluation stride, batch size and interval must be positive"));
        }
        Ok(())
    }
}
