//! Model and training configuration, with desk and paper presets.
//!
//! Config files are flat key-value JSON; [`apply_flat_config`] routes each key
//! to the struct that owns a field of that name, so the file format stays in
//! sync with the structs automatically.

use serde::{Deserialize, Serialize};

use crate::error::{GfemError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualKind {
    /// Frozen random conv stack seeded at construction (default).
    FixedRandomConv,
    /// Hook for an external pretrained extractor; out of desk-scale scope.
    ExternalPretrained,
}

/// 3D GAN-ViT generator/discriminator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Encoder channel progression (paper: 64/128/256; desk: 8/16/32).
    pub encoder_channels: [usize; 3],
    /// Must mirror `encoder_channels` when given; derived when omitted.
    #[serde(default)]
    pub decoder_channels: Option<[usize; 3]>,
    pub patch_size: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub group_norm_groups: usize,
    pub perceptual_extractor: PerceptualKind,
    /// Channel widths of the frozen perceptual stack.
    pub perceptual_channels: [usize; 3],
    /// Reproduce the paper's printed Eq. 1/2 forms verbatim (audit mode).
    #[serde(default)]
    pub paper_literal_losses: bool,
    /// Use -log D(G(x)) instead of the printed log(1 - D(G(x))).
    #[serde(default)]
    pub non_saturating_adv: bool,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            encoder_channels: [8, 16, 32],
            decoder_channels: None,
            patch_size: 2,
            vit_depth: 4,
            vit_heads: 4,
            group_norm_groups: 4,
            perceptual_extractor: PerceptualKind::FixedRandomConv,
            perceptual_channels: [4, 8, 8],
            paper_literal_losses: false,
            non_saturating_adv: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder_channels: [64, 128, 256],
            patch_size: 4,
            vit_heads: 8,
            perceptual_channels: [8, 16, 16],
            ..Self::desk()
        }
    }

    /// Decoder channel list: always the reverse of the encoder list.
    pub fn decoder(&self) -> [usize; 3] {
        let e = self.encoder_channels;
        [e[2], e[1], e[0]]
    }

    /// Token width after patchifying: p² · C_L.
    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.encoder_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(GfemError::InvalidConfig("encoder channel of 0".into()));
        }
        if let Some(dec) = self.decoder_channels {
            if dec != self.decoder() {
                return Err(GfemError::InvalidConfig(format!(
                    "decoder_channels {:?} must mirror encoder_channels {:?}",
                    dec, self.encoder_channels
                )));
            }
        }
        if self.vit_depth < 1 {
            return Err(GfemError::InvalidConfig("vit_depth must be >= 1".into()));
        }
        if self.patch_size < 1 || self.vit_heads < 1 || self.group_norm_groups < 1 {
            return Err(GfemError::InvalidConfig(
                "patch_size, vit_heads and group_norm_groups must be >= 1".into(),
            ));
        }
        if self.token_dim() % self.vit_heads != 0 {
            return Err(GfemError::InvalidConfig(format!(
                "token dim {} not divisible by vit_heads {}",
                self.token_dim(),
                self.vit_heads
            )));
        }
        Ok(())
    }
}

/// Mamba classifier + bi-cross attention configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Number of Mamba blocks (paper: 6).
    pub depth: usize,
    /// Embedding size d for tokens and the residual stream.
    pub d: usize,
    /// d_inner = expansion * d.
    pub expansion: usize,
    /// SSM state dimension S.
    pub state_dim: usize,
    /// Depthwise conv kernel on the x path.
    pub conv_kernel: usize,
    /// Bi-cross attention dimension d_k.
    pub d_k: usize,
    /// Which residual/normalization reading of the bi-cross prose is in
    /// effect. Only "post_ffn_ln" (y2 = y1 + LN(FFN(LN(y1)))) is implemented.
    pub bicross_residual: String,
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        Self {
            depth: 6,
            d: 64,
            expansion: 2,
            state_dim: 16,
            conv_kernel: 4,
            d_k: 16,
            bicross_residual: "post_ffn_ln".into(),
        }
    }

    /// The paper fixes depth 6 but is silent on d and the SSM internals;
    /// desk values are retained rather than invented upward.
    pub fn paper() -> Self {
        Self::desk()
    }

    pub fn d_inner(&self) -> usize {
        self.expansion * self.d
    }

    pub fn dt_rank(&self) -> usize {
        self.d.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(GfemError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.expansion < 1 {
            return Err(GfemError::InvalidConfig("expansion must be >= 1".into()));
        }
        if self.conv_kernel < 1 {
            return Err(GfemError::InvalidConfig("conv_kernel must be >= 1".into()));
        }
        if self.d < 1 || self.state_dim < 1 || self.d_k < 1 {
            return Err(GfemError::InvalidConfig(
                "d, state_dim and d_k must be >= 1".into(),
            ));
        }
        if self.bicross_residual != "post_ffn_ln" {
            return Err(GfemError::InvalidConfig(format!(
                "unsupported bicross_residual reading {:?} (only \"post_ffn_ln\")",
                self.bicross_residual
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generator,
    Classifier,
}

/// Optimization and orchestration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Informational only; all computation is CPU.
    pub device: String,
    /// Checkpoint every this many epochs (and always at the end).
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub deterministic: bool,
    /// Stop after this many optimizer steps regardless of epochs (smoke runs).
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Inverse-frequency class weighting for the classifier loss.
    #[serde(default)]
    pub class_weighting: bool,
    /// Unfreeze the generator during classifier training.
    #[serde(default)]
    pub fine_tune_generator: bool,
}

impl TrainConfig {
    pub fn paper_generator() -> Self {
        Self {
            stage: Stage::Generator,
            epochs: 200,
            batch_size: 2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            device: "cpu".into(),
            checkpoint_interval: 20,
            deterministic: true,
            max_steps: None,
            class_weighting: false,
            fine_tune_generator: false,
        }
    }

    pub fn paper_classifier() -> Self {
        Self {
            stage: Stage::Classifier,
            epochs: 100,
            batch_size: 8,
            ..Self::paper_generator()
        }
    }

    /// Desk generator preset: the paper's lr is too slow for 200-step smoke
    /// runs at desk scale, so the learning rate is raised.
    pub fn desk_generator() -> Self {
        Self {
            epochs: 50,
            learning_rate: 2e-3,
            checkpoint_interval: 25,
            ..Self::paper_generator()
        }
    }

    pub fn desk_classifier() -> Self {
        Self {
            stage: Stage::Classifier,
            epochs: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            ..Self::desk_generator()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(GfemError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(GfemError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GfemError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.checkpoint_interval < 1 {
            return Err(GfemError::InvalidConfig(
                "checkpoint_interval must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Apply a flat key-value JSON object on top of the three config structs.
/// Every key must name a field of at least one struct; unknown keys error.
pub fn apply_flat_config(
    flat: &serde_json::Map<String, serde_json::Value>,
    gen: &mut GeneratorConfig,
    cls: &mut ClassifierConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    fn apply<T: Serialize + for<'de> Deserialize<'de>>(
        target: &mut T,
        flat: &serde_json::Map<String, serde_json::Value>,
        consumed: &mut std::collections::BTreeSet<String>,
    ) -> Result<()> {
        let mut obj = match serde_json::to_value(&*target).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("configs are structs"),
        };
        let mut touched = false;
        for (k, v) in flat {
            if obj.contains_key(k) {
                obj.insert(k.clone(), v.clone());
                consumed.insert(k.clone());
                touched = true;
            }
        }
        if touched {
            *target = serde_json::from_value(serde_json::Value::Object(obj))
                .map_err(|e| GfemError::InvalidConfig(format!("bad config value: {e}")))?;
        }
        Ok(())
    }

    let mut consumed = std::collections::BTreeSet::new();
    apply(gen, flat, &mut consumed)?;
    apply(cls, flat, &mut consumed)?;
    apply(train, flat, &mut consumed)?;
    for key in flat.keys() {
        if !consumed.contains(key) {
            return Err(GfemError::InvalidConfig(format!(
                "unknown config key {key:?}"
            )));
        }
    }
    gen.validate()?;
    cls.validate()?;
    train.validate()
}
