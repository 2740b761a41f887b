//! Run configuration: one TOML document covering every module.
//!
//! Every field has a default and unknown keys are rejected. Command-line
//! overrides use dotted paths (`train.max_epochs=20`).

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Hidden width of the decoder's token MLP as a multiple of `embed_dim`.
    pub decoder_mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 2.0,
            decoder_mlp_ratio: 8.0,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn decoder_mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.decoder_mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "backbone.image_size {} must be a positive multiple of backbone.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "backbone.embed_dim {} must be divisible by backbone.num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 4 != 0 {
            return bad(format!("backbone.embed_dim {} must be divisible by 4", self.embed_dim));
        }
        if self.num_blocks == 0 {
            return bad("backbone.num_blocks must be >= 1".into());
        }
        if self.mlp_hidden() == 0 || self.decoder_mlp_hidden() == 0 {
            return bad("backbone MLP ratios must give a non-empty hidden layer".into());
        }
        Ok(())
    }
}

/// How each adapter combines the latent sample and the position variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    /// Bottleneck only; no latent, no position variant.
    Plain,
    /// Latent sample only.
    ZOnly,
    /// Position variant only.
    POnly,
    /// Latent concatenated with the position variant, no conditioning.
    Wms,
    /// Position variant conditions the latent sample.
    Cmsm,
}

impl AdapterMode {
    pub const ABLATION: [AdapterMode; 4] =
        [AdapterMode::ZOnly, AdapterMode::POnly, AdapterMode::Wms, AdapterMode::Cmsm];

    pub fn uses_latent(self) -> bool {
        matches!(self, AdapterMode::ZOnly | AdapterMode::Wms | AdapterMode::Cmsm)
    }

    pub fn uses_position(self) -> bool {
        matches!(self, AdapterMode::POnly | AdapterMode::Wms | AdapterMode::Cmsm)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterMode::Plain => "plain",
            AdapterMode::ZOnly => "z-only",
            AdapterMode::POnly => "p-only",
            AdapterMode::Wms => "wms",
            AdapterMode::Cmsm => "cmsm",
        }
    }
}

impl FromStr for AdapterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [AdapterMode::Plain, AdapterMode::ZOnly, AdapterMode::POnly, AdapterMode::Wms, AdapterMode::Cmsm]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter mode `{s}` (plain, z-only, p-only, wms, cmsm)")))
    }
}

/// What happens after the last adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LastAdapterRule {
    /// Add a pointwise reconstruction of `z` to the final embeddings.
    Supplement,
    /// No reconstruction branch.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub mode: AdapterMode,
    /// `dim = round(ratio * embed_dim)` for the uncertainty feature.
    pub ratio: f64,
    /// Bottleneck width; `embed_dim / 4` when unset.
    pub d_down: Option<usize>,
    pub last_adapter: LastAdapterRule,
    /// Half-width of the uniform init of the first position variant.
    pub p_init: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            mode: AdapterMode::Cmsm,
            ratio: 0.25,
            d_down: None,
            last_adapter: LastAdapterRule::Supplement,
            p_init: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn d_down(&self, embed_dim: usize) -> usize {
        self.d_down.unwrap_or(embed_dim / 4)
    }

    pub fn feature_dim(&self, embed_dim: usize) -> usize {
        (self.ratio * embed_dim as f64).round() as usize
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) || self.feature_dim(embed_dim) == 0 {
            return Err(Error::Config(format!("adapter.ratio {} must lie in (0, 1]", self.ratio)));
        }
        if self.d_down(embed_dim) == 0 {
            return Err(Error::Config("adapter.d_down must be >= 1".into()));
        }
        if !(self.p_init >= 0.0) {
            return Err(Error::Config("adapter.p_init must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub latent_dim: usize,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig { latent_dim: 6, log_sigma_min: -6.0, log_sigma_max: 4.0 }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent.latent_dim must be >= 1".into()));
        }
        if !(self.log_sigma_min < self.log_sigma_max) {
            return Err(Error::Config("latent.log_sigma_min must be < latent.log_sigma_max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub epsilon_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 1.0, dice_weight: 1.0, ce_weight: 1.0, epsilon_dice: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("dice_weight", self.dice_weight),
            ("ce_weight", self.ce_weight),
            ("epsilon_dice", self.epsilon_dice),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Learning rate for backbone pretraining.
    pub pretrain_lr: f64,
    /// Learning rate for adapter fine-tuning.
    pub finetune_lr: f64,
    pub decay_every_epochs: usize,
    pub decay_factor: f64,
    /// Share of the training set held out for early stopping.
    pub val_fraction: f64,
    /// Latent draws fused per example during validation and evaluation.
    pub k_samples: usize,
    /// Train/test split used by `ablate` and `sweep`.
    pub split_ratio: f64,
    /// Even-vote ties resolve to foreground instead of background.
    pub tie_to_foreground: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-4,
            decay_every_epochs: 10,
            decay_factor: 0.5,
            val_fraction: 0.1,
            k_samples: 4,
            split_ratio: 0.8,
            tie_to_foreground: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if self.k_samples == 0 {
            return bad("train.k_samples must be >= 1");
        }
        if !(self.pretrain_lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("train.decay_factor must lie in (0, 1)");
        }
        if self.decay_every_epochs == 0 {
            return bad("train.decay_every_epochs must be >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("train.val_fraction must lie in (0, 1)");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("train.split_ratio must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_examples: usize,
    pub image_size: usize,
    pub num_annotators: usize,
    /// Scale of the per-annotator boundary displacement, in pixels.
    pub boundary_jitter: f64,
    /// Probability that an annotator includes the ambiguous lobe.
    pub ambiguity_rate: f64,
    /// Std-dev of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_examples: 1000,
            image_size: 32,
            num_annotators: 4,
            boundary_jitter: 1.5,
            ambiguity_rate: 0.5,
            noise: 0.05,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_annotators == 0 {
            return bad("synth.num_annotators must be >= 1");
        }
        if self.image_size < 16 {
            return bad("synth.image_size must be >= 16");
        }
        if !(self.boundary_jitter >= 0.0) {
            return bad("synth.boundary_jitter must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad("synth.ambiguity_rate must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) {
            return bad("synth.noise must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub latent: LatentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            latent: LatentConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate(self.backbone.embed_dim)?;
        self.latent.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.image_size != self.backbone.image_size {
            return Err(Error::Config(format!(
                "synth.image_size {} differs from backbone.image_size {}",
                self.synth.image_size, self.backbone.image_size
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Short stable digest of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a
/// bare string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` must look like key.path=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{path}` does not name a table field")))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}
