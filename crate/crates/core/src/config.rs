//! Run configuration.
//!
//! Configs are stored as a flat `key = value` text file. Lists use commas.
//! Lines starting with `#` are comments. Every key has a default, so an empty
//! file is a valid config. See `RunConfig::to_flat_string` for the schema.

use crate::error::{PacoError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Training phase flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Incubation,
    Main,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Incubation => write!(f, "incubation"),
            Phase::Main => write!(f, "main"),
        }
    }
}

/// Full run configuration. Defaults describe the desk-scale setup used by the
/// test suite; `RunConfig::vit_b16()` is the full-scale preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // geometry
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,

    // codebook
    /// Candidate tokens per patch position (n).
    pub tokens_per_position: usize,

    // encoder/decoder
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_depth: usize,
    /// Encoder layers (1-indexed) whose activations feed downstream heads.
    pub feature_tap_layers: Vec<usize>,

    // masking / incubation
    pub mask_ratio: f64,
    pub incubation_random_fraction: f64,
    pub incubation_enabled: bool,
    /// During incubation optimize only the belief cross-entropy.
    pub incubation_ce_only: bool,

    // losses
    pub loss_weight_perceptual: f64,
    /// Backbone conv layers (1-indexed) used for the perceptual loss.
    pub perceptual_layer_indices: Vec<usize>,
    /// Report the belief CE as a sum over masked positions instead of a mean.
    pub ce_sum_reduction: bool,
    /// Per-patch normalize reconstruction targets before the MSE.
    pub per_patch_norm_targets: bool,

    // belief predictor
    /// Hidden width of the predictor MLP; 0 means the default 4*n*8.
    pub predictor_hidden: usize,

    // perceptual backbone
    pub backbone_channels: Vec<usize>,
    pub backbone_kernel: usize,
    pub backbone_stride: usize,

    // optimization
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Linear warmup measured in epochs from the start of the run.
    pub warmup_epochs: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            tokens_per_position: 3,
            embed_dim: 64,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_depth: 1,
            feature_tap_layers: default_tap_layers(4),
            mask_ratio: 0.75,
            incubation_random_fraction: 0.75,
            incubation_enabled: true,
            incubation_ce_only: false,
            loss_weight_perceptual: 1.0,
            perceptual_layer_indices: vec![1, 2],
            ce_sum_reduction: false,
            per_patch_norm_targets: false,
            predictor_hidden: 0,
            backbone_channels: vec![8, 16],
            backbone_kernel: 3,
            backbone_stride: 2,
            epochs: 8,
            batch_size: 8,
            base_lr: 1.5e-4,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

/// Scale the reference taps {2, 4, 8, 12} of a depth-12 encoder to `depth`.
pub fn default_tap_layers(depth: usize) -> Vec<usize> {
    let mut taps: Vec<usize> = [2usize, 4, 8, 12]
        .iter()
        .map(|&l| ((l * depth) as f64 / 12.0).ceil() as usize)
        .map(|l| l.clamp(1, depth))
        .collect();
    taps.dedup();
    taps
}

impl RunConfig {
    /// Full-scale preset matching the standard ViT-B/16 geometry.
    pub fn vit_b16() -> Self {
        RunConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            tokens_per_position: 3,
            embed_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            decoder_depth: 1,
            feature_tap_layers: vec![2, 4, 8, 12],
            epochs: 32,
            batch_size: 720,
            ..RunConfig::default()
        }
    }

    /// Number of patches per image.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened patch length (patch_size^2 * channels).
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Belief predictor hidden width (resolves the 0 = auto default).
    pub fn predictor_hidden_width(&self) -> usize {
        if self.predictor_hidden > 0 {
            self.predictor_hidden
        } else {
            4 * self.tokens_per_position * 8
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PacoError::InvalidConfig(m));
        if self.image_size == 0 || self.patch_size == 0 {
            return err("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.tokens_per_position == 0 {
            return err("tokens_per_position must be positive".into());
        }
        if self.embed_dim == 0 || self.encoder_depth == 0 || self.encoder_heads == 0 {
            return err("encoder dimensions must be positive".into());
        }
        if self.embed_dim % self.encoder_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by encoder_heads {}",
                self.embed_dim, self.encoder_heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return err(format!("mask_ratio must be in (0,1), got {}", self.mask_ratio));
        }
        if !(0.0..=1.0).contains(&self.incubation_random_fraction) {
            return err("incubation_random_fraction must be in [0,1]".into());
        }
        if self.feature_tap_layers.is_empty() {
            return err("feature_tap_layers must be non-empty".into());
        }
        for &l in &self.feature_tap_layers {
            if l < 1 || l > self.encoder_depth {
                return err(format!(
                    "feature tap layer {} outside [1, {}]",
                    l, self.encoder_depth
                ));
            }
        }
        if self.backbone_channels.is_empty() {
            return err("backbone_channels must be non-empty".into());
        }
        for &l in &self.perceptual_layer_indices {
            if l < 1 || l > self.backbone_channels.len() {
                return err(format!(
                    "perceptual layer {} outside [1, {}]",
                    l,
                    self.backbone_channels.len()
                ));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file. `encoder_depth` is applied
    /// before other keys so an explicit `feature_tap_layers` always wins
    /// regardless of line order.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_flat_str(&text)
    }

    /// Parse a flat `key = value` document, as written by `to_flat_string`
    /// and echoed into checkpoint headers.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PacoError::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "encoder_depth") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "encoder_depth") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` override. Setting `encoder_depth` resets
    /// `feature_tap_layers` to the scaled default, so override taps after
    /// depth.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fer(self, key, value)
    }

    /// Render the full schema as a flat key = value document.
    pub fn to_flat_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.as_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Ordered key → rendered value view of every config field.
    pub fn as_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("image_size", self.image_size.to_string());
        put("patch_size", self.patch_size.to_string());
        put("channels", self.channels.to_string());
        put("tokens_per_position", self.tokens_per_position.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("encoder_depth", self.encoder_depth.to_string());
        put("encoder_heads", self.encoder_heads.to_string());
        put("decoder_depth", self.decoder_depth.to_string());
        put("feature_tap_layers", join(&self.feature_tap_layers));
        put("mask_ratio", self.mask_ratio.to_string());
        put(
            "incubation_random_fraction",
            self.incubation_random_fraction.to_string(),
        );
        put("incubation_enabled", self.incubation_enabled.to_string());
        put("incubation_ce_only", self.incubation_ce_only.to_string());
        put(
            "loss_weight_perceptual",
            self.loss_weight_perceptual.to_string(),
        );
        put(
            "perceptual_layer_indices",
            join(&self.perceptual_layer_indices),
        );
        put("ce_sum_reduction", self.ce_sum_reduction.to_string());
        put(
            "per_patch_norm_targets",
            self.per_patch_norm_targets.to_string(),
        );
        put("predictor_hidden", self.predictor_hidden.to_string());
        put("backbone_channels", join(&self.backbone_channels));
        put("backbone_kernel", self.backbone_kernel.to_string());
        put("backbone_stride", self.backbone_stride.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("base_lr", self.base_lr.to_string());
        put("min_lr", self.min_lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("warmup_epochs", self.warmup_epochs.to_string());
        put("seed", self.seed.to_string());
        m
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| PacoError::InvalidConfig(format!("bad value for {key}: {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect()
}

fn fer(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "image_size" => cfg.image_size = parse(key, value)?,
        "patch_size" => cfg.patch_size = parse(key, value)?,
        "channels" => cfg.channels = parse(key, value)?,
        "tokens_per_position" => cfg.tokens_per_position = parse(key, value)?,
        "embed_dim" => cfg.embed_dim = parse(key, value)?,
        "encoder_depth" => {
            cfg.encoder_depth = parse(key, value)?;
            cfg.feature_tap_layers = default_tap_layers(cfg.encoder_depth);
        }
        "encoder_heads" => cfg.encoder_heads = parse(key, value)?,
        "decoder_depth" => cfg.decoder_depth = parse(key, value)?,
        "feature_tap_layers" => cfg.feature_tap_layers = parse_list(key, value)?,
        "mask_ratio" => cfg.mask_ratio = parse(key, value)?,
        "incubation_random_fraction" => cfg.incubation_random_fraction = parse(key, value)?,
        "incubation_enabled" => cfg.incubation_enabled = parse(key, value)?,
        "incubation_ce_only" => cfg.incubation_ce_only = parse(key, value)?,
        "loss_weight_perceptual" => cfg.loss_weight_perceptual = parse(key, value)?,
        "perceptual_layer_indices" => cfg.perceptual_layer_indices = parse_list(key, value)?,
        "ce_sum_reduction" => cfg.ce_sum_reduction = parse(key, value)?,
        "per_patch_norm_targets" => cfg.per_patch_norm_targets = parse(key, value)?,
        "predictor_hidden" => cfg.predictor_hidden = parse(key, value)?,
        "backbone_channels" => cfg.backbone_channels = parse_list(key, value)?,
        "backbone_kernel" => cfg.backbone_kernel = parse(key, value)?,
        "backbone_stride" => cfg.backbone_stride = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "base_lr" => cfg.base_lr = parse(key, value)?,
        "min_lr" => cfg.min_lr = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "adam_eps" => cfg.adam_eps = parse(key, value)?,
        "warmup_epochs" => cfg.warmup_epochs = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        _ => {
            return Err(PacoError::InvalidConfig(format!("unknown config key: {key}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::vit_b16().validate().unwrap();
    }

    #[test]
    fn vit_preset_has_base_scale_geometry() {
        let cfg = RunConfig::vit_b16();
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.patch_len(), 768);
        assert_eq!(cfg.feature_tap_layers, vec![2, 4, 8, 12]);
    }

    #[test]
    fn tap_layer_scaling() {
        assert_eq!(default_tap_layers(12), vec![2, 4, 8, 12]);
        assert_eq!(default_tap_layers(4), vec![1, 2, 3, 4]);
        assert_eq!(default_tap_layers(2), vec![1, 2]);
        assert_eq!(default_tap_layers(1), vec![1]);
    }

    #[test]
    fn flat_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("embed_dim", "32").unwrap();
        cfg.set("feature_tap_layers", "1,2").unwrap();
        cfg.set("encoder_depth", "2").unwrap();
        let dir = std::env::temp_dir().join("paco_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.txt");
        std::fs::write(&path, cfg.to_flat_string()).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg, loaded);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("no_such_key", "1").is_err());
    }

    #[test]
    fn bad_geometry_rejected() {
        let mut cfg = RunConfig::default();
        cfg.image_size = 65;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.mask_ratio = 1.0;
        assert!(cfg.validate().is_err());
    }
}
