//! Flat training configuration, read from TOML with flag overrides on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{AlignmentConfig, ITEM_PROMPT, USER_PROMPT};
use crate::backbone::BackboneKind;
use crate::error::{FaceError, Result};
use crate::mapper::MapperConfig;
use crate::params::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub backbone: BackboneKind,
    pub cf_dim: usize,
    pub lightgcn_layers: usize,
    pub reg: f64,

    pub descriptors: usize,
    pub levels: usize,
    pub code_dim: usize,
    pub beta: f64,
    pub mapper_layers: usize,
    pub mapper_heads: usize,
    pub ff_mult: usize,

    pub mu: f64,
    pub lambda: f64,
    pub tau: f64,
    pub prompt_user: String,
    pub prompt_item: String,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub freeze_backbone: bool,
    /// Stop-early metric cutoff.
    pub early_stop_k: usize,
    /// Write a checkpoint every this many epochs (the last epoch of a stage is
    /// always written).
    pub checkpoint_every: usize,

    pub min_token_len: usize,
    pub max_vocab: usize,
    pub codebook_init_scale: f64,
    /// Require a leading word-start marker on source tokens.
    pub require_word_marker: bool,

    pub text_dim: usize,
    pub text_encoder_seed: u64,
    pub normalize_anchors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            backbone: BackboneKind::LightGcn,
            cf_dim: 256,
            lightgcn_layers: 3,
            reg: 1e-4,
            descriptors: 16,
            levels: 3,
            code_dim: 256,
            beta: 0.25,
            mapper_layers: 2,
            mapper_heads: 4,
            ff_mult: 4,
            mu: 1.0,
            lambda: 0.1,
            tau: 0.02,
            prompt_user: USER_PROMPT.into(),
            prompt_item: ITEM_PROMPT.into(),
            lr: 1e-2,
            batch_size: 128,
            epochs_stage1: 100,
            epochs_stage2: 50,
            epochs_stage3: 100,
            patience: 10,
            clip_norm: 5.0,
            freeze_backbone: false,
            early_stop_k: 20,
            checkpoint_every: 1,
            min_token_len: 3,
            max_vocab: 10_000,
            codebook_init_scale: 1.0,
            require_word_marker: false,
            text_dim: 4096,
            text_encoder_seed: 7,
            normalize_anchors: true,
        }
    }
}

impl TrainConfig {
    /// Small shapes for the synthetic fixture.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneKind::Gmf,
            cf_dim: 32,
            descriptors: 4,
            code_dim: 16,
            epochs_stage1: 30,
            epochs_stage2: 20,
            epochs_stage3: 30,
            text_dim: 64,
            ..Self::default()
        }
    }

    pub fn from_toml_str(body: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(body).map_err(|e| FaceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; keys missing from the file take `base` values.
    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| FaceError::io(path, e))?;
        let file: toml::Table = toml::from_str(&body).map_err(|e| FaceError::Config(format!("{}: {e}", path.display())))?;
        base.merged(file).map_err(|e| FaceError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides. Values are TOML literals; bare words
    /// are taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, pairs: &[S]) -> Result<Self> {
        let mut table = toml::Table::new();
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| FaceError::Config(format!("override `{pair}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        self.merged(table).map_err(FaceError::Config)
    }

    fn merged(&self, overrides: toml::Table) -> Result<Self, String> {
        let mut merged = toml::Table::try_from(self).map_err(|e| e.to_string())?;
        for (k, v) in overrides {
            if !merged.contains_key(&k) {
                return Err(format!("unknown key `{k}`"));
            }
            merged.insert(k, v);
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(FaceError::Config(m.into()));
        if !(self.mu >= 0.0) || !(self.lambda >= 0.0) {
            return fail("mu and lambda must be non-negative");
        }
        if self.cf_dim == 0 || self.text_dim == 0 {
            return fail("embedding widths must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return fail("lr and clip_norm must be positive");
        }
        if self.reg < 0.0 {
            return fail("reg must be non-negative");
        }
        if self.early_stop_k == 0 || self.checkpoint_every == 0 {
            return fail("early_stop_k and checkpoint_every must be positive");
        }
        self.mapper().validate()?;
        self.alignment().validate()
    }

    pub fn mapper(&self) -> MapperConfig {
        MapperConfig {
            descriptors: self.descriptors,
            levels: self.levels,
            dim: self.code_dim,
            beta: self.beta,
            layers: self.mapper_layers,
            heads: self.mapper_heads,
            ff_mult: self.ff_mult,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            tau: self.tau,
            prompt_user: self.prompt_user.clone(),
            prompt_item: self.prompt_item.clone(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn stage_epochs(&self, stage: u8) -> usize {
        match stage {
            1 => self.epochs_stage1,
            2 => self.epochs_stage2,
            3 => self.epochs_stage3,
            _ => 0,
        }
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
