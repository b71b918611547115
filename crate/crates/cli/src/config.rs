//! Run configuration: one TOML file, every field optional.
//!
//! Defaults carry the reference constants (AdamW lr 2e-5, weight decay 0.1,
//! betas 0.9/0.95, z-loss weight 1e-5, context drop 0.1, dropout 0.05, text
//! top-k 5, image T 1.0 / top-k 2000 / guidance 4.0) next to desk-sized
//! vocabulary, model and stage values.

use mgpt::decoding::DecodeParams;
use mgpt::model::{AdamWConfig, ModelConfig};
use mgpt::resolution::{AspectRange, StagePlan};
use mgpt::training::TrainHyper;
use mgpt::vocab::VocabManifest;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub vocab: VocabSection,
    /// Codebook JSON. Without one, the eight-color palette codebook is used.
    pub codebook: Option<PathBuf>,
    pub stages: StageSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub text_size: u32,
    pub codebook_size: u32,
    pub max_side: u32,
    pub patch_px: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    /// Target pixel area per stage, strictly increasing.
    pub target_areas: Vec<u64>,
    pub area_tolerance: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub dropout_p: f64,
    /// Must equal the vocabulary size when given.
    pub vocab_total: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub z_weight: f64,
    pub drop_p: f64,
    pub batch_size: usize,
    pub steps_per_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub text: DecodeParams,
    pub image: DecodeParams,
    pub constrained: bool,
    pub max_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: VocabSection::default(),
            codebook: None,
            stages: StageSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            decode: DecodeSection::default(),
        }
    }
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { text_size: 256, codebook_size: 8, max_side: 16, patch_px: 8 }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        Self { target_areas: vec![64 * 64, 96 * 96, 128 * 128], area_tolerance: 0.15, aspect_min: 0.5, aspect_max: 2.0 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            max_seq: 384,
            rope_base: 10_000.0,
            dropout_p: 0.05,
            vocab_total: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            z_weight: 1e-5,
            drop_p: 0.1,
            batch_size: 8,
            steps_per_stage: 200,
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            text: DecodeParams::text_default(),
            image: DecodeParams::image_default(),
            constrained: true,
            max_tokens: 300,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the effective config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..16].to_string()
    }

    pub fn manifest(&self) -> Result<VocabManifest, String> {
        let v = &self.vocab;
        VocabManifest::new(v.text_size, v.codebook_size, v.max_side, v.patch_px).map_err(|e| e.to_string())
    }

    pub fn plan(&self) -> Result<StagePlan, String> {
        let s = &self.stages;
        StagePlan::generate(
            &s.target_areas,
            self.vocab.patch_px,
            self.vocab.max_side,
            s.area_tolerance,
            AspectRange::new(s.aspect_min, s.aspect_max),
        )
        .map_err(|e| e.to_string())
    }

    pub fn model_config(&self) -> Result<ModelConfig, String> {
        let m = &self.model;
        let vocab = self.manifest()?.total() as usize;
        Ok(ModelConfig {
            layers: m.layers,
            heads: m.heads,
            model_dim: m.model_dim,
            ffn_dim: m.ffn_dim,
            vocab_total: vocab,
            max_seq: m.max_seq,
            rope_base: m.rope_base,
            dropout_p: m.dropout_p,
            seed: self.seed,
        })
    }

    pub fn hyper(&self) -> TrainHyper {
        let t = &self.train;
        TrainHyper {
            adamw: AdamWConfig { lr: t.lr, weight_decay: t.weight_decay, beta1: t.beta1, beta2: t.beta2, eps: t.eps },
            z_weight: t.z_weight,
            drop_p: t.drop_p,
            batch_size: t.batch_size,
            steps: t.steps_per_stage,
            seed: self.seed,
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let manifest = match self.manifest() {
            Ok(m) => Some(m),
            Err(e) => {
                v.push(format!("vocab: {e}"));
                None
            }
        };
        if self.stages.target_areas.is_empty() {
            v.push("stages: target_areas is empty".into());
        } else if let Err(e) = self.plan() {
            v.push(format!("stages: {e}"));
        }
        if !(self.stages.aspect_min > 0.0 && self.stages.aspect_min <= self.stages.aspect_max) {
            v.push("stages: need 0 < aspect_min <= aspect_max".into());
        }
        match self.model_config() {
            Ok(mc) => {
                if let Err(e) = mc.validate() {
                    v.push(format!("model: {e}"));
                }
            }
            Err(_) => v.push("model: cannot derive vocabulary size".into()),
        }
        if let (Some(want), Some(m)) = (self.model.vocab_total, &manifest) {
            if want != m.total() as usize {
                v.push(format!("model: vocab_total {want} does not match the vocabulary size {}", m.total()));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout_p) {
            v.push("model: dropout_p must be in [0, 1)".into());
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            v.push("train: lr must be >= 0".into());
        }
        if t.weight_decay < 0.0 {
            v.push("train: weight_decay must be >= 0".into());
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("train: {name} must be in [0, 1)"));
            }
        }
        if t.eps <= 0.0 {
            v.push("train: eps must be > 0".into());
        }
        if t.z_weight < 0.0 {
            v.push("train: z_weight must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&t.drop_p) {
            v.push("train: drop_p must be in [0, 1]".into());
        }
        if t.batch_size == 0 {
            v.push("train: batch_size must be >= 1".into());
        }
        for (name, p) in [("text", &self.decode.text), ("image", &self.decode.image)] {
            if let Err(e) = p.validate() {
                v.push(format!("decode.{name}: {e}"));
            }
        }
        if self.decode.max_tokens == 0 || self.decode.max_tokens > self.model.max_seq {
            v.push(format!("decode: max_tokens must be in 1..={}", self.model.max_seq));
        }
        v
    }
}
