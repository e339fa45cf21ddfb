//! Training configuration files (TOML or JSON) with kebab-case keys.
//!
//! Recognized keys: `lambda-text-ce`, `lambda-det`, `lambda-rl`,
//! `rl-w-bert`, `rl-w-clip`, `top-p`, `temperature`, `max-new-tokens-rl`,
//! `seed`, `lr`, `steps`, `batch-size`, `grad-accum`, `clip-norm`,
//! `weight-decay`, `lr-floor`, and the model shape keys `patch`, `dim`, `heads`,
//! `caption-layers`, `det-layers`, `vision-layers`, `queries`. Keys starting
//! with `lora` are accepted and ignored with a warning.

use std::path::Path;

use panelcap_core::captioner::SamplingConfig;
use panelcap_core::model::ModelConfig;
use panelcap_core::rewards::RewardWeights;
use panelcap_core::training::{AdamConfig, StageConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{io_err, Error, Result};

/// Optimizer steps per stage when `steps` is not given.
pub const DEFAULT_STEPS: [usize; 4] = [1000, 2000, 600, 50];
/// Learning rate per stage when `lr` is not given.
pub const DEFAULT_LR: [f64; 4] = [3e-3, 3e-3, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_text_ce: f64,
    pub lambda_det: f64,
    pub lambda_rl: f64,
    pub rl_w_bert: f64,
    pub rl_w_clip: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens_rl: usize,
    pub seed: u64,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    /// Final fraction of `lr` under the per-stage cosine decay; absent keeps `lr` constant.
    pub lr_floor: Option<f64>,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub caption_layers: usize,
    pub det_layers: usize,
    pub vision_layers: usize,
    pub queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = StageConfig::new(4);
        let m = ModelConfig::default();
        Self {
            lambda_text_ce: s.lambda_cap,
            lambda_det: s.lambda_det,
            lambda_rl: s.lambda_rl,
            rl_w_bert: s.reward.alpha,
            rl_w_clip: s.reward.beta,
            top_p: s.sampling.top_p,
            temperature: s.sampling.temperature,
            max_new_tokens_rl: s.sampling.max_new_tokens,
            seed: 42,
            lr: None,
            steps: None,
            batch_size: s.batch_size,
            grad_accum: s.grad_accum,
            clip_norm: s.clip_norm,
            weight_decay: s.adam.weight_decay,
            lr_floor: s.lr_floor,
            patch: m.patch,
            dim: m.dim,
            heads: m.heads,
            caption_layers: m.caption_layers,
            det_layers: m.det_layers,
            vision_layers: m.vision_layers,
            queries: m.queries,
        }
    }
}

/// A parsed config and the warnings produced while reading it.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub config: TrainConfig,
    pub warnings: Vec<String>,
}

/// Parses a JSON object of config keys, dropping `lora*` keys with a warning.
pub fn from_value(value: serde_json::Value) -> Result<Loaded> {
    let serde_json::Value::Object(mut map) = value else {
        return Err(Error::Invalid("config must be a table of keys".into()));
    };
    let lora: Vec<String> = map.keys().filter(|k| k.starts_with("lora")).cloned().collect();
    let mut warnings = Vec::new();
    for k in lora {
        map.remove(&k);
        warnings.push(format!("config key `{k}` has no effect: adapters are not implemented"));
    }
    let config: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))?;
    Ok(Loaded { config, warnings })
}

pub fn parse_str(text: &str, is_toml: bool) -> Result<Loaded> {
    let value = if is_toml {
        let t: toml::Value = toml::from_str(text)?;
        serde_json::to_value(t)?
    } else {
        serde_json::from_str(text)?
    };
    from_value(value)
}

/// `.toml` files are TOML, everything else JSON.
pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    parse_str(&text, is_toml)
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            caption_layers: self.caption_layers,
            det_layers: self.det_layers,
            vision_layers: self.vision_layers,
            queries: self.queries,
            ..ModelConfig::default()
        }
    }

    pub fn stage_config(&self, stage: u8) -> Result<StageConfig> {
        if !(1..=4).contains(&stage) {
            return Err(Error::Invalid(format!("--stage must be 1, 2, 3 or 4 (got {stage})")));
        }
        let i = stage as usize - 1;
        let cfg = StageConfig {
            stage,
            lambda_cap: self.lambda_text_ce,
            lambda_det: self.lambda_det,
            lambda_rl: self.lambda_rl,
            reward: RewardWeights {
                alpha: self.rl_w_bert,
                beta: self.rl_w_clip,
            },
            sampling: SamplingConfig {
                top_p: self.top_p,
                temperature: self.temperature,
                max_new_tokens: self.max_new_tokens_rl,
            },
            adam: AdamConfig {
                lr: self.lr.unwrap_or(DEFAULT_LR[i]),
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            steps: self.steps.unwrap_or(DEFAULT_STEPS[i]),
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            clip_norm: self.clip_norm,
            lr_floor: self.lr_floor,
            ..StageConfig::new(stage)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
