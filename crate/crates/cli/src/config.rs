//! Run configuration with flat dotted keys. A config file is a JSON object
//! of `"section.key": value` entries; CLI flags override file values, and
//! the fully resolved configuration is echoed into every run directory.

use anyhow::{anyhow, bail, Result};
use fsdag_core::encoders::{TextEncoderKind, TextPool};
use fsdag_core::model::{MessageMode, ModelConfig};
use fsdag_core::train::TrainConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn as_usize(key: &str, v: &serde_json::Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| anyhow!("config key {key} expects a non-negative integer, got {v}"))
}

fn as_f64(key: &str, v: &serde_json::Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| anyhow!("config key {key} expects a number, got {v}"))
}

fn as_bool(key: &str, v: &serde_json::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| anyhow!("config key {key} expects a boolean, got {v}"))
}

fn as_str<'a>(key: &str, v: &'a serde_json::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| anyhow!("config key {key} expects a string, got {v}"))
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow!("cannot read config {}: {e}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| anyhow!("cannot parse config {}: {e}", path.display()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| anyhow!("config {} must be a JSON object", path.display()))?;
        for (key, v) in obj {
            self.apply(key, v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override where the value is JSON-encoded
    /// (bare strings are accepted for string-typed keys).
    pub fn apply_kv(&mut self, kv: &str) -> Result<()> {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override {kv:?} is not of the form key=value"))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        self.apply(key, &value)
    }

    pub fn apply(&mut self, key: &str, v: &serde_json::Value) -> Result<()> {
        match key {
            "model.node_dim" => self.model.node_dim = as_usize(key, v)?,
            "model.edge_dim" => self.model.edge_dim = as_usize(key, v)?,
            "model.pos_dim" => self.model.pos_dim = as_usize(key, v)?,
            "model.heads" => self.model.heads = as_usize(key, v)?,
            "model.steps" => self.model.steps = as_usize(key, v)?,
            "model.grid_k" => self.model.grid_k = as_usize(key, v)?,
            "model.label_smoothing" => self.model.label_smoothing = as_f64(key, v)?,
            "model.text_pool" => {
                self.model.text_pool = match as_str(key, v)? {
                    "off" => TextPool::Off,
                    "first" => TextPool::First,
                    "mean" => TextPool::Mean,
                    other => bail!("config key {key}: unknown pooling mode {other:?}"),
                }
            }
            "model.use_visual" => self.model.use_visual = as_bool(key, v)?,
            "model.use_positional" => self.model.use_positional = as_bool(key, v)?,
            "model.message_mode" => {
                self.model.message_mode = match as_str(key, v)? {
                    "vector" => MessageMode::Vector,
                    "scalar" => MessageMode::Scalar,
                    other => bail!("config key {key}: unknown message mode {other:?}"),
                }
            }
            "model.text.kind" => {
                let s = as_str(key, v)?;
                self.model.text.kind = if s == "hash_ngram" {
                    TextEncoderKind::HashNgram
                } else if let Some(path) = s.strip_prefix("external:") {
                    TextEncoderKind::ExternalFile(PathBuf::from(path))
                } else {
                    bail!("config key {key}: expected \"hash_ngram\" or \"external:<path>\", got {s:?}")
                };
            }
            "model.text.raw_dim" => self.model.text.raw_dim = as_usize(key, v)?,
            "model.text.text_dim" => self.model.text.text_dim = as_usize(key, v)?,
            "model.text.hash_seed" => {
                self.model.text.hash_seed = v
                    .as_u64()
                    .ok_or_else(|| anyhow!("config key {key} expects an integer"))?
            }
            "model.text.ngram_sizes" => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| anyhow!("config key {key} expects an array of integers"))?;
                self.model.text.ngram_sizes = arr
                    .iter()
                    .map(|x| as_usize(key, x))
                    .collect::<Result<Vec<_>>>()?;
            }
            "model.visual.channels" => self.model.visual.channels = as_usize(key, v)?,
            "model.visual.roi_grid" => self.model.visual.roi_grid = as_usize(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.lr" => self.train.lr = as_f64(key, v)?,
            "train.seed" => {
                self.train.seed = v
                    .as_u64()
                    .ok_or_else(|| anyhow!("config key {key} expects an integer"))?
            }
            "train.rotation_deg" => self.train.rotation_deg = as_f64(key, v)?,
            "train.perspective_frac" => self.train.perspective_frac = as_f64(key, v)?,
            "train.affine_translate_frac" => self.train.affine_translate_frac = as_f64(key, v)?,
            "train.scale_min" => self.train.scale_min = as_f64(key, v)?,
            "train.scale_max" => self.train.scale_max = as_f64(key, v)?,
            "train.geo_prob" => self.train.geo_prob = as_f64(key, v)?,
            "train.feature_dropout" => self.train.feature_dropout = as_f64(key, v)?,
            "train.bbox_jitter_sigma" => self.train.bbox_jitter_sigma = as_f64(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = as_usize(key, v)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Ablation presets mirroring the component-study rows. "Strategies"
    /// means the training-side techniques: augmentation plus label
    /// smoothing.
    pub fn apply_preset(&mut self, preset: &str) -> Result<()> {
        let strategies_off = |cfg: &mut RunConfig| {
            cfg.train = cfg.train.clone().without_augmentation();
            cfg.model.label_smoothing = 0.0;
        };
        let all_components_off = |cfg: &mut RunConfig| {
            cfg.model.text_pool = TextPool::Off;
            cfg.model.use_visual = false;
            cfg.model.use_positional = false;
        };
        match preset {
            "full" => {}
            "skeleton" => {
                all_components_off(self);
                strategies_off(self);
            }
            "first-token" => {
                all_components_off(self);
                strategies_off(self);
                self.model.text_pool = TextPool::First;
            }
            "pooling" => {
                all_components_off(self);
                strategies_off(self);
                self.model.text_pool = TextPool::Mean;
            }
            "visual" => {
                all_components_off(self);
                strategies_off(self);
                self.model.use_visual = true;
            }
            "positional" => {
                all_components_off(self);
                strategies_off(self);
                self.model.use_positional = true;
            }
            "strategies" => {
                all_components_off(self);
            }
            "text-only" => {
                self.model.text_pool = TextPool::Mean;
                self.model.use_visual = false;
                self.model.use_positional = false;
            }
            "no-visual" => self.model.use_visual = false,
            "no-positional" => self.model.use_positional = false,
            other => bail!(
                "unknown ablation preset {other:?} (expected one of full, skeleton, first-token, \
                 pooling, visual, positional, strategies, text-only, no-visual, no-positional)"
            ),
        }
        Ok(())
    }

    /// The fully resolved configuration as flat dotted keys, sorted.
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        let mut put = |k: &str, v: serde_json::Value| {
            map.insert(k.to_string(), v);
        };
        use serde_json::json;
        put("model.node_dim", json!(self.model.node_dim));
        put("model.edge_dim", json!(self.model.edge_dim));
        put("model.pos_dim", json!(self.model.pos_dim));
        put("model.heads", json!(self.model.heads));
        put("model.steps", json!(self.model.steps));
        put("model.grid_k", json!(self.model.grid_k));
        put("model.label_smoothing", json!(self.model.label_smoothing));
        put(
            "model.text_pool",
            json!(match self.model.text_pool {
                TextPool::Off => "off",
                TextPool::First => "first",
                TextPool::Mean => "mean",
            }),
        );
        put("model.use_visual", json!(self.model.use_visual));
        put("model.use_positional", json!(self.model.use_positional));
        put(
            "model.message_mode",
            json!(match self.model.message_mode {
                MessageMode::Vector => "vector",
                MessageMode::Scalar => "scalar",
            }),
        );
        put(
            "model.text.kind",
            json!(match &self.model.text.kind {
                TextEncoderKind::HashNgram => "hash_ngram".to_string(),
                TextEncoderKind::ExternalFile(p) => format!("external:{}", p.display()),
            }),
        );
        put("model.text.raw_dim", json!(self.model.text.raw_dim));
        put("model.text.text_dim", json!(self.model.text.text_dim));
        put("model.text.hash_seed", json!(self.model.text.hash_seed));
        put("model.text.ngram_sizes", json!(self.model.text.ngram_sizes));
        put("model.visual.channels", json!(self.model.visual.channels));
        put("model.visual.roi_grid", json!(self.model.visual.roi_grid));
        put("train.epochs", json!(self.train.epochs));
        put("train.lr", json!(self.train.lr));
        put("train.seed", json!(self.train.seed));
        put("train.rotation_deg", json!(self.train.rotation_deg));
        put("train.perspective_frac", json!(self.train.perspective_frac));
        put("train.affine_translate_frac", json!(self.train.affine_translate_frac));
        put("train.scale_min", json!(self.train.scale_min));
        put("train.scale_max", json!(self.train.scale_max));
        put("train.geo_prob", json!(self.train.geo_prob));
        put("train.feature_dropout", json!(self.train.feature_dropout));
        put("train.bbox_jitter_sigma", json!(self.train.bbox_jitter_sigma));
        put("train.checkpoint_every", json!(self.train.checkpoint_every));
        serde_json::Value::Object(map)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.to_flat_json())?)
            .map_err(|e| anyhow!("cannot write {}: {e}", path.display()))
    }
}
