//! Textual and visual feature extraction.
//!
//! Text: character n-grams over boundary-padded words, hashed into frozen
//! deterministic pseudo-embeddings (or looked up from an external embedding
//! file), pooled per region, then projected by a trainable MLP. The frozen
//! stage never receives gradients; the projection always does.
//!
//! Visual: a small trainable conv stack (three stride-2 3x3 layers) over
//! the page raster, with 3x3-grid bilinear RoI pooling per region box.

use crate::doc::{BBox, DataError, Document, ReadingSequence};
use crate::model::params::{ConvStack, Mlp};
use crate::rng::{derive_stream, fnv1a64};
use crate::tensor::{Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("pool_subtokens requires at least one sub-token")]
    EmptyPool,
    #[error("no external embedding for text {0:?}")]
    Lookup(String),
    #[error("external embedding file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("raster {h}x{w} is smaller than the 8x8 minimum")]
    RasterTooSmall { h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// How sub-token embeddings are pooled into one region embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextPool {
    /// Text channel disabled: a constant unit-norm vector stands in.
    Off,
    /// Only the first sub-token's embedding.
    First,
    /// Arithmetic mean over all sub-token embeddings.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    HashNgram,
    ExternalFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub kind: TextEncoderKind,
    /// Frozen embedding width.
    pub raw_dim: usize,
    /// Projected width after the trainable MLP.
    pub text_dim: usize,
    pub ngram_sizes: Vec<usize>,
    pub hash_seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            kind: TextEncoderKind::HashNgram,
            raw_dim: 256,
            text_dim: 32,
            ngram_sizes: vec![2, 3],
            hash_seed: 0x7e87,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    /// Channels of the final feature map (= visual embedding width).
    pub channels: usize,
    /// RoI pooling grid extent (grid x grid sample points).
    pub roi_grid: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig { channels: 16, roi_grid: 3 }
    }
}

// ── Sub-tokenization and frozen embeddings ──────────────────────────

/// Character n-grams of every configured size over "^text$", left to
/// right, sizes ascending. Texts shorter than the smallest size collapse
/// to the whole padded text as a single sub-token.
pub fn subtokenize(text: &str, sizes: &[usize]) -> Vec<String> {
    debug_assert!(!text.is_empty());
    let padded: Vec<char> = std::iter::once('^')
        .chain(text.chars())
        .chain(std::iter::once('$'))
        .collect();
    let m = padded.len() - 2;
    let mut sorted_sizes = sizes.to_vec();
    sorted_sizes.sort_unstable();
    sorted_sizes.dedup();
    if let Some(&min) = sorted_sizes.first() {
        if m < min {
            return vec![padded.iter().collect()];
        }
    }
    let mut out = Vec::new();
    for &n in &sorted_sizes {
        if padded.len() < n {
            continue;
        }
        for window in padded.windows(n) {
            out.push(window.iter().collect());
        }
    }
    out
}

/// Deterministic frozen embedding: the sub-token hash seeds a generator
/// emitting `raw_dim` draws from N(0, 1/raw_dim), so vectors concentrate
/// near unit norm.
pub fn hash_embed(subtoken: &str, seed: u64, raw_dim: usize) -> Vec<f64> {
    let mut rng = derive_stream(seed, &[fnv1a64(subtoken.as_bytes())]);
    let sigma = 1.0 / (raw_dim as f64).sqrt();
    (0..raw_dim).map(|_| rng.normal() * sigma).collect()
}

/// Arithmetic mean of sub-token embeddings.
pub fn pool_subtokens(embs: &[Vec<f64>]) -> Result<Vec<f64>, EncoderError> {
    let first = embs.first().ok_or(EncoderError::EmptyPool)?;
    let mut out = vec![0.0; first.len()];
    for e in embs {
        for (o, v) in out.iter_mut().zip(e) {
            *o += v;
        }
    }
    let inv = 1.0 / embs.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

// ── External embedding files ─────────────────────────────────────────

/// Exact-string lookup table of frozen text embeddings.
#[derive(Debug, Clone)]
pub struct ExternalTable {
    map: std::collections::BTreeMap<String, Vec<f64>>,
}

impl ExternalTable {
    pub fn lookup(&self, text: &str) -> Result<&[f64], EncoderError> {
        self.map
            .get(text)
            .map(Vec::as_slice)
            .ok_or_else(|| EncoderError::Lookup(text.to_string()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Loads a UTF-8 JSON object mapping text to an embedding array.
/// Duplicate keys are a format error rather than a silent overwrite.
pub fn load_external_embeddings(path: &Path) -> Result<ExternalTable, EncoderError> {
    let text = std::fs::read_to_string(path).map_err(|e| EncoderError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| EncoderError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| EncoderError::Format {
        path: path.display().to_string(),
        msg: "expected a JSON object".into(),
    })?;
    // serde_json folds duplicate keys silently; re-scan the raw text to
    // count key occurrences and reject duplicates.
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut depth = 0usize;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' => depth += 1,
            '}' => depth = depth.saturating_sub(1),
            '"' if depth == 1 => {
                let start = i + 1;
                let mut end = start;
                for (j, cc) in text[start..].char_indices() {
                    if cc == '"' {
                        end = start + j;
                        break;
                    }
                }
                // Only count strings used as keys (followed by a colon).
                let rest = text[end + 1..].trim_start();
                if rest.starts_with(':') {
                    *counts.entry(&text[start..end]).or_insert(0) += 1;
                }
                while let Some(&(j, _)) = chars.peek() {
                    if j <= end {
                        chars.next();
                    } else {
                        break;
                    }
                }
            }
            _ => {}
        }
    }
    if let Some((key, _)) = counts.iter().find(|(_, &c)| c > 1) {
        return Err(EncoderError::Format {
            path: path.display().to_string(),
            msg: format!("duplicate key {key:?}"),
        });
    }
    let mut map = std::collections::BTreeMap::new();
    for (k, v) in obj {
        let vec: Vec<f64> = v
            .as_array()
            .and_then(|a| a.iter().map(serde_json::Value::as_f64).collect())
            .ok_or_else(|| EncoderError::Format {
                path: path.display().to_string(),
                msg: format!("value for {k:?} is not a numeric array"),
            })?;
        map.insert(k.clone(), vec);
    }
    Ok(ExternalTable { map })
}

pub fn save_external_embeddings(table: &std::collections::BTreeMap<String, Vec<f64>>, path: &Path) -> Result<(), EncoderError> {
    let json = serde_json::to_string_pretty(table).expect("embedding table serialization");
    std::fs::write(path, json).map_err(|e| EncoderError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

// ── Region embedder with memoization ─────────────────────────────────

/// Computes (and caches) the frozen pooled embedding per region text.
pub struct TextEmbedder {
    cfg: TextEncoderConfig,
    pool: TextPool,
    external: Option<ExternalTable>,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl TextEmbedder {
    pub fn new(cfg: TextEncoderConfig, pool: TextPool, external: Option<ExternalTable>) -> Self {
        TextEmbedder { cfg, pool, external, cache: Mutex::new(HashMap::new()) }
    }

    pub fn raw_dim(&self) -> usize {
        self.cfg.raw_dim
    }

    /// Frozen pooled embedding for one region text.
    pub fn pooled(&self, text: &str) -> Result<Arc<Vec<f64>>, EncoderError> {
        if let Some(hit) = self.cache.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        let raw = self.compute(text)?;
        let arc = Arc::new(raw);
        self.cache.lock().unwrap().insert(text.to_string(), arc.clone());
        Ok(arc)
    }

    fn compute(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        if self.pool == TextPool::Off {
            let v = 1.0 / (self.cfg.raw_dim as f64).sqrt();
            return Ok(vec![v; self.cfg.raw_dim]);
        }
        if let TextEncoderKind::ExternalFile(_) = self.cfg.kind {
            let table = self.external.as_ref().ok_or_else(|| EncoderError::Format {
                path: "<unset>".into(),
                msg: "external embedding kind configured without a loaded table".into(),
            })?;
            return Ok(table.lookup(text)?.to_vec());
        }
        let subtokens = subtokenize(text, &self.cfg.ngram_sizes);
        match self.pool {
            TextPool::First => Ok(hash_embed(&subtokens[0], self.cfg.hash_seed, self.cfg.raw_dim)),
            TextPool::Mean => {
                let embs: Vec<Vec<f64>> = subtokens
                    .iter()
                    .map(|s| hash_embed(s, self.cfg.hash_seed, self.cfg.raw_dim))
                    .collect();
                pool_subtokens(&embs)
            }
            TextPool::Off => unreachable!(),
        }
    }
}

// ── Tape-facing operations ───────────────────────────────────────────

/// Projects every region's frozen pooled embedding through the trainable
/// MLP. Rows come back in region-id order regardless of reading order.
pub fn text_features(
    tape: &mut Tape,
    doc: &Document,
    order: &ReadingSequence,
    embedder: &TextEmbedder,
    mlp: &Mlp,
) -> Result<Var, EncoderError> {
    let texts = doc.texts_by_id();
    let ordered = text_features_ordered(tape, &order.order.iter().map(|&id| texts[id]).collect::<Vec<_>>(), embedder, mlp)?;
    // Scatter reading-order rows back to id order.
    Ok(tape.scatter_rows(ordered, &order.order)?)
}

/// As [`text_features`] but rows follow the given text order.
pub fn text_features_ordered(
    tape: &mut Tape,
    texts: &[&str],
    embedder: &TextEmbedder,
    mlp: &Mlp,
) -> Result<Var, EncoderError> {
    let raw_dim = embedder.raw_dim();
    let mut values = Vec::with_capacity(texts.len() * raw_dim);
    for text in texts {
        values.extend_from_slice(&embedder.pooled(text)?);
    }
    let raw = tape.constant(vec![texts.len(), raw_dim], values);
    Ok(mlp.apply(tape, raw)?)
}

/// Three stride-2 conv layers (1 -> 8 -> C -> C channels) with ReLU,
/// shrinking the raster by 8x in each spatial dimension.
pub fn conv_feature_map(
    tape: &mut Tape,
    raster: &crate::doc::Raster,
    conv: &ConvStack,
) -> Result<Var, EncoderError> {
    if raster.height < 8 || raster.width < 8 {
        return Err(EncoderError::RasterTooSmall { h: raster.height, w: raster.width });
    }
    let x = tape.constant(vec![1, raster.height, raster.width], raster.data.clone());
    Ok(conv.apply(tape, x)?)
}

/// Sample points (feature-map coordinates) for a 3x3 RoI grid over a box.
pub fn roi_sample_points(
    bbox: &BBox,
    page_w: f64,
    page_h: f64,
    fmap_w: usize,
    fmap_h: usize,
    grid: usize,
) -> Vec<(f64, f64)> {
    let sx = fmap_w as f64 / page_w;
    let sy = fmap_h as f64 / page_h;
    let mut points = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let px = bbox.x0 + (gx as f64 + 0.5) * bbox.width() / grid as f64;
            let py = bbox.y0 + (gy as f64 + 0.5) * bbox.height() / grid as f64;
            points.push((px * sx, py * sy));
        }
    }
    points
}

/// Bilinear RoI pooling: evaluates the feature map at the 3x3 grid of the
/// scaled box and averages, producing one value per channel.
pub fn roi_align(
    tape: &mut Tape,
    fmap: Var,
    bbox: &BBox,
    page_w: f64,
    page_h: f64,
    grid: usize,
) -> Result<Var, EncoderError> {
    let shape = tape.shape(fmap).to_vec();
    let (fh, fw) = (shape[1], shape[2]);
    let points = roi_sample_points(bbox, page_w, page_h, fw, fh, grid);
    Ok(tape.roi_align_mean(fmap, &points)?)
}
