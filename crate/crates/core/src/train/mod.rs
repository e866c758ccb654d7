//! Few-shot training loop: seeded per-epoch shuffling, geometric and graph
//! augmentation, smoothed cross-entropy, Adam, and checkpoint hooks.
//! Training is a pure function of (corpus, configs, seed).

pub mod augment;

pub use augment::{apply_geo_transform, augment_geometric, augment_graph, GeoTransform};

use crate::doc::Document;
use crate::encoders::EncoderError;
use crate::eval;
use crate::model::{self, ForwardOverrides, ModelConfig, ModelError, ModelParams};
use crate::rng::derive_stream;
use crate::tensor::ParamStore;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training requires at least one document")]
    EmptyCorpus,
    #[error("documents disagree on the label set")]
    LabelSetMismatch,
    #[error("training documents must be fully labeled")]
    Unlabeled,
    #[error("geometric augmentation requires a raster")]
    NoRaster,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Rotation limit in degrees (+-).
    pub rotation_deg: f64,
    /// Perspective corner offsets as a fraction of the page extent.
    pub perspective_frac: f64,
    /// Affine translation as a fraction of the page extent.
    pub affine_translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Probability of applying one geometric transform per sample.
    pub geo_prob: f64,
    /// Node feature dropout rate (graph augmentation).
    pub feature_dropout: f64,
    /// Gaussian bbox jitter in pixels (graph augmentation).
    pub bbox_jitter_sigma: f64,
    /// Checkpoint every N epochs through the hook; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 1e-3,
            seed: 0,
            rotation_deg: 5.0,
            perspective_frac: 0.05,
            affine_translate_frac: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
            geo_prob: 0.5,
            feature_dropout: 0.1,
            bbox_jitter_sigma: 2.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Turns every augmentation off (the "no training strategies" ablation
    /// also sets the model's label smoothing to zero).
    pub fn without_augmentation(mut self) -> Self {
        self.geo_prob = 0.0;
        self.feature_dropout = 0.0;
        self.bbox_jitter_sigma = 0.0;
        self
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub macro_f1: f64,
    pub wallclock_ms: u64,
}

/// Adam with bias correction; state is keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ModelParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in params.param_names() {
            let grad: Vec<f64> = match params.tensor(&name).unwrap().grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let tensor = params.tensor_mut(&name).unwrap();
            let values = tensor.values_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.zero_grad();
        }
    }
}

/// Trains on the given documents and returns the final parameters along
/// with the per-epoch log. The `hook` fires after every epoch.
pub fn train_with_hook(
    train_docs: &[Document],
    model_config: ModelConfig,
    cfg: &TrainConfig,
    mut hook: impl FnMut(usize, &ModelParams, &EpochLog),
) -> Result<(ModelParams, Vec<EpochLog>), TrainError> {
    if train_docs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let labels = &train_docs[0].labels;
    for doc in train_docs {
        if &doc.labels != labels {
            return Err(TrainError::LabelSetMismatch);
        }
        if doc.labels_by_id().is_none() {
            return Err(TrainError::Unlabeled);
        }
    }
    let embedder = model::make_embedder(&model_config)?;
    let mut params = ModelParams::init(model_config, labels.len(), cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let eps = params.config.label_smoothing;

    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        derive_stream(cfg.seed, &[0xe90c, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (pos, &di) in order.iter().enumerate() {
            let doc = &train_docs[di];
            let mut rng = derive_stream(cfg.seed, &[0xa716, epoch as u64, pos as u64]);
            let geo_doc;
            let work_doc = if rng.uniform() < cfg.geo_prob {
                geo_doc = augment_geometric(doc, cfg, &mut rng)?;
                // Heavy crops can drop below the two-node minimum; fall
                // back to the clean document for this step.
                if geo_doc.len() >= 2 {
                    &geo_doc
                } else {
                    doc
                }
            } else {
                doc
            };
            let boxes = work_doc.boxes_by_id();
            let (rel_boxes, drop_mask) =
                augment_graph(&boxes, work_doc.width, work_doc.height, cfg, &mut rng);
            let overrides = ForwardOverrides {
                rel_boxes: Some(&rel_boxes),
                drop_mask: Some(&drop_mask),
            };
            let mut pass = model::run_forward(work_doc, &params, &embedder, overrides)?;
            let labels_by_id = work_doc.labels_by_id().ok_or(TrainError::Unlabeled)?;
            let loss = pass.smoothed_loss(&labels_by_id, eps)?;
            loss_sum += pass.tape.scalar_value(loss);
            pass.tape.backward(loss)?;
            params.accumulate_grads(pass.tape.harvest());
            adam.step(&mut params);
        }
        let report = eval::evaluate(&params, train_docs, &embedder)?;
        let log = EpochLog {
            epoch,
            loss: loss_sum / train_docs.len() as f64,
            macro_f1: report.macro_f1,
            wallclock_ms: started.elapsed().as_millis() as u64,
        };
        hook(epoch, &params, &log);
        logs.push(log);
    }
    Ok((params, logs))
}

pub fn train(
    train_docs: &[Document],
    model_config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>), TrainError> {
    train_with_hook(train_docs, model_config, cfg, |_, _, _| {})
}
