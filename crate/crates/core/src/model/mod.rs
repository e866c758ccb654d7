//! The document-graph model: Kronecker fusion of text and visual features,
//! spatial-relation edge embeddings, grid positional embeddings, multi-head
//! attention message passing, and the node classification head with
//! smoothed cross-entropy.
//!
//! The forward pass processes nodes in reading order internally (a
//! canonical, content-derived order), so neighbor reductions sum in the
//! same sequence no matter how region ids are assigned; logits are
//! scattered back to region-id order at the end. That makes the whole
//! pipeline bitwise equivariant under region-id permutations.

pub mod checkpoint;
pub mod config;
pub mod params;

pub use config::{MessageMode, ModelConfig};
pub use params::{ConvStack, HeadParams, Mlp, ModelParams};

use crate::doc::{grid_bin, reading_order, spatial_relation, BBox, DataError, Document};
use crate::encoders::{self, EncoderError, TextEmbedder};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const L2_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("graph needs at least 2 regions, got {0}")]
    DegenerateGraph(usize),
    #[error("visual channel enabled but document has no raster")]
    MissingRaster,
    #[error("override mismatch: {0}")]
    BadOverride(String),
    #[error("corpus is not fully labeled")]
    Unlabeled,
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Per-step diagnostic snapshot of the graph, all in region-id order.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub l: usize,
    pub node_dim: usize,
    /// Node features n^0 .. n^K, each L x node_dim.
    pub node_steps: Vec<Vec<f64>>,
    /// Edge embeddings, L x L x edge_dim with zero diagonal blocks.
    pub edges: Vec<f64>,
    /// Positional embeddings, L x pos_dim.
    pub positional: Vec<f64>,
    /// attention[step][head] is an L x L matrix with zero diagonal whose
    /// off-diagonal rows sum to one.
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Training-time perturbations applied inside the forward pass. Both are
/// indexed by region id.
#[derive(Default, Clone, Copy)]
pub struct ForwardOverrides<'a> {
    /// Boxes used for spatial relations and positional embeddings
    /// (graph augmentation jitters these); RoI pooling keeps the
    /// document's own boxes.
    pub rel_boxes: Option<&'a [BBox]>,
    /// Nodes whose fused feature vector is zeroed (feature dropout).
    pub drop_mask: Option<&'a [bool]>,
}

/// A completed forward pass: the tape (for backward), the logits var in
/// region-id order, and the captured graph state.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub state: GraphState,
    pub n_classes: usize,
}

impl ForwardPass {
    pub fn logits_tensor(&self) -> Tensor {
        self.tape.to_tensor(self.logits)
    }

    /// Smoothed cross-entropy over all nodes; labels indexed by region id.
    pub fn smoothed_loss(&mut self, labels: &[usize], eps: f64) -> Result<Var, ModelError> {
        ops::smoothed_ce_loss(&mut self.tape, self.logits, labels, eps)
    }
}

/// Scatters internal-order rows into region-id order.
fn to_id_order(vals: &[f64], ord: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; vals.len()];
    for (t, &id) in ord.iter().enumerate() {
        out[id * width..(id + 1) * width].copy_from_slice(&vals[t * width..(t + 1) * width]);
    }
    out
}

/// Builds the text embedder a config implies, loading the external
/// embedding table when one is configured.
pub fn make_embedder(cfg: &ModelConfig) -> Result<TextEmbedder, EncoderError> {
    let external = match &cfg.text.kind {
        crate::encoders::TextEncoderKind::ExternalFile(path) => {
            Some(crate::encoders::load_external_embeddings(path)?)
        }
        crate::encoders::TextEncoderKind::HashNgram => None,
    };
    Ok(TextEmbedder::new(cfg.text.clone(), cfg.text_pool, external))
}

pub fn forward(
    doc: &Document,
    params: &ModelParams,
    embedder: &TextEmbedder,
) -> Result<(Tensor, GraphState), ModelError> {
    let pass = run_forward(doc, params, embedder, ForwardOverrides::default())?;
    Ok((pass.logits_tensor(), pass.state))
}

pub fn run_forward(
    doc: &Document,
    params: &ModelParams,
    embedder: &TextEmbedder,
    ov: ForwardOverrides,
) -> Result<ForwardPass, ModelError> {
    let cfg = &params.config;
    let l = doc.len();
    if l < 2 {
        return Err(ModelError::DegenerateGraph(l));
    }
    let ord = reading_order(doc).order;
    let texts_by_id = doc.texts_by_id();
    let roi_boxes = doc.boxes_by_id();
    let rel_boxes: Vec<BBox> = match ov.rel_boxes {
        Some(boxes) => {
            if boxes.len() != l {
                return Err(ModelError::BadOverride(format!(
                    "{} relation boxes for {l} regions",
                    boxes.len()
                )));
            }
            boxes.to_vec()
        }
        None => roi_boxes.clone(),
    };

    let mut tape = Tape::new();

    // Text features, rows in reading order.
    let texts_internal: Vec<&str> = ord.iter().map(|&id| texts_by_id[id]).collect();
    let t_feats = encoders::text_features_ordered(&mut tape, &texts_internal, embedder, &params.text_proj)?;

    // Visual features per node via RoI pooling on the conv feature map.
    let dv = cfg.visual_dim();
    let v_feats = if cfg.use_visual {
        let raster = doc.raster.as_ref().ok_or(ModelError::MissingRaster)?;
        let fmap = encoders::conv_feature_map(&mut tape, raster, &params.conv)?;
        let mut rows = Vec::with_capacity(l);
        for &id in &ord {
            rows.push(encoders::roi_align(
                &mut tape,
                fmap,
                &roi_boxes[id],
                doc.width,
                doc.height,
                cfg.visual.roi_grid,
            )?);
        }
        tape.stack_rows(&rows)?
    } else {
        // Constant unit-norm stand-in keeps fusion dimensions fixed.
        let v = 1.0 / (dv as f64).sqrt();
        tape.constant(vec![l, dv], vec![v; l * dv])
    };

    // Kronecker fusion into initial node features.
    let dt = cfg.text.text_dim;
    let mut kron_rows = Vec::with_capacity(l);
    for t in 0..l {
        let tr = tape.rows_slice(t_feats, t, 1)?;
        let tr = tape.reshape(tr, vec![dt])?;
        let vr = tape.rows_slice(v_feats, t, 1)?;
        let vr = tape.reshape(vr, vec![dv])?;
        kron_rows.push(tape.kron(tr, vr)?);
    }
    let fused_in = tape.stack_rows(&kron_rows)?;
    let mut nodes = params.fusion.apply(&mut tape, fused_in)?;
    if let Some(mask) = ov.drop_mask {
        if mask.len() != l {
            return Err(ModelError::BadOverride(format!("{} mask entries for {l} regions", mask.len())));
        }
        let mask_internal: Vec<bool> = ord.iter().map(|&id| mask[id]).collect();
        nodes = tape.drop_rows(nodes, &mask_internal)?;
    }

    // Positional embeddings from the grid-binned box coordinates.
    let pos = if cfg.use_positional {
        let mut bx0 = Vec::with_capacity(l);
        let mut bx1 = Vec::with_capacity(l);
        let mut by0 = Vec::with_capacity(l);
        let mut by1 = Vec::with_capacity(l);
        for &id in &ord {
            let b = &rel_boxes[id];
            bx0.push(grid_bin(b.x0, doc.width, cfg.grid_k)?);
            bx1.push(grid_bin(b.x1, doc.width, cfg.grid_k)?);
            by0.push(grid_bin(b.y0, doc.height, cfg.grid_k)?);
            by1.push(grid_bin(b.y1, doc.height, cfg.grid_k)?);
        }
        let hor = tape.bind("pos_hor", &params.pos_hor);
        let ver = tape.bind("pos_ver", &params.pos_ver);
        let g = [
            tape.gather_rows(hor, &bx0)?,
            tape.gather_rows(hor, &bx1)?,
            tape.gather_rows(ver, &by0)?,
            tape.gather_rows(ver, &by1)?,
        ];
        let cat = tape.concat_cols(&g)?;
        tape.tanh(cat)
    } else {
        tape.constant(vec![l, cfg.pos_dim], vec![0.0; l * cfg.pos_dim])
    };

    // Edge embeddings over all ordered pairs, reading-order major.
    let p_count = l * (l - 1);
    let mut idx_i = Vec::with_capacity(p_count);
    let mut idx_j = Vec::with_capacity(p_count);
    let mut svals = Vec::with_capacity(p_count * 6);
    for a in 0..l {
        for b in 0..l {
            if a == b {
                continue;
            }
            idx_i.push(a);
            idx_j.push(b);
            svals.extend_from_slice(&spatial_relation(
                &rel_boxes[ord[a]],
                &rel_boxes[ord[b]],
                doc.width,
                doc.height,
            ));
        }
    }
    let s_const = tape.constant(vec![p_count, 6], svals);
    let e_proj = params.edge_proj.apply(&mut tape, s_const)?;
    let edges = tape.l2_normalize_rows(e_proj, L2_NORM_EPS)?;

    // Pair-MLP first-layer weight blocks. The concatenated pair input is
    // [n_i | p_i | e_ij | n_j | p_j], so slicing w1 by rows lets the n/p
    // contributions be computed per node and gathered per pair.
    let nd = cfg.node_dim;
    let pd = cfg.pos_dim;
    let ed = cfg.edge_dim;
    struct HeadCtx {
        blk_ni: Var,
        blk_nj: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        static_sum: Var, // e-block + positional contributions, per pair
        score_w1: Var,
        score_b1: Var,
        score_w2: Var,
        score_b2: Var,
    }
    let mut head_ctx = Vec::with_capacity(cfg.heads);
    for head in &params.heads {
        let w1 = tape.bind(&format!("{}.w1", head.pair.name), &head.pair.w1);
        let b1 = tape.bind(&format!("{}.b1", head.pair.name), &head.pair.b1);
        let w2 = tape.bind(&format!("{}.w2", head.pair.name), &head.pair.w2);
        let b2 = tape.bind(&format!("{}.b2", head.pair.name), &head.pair.b2);
        let blk_ni = tape.rows_slice(w1, 0, nd)?;
        let blk_pi = tape.rows_slice(w1, nd, pd)?;
        let blk_e = tape.rows_slice(w1, nd + pd, ed)?;
        let blk_nj = tape.rows_slice(w1, nd + pd + ed, nd)?;
        let blk_pj = tape.rows_slice(w1, nd + pd + ed + nd, pd)?;
        let e_part = tape.matmul(edges, blk_e)?;
        let pi_part = tape.matmul(pos, blk_pi)?;
        let pj_part = tape.matmul(pos, blk_pj)?;
        let pi_g = tape.gather_rows(pi_part, &idx_i)?;
        let pj_g = tape.gather_rows(pj_part, &idx_j)?;
        let static_sum = tape.add_n(&[e_part, pi_g, pj_g])?;
        let score_w1 = tape.bind(&format!("{}.w1", head.score.name), &head.score.w1);
        let score_b1 = tape.bind(&format!("{}.b1", head.score.name), &head.score.b1);
        let score_w2 = tape.bind(&format!("{}.w2", head.score.name), &head.score.w2);
        let score_b2 = tape.bind(&format!("{}.b2", head.score.name), &head.score.b2);
        head_ctx.push(HeadCtx {
            blk_ni,
            blk_nj,
            b1,
            w2,
            b2,
            static_sum,
            score_w1,
            score_b1,
            score_w2,
            score_b2,
        });
    }

    let mut state = GraphState {
        l,
        node_dim: nd,
        node_steps: vec![to_id_order(tape.value(nodes), &ord, nd)],
        edges: {
            let mut e = vec![0.0; l * l * ed];
            let evals = tape.value(edges);
            for (p, (&a, &b)) in idx_i.iter().zip(&idx_j).enumerate() {
                let (ia, ib) = (ord[a], ord[b]);
                e[(ia * l + ib) * ed..(ia * l + ib + 1) * ed]
                    .copy_from_slice(&evals[p * ed..(p + 1) * ed]);
            }
            e
        },
        positional: to_id_order(tape.value(pos), &ord, pd),
        attention: Vec::new(),
    };

    // Propagation: per step, per head, attention-weighted messages feed a
    // per-step update MLP; instance norm, ReLU, then a residual add.
    for step in 0..cfg.steps {
        let mut messages = Vec::with_capacity(cfg.heads);
        let mut step_attention = Vec::with_capacity(cfg.heads);
        for ctx in &head_ctx {
            let ni_part = tape.matmul(nodes, ctx.blk_ni)?;
            let nj_part = tape.matmul(nodes, ctx.blk_nj)?;
            let ni_g = tape.gather_rows(ni_part, &idx_i)?;
            let nj_g = tape.gather_rows(nj_part, &idx_j)?;
            let h1 = tape.add_n(&[ni_g, nj_g, ctx.static_sum])?;
            let h1 = tape.add_row(h1, ctx.b1)?;
            let h1 = tape.relu(h1);
            let evec = tape.matmul(h1, ctx.w2)?;
            let evec = tape.add_row(evec, ctx.b2)?;
            let s1 = tape.matmul(evec, ctx.score_w1)?;
            let s1 = tape.add_row(s1, ctx.score_b1)?;
            let s1 = tape.relu(s1);
            let s2 = tape.matmul(s1, ctx.score_w2)?;
            let scores2d = tape.add_row(s2, ctx.score_b2)?;
            let scores = tape.reshape(scores2d, vec![p_count])?;
            let alpha = tape.pair_softmax(scores, l)?;
            let msg = match cfg.message_mode {
                MessageMode::Vector => tape.pair_weighted_sum(alpha, evec, l)?,
                MessageMode::Scalar => tape.pair_weighted_sum(alpha, scores2d, l)?,
            };
            messages.push(msg);
            // Capture attention as a dense L x L matrix in id order.
            let avals = tape.value(alpha);
            let mut dense = vec![0.0; l * l];
            for (p, (&a, &b)) in idx_i.iter().zip(&idx_j).enumerate() {
                dense[ord[a] * l + ord[b]] = avals[p];
            }
            step_attention.push(dense);
        }
        state.attention.push(step_attention);
        let cat = tape.concat_cols(&messages)?;
        let upd = params.updates[step].apply(&mut tape, cat)?;
        let upd = tape.instance_norm(upd, INSTANCE_NORM_EPS)?;
        let upd = tape.relu(upd);
        nodes = tape.add(nodes, upd)?;
        state.node_steps.push(to_id_order(tape.value(nodes), &ord, nd));
    }

    // Classification head, then back to region-id order.
    let logits_internal = ops::classify(&mut tape, nodes, params)?;
    let logits = tape.scatter_rows(logits_internal, &ord)?;
    Ok(ForwardPass { tape, logits, state, n_classes: params.n_classes })
}

/// Forward-only node inputs (post-projection text features and RoI visual
/// features) per region id. Useful for probing and for comparing the
/// propagation stage against independent reimplementations.
pub fn encode_node_inputs(
    doc: &Document,
    params: &ModelParams,
    embedder: &TextEmbedder,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
    let cfg = &params.config;
    let l = doc.len();
    let mut tape = Tape::new();
    let texts = doc.texts_by_id();
    let texts_vec: Vec<&str> = (0..l).map(|id| texts[id]).collect();
    let t_feats = encoders::text_features_ordered(&mut tape, &texts_vec, embedder, &params.text_proj)?;
    let dt = cfg.text.text_dim;
    let t_out: Vec<Vec<f64>> = (0..l)
        .map(|i| tape.value(t_feats)[i * dt..(i + 1) * dt].to_vec())
        .collect();
    let dv = cfg.visual_dim();
    let v_out: Vec<Vec<f64>> = if cfg.use_visual {
        let raster = doc.raster.as_ref().ok_or(ModelError::MissingRaster)?;
        let fmap = encoders::conv_feature_map(&mut tape, raster, &params.conv)?;
        let boxes = doc.boxes_by_id();
        let mut rows = Vec::with_capacity(l);
        for b in &boxes {
            let v = encoders::roi_align(&mut tape, fmap, b, doc.width, doc.height, cfg.visual.roi_grid)?;
            rows.push(tape.value(v).to_vec());
        }
        rows
    } else {
        vec![vec![1.0 / (dv as f64).sqrt(); dv]; l]
    };
    Ok((t_out, v_out))
}

/// The model's individual operations, exposed for tests and probing. The
/// batched forward pass above computes the same functions.
pub mod ops {
    use super::*;

    /// n = fusion MLP applied to t (x) v.
    pub fn fuse(tape: &mut Tape, t: Var, v: Var, fusion: &Mlp) -> Result<Var, ModelError> {
        let k = tape.kron(t, v)?;
        let len = tape.value(k).len();
        let k2 = tape.reshape(k, vec![1, len])?;
        let out = fusion.apply(tape, k2)?;
        let w = fusion.out_dim();
        Ok(tape.reshape(out, vec![w])?)
    }

    /// Unit-norm edge embedding from a 6-component spatial relation.
    pub fn edge_init(tape: &mut Tape, s: &[f64; 6], edge_proj: &Mlp) -> Result<Var, ModelError> {
        let sv = tape.constant(vec![1, 6], s.to_vec());
        let e = edge_proj.apply(tape, sv)?;
        let e = tape.l2_normalize_rows(e, L2_NORM_EPS)?;
        let w = edge_proj.out_dim();
        Ok(tape.reshape(e, vec![w])?)
    }

    /// Grid positional embedding for a box: horizontal table lookups for
    /// x0/x1 and vertical for y0/y1, concatenated, through tanh.
    pub fn pos_embed(
        tape: &mut Tape,
        bbox: &BBox,
        page_w: f64,
        page_h: f64,
        params: &ModelParams,
    ) -> Result<Var, ModelError> {
        let cfg = &params.config;
        if !cfg.use_positional {
            return Ok(tape.constant(vec![cfg.pos_dim], vec![0.0; cfg.pos_dim]));
        }
        let k = cfg.grid_k;
        let hor = tape.bind("pos_hor", &params.pos_hor);
        let ver = tape.bind("pos_ver", &params.pos_ver);
        let g = [
            tape.gather_rows(hor, &[grid_bin(bbox.x0, page_w, k)?])?,
            tape.gather_rows(hor, &[grid_bin(bbox.x1, page_w, k)?])?,
            tape.gather_rows(ver, &[grid_bin(bbox.y0, page_h, k)?])?,
            tape.gather_rows(ver, &[grid_bin(bbox.y1, page_h, k)?])?,
        ];
        let cat = tape.concat_cols(&g)?;
        let t = tape.tanh(cat);
        Ok(tape.reshape(t, vec![cfg.pos_dim])?)
    }

    /// One head's edge vector for a single pair (all inputs rank-1).
    pub fn edge_head_vector(
        tape: &mut Tape,
        n_i: Var,
        p_i: Var,
        e_ij: Var,
        n_j: Var,
        p_j: Var,
        head: &HeadParams,
    ) -> Result<Var, ModelError> {
        let cat = tape.concat1(&[n_i, p_i, e_ij, n_j, p_j])?;
        let len = tape.value(cat).len();
        let cat2 = tape.reshape(cat, vec![1, len])?;
        let out = head.pair.apply(tape, cat2)?;
        let w = head.pair.out_dim();
        Ok(tape.reshape(out, vec![w])?)
    }

    /// Collapses a head's edge vector into its scalar attention score.
    pub fn edge_head_score(tape: &mut Tape, e_h: Var, head: &HeadParams) -> Result<Var, ModelError> {
        let len = tape.value(e_h).len();
        let e2 = tape.reshape(e_h, vec![1, len])?;
        let out = head.score.apply(tape, e2)?;
        Ok(tape.reshape(out, vec![1])?)
    }

    /// Dense attention from an L x L score matrix: row-wise softmax over
    /// the off-diagonal entries, zero diagonal. Forward-only.
    pub fn attention_dense(scores: &[f64], l: usize) -> Result<Vec<f64>, ModelError> {
        if l < 2 {
            return Err(ModelError::DegenerateGraph(l));
        }
        assert_eq!(scores.len(), l * l);
        let mut out = vec![0.0; l * l];
        for i in 0..l {
            let row: Vec<f64> = (0..l).filter(|&j| j != i).map(|j| scores[i * l + j]).collect();
            let mut sm = vec![0.0; l - 1];
            crate::tensor::kernels::softmax_into(&row, &mut sm);
            let mut t = 0;
            for j in 0..l {
                if j != i {
                    out[i * l + j] = sm[t];
                    t += 1;
                }
            }
        }
        Ok(out)
    }

    /// Single linear layer from node features to class logits.
    pub fn classify(tape: &mut Tape, nodes: Var, params: &ModelParams) -> Result<Var, ModelError> {
        let w = tape.bind("cls.w", &params.cls_w);
        let b = tape.bind("cls.b", &params.cls_b);
        let out = tape.matmul(nodes, w)?;
        Ok(tape.add_row(out, b)?)
    }

    /// Smoothed target distribution: (1 - eps) one-hot plus eps / C.
    pub fn target_distribution(labels: &[usize], n_classes: usize, eps: f64) -> Vec<f64> {
        let mut q = vec![eps / n_classes as f64; labels.len() * n_classes];
        for (i, &y) in labels.iter().enumerate() {
            q[i * n_classes + y] += 1.0 - eps;
        }
        q
    }

    /// Mean over nodes of the cross-entropy against the smoothed targets.
    pub fn smoothed_ce_loss(
        tape: &mut Tape,
        logits: Var,
        labels: &[usize],
        eps: f64,
    ) -> Result<Var, ModelError> {
        let shape = tape.shape(logits).to_vec();
        let c = shape[1];
        debug_assert_eq!(shape[0], labels.len());
        debug_assert!(labels.iter().all(|&y| y < c));
        let q = target_distribution(labels, c, eps);
        let ls = tape.log_softmax_rows(logits)?;
        Ok(tape.smoothed_nll(ls, q)?)
    }
}
