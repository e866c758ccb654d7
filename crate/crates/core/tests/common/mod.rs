#![allow(dead_code)] // shared across test binaries; each uses a subset

//! Shared test fixtures: a straight-line, loop-per-pair reimplementation
//! of the graph pipeline (fusion, edges, positional embeddings, attention,
//! propagation, classification) kept deliberately independent of the
//! production tape, plus small document builders.

use fsdag_core::doc::{spatial_relation, BBox, Document, LabelSet, Raster, TextRegion};
use fsdag_core::model::{MessageMode, Mlp, ModelParams};
use fsdag_core::Tensor;

/// Plain matvec MLP evaluation: relu(x W1 + b1) W2 + b2.
fn mlp_eval(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let w1 = &mlp.w1;
    let (in_dim, hidden) = (w1.shape()[0], w1.shape()[1]);
    assert_eq!(x.len(), in_dim);
    let mut h = mlp.b1.values().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..hidden {
            h[j] += xi * w1.values()[i * hidden + j];
        }
    }
    for v in &mut h {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let w2 = &mlp.w2;
    let out_dim = w2.shape()[1];
    let mut out = mlp.b2.values().to_vec();
    for (j, &hj) in h.iter().enumerate() {
        for k in 0..out_dim {
            out[k] += hj * w2.values()[j * out_dim + k];
        }
    }
    out
}

fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / (norm + 1e-12)).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn table_row(t: &Tensor, row: usize) -> &[f64] {
    let n = t.shape()[1];
    &t.values()[row * n..(row + 1) * n]
}

fn grid_bin(coord: f64, extent: f64, k: usize) -> usize {
    ((k as f64 * coord / extent).floor() as usize).min(k - 1)
}

/// Explicit-loop logits for a graph given per-region (id-indexed) text and
/// visual feature vectors. No batching, no shared kernels.
pub fn oracle_logits(
    t: &[Vec<f64>],
    v: &[Vec<f64>],
    boxes: &[BBox],
    page_w: f64,
    page_h: f64,
    params: &ModelParams,
) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let l = t.len();

    // Node initialization: fusion of the Kronecker product.
    let mut nodes: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let mut kron = Vec::with_capacity(t[i].len() * v[i].len());
            for &a in &t[i] {
                for &b in &v[i] {
                    kron.push(a * b);
                }
            }
            mlp_eval(&params.fusion, &kron)
        })
        .collect();

    // Positional embeddings.
    let pos: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            if !cfg.use_positional {
                return vec![0.0; cfg.pos_dim];
            }
            let b = &boxes[i];
            let k = cfg.grid_k;
            let mut cat = Vec::with_capacity(cfg.pos_dim);
            cat.extend_from_slice(table_row(&params.pos_hor, grid_bin(b.x0, page_w, k)));
            cat.extend_from_slice(table_row(&params.pos_hor, grid_bin(b.x1, page_w, k)));
            cat.extend_from_slice(table_row(&params.pos_ver, grid_bin(b.y0, page_h, k)));
            cat.extend_from_slice(table_row(&params.pos_ver, grid_bin(b.y1, page_h, k)));
            cat.iter().map(|x| x.tanh()).collect()
        })
        .collect();

    // Static edge embeddings for every ordered pair.
    let mut edges: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); l]; l];
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            let s = spatial_relation(&boxes[i], &boxes[j], page_w, page_h);
            edges[i][j] = l2_normalize(&mlp_eval(&params.edge_proj, &s));
        }
    }

    // Propagation.
    for step in 0..cfg.steps {
        let mut next = nodes.clone();
        for i in 0..l {
            let mut concat_msgs = Vec::new();
            for head in &params.heads {
                let mut vecs = Vec::new();
                let mut scores = Vec::new();
                for j in 0..l {
                    if j == i {
                        continue;
                    }
                    let mut cat = Vec::new();
                    cat.extend_from_slice(&nodes[i]);
                    cat.extend_from_slice(&pos[i]);
                    cat.extend_from_slice(&edges[i][j]);
                    cat.extend_from_slice(&nodes[j]);
                    cat.extend_from_slice(&pos[j]);
                    let ev = mlp_eval(&head.pair, &cat);
                    let sc = mlp_eval(&head.score, &ev)[0];
                    vecs.push(ev);
                    scores.push(sc);
                }
                let alpha = softmax(&scores);
                let msg_dim = match cfg.message_mode {
                    MessageMode::Vector => cfg.node_dim,
                    MessageMode::Scalar => 1,
                };
                let mut msg = vec![0.0; msg_dim];
                for (idx, a) in alpha.iter().enumerate() {
                    match cfg.message_mode {
                        MessageMode::Vector => {
                            for (m, &val) in msg.iter_mut().zip(&vecs[idx]) {
                                *m += a * val;
                            }
                        }
                        MessageMode::Scalar => msg[0] += a * scores[idx],
                    }
                }
                concat_msgs.extend_from_slice(&msg);
            }
            let upd = mlp_eval(&params.updates[step], &concat_msgs);
            // Instance norm over this node's features, then ReLU, residual.
            let n = upd.len() as f64;
            let mean = upd.iter().sum::<f64>() / n;
            let var = upd.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + 1e-5).sqrt();
            for (dst, &u) in next[i].iter_mut().zip(&upd) {
                let normed = (u - mean) * inv_std;
                *dst += if normed > 0.0 { normed } else { 0.0 };
            }
        }
        nodes = next;
    }

    // Classifier.
    let c = params.n_classes;
    nodes
        .iter()
        .map(|n| {
            let mut logits = params.cls_b.values().to_vec();
            for (j, &nj) in n.iter().enumerate() {
                for k in 0..c {
                    logits[k] += nj * params.cls_w.values()[j * c + k];
                }
            }
            logits
        })
        .collect()
}

/// Small labeled document with a flat raster and hand-placed word boxes.
pub fn tiny_doc(n_regions: usize, page_w: f64, page_h: f64) -> Document {
    assert!(n_regions <= 6);
    let words = ["alpha", "beta-1", "15,60", "INV-5", "x", "total"];
    let labels = LabelSet::new(
        std::iter::once("other".to_string())
            .chain((1..=3).map(|i| format!("field{i}")))
            .collect(),
    )
    .unwrap();
    let mut raster = Raster::filled(page_w as usize, page_h as usize, 1.0);
    let mut regions = Vec::new();
    for i in 0..n_regions {
        let col = i % 2;
        let row = i / 2;
        let x0 = 4.0 + col as f64 * page_w * 0.5;
        let y0 = 3.0 + row as f64 * page_h * 0.3;
        let bbox = BBox::new(x0, y0, x0 + page_w * 0.3, y0 + page_h * 0.15);
        for y in bbox.y0 as usize..bbox.y1 as usize {
            for x in bbox.x0 as usize..bbox.x1 as usize {
                raster.set(x, y, 0.2 + 0.1 * i as f64);
            }
        }
        regions.push(TextRegion {
            id: i,
            text: words[i].to_string(),
            bbox,
            label: Some(i % 4),
        });
    }
    Document {
        width: page_w,
        height: page_h,
        raster: Some(raster),
        labels,
        regions,
    }
}

/// Region-id permutation of a document: region with old id `i` gets id
/// `perm[i]`; storage order is also shuffled to the new ids.
pub fn permute_ids(doc: &Document, perm: &[usize]) -> Document {
    let mut regions: Vec<TextRegion> = doc
        .regions
        .iter()
        .map(|r| TextRegion {
            id: perm[r.id],
            text: r.text.clone(),
            bbox: r.bbox,
            label: r.label,
        })
        .collect();
    regions.sort_by_key(|r| r.id);
    Document {
        width: doc.width,
        height: doc.height,
        raster: doc.raster.clone(),
        labels: doc.labels.clone(),
        regions,
    }
}

use fsdag_core::rng::Rng;
use fsdag_core::tensor::{grad_check, GradCheckOptions, ParamStore, SimpleStore, Tape, Var};
use std::collections::BTreeMap;

/// Random linear readout so every output coordinate influences the loss.
/// The small scale keeps finite-difference noise beneath the 1e-8
/// relative-error floor for incidentally tiny gradients.
pub fn readout(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, vec![1, n]).unwrap();
    let mut rng = Rng::seed_from(seed);
    let weights: Vec<f64> = (0..n).map(|_| rng.normal() * 3e-3).collect();
    tape.smoothed_nll(flat, weights).unwrap()
}

/// Central-difference check of a tape-built scalar against its own
/// backward pass, over every coordinate of every store tensor.
pub fn fd_check(store: &SimpleStore, build: &dyn Fn(&mut Tape, &SimpleStore) -> Var) -> f64 {
    let analytic: BTreeMap<String, Vec<f64>> = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        tape.backward(loss).unwrap();
        store
            .param_names()
            .into_iter()
            .map(|name| {
                let mut found = None;
                for (n, g) in tape.harvest() {
                    if n == name {
                        found = g.map(<[f64]>::to_vec);
                    }
                }
                (name.clone(), found.unwrap_or_else(|| vec![0.0; store.values(&name).len()]))
            })
            .collect()
    };
    let mut work = store.clone();
    grad_check(
        &mut work,
        |s| {
            let mut tape = Tape::new();
            let loss = build(&mut tape, s);
            tape.scalar_value(loss)
        },
        &analytic,
        &GradCheckOptions::default(),
    )
    .max_rel_err
}

/// Clones an MLP's tensors into a store under its name prefix.
pub fn store_mlp(store: &mut SimpleStore, mlp: &fsdag_core::model::Mlp) {
    store.insert(&format!("{}.w1", mlp.name), mlp.w1.clone());
    store.insert(&format!("{}.b1", mlp.name), mlp.b1.clone());
    store.insert(&format!("{}.w2", mlp.name), mlp.w2.clone());
    store.insert(&format!("{}.b2", mlp.name), mlp.b2.clone());
}

/// Rebuilds an MLP from a store populated by [`store_mlp`].
pub fn mlp_from_store(store: &SimpleStore, name: &str) -> fsdag_core::model::Mlp {
    fsdag_core::model::Mlp {
        name: name.to_string(),
        w1: store.tensors[&format!("{name}.w1")].clone(),
        b1: store.tensors[&format!("{name}.b1")].clone(),
        w2: store.tensors[&format!("{name}.w2")].clone(),
        b2: store.tensors[&format!("{name}.b2")].clone(),
    }
}
