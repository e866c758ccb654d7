//! Evaluation and robustness: per-class precision/recall/F1 with macro
//! averaging over the non-background classes, a character-confusion OCR
//! error injector, and the clean-vs-perturbed robustness report.

use crate::doc::Document;
use crate::encoders::TextEmbedder;
use crate::model::{self, ModelError, ModelParams};
use crate::rng::{derive_stream, Rng};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation requires a fully labeled corpus")]
    Unlabeled,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Character-substitution model of common OCR errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionTable {
    map: BTreeMap<char, Vec<String>>,
}

impl Default for ConfusionTable {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        map.insert('1', vec!["l".to_string(), "I".to_string()]);
        map.insert('l', vec!["I".to_string()]);
        map.insert('6', vec!["b".to_string()]);
        map.insert('5', vec!["S".to_string()]);
        map.insert(',', vec![".".to_string()]);
        ConfusionTable { map }
    }
}

impl ConfusionTable {
    pub fn new(map: BTreeMap<char, Vec<String>>) -> Result<Self, EvalError> {
        for (c, reps) in &map {
            if reps.is_empty() {
                return Err(EvalError::Model(ModelError::BadOverride(format!(
                    "confusion entry for {c:?} has no replacements"
                ))));
            }
        }
        Ok(ConfusionTable { map })
    }

    pub fn get(&self, c: char) -> Option<&[String]> {
        self.map.get(&c).map(Vec::as_slice)
    }
}

/// One Bernoulli(p) draw decides whether the word is perturbed at all;
/// a perturbed word has every table-eligible character replaced by a
/// uniformly chosen entry from its replacement list.
pub fn perturb_text(word: &str, p: f64, table: &ConfusionTable, rng: &mut Rng) -> String {
    if rng.uniform() >= p {
        return word.to_string();
    }
    let mut out = String::with_capacity(word.len());
    for c in word.chars() {
        match table.get(c) {
            Some(reps) => out.push_str(&reps[rng.below(reps.len() as u64) as usize]),
            None => out.push(c),
        }
    }
    out
}

/// Perturbs every region's text independently; boxes, labels and raster
/// are untouched. Each region draws from a stream keyed by (seed,
/// region id), so results do not depend on evaluation order.
pub fn perturb_document(doc: &Document, p: f64, table: &ConfusionTable, seed: u64) -> Document {
    let mut out = doc.clone();
    for r in &mut out.regions {
        let mut rng = derive_stream(seed, &[0x0c7, r.id as u64]);
        r.text = perturb_text(&r.text, p, table, &mut rng);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    /// Unweighted mean F1 over non-background classes with support.
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop: Option<f64>,
    pub seed: u64,
    pub p: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Builds the report from flattened gold/predicted class indices.
/// Background (class 0) never enters the macro average; neither do
/// classes without gold instances.
pub fn report_from_predictions(
    gold: &[usize],
    pred: &[usize],
    class_names: &[String],
) -> EvalReport {
    assert_eq!(gold.len(), pred.len());
    let c = class_names.len();
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fnn = vec![0usize; c];
    for (&g, &q) in gold.iter().zip(pred) {
        if g == q {
            tp[g] += 1;
        } else {
            fp[q] += 1;
            fnn[g] += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for cls in 1..c {
        let support = tp[cls] + fnn[cls];
        let precision = if tp[cls] + fp[cls] > 0 {
            tp[cls] as f64 / (tp[cls] + fp[cls]) as f64
        } else {
            0.0
        };
        let recall = if support > 0 { tp[cls] as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            f1_sum += f1;
            f1_count += 1;
        }
        per_class.push(ClassReport {
            name: class_names[cls].clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    EvalReport {
        per_class,
        macro_f1: if f1_count > 0 { f1_sum / f1_count as f64 } else { 0.0 },
        clean_macro_f1: None,
        drop: None,
        seed: 0,
        p: 0.0,
    }
}

/// Runs the model over every document, takes the arg-max class per node
/// and reduces to the corpus-level report.
pub fn evaluate(
    params: &ModelParams,
    docs: &[Document],
    embedder: &TextEmbedder,
) -> Result<EvalReport, EvalError> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut class_names: Option<Vec<String>> = None;
    for doc in docs {
        let labels = doc.labels_by_id().ok_or(EvalError::Unlabeled)?;
        class_names.get_or_insert_with(|| doc.labels.names().to_vec());
        let (logits, _) = model::forward(doc, params, embedder)?;
        let c = params.n_classes;
        for (id, &g) in labels.iter().enumerate() {
            let row = &logits.values()[id * c..(id + 1) * c];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            gold.push(g);
            pred.push(best);
        }
    }
    let names = class_names.ok_or(EvalError::Unlabeled)?;
    Ok(report_from_predictions(&gold, &pred, &names))
}

/// Evaluates clean and perturbed copies of the corpus with a shared model;
/// the main body of the report reflects the perturbed run, with the clean
/// macro F1 and the (unclamped) drop attached.
pub fn robustness_report(
    params: &ModelParams,
    docs: &[Document],
    p: f64,
    table: &ConfusionTable,
    seed: u64,
    embedder: &TextEmbedder,
) -> Result<EvalReport, EvalError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(EvalError::BadProbability(p));
    }
    let clean = evaluate(params, docs, embedder)?;
    let perturbed_docs: Vec<Document> = docs
        .iter()
        .map(|d| perturb_document(d, p, table, seed ^ d.content_hash()))
        .collect();
    let mut report = evaluate(params, &perturbed_docs, embedder)?;
    report.clean_macro_f1 = Some(clean.macro_f1);
    report.drop = Some(clean.macro_f1 - report.macro_f1);
    report.seed = seed;
    report.p = p;
    Ok(report)
}
