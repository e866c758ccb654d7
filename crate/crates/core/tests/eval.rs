//! Evaluation and robustness integration tests against small trained and
//! untrained models.

mod common;

use fsdag_core::eval::{evaluate, perturb_document, robustness_report, ConfusionTable, EvalError};
use fsdag_core::model::{self, ModelConfig, ModelParams};
use fsdag_core::synth::{generate, ClassSpec, TemplateSpec};

fn template() -> TemplateSpec {
    TemplateSpec {
        name: "eval3".into(),
        page_width: 80,
        page_height: 72,
        grid_cols: 2,
        grid_rows: 2,
        classes: vec![
            ClassSpec { name: "alpha".into(), anchor: (0, 0), vocab: vec!["A-15".into(), "A-61".into()] },
            ClassSpec { name: "beta".into(), anchor: (1, 0), vocab: vec!["B,5".into(), "B,6".into()] },
            ClassSpec { name: "gamma".into(), anchor: (0, 1), vocab: vec!["G1".into(), "G5".into()] },
        ],
        jitter: 1.5,
        distractor_count: 1,
        distractor_vocab: vec!["No".into(), "Qty".into()],
    }
}

fn small_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.node_dim = 8;
    cfg.edge_dim = 8;
    cfg.pos_dim = 8;
    cfg.heads = 2;
    cfg.steps = 1;
    cfg.grid_k = 5;
    cfg.text.raw_dim = 16;
    cfg.text.text_dim = 4;
    cfg.visual.channels = 3;
    cfg
}

#[test]
fn perturb_document_at_p_zero_is_deep_equal() {
    let docs = generate(&template(), 3, 1).unwrap();
    let table = ConfusionTable::default();
    for doc in &docs {
        assert_eq!(&perturb_document(doc, 0.0, &table, 99), doc);
    }
}

#[test]
fn perturbation_touches_only_text() {
    let docs = generate(&template(), 3, 2).unwrap();
    let table = ConfusionTable::default();
    for doc in &docs {
        let p = perturb_document(doc, 1.0, &table, 7);
        assert_eq!(p.raster, doc.raster);
        for (a, b) in doc.regions.iter().zip(&p.regions) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.bbox, b.bbox);
        }
        // the template vocabulary is rich in confusable characters
        assert_ne!(
            doc.regions.iter().map(|r| r.text.clone()).collect::<Vec<_>>(),
            p.regions.iter().map(|r| r.text.clone()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn perturbation_is_seed_deterministic() {
    let docs = generate(&template(), 2, 3).unwrap();
    let table = ConfusionTable::default();
    for doc in &docs {
        let a = perturb_document(doc, 0.5, &table, 42);
        let b = perturb_document(doc, 0.5, &table, 42);
        assert_eq!(a, b);
    }
}

#[test]
fn evaluation_is_independent_of_corpus_order() {
    let docs = generate(&template(), 4, 5).unwrap();
    let params = ModelParams::init(small_model(), docs[0].labels.len(), 8);
    let embedder = model::make_embedder(&params.config).unwrap();
    let forward = evaluate(&params, &docs, &embedder).unwrap();
    let mut reversed = docs.clone();
    reversed.reverse();
    let backward = evaluate(&params, &reversed, &embedder).unwrap();
    assert_eq!(forward, backward);
}

#[test]
fn unlabeled_corpus_is_rejected() {
    let mut docs = generate(&template(), 1, 6).unwrap();
    docs[0].regions[0].label = None;
    let params = ModelParams::init(small_model(), 4, 9);
    let embedder = model::make_embedder(&params.config).unwrap();
    assert!(matches!(
        evaluate(&params, &docs, &embedder),
        Err(EvalError::Unlabeled)
    ));
}

#[test]
fn robustness_report_at_p_zero_has_exactly_zero_drop() {
    let docs = generate(&template(), 3, 7).unwrap();
    let params = ModelParams::init(small_model(), docs[0].labels.len(), 10);
    let embedder = model::make_embedder(&params.config).unwrap();
    let report = robustness_report(&params, &docs, 0.0, &ConfusionTable::default(), 3, &embedder).unwrap();
    assert_eq!(report.drop, Some(0.0));
    assert_eq!(report.clean_macro_f1, Some(report.macro_f1));
}

#[test]
fn robustness_report_rejects_out_of_range_p() {
    let docs = generate(&template(), 1, 8).unwrap();
    let params = ModelParams::init(small_model(), docs[0].labels.len(), 11);
    let embedder = model::make_embedder(&params.config).unwrap();
    assert!(matches!(
        robustness_report(&params, &docs, 1.5, &ConfusionTable::default(), 0, &embedder),
        Err(EvalError::BadProbability(_))
    ));
}

#[test]
fn report_json_has_the_expected_keys() {
    let docs = generate(&template(), 2, 9).unwrap();
    let params = ModelParams::init(small_model(), docs[0].labels.len(), 12);
    let embedder = model::make_embedder(&params.config).unwrap();
    let report = robustness_report(&params, &docs, 0.1, &ConfusionTable::default(), 5, &embedder).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["per_class", "macro_f1", "clean_macro_f1", "drop", "seed", "p"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let class0 = &json["per_class"][0];
    for key in ["name", "precision", "recall", "f1", "support"] {
        assert!(class0.get(key).is_some(), "missing per-class {key}");
    }
    // plain evaluation reports omit the robustness-only fields
    let plain = evaluate(&params, &docs, &embedder).unwrap();
    let json: serde_json::Value = serde_json::from_str(&plain.to_json()).unwrap();
    assert!(json.get("clean_macro_f1").is_none());
    assert!(json.get("drop").is_none());
}

#[test]
fn robustness_report_is_independent_of_corpus_order() {
    let docs = generate(&template(), 4, 11).unwrap();
    let params = ModelParams::init(small_model(), docs[0].labels.len(), 13);
    let embedder = fsdag_core::model::make_embedder(&params.config).unwrap();
    let table = ConfusionTable::default();
    let fwd = robustness_report(&params, &docs, 0.3, &table, 21, &embedder).unwrap();
    let mut reversed = docs.clone();
    reversed.reverse();
    let bwd = robustness_report(&params, &reversed, 0.3, &table, 21, &embedder).unwrap();
    assert_eq!(fwd, bwd);
}
