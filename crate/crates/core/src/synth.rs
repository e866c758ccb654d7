//! Deterministic synthetic form-document generator. Pages carry one region
//! per key-value class, anchored to a template grid cell with uniform
//! jitter, plus a configurable number of background distractor words.
//! Rasters are rectangle textures whose grayscale intensity encodes the
//! class, so the visual channel carries signal without glyph rendering.

use crate::doc::{BBox, DataError, Document, LabelSet, Raster, TextRegion};
use crate::rng::derive_stream;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("template {template}: {msg}")]
    Generation { template: String, msg: String },
    #[error("split: n_train {n_train} must be smaller than corpus size {n_docs}")]
    SplitSize { n_train: usize, n_docs: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Per-class layout and content: a grid-cell anchor and a text vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// (column, row) into the template's anchor grid.
    pub anchor: (usize, usize),
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub name: String,
    pub page_width: usize,
    pub page_height: usize,
    /// Anchor grid the class anchors index into.
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub classes: Vec<ClassSpec>,
    /// Uniform positional jitter in pixels (each axis, +-).
    pub jitter: f64,
    pub distractor_count: usize,
    pub distractor_vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub template: String,
    pub n_train: usize,
    pub n_test: usize,
}

const CHAR_WIDTH: f64 = 4.5;
const BOX_PAD: f64 = 4.0;
const BOX_HEIGHT: f64 = 12.0;
const FIELD_INSET_X: f64 = 4.0;
const FIELD_INSET_Y: f64 = 15.0;

fn text_box_width(text: &str) -> f64 {
    CHAR_WIDTH * text.chars().count() as f64 + BOX_PAD
}

/// Grayscale fill intensity for a class, quantized to the 8-bit raster grid
/// so saved documents round-trip exactly.
pub fn class_intensity(label: usize) -> f64 {
    let v = 0.2 + 0.6 * (label % 8) as f64 / 8.0;
    (v * 255.0).round() / 255.0
}

impl TemplateSpec {
    pub fn label_set(&self) -> LabelSet {
        let mut names = vec!["other".to_string()];
        names.extend(self.classes.iter().map(|c| c.name.clone()));
        LabelSet::new(names).expect("template class names are unique and non-empty")
    }

    fn cell_extent(&self) -> (f64, f64) {
        (
            self.page_width as f64 / self.grid_cols as f64,
            self.page_height as f64 / self.grid_rows as f64,
        )
    }

    /// Worst-case footprint of a class box over all vocab words and jitters.
    fn class_footprint(&self, class: &ClassSpec) -> BBox {
        let (cw, ch) = self.cell_extent();
        let base_x = class.anchor.0 as f64 * cw + FIELD_INSET_X;
        let base_y = class.anchor.1 as f64 * ch + FIELD_INSET_Y;
        let max_w = class
            .vocab
            .iter()
            .map(|t| text_box_width(t))
            .fold(0.0, f64::max);
        BBox::new(
            base_x - self.jitter,
            base_y - self.jitter,
            base_x + self.jitter + max_w,
            base_y + self.jitter + BOX_HEIGHT,
        )
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| {
            Err(SynthError::Generation { template: self.name.clone(), msg })
        };
        if self.classes.len() < 2 {
            return fail("need at least 2 classes".into());
        }
        for c in &self.classes {
            if c.vocab.is_empty() {
                return fail(format!("class {} has an empty vocabulary", c.name));
            }
            if c.anchor.0 >= self.grid_cols || c.anchor.1 >= self.grid_rows {
                return fail(format!("class {} anchor {:?} outside grid", c.name, c.anchor));
            }
        }
        if self.distractor_count > 0 && self.distractor_vocab.is_empty() {
            return fail("distractors requested but vocabulary is empty".into());
        }
        // Every jittered field box must stay on the page, and no two class
        // footprints may ever intersect.
        let footprints: Vec<BBox> = self.classes.iter().map(|c| self.class_footprint(c)).collect();
        for (c, fp) in self.classes.iter().zip(&footprints) {
            if fp.x0 < 0.0
                || fp.y0 < 0.0
                || fp.x1 > self.page_width as f64
                || fp.y1 > self.page_height as f64
            {
                return fail(format!(
                    "class {} cannot be jittered inside the page (footprint {fp:?})",
                    c.name
                ));
            }
        }
        for i in 0..footprints.len() {
            for j in (i + 1)..footprints.len() {
                let (a, b) = (&footprints[i], &footprints[j]);
                let overlap = a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
                if overlap {
                    return fail(format!(
                        "anchors of {} and {} overlap under jitter",
                        self.classes[i].name, self.classes[j].name
                    ));
                }
            }
        }
        Ok(())
    }
}

fn fill_box(raster: &mut Raster, bbox: &BBox, value: f64) {
    let x_start = bbox.x0.floor().max(0.0) as usize;
    let x_end = (bbox.x1.ceil() as usize).min(raster.width);
    let y_start = bbox.y0.floor().max(0.0) as usize;
    let y_end = (bbox.y1.ceil() as usize).min(raster.height);
    for y in y_start..y_end {
        for x in x_start..x_end {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            if cx >= bbox.x0 && cx < bbox.x1 && cy >= bbox.y0 && cy < bbox.y1 {
                raster.set(x, y, value);
            }
        }
    }
}

/// Generates `n_docs` documents, a pure function of (spec, n_docs, seed).
pub fn generate(spec: &TemplateSpec, n_docs: usize, seed: u64) -> Result<Vec<Document>, SynthError> {
    spec.validate()?;
    assert!(n_docs >= 1, "n_docs must be at least 1");
    let labels = spec.label_set();
    let (cw, ch) = spec.cell_extent();
    let page_w = spec.page_width as f64;
    let page_h = spec.page_height as f64;
    let mut docs = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let mut rng = derive_stream(seed, &[0x0d0c, d as u64]);
        let mut regions = Vec::new();
        // Distractors first so field rectangles overwrite them in the raster.
        for t in 0..spec.distractor_count {
            let text = spec.distractor_vocab[rng.below(spec.distractor_vocab.len() as u64) as usize].clone();
            let w = text_box_width(&text);
            let x0 = rng.uniform_in(0.0, page_w - w);
            let y0 = rng.uniform_in(0.0, page_h - BOX_HEIGHT);
            regions.push(TextRegion {
                id: t,
                text,
                bbox: BBox::new(x0, y0, x0 + w, y0 + BOX_HEIGHT),
                label: Some(0),
            });
        }
        for (c, class) in spec.classes.iter().enumerate() {
            let label = c + 1;
            let text = class.vocab[rng.below(class.vocab.len() as u64) as usize].clone();
            let w = text_box_width(&text);
            let base_x = class.anchor.0 as f64 * cw + FIELD_INSET_X;
            let base_y = class.anchor.1 as f64 * ch + FIELD_INSET_Y;
            let x0 = base_x + rng.uniform_in(-spec.jitter, spec.jitter);
            let y0 = base_y + rng.uniform_in(-spec.jitter, spec.jitter);
            regions.push(TextRegion {
                id: spec.distractor_count + c,
                text,
                bbox: BBox::new(x0, y0, x0 + w, y0 + BOX_HEIGHT),
                label: Some(label),
            });
        }
        let mut raster = Raster::filled(spec.page_width, spec.page_height, 1.0);
        for r in &regions {
            fill_box(&mut raster, &r.bbox, class_intensity(r.label.unwrap()));
        }
        let doc = Document {
            width: page_w,
            height: page_h,
            raster: Some(raster),
            labels: labels.clone(),
            regions,
        };
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Deterministic seeded shuffle, then prefix/suffix split.
pub fn split(
    docs: Vec<Document>,
    n_train: usize,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>), SynthError> {
    if n_train >= docs.len() {
        return Err(SynthError::SplitSize { n_train, n_docs: docs.len() });
    }
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    derive_stream(seed, &[0x5911f7]).shuffle(&mut idx);
    let mut slots: Vec<Option<Document>> = docs.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(slots.len() - n_train);
    for (pos, &i) in idx.iter().enumerate() {
        let doc = slots[i].take().unwrap();
        if pos < n_train {
            train.push(doc);
        } else {
            test.push(doc);
        }
    }
    Ok((train, test))
}

/// Built-in template: 8 single-value classes in two anchor columns plus
/// header-like distractor words. Vocabularies deliberately contain the
/// characters common OCR confusions target (1, l, 5, 6, comma).
pub fn builtin_template(name: &str) -> Option<TemplateSpec> {
    match name {
        "basic8" => Some(basic8()),
        _ => None,
    }
}

fn basic8() -> TemplateSpec {
    let class = |name: &str, anchor: (usize, usize), vocab: &[&str]| ClassSpec {
        name: name.into(),
        anchor,
        vocab: vocab.iter().map(|s| s.to_string()).collect(),
    };
    TemplateSpec {
        name: "basic8".into(),
        page_width: 192,
        page_height: 144,
        grid_cols: 4,
        grid_rows: 4,
        classes: vec![
            class("invoice_no", (0, 0), &["INV-1065", "INV-5161", "INV-6551", "INV-1156", "INV-5615"]),
            class("date", (2, 0), &["15/06/16", "16/05/15", "11/06/15", "05/11/16", "06/15/11"]),
            class("total", (0, 1), &["156,50", "65,15", "511,06", "615,56", "1156,15"]),
            class("name", (2, 1), &["Lionel", "Billie", "Isabel", "Melvil", "Alonzo"]),
            class("qty", (0, 2), &["15", "51", "65", "16", "56"]),
            class("tax", (2, 2), &["5,16", "6,15", "1,56", "5,61", "6,51"]),
            class("id", (0, 3), &["ID-5116", "ID-6155", "ID-1565", "ID-5651", "ID-1516"]),
            class("ref", (2, 3), &["REF-156", "REF-615", "REF-561", "REF-165", "REF-516"]),
        ],
        jitter: 3.0,
        distractor_count: 6,
        distractor_vocab: ["Invoice", "Total", "Date", "Name", "Qty", "Tax", "Page", "Item", "Ref", "No"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}
