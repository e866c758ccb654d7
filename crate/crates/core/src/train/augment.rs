//! Training-time augmentation: geometric page transforms (rotation,
//! perspective, affine, scale-and-pad) applied to the raster and boxes,
//! and graph perturbations (node feature dropout plus bbox jitter).

use super::TrainConfig;
use crate::doc::{BBox, Document, Raster, TextRegion};
use crate::rng::Rng;
use crate::train::TrainError;

/// One sampled page transform. Boxes map through the forward transform;
/// the raster is resampled through its inverse.
#[derive(Debug, Clone, PartialEq)]
pub enum GeoTransform {
    Rotate { degrees: f64 },
    /// Corner displacements in pixels, order (0,0), (W,0), (W,H), (0,H).
    Perspective { offsets: [(f64, f64); 4] },
    Affine { tx: f64, ty: f64, scale: f64 },
    ScalePad { scale: f64 },
}

impl GeoTransform {
    pub fn is_identity(&self) -> bool {
        match self {
            GeoTransform::Rotate { degrees } => *degrees == 0.0,
            GeoTransform::Perspective { offsets } => offsets.iter().all(|&(dx, dy)| dx == 0.0 && dy == 0.0),
            GeoTransform::Affine { tx, ty, scale } => *tx == 0.0 && *ty == 0.0 && *scale == 1.0,
            GeoTransform::ScalePad { scale } => *scale == 1.0,
        }
    }

    /// Row-major 3x3 homography mapping source page points to transformed
    /// points.
    fn matrix(&self, w: f64, h: f64) -> [f64; 9] {
        let (cx, cy) = (w * 0.5, h * 0.5);
        match *self {
            GeoTransform::Rotate { degrees } => {
                let rad = degrees.to_radians();
                let (s, c) = rad.sin_cos();
                [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy, 0.0, 0.0, 1.0]
            }
            GeoTransform::Affine { tx, ty, scale } => [
                scale, 0.0, cx - scale * cx + tx,
                0.0, scale, cy - scale * cy + ty,
                0.0, 0.0, 1.0,
            ],
            GeoTransform::ScalePad { scale } => [
                scale, 0.0, cx - scale * cx,
                0.0, scale, cy - scale * cy,
                0.0, 0.0, 1.0,
            ],
            GeoTransform::Perspective { offsets } => {
                let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
                let dst: Vec<(f64, f64)> = src
                    .iter()
                    .zip(&offsets)
                    .map(|(&(x, y), &(dx, dy))| (x + dx, y + dy))
                    .collect();
                homography_from_corners(&src, &dst)
            }
        }
    }
}

fn apply_point(m: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let denom = m[6] * x + m[7] * y + m[8];
    ((m[0] * x + m[1] * y + m[2]) / denom, (m[3] * x + m[4] * y + m[5]) / denom)
}

fn invert3(m: &[f64; 9]) -> [f64; 9] {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    let inv_det = 1.0 / det;
    [
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ]
}

/// Direct linear transform from four point correspondences, solved by
/// Gaussian elimination with partial pivoting.
fn homography_from_corners(src: &[(f64, f64); 4], dst: &[(f64, f64)]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for (r, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        a[2 * r] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * r + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let div = a[col][col];
        for c in col..9 {
            a[col][c] /= div;
        }
        for r in 0..8 {
            if r != col && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in col..9 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    [a[0][8], a[1][8], a[2][8], a[3][8], a[4][8], a[5][8], a[6][8], a[7][8], 1.0]
}

/// Bilinear sample with constant padding (white) outside the raster.
fn sample_padded(raster: &Raster, x: f64, y: f64, pad: f64) -> f64 {
    let u = x - 0.5;
    let v = y - 0.5;
    let c0 = u.floor();
    let r0 = v.floor();
    let du = u - c0;
    let dv = v - r0;
    let mut acc = 0.0;
    for (dr, dc, wt) in [
        (0.0, 0.0, (1.0 - dv) * (1.0 - du)),
        (0.0, 1.0, (1.0 - dv) * du),
        (1.0, 0.0, dv * (1.0 - du)),
        (1.0, 1.0, dv * du),
    ] {
        let rr = r0 + dr;
        let cc = c0 + dc;
        let val = if rr < 0.0 || cc < 0.0 || rr >= raster.height as f64 || cc >= raster.width as f64 {
            pad
        } else {
            raster.get(cc as usize, rr as usize)
        };
        acc += wt * val;
    }
    acc
}

/// Applies a transform to a document: raster resampled bilinearly, each
/// box replaced by the axis-aligned hull of its transformed corners and
/// clipped to the page. Regions keeping less than a quarter of their
/// original area are dropped; surviving regions are re-numbered while
/// texts and labels stay untouched.
pub fn apply_geo_transform(doc: &Document, transform: &GeoTransform) -> Result<Document, TrainError> {
    let raster = doc.raster.as_ref().ok_or(TrainError::NoRaster)?;
    if transform.is_identity() {
        return Ok(doc.clone());
    }
    let (w, h) = (doc.width, doc.height);
    let m = transform.matrix(w, h);
    let m_inv = invert3(&m);
    let mut out_raster = Raster::filled(raster.width, raster.height, 1.0);
    for py in 0..raster.height {
        for px in 0..raster.width {
            let (sx, sy) = apply_point(&m_inv, px as f64 + 0.5, py as f64 + 0.5);
            out_raster.set(px, py, sample_padded(raster, sx, sy, 1.0));
        }
    }
    let mut regions = Vec::new();
    for r in &doc.regions {
        let b = &r.bbox;
        let corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x1, b.y1), (b.x0, b.y1)];
        let mapped: Vec<(f64, f64)> = corners.iter().map(|&(x, y)| apply_point(&m, x, y)).collect();
        let hull = BBox::new(
            mapped.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            mapped.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            mapped.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
            mapped.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
        );
        let clipped = BBox::new(
            hull.x0.max(0.0),
            hull.y0.max(0.0),
            hull.x1.min(w),
            hull.y1.min(h),
        );
        if clipped.x1 <= clipped.x0 || clipped.y1 <= clipped.y0 {
            continue;
        }
        if clipped.area() < 0.25 * b.area() {
            continue;
        }
        regions.push(TextRegion {
            id: regions.len(),
            text: r.text.clone(),
            bbox: clipped,
            label: r.label,
        });
    }
    let out = Document {
        width: w,
        height: h,
        raster: Some(out_raster),
        labels: doc.labels.clone(),
        regions,
    };
    Ok(out)
}

/// Samples one transform uniformly from the four families with magnitudes
/// from the training config.
pub fn sample_geo_transform(doc: &Document, cfg: &TrainConfig, rng: &mut Rng) -> GeoTransform {
    let (w, h) = (doc.width, doc.height);
    match rng.below(4) {
        0 => GeoTransform::Rotate {
            degrees: rng.uniform_in(-cfg.rotation_deg, cfg.rotation_deg),
        },
        1 => {
            let mut offsets = [(0.0, 0.0); 4];
            for o in &mut offsets {
                o.0 = rng.uniform_in(-cfg.perspective_frac * w, cfg.perspective_frac * w);
                o.1 = rng.uniform_in(-cfg.perspective_frac * h, cfg.perspective_frac * h);
            }
            GeoTransform::Perspective { offsets }
        }
        2 => GeoTransform::Affine {
            tx: rng.uniform_in(-cfg.affine_translate_frac * w, cfg.affine_translate_frac * w),
            ty: rng.uniform_in(-cfg.affine_translate_frac * h, cfg.affine_translate_frac * h),
            scale: rng.uniform_in(cfg.scale_min, cfg.scale_max),
        },
        _ => GeoTransform::ScalePad {
            scale: rng.uniform_in(cfg.scale_min, cfg.scale_max),
        },
    }
}

pub fn augment_geometric(doc: &Document, cfg: &TrainConfig, rng: &mut Rng) -> Result<Document, TrainError> {
    let transform = sample_geo_transform(doc, cfg, rng);
    apply_geo_transform(doc, &transform)
}

/// Clamps a box to the page while keeping a positive extent.
fn sanitize_bbox(b: BBox, w: f64, h: f64) -> BBox {
    const MIN_EXT: f64 = 1e-3;
    let fix = |lo: f64, hi: f64, limit: f64| -> (f64, f64) {
        let lo = lo.clamp(0.0, limit - MIN_EXT);
        let hi = hi.clamp(MIN_EXT, limit);
        if hi - lo < MIN_EXT {
            let c = ((lo + hi) * 0.5).clamp(MIN_EXT * 0.5, limit - MIN_EXT * 0.5);
            (c - MIN_EXT * 0.5, c + MIN_EXT * 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = fix(b.x0, b.x1, w);
    let (y0, y1) = fix(b.y0, b.y1, h);
    BBox::new(x0, y0, x1, y1)
}

/// Graph augmentation: per-node feature dropout decisions plus Gaussian
/// jitter on every box coordinate, clipped back to a valid in-page box.
/// Box order (and the mask) is indexed by region id.
pub fn augment_graph(
    boxes_by_id: &[BBox],
    page_w: f64,
    page_h: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> (Vec<BBox>, Vec<bool>) {
    let mut jittered = Vec::with_capacity(boxes_by_id.len());
    let mut mask = Vec::with_capacity(boxes_by_id.len());
    for b in boxes_by_id {
        mask.push(rng.uniform() < cfg.feature_dropout);
        let s = cfg.bbox_jitter_sigma;
        let j = BBox::new(
            b.x0 + rng.normal() * s,
            b.y0 + rng.normal() * s,
            b.x1 + rng.normal() * s,
            b.y1 + rng.normal() * s,
        );
        jittered.push(sanitize_bbox(j, page_w, page_h));
    }
    (jittered, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::LabelSet;
    use crate::rng::derive_stream;

    fn doc_with_raster() -> Document {
        let mut raster = Raster::filled(64, 48, 1.0);
        for y in 10..20 {
            for x in 8..40 {
                raster.set(x, y, 0.3);
            }
        }
        Document {
            width: 64.0,
            height: 48.0,
            raster: Some(raster),
            labels: LabelSet::new(vec!["other".into(), "a".into()]).unwrap(),
            regions: vec![
                TextRegion { id: 0, text: "one".into(), bbox: BBox::new(8.0, 10.0, 40.0, 20.0), label: Some(1) },
                TextRegion { id: 1, text: "two".into(), bbox: BBox::new(10.0, 30.0, 30.0, 42.0), label: Some(0) },
            ],
        }
    }

    #[test]
    fn identity_parameters_leave_the_sample_untouched() {
        let doc = doc_with_raster();
        for t in [
            GeoTransform::Rotate { degrees: 0.0 },
            GeoTransform::Perspective { offsets: [(0.0, 0.0); 4] },
            GeoTransform::Affine { tx: 0.0, ty: 0.0, scale: 1.0 },
            GeoTransform::ScalePad { scale: 1.0 },
        ] {
            let out = apply_geo_transform(&doc, &t).unwrap();
            assert_eq!(out, doc);
        }
    }

    #[test]
    fn rotate_there_and_back_recovers_centers_within_a_pixel() {
        let doc = doc_with_raster();
        let theta = 4.0;
        let once = apply_geo_transform(&doc, &GeoTransform::Rotate { degrees: theta }).unwrap();
        let back = apply_geo_transform(&once, &GeoTransform::Rotate { degrees: -theta }).unwrap();
        for (orig, rt) in doc.regions.iter().zip(&back.regions) {
            let (cx0, cy0) = orig.bbox.center();
            let (cx1, cy1) = rt.bbox.center();
            assert!((cx0 - cx1).abs() < 1.0 && (cy0 - cy1).abs() < 1.0,
                "center drifted: ({cx0},{cy0}) vs ({cx1},{cy1})");
        }
    }

    #[test]
    fn texts_and_labels_survive_augmentation() {
        let doc = doc_with_raster();
        let mut rng = derive_stream(5, &[1]);
        let cfg = TrainConfig::default();
        for _ in 0..20 {
            let out = augment_geometric(&doc, &cfg, &mut rng).unwrap();
            for r in &out.regions {
                let orig = doc.regions.iter().find(|o| o.text == r.text).unwrap();
                assert_eq!(r.label, orig.label);
                assert!(r.bbox.is_valid());
                assert!(r.bbox.x1 <= doc.width && r.bbox.y1 <= doc.height);
            }
        }
    }

    #[test]
    fn zero_rate_graph_augmentation_is_identity() {
        let doc = doc_with_raster();
        let boxes = doc.boxes_by_id();
        let cfg = TrainConfig { feature_dropout: 0.0, bbox_jitter_sigma: 0.0, ..Default::default() };
        let mut rng = derive_stream(1, &[2]);
        let (jittered, mask) = augment_graph(&boxes, doc.width, doc.height, &cfg, &mut rng);
        assert_eq!(jittered, boxes);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn dropout_rate_matches_monte_carlo() {
        let doc = doc_with_raster();
        let boxes = doc.boxes_by_id();
        let cfg = TrainConfig::default(); // dropout 0.1
        let mut rng = derive_stream(7, &[3]);
        let trials = 5000; // 2 nodes each -> 10^4 draws
        let mut dropped = 0usize;
        let mut total = 0usize;
        for _ in 0..trials {
            let (_, mask) = augment_graph(&boxes, doc.width, doc.height, &cfg, &mut rng);
            dropped += mask.iter().filter(|&&m| m).count();
            total += mask.len();
        }
        let rate = dropped as f64 / total as f64;
        assert!((rate - 0.1).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn jitter_never_produces_invalid_boxes() {
        let doc = doc_with_raster();
        let boxes = doc.boxes_by_id();
        let cfg = TrainConfig { bbox_jitter_sigma: 25.0, ..Default::default() };
        let mut rng = derive_stream(11, &[4]);
        for _ in 0..2000 {
            let (jittered, _) = augment_graph(&boxes, doc.width, doc.height, &cfg, &mut rng);
            for b in &jittered {
                assert!(b.is_valid(), "{b:?}");
                assert!(b.x1 <= doc.width && b.y1 <= doc.height);
            }
        }
    }
}
