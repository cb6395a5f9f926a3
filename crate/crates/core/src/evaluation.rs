//! Hierarchical evaluation: per-level COCO-style average precision,
//! seen/unseen mIoU with harmonic mean, the ground-truth-object parsing
//! protocol, and the novel-AP increment bookkeeping.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CategoryRecord, HierarchicalDataset, Level, Split};
use crate::geometry::{box_iou, mask_iou, BinaryMask, BoundingBox};
use crate::model::{
    inverse_sigmoid, Detection, Model, ModelError, PredictionSet, Vocabulary,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("semantic map resolution mismatch: {0} vs {1} pixels")]
    ResolutionMismatch(usize, usize),
    #[error("novel splits differ: {0:?} vs {1:?}")]
    SplitMismatch(BTreeSet<String>, BTreeSet<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// One detection attributed to a dataset image and category.
#[derive(Debug, Clone)]
pub struct EvalDetection {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub bbox: BoundingBox,
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Box,
    Mask,
}

/// AP summary for one level and IoU kind.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ApMetrics {
    /// Mean over categories and thresholds 0.50:0.05:0.95.
    pub ap: f64,
    /// Mean over categories at threshold 0.50.
    pub ap50: f64,
    /// Per-category AP50 table.
    pub per_category_ap50: Vec<(String, f64)>,
}

/// COCO-style AP: per category, rank detections by confidence, greedily
/// match to unmatched ground truth at each IoU threshold, 101-point
/// interpolated precision, mean over categories and thresholds. Categories
/// absent from the ground truth are excluded from the mean.
pub fn evaluate_map(
    detections: &[EvalDetection],
    gts: &HierarchicalDataset,
    level: Level,
    kind: IouKind,
) -> ApMetrics {
    let categories: Vec<&CategoryRecord> =
        gts.categories.iter().filter(|c| c.level == level).collect();
    let thresholds = coco_thresholds();

    let mut ap_sum = 0.0;
    let mut ap50_sum = 0.0;
    let mut counted = 0usize;
    let mut per_category_ap50 = Vec::new();
    for cat in &categories {
        let gt_list: Vec<_> = gts
            .annotations
            .iter()
            .filter(|a| a.category_id == cat.id && a.level == level)
            .collect();
        if gt_list.is_empty() {
            continue;
        }
        counted += 1;
        let mut dets: Vec<(usize, &EvalDetection)> = detections
            .iter()
            .filter(|d| d.category_id == cat.id)
            .enumerate()
            .collect();
        dets.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.image_id.cmp(&b.1.image_id))
                .then(a.0.cmp(&b.0))
        });

        let mut cat_ap = 0.0;
        let mut cat_ap50 = 0.0;
        for &thr in &thresholds {
            let ap = average_precision_at(&dets, &gt_list, thr, kind);
            cat_ap += ap;
            if (thr - 0.5).abs() < 1e-9 {
                cat_ap50 = ap;
            }
        }
        cat_ap /= thresholds.len() as f64;
        ap_sum += cat_ap;
        ap50_sum += cat_ap50;
        per_category_ap50.push((cat.name.clone(), cat_ap50));
    }
    if counted == 0 {
        return ApMetrics::default();
    }
    ApMetrics {
        ap: ap_sum / counted as f64,
        ap50: ap50_sum / counted as f64,
        per_category_ap50,
    }
}

fn pair_iou(det: &EvalDetection, gt: &crate::dataset::AnnotationRecord, kind: IouKind) -> f64 {
    match kind {
        IouKind::Box => box_iou(&det.bbox, &gt.bounding_box()),
        IouKind::Mask => match (&det.mask, gt.mask()) {
            (Some(dm), Some(Ok(gm))) => mask_iou(dm, &gm).unwrap_or(0.0),
            _ => 0.0,
        },
    }
}

fn average_precision_at(
    ranked: &[(usize, &EvalDetection)],
    gt_list: &[&crate::dataset::AnnotationRecord],
    threshold: f64,
    kind: IouKind,
) -> f64 {
    let mut gt_used = vec![false; gt_list.len()];
    let mut tp = Vec::with_capacity(ranked.len());
    for (_, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gt_list.iter().enumerate() {
            if gt_used[gi] || gt.image_id != det.image_id {
                continue;
            }
            let iou = pair_iou(det, gt, kind);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // precision-recall with 101-point interpolation
    let total_gt = gt_list.len() as f64;
    let mut cum_tp = 0usize;
    let mut points = Vec::with_capacity(tp.len());
    for (i, &hit) in tp.iter().enumerate() {
        if hit {
            cum_tp += 1;
        }
        let precision = cum_tp as f64 / (i + 1) as f64;
        let recall = cum_tp as f64 / total_gt;
        points.push((recall, precision));
    }
    // precision envelope from the right
    let mut envelope = points.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = envelope
            .iter()
            .find(|&&(rec, _)| rec >= r - 1e-12)
            .map(|&(_, prec)| prec)
            .unwrap_or(0.0);
        ap += p;
    }
    ap / 101.0
}

/// Harmonic mean of seen and unseen mIoU (inputs on the 0..100 scale).
/// Defined as 0 when both are 0.
pub fn harmonic_miou(seen: f64, unseen: f64) -> f64 {
    if seen == 0.0 && unseen == 0.0 {
        return 0.0;
    }
    2.0 * seen * unseen / (seen + unseen)
}

/// Per-pixel mIoU over a corpus of semantic maps, split into seen (base) and
/// unseen (novel) category means. Maps hold category ids with 0 background.
/// Returns values on the 0..100 scale.
pub fn miou_by_split(
    pred_maps: &[Vec<u32>],
    gt_maps: &[Vec<u32>],
    categories: &[CategoryRecord],
) -> Result<(f64, f64), EvalError> {
    let pred_len: usize = pred_maps.iter().map(|m| m.len()).sum();
    let gt_len: usize = gt_maps.iter().map(|m| m.len()).sum();
    if pred_len != gt_len || pred_maps.len() != gt_maps.len() {
        return Err(EvalError::ResolutionMismatch(pred_len, gt_len));
    }
    let mut inter: HashMap<u32, usize> = HashMap::new();
    let mut union: HashMap<u32, usize> = HashMap::new();
    for (pm, gm) in pred_maps.iter().zip(gt_maps) {
        if pm.len() != gm.len() {
            return Err(EvalError::ResolutionMismatch(pm.len(), gm.len()));
        }
        for (&p, &g) in pm.iter().zip(gm) {
            if p == g && p != 0 {
                *inter.entry(p).or_default() += 1;
            }
            if p != 0 {
                *union.entry(p).or_default() += 1;
            }
            if g != 0 && g != p {
                *union.entry(g).or_default() += 1;
            }
        }
    }
    let mut seen_sum = 0.0;
    let mut seen_n = 0usize;
    let mut unseen_sum = 0.0;
    let mut unseen_n = 0usize;
    for cat in categories {
        let id = cat.id as u32;
        let u = union.get(&id).copied().unwrap_or(0);
        if u == 0 {
            continue;
        }
        let iou = inter.get(&id).copied().unwrap_or(0) as f64 / u as f64;
        match cat.split {
            Split::Base => {
                seen_sum += iou;
                seen_n += 1;
            }
            Split::Novel => {
                unseen_sum += iou;
                unseen_n += 1;
            }
        }
    }
    let seen = if seen_n == 0 { 0.0 } else { 100.0 * seen_sum / seen_n as f64 };
    let unseen = if unseen_n == 0 { 0.0 } else { 100.0 * unseen_sum / unseen_n as f64 };
    Ok((seen, unseen))
}

/// A ground-truth object handed to the parsing oracle.
#[derive(Debug, Clone)]
pub struct OracleObject {
    pub category_id: u64,
    pub bbox: BoundingBox,
    pub mask: Option<BinaryMask>,
}

/// Ground-truth-object parsing: object queries are formed by mask-pooling
/// the pixel embedding map over each given object, refined by one pass of
/// the object decoder, then parsed into part predictions whose vocabulary is
/// restricted to part categories of the given object's category.
pub fn oracle_obj_parse(
    model: &Model,
    image: &ndarray::Array3<f32>,
    gt_objects: &[OracleObject],
    vocab: &Vocabulary,
    categories: &[CategoryRecord],
) -> Result<PredictionSet, EvalError> {
    if gt_objects.is_empty() {
        return Ok(PredictionSet::default());
    }
    let mut f = model.forward_pass();
    let enc = model.encode_image(&mut f, image, vocab)?;
    let (h, w) = enc.image_size;
    let (h4, w4) = enc.hw4;

    // pooled pixel embeddings per object
    let mut indicator = Array2::<f32>::zeros((gt_objects.len(), h4 * w4));
    for (i, obj) in gt_objects.iter().enumerate() {
        let mut cells = Vec::new();
        if let Some(mask) = &obj.mask {
            for cy in 0..h4 {
                for cx in 0..w4 {
                    let mut covered = 0usize;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            let (py, px) = (cy * 4 + dy, cx * 4 + dx);
                            if py < mask.height() && px < mask.width() && mask.get(py, px) {
                                covered += 1;
                            }
                        }
                    }
                    if covered * 2 >= 16 {
                        cells.push(cy * w4 + cx);
                    }
                }
            }
        }
        if cells.is_empty() {
            // box fallback: cells whose center lies inside the box
            for cy in 0..h4 {
                for cx in 0..w4 {
                    let (px, py) = ((cx * 4 + 2) as f64, (cy * 4 + 2) as f64);
                    let b = &obj.bbox;
                    if px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2 {
                        cells.push(cy * w4 + cx);
                    }
                }
            }
        }
        if cells.is_empty() {
            cells.push((h4 / 2) * w4 + w4 / 2);
        }
        let weight = 1.0 / cells.len() as f32;
        for cell in cells {
            indicator[(i, cell)] = weight;
        }
    }

    let c = model.cfg.channels;
    let ind = f.tape.constant2(indicator);
    let mp_flat = f.tape.reshape(enc.pixel_embedding, &[c, h4 * w4]);
    let mp_t = f.tape.transpose2(mp_flat);
    let pooled = f.tape.matmul(ind, mp_t); // [G, C]
    let queries = model.refine_object_queries(&mut f, &enc, pooled);

    // part queries from the querying transformer, references at the GT boxes
    let part_queries = model.qformer_parse(&mut f, queries);
    let l = model.cfg.parsing_queries;
    let mut ref_rows = Array2::<f32>::zeros((gt_objects.len() * l, 4));
    let mut slot_of_row = Vec::with_capacity(gt_objects.len() * l);
    for (i, obj) in gt_objects.iter().enumerate() {
        let b = &obj.bbox;
        let cxcywh = [
            ((b.x1 + b.x2) / 2.0 / w as f64) as f32,
            ((b.y1 + b.y2) / 2.0 / h as f64) as f32,
            (b.width() / w as f64) as f32,
            (b.height() / h as f64) as f32,
        ];
        for j in 0..l {
            for k in 0..4 {
                ref_rows[(i * l + j, k)] = inverse_sigmoid(cxcywh[k]);
            }
            slot_of_row.push(i);
        }
    }
    let ref_logits = f.tape.constant2(ref_rows);
    let part = model.decode_parts(&mut f, &enc, part_queries, ref_logits, slot_of_row, vocab);

    // restrict each object's rows to part categories of its GT category
    let scores = crate::model::as_array2(f.tape.value(part.scores));
    let boxes = crate::model::as_array2(f.tape.value(part.boxes));
    let logits = crate::model::as_array2(f.tape.value(part.mask_logits));
    let allowed_of_object: Vec<Vec<usize>> = gt_objects
        .iter()
        .map(|obj| {
            vocab
                .part
                .names
                .iter()
                .enumerate()
                .filter(|(_, name)| {
                    categories.iter().any(|c| {
                        &c.name == *name
                            && c.parent_object_category_id == Some(obj.category_id)
                    })
                })
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut parts = Vec::new();
    for row in 0..scores.nrows() {
        let object_index = part.slot_of_row[row];
        for &cat in &allowed_of_object[object_index] {
            let score = 1.0 / (1.0 + (-scores[(row, cat)]).exp());
            let (cx, cy, bw, bh) = (
                boxes[(row, 0)] as f64,
                boxes[(row, 1)] as f64,
                boxes[(row, 2)] as f64,
                boxes[(row, 3)] as f64,
            );
            let bbox = BoundingBox::from_corners(
                (cx - bw / 2.0) * w as f64,
                (cy - bh / 2.0) * h as f64,
                (cx + bw / 2.0) * w as f64,
                (cy + bh / 2.0) * h as f64,
            )
            .clamp_to(w as f64, h as f64);
            let mask = BinaryMask::from_fn(h, w, |y, x| {
                let (yy, xx) = ((y / 4).min(h4 - 1), (x / 4).min(w4 - 1));
                logits[(row, yy * w4 + xx)] > 0.0
            });
            parts.push(Detection {
                category_index: cat,
                score: score as f32,
                box_xyxy: bbox,
                mask: Some(mask),
                slot: object_index,
            });
        }
    }
    Ok(PredictionSet {
        objects: Vec::new(),
        parts,
    })
}

/// Novel-category AP measured on an explicit split, so increments can refuse
/// mismatched comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelApMeasurement {
    pub novel_names: BTreeSet<String>,
    pub ap: f64,
}

/// `augmented - baseline`, defined only on the identical novel split.
pub fn novel_ap_increment(
    baseline: &NovelApMeasurement,
    augmented: &NovelApMeasurement,
) -> Result<f64, EvalError> {
    if baseline.novel_names != augmented.novel_names {
        return Err(EvalError::SplitMismatch(
            baseline.novel_names.clone(),
            augmented.novel_names.clone(),
        ));
    }
    Ok(augmented.ap - baseline.ap)
}

/// Full evaluation summary. All AP/mIoU values are fractions in [0, 1]
/// except the mIoU fields, which follow the conventional 0..100 scale.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub object_box: ApMetrics,
    pub object_mask: ApMetrics,
    pub part_box: ApMetrics,
    pub part_mask: ApMetrics,
    pub miou_seen: Option<f64>,
    pub miou_unseen: Option<f64>,
    pub hiou: Option<f64>,
    pub novel_ap_increment: Option<f64>,
}

impl EvalReport {
    /// Flat tab-separated table for plotting.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            format!("object\tbox\tAP\t{:.4}", self.object_box.ap),
            format!("object\tbox\tAP50\t{:.4}", self.object_box.ap50),
            format!("object\tmask\tAP\t{:.4}", self.object_mask.ap),
            format!("object\tmask\tAP50\t{:.4}", self.object_mask.ap50),
            format!("part\tbox\tAP\t{:.4}", self.part_box.ap),
            format!("part\tbox\tAP50\t{:.4}", self.part_box.ap50),
            format!("part\tmask\tAP\t{:.4}", self.part_mask.ap),
            format!("part\tmask\tAP50\t{:.4}", self.part_mask.ap50),
        ];
        if let (Some(s), Some(u), Some(h)) = (self.miou_seen, self.miou_unseen, self.hiou) {
            rows.push(format!("semantic\tmIoU-seen\t\t{s:.2}"));
            rows.push(format!("semantic\tmIoU-unseen\t\t{u:.2}"));
            rows.push(format!("semantic\thIoU\t\t{h:.2}"));
        }
        if let Some(n) = self.novel_ap_increment {
            rows.push(format!("part\tNovelAP-increment\t\t{n:+.2}"));
        }
        rows.join("\n")
    }
}
