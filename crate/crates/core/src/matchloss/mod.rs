//! Decoupled bipartite matching and the training objective: focal
//! classification, L1+GIoU boxes, dice+focal masks, the box restriction
//! term, and their weighted total.

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Scalar, Tape, Value};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("non-finite cost at ({0}, {1})")]
    NonFiniteCost(usize, usize),
    #[error("negative cost at ({0}, {1})")]
    NegativeCost(usize, usize),
}

/// Eq-7 weights; the same constants drive the matching costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub restriction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 4.0,
            bbox: 2.0,
            mask: 5.0,
            restriction: 5.0,
        }
    }
}

/// Internal L1:GIoU mix inside the box term (the outer weight is
/// [`LossWeights::bbox`]).
pub const BOX_L1_WEIGHT: f64 = 5.0;
pub const BOX_GIOU_WEIGHT: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// The focal exponent is fixed at 2 and realized by squaring.
pub const FOCAL_GAMMA: f64 = 2.0;
/// Lower clamp for part box areas in the restriction term.
pub const RESTRICTION_AREA_EPS: f64 = 1e-6;

/// Per-level assignment of prediction rows to target indices. Pairs never
/// cross hierarchy levels; unmatched predictions are background.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub object_pairs: Vec<(usize, usize)>,
    pub part_pairs: Vec<(usize, usize)>,
}

/// Scalar loss components of one step. `total` is the exact weighted sum.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_obj: f64,
    pub cls_part: f64,
    pub box_obj: f64,
    pub box_part: f64,
    pub mask_obj: f64,
    pub mask_part: f64,
    pub restriction: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The Eq-7 combination of the stored components.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.cls * (self.cls_obj + self.cls_part)
            + w.bbox * (self.box_obj + self.box_part)
            + w.mask * (self.mask_obj + self.mask_part)
            + w.restriction * self.restriction
    }
}

/// Weighted total over already-reduced component scalars.
pub fn total_loss(parts: &LossBreakdown, w: &LossWeights) -> f64 {
    parts.recombine(w)
}

// ---------------------------------------------------------------------------
// Hungarian assignment
// ---------------------------------------------------------------------------

/// Minimum-cost assignment of `min(n, m)` pairs for a nonnegative finite
/// cost matrix. Ties between equal-cost optimal assignments break toward the
/// lexicographically smallest pair sequence. Pairs are returned sorted by
/// row.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<Vec<(usize, usize)>, MatchError> {
    let (n, m) = cost.dim();
    for ((i, j), &v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(MatchError::NonFiniteCost(i, j));
        }
        if v < 0.0 {
            return Err(MatchError::NegativeCost(i, j));
        }
    }
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    if n > m {
        let flipped = cost.t().to_owned();
        let mut pairs: Vec<(usize, usize)> = hungarian_match(&flipped)?
            .into_iter()
            .map(|(a, b)| (b, a))
            .collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }

    // lexicographic completion: fix rows in order, keeping the optimum
    let mut remaining_cols: Vec<usize> = (0..m).collect();
    let mut remaining_rows: Vec<usize> = (0..n).collect();
    let mut budget = assignment_min_cost(&cost.view());
    let mut pairs = Vec::with_capacity(n);
    while let Some(&row) = remaining_rows.first() {
        let rest_rows: Vec<usize> = remaining_rows[1..].to_vec();
        let tol = 1e-9 * (1.0 + budget.abs());
        let mut chosen = None;
        for (ci, &col) in remaining_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = remaining_cols
                .iter()
                .copied()
                .filter(|&c| c != col)
                .collect();
            let sub = select_submatrix(cost, &rest_rows, &rest_cols);
            let continuation = assignment_min_cost(&sub.view());
            if cost[(row, col)] + continuation <= budget + tol {
                chosen = Some((ci, col, continuation));
                break;
            }
        }
        let (ci, col, continuation) = chosen.expect("an optimal completion always exists");
        pairs.push((row, col));
        remaining_cols.remove(ci);
        remaining_rows.remove(0);
        budget = continuation;
    }
    Ok(pairs)
}

fn select_submatrix(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| cost[(rows[i], cols[j])])
}

/// Minimum assignment cost via shortest augmenting paths with potentials;
/// rectangular inputs are padded with zero-cost dummy rows.
fn assignment_min_cost(cost: &ndarray::ArrayView2<'_, f64>) -> f64 {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return 0.0;
    }
    if n > m {
        return assignment_min_cost(&cost.t());
    }
    let size = m;
    let at = |i: usize, j: usize| -> f64 {
        if i < n {
            cost[(i, j)]
        } else {
            0.0
        }
    };
    // classic O(n^3) row-by-row potential update, 1-based bookkeeping
    let mut u = vec![0.0f64; size + 1];
    let mut v = vec![0.0f64; size + 1];
    let mut assigned = vec![0usize; size + 1]; // col -> row (1-based, 0 = free)
    for i in 1..=size {
        assigned[0] = i;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; size + 1];
        let mut prev = vec![0usize; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = assigned[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    prev[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[assigned[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if assigned[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = prev[j0];
            assigned[j0] = assigned[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=size {
        let i = assigned[j];
        if i >= 1 && i <= n {
            total += cost[(i - 1, j - 1)];
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Decoupled matching
// ---------------------------------------------------------------------------

/// Detached per-level prediction arrays used to build matching costs.
#[derive(Debug, Clone)]
pub struct LevelPredArrays {
    /// Raw similarity logits `[R, K]`.
    pub scores: Array2<f64>,
    /// Normalized cxcywh boxes `[R, 4]`.
    pub boxes: Array2<f64>,
    /// Mask logits `[R, HW]` when mask costs participate.
    pub mask_logits: Option<Array2<f64>>,
}

/// Per-level targets in the same frame as the predictions.
#[derive(Debug, Clone, Default)]
pub struct LevelTargetArrays {
    pub categories: Vec<usize>,
    /// Normalized cxcywh boxes `[T, 4]`.
    pub boxes: Array2<f64>,
    /// Binary masks `[T, HW]` at the mask-logit resolution; rows of targets
    /// without masks hold NaN and are skipped by mask costs and losses.
    pub masks: Option<Array2<f64>>,
}

impl LevelTargetArrays {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn target_has_mask(&self, t: usize) -> bool {
        self.masks.as_ref().is_some_and(|m| !m[(t, 0)].is_nan())
    }
}

/// Hungarian matching for one level with cost
/// `cls_w * focal_cls + box_w * (5 L1 + 2 (1-GIoU)) + mask_w * (dice + focal)`
/// using the same weights as the loss.
pub fn match_level(
    pred: &LevelPredArrays,
    targets: &LevelTargetArrays,
    w: &LossWeights,
) -> Vec<(usize, usize)> {
    let rows = pred.scores.nrows();
    let t_count = targets.len();
    if rows == 0 || t_count == 0 {
        return Vec::new();
    }
    let mut cost = Array2::<f64>::zeros((rows, t_count));
    for r in 0..rows {
        for t in 0..t_count {
            let cat = targets.categories[t];
            let z = pred.scores[(r, cat)];
            let p = sigmoid(z);
            let pos = FOCAL_ALPHA * (1.0 - p).powi(2) * softplus(-z);
            let neg = (1.0 - FOCAL_ALPHA) * p.powi(2) * softplus(z);
            let cls_cost = pos - neg;

            let pb = [
                pred.boxes[(r, 0)],
                pred.boxes[(r, 1)],
                pred.boxes[(r, 2)],
                pred.boxes[(r, 3)],
            ];
            let tb = [
                targets.boxes[(t, 0)],
                targets.boxes[(t, 1)],
                targets.boxes[(t, 2)],
                targets.boxes[(t, 3)],
            ];
            let l1: f64 = pb.iter().zip(&tb).map(|(a, b)| (a - b).abs()).sum();
            let giou = giou_cxcywh(&pb, &tb);
            let box_cost = BOX_L1_WEIGHT * l1 + BOX_GIOU_WEIGHT * (1.0 - giou);

            let mask_cost = match (&pred.mask_logits, &targets.masks) {
                (Some(logits), Some(masks)) if targets.target_has_mask(t) => {
                    mask_pair_cost(&logits.row(r), &masks.row(t))
                }
                _ => 0.0,
            };

            cost[(r, t)] = w.cls * cls_cost + w.bbox * box_cost + w.mask * mask_cost;
        }
    }
    // focal cls costs can be negative; shift so the matcher sees a
    // nonnegative matrix (a constant shift preserves the argmin)
    let min = cost.iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        cost.mapv_inplace(|v| v - min);
    }
    hungarian_match(&cost).expect("finite matching costs")
}

/// Two independent Hungarian problems, one per hierarchy level. No pair ever
/// crosses levels.
pub fn decoupled_match(
    object_pred: &LevelPredArrays,
    object_targets: &LevelTargetArrays,
    part_pred: &LevelPredArrays,
    part_targets: &LevelTargetArrays,
    w: &LossWeights,
) -> MatchResult {
    MatchResult {
        object_pairs: match_level(object_pred, object_targets, w),
        part_pairs: match_level(part_pred, part_targets, w),
    }
}

fn mask_pair_cost(
    logits: &ndarray::ArrayView1<'_, f64>,
    target: &ndarray::ArrayView1<'_, f64>,
) -> f64 {
    let hw = logits.len();
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    let mut focal = 0.0;
    for (&z, &t) in logits.iter().zip(target) {
        let p = sigmoid(z);
        inter += p * t;
        psum += p;
        tsum += t;
        let pos = FOCAL_ALPHA * (1.0 - p).powi(2) * softplus(-z);
        let neg = (1.0 - FOCAL_ALPHA) * p.powi(2) * softplus(z);
        focal += t * pos + (1.0 - t) * neg;
    }
    let dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
    dice + focal / hw as f64
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

fn giou_cxcywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ax1 = a[0] - a[2] / 2.0;
    let ay1 = a[1] - a[3] / 2.0;
    let ax2 = a[0] + a[2] / 2.0;
    let ay2 = a[1] + a[3] / 2.0;
    let bx1 = b[0] - b[2] / 2.0;
    let by1 = b[1] - b[3] / 2.0;
    let bx2 = b[0] + b[2] / 2.0;
    let by2 = b[1] + b[3] / 2.0;
    let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let union = (a[2] * a[3] + b[2] * b[3] - inter).max(1e-12);
    let hull = ((ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1))).max(1e-12);
    inter / union - (hull - union) / hull
}

// ---------------------------------------------------------------------------
// Differentiable losses
// ---------------------------------------------------------------------------

/// Sigmoid focal classification loss over every (row, category) cell:
/// matched rows are positive for their target's category, everything else is
/// negative. Normalized by the matched count (at least 1).
pub fn focal_cls_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Value,
    matched: &[(usize, usize)],
    target_categories: &[usize],
    alpha: f64,
) -> Value {
    let shape = tape.value(logits).shape().to_vec();
    let (rows, k) = (shape[0], shape[1]);
    let mut onehot = Array2::<f64>::zeros((rows, k));
    for &(r, t) in matched {
        onehot[(r, target_categories[t])] = 1.0;
    }
    let t = tape.constant(onehot.mapv(F::from_f64).into_dyn());
    let one = tape.constant(ndarray::ArrayD::from_elem(IxDyn(&[rows, k]), F::one()));

    let p = tape.sigmoid(logits);
    let one_minus_p = tape.sub(one, p);
    let neg_z = tape.neg(logits);
    let sp_neg = tape.softplus(neg_z); // -log p
    let sp_pos = tape.softplus(logits); // -log (1-p)
    let omp_sq = tape.mul(one_minus_p, one_minus_p);
    let p_sq = tape.mul(p, p);
    let pos = tape.mul(omp_sq, sp_neg);
    let pos = tape.scale(pos, F::from_f64(alpha));
    let neg = tape.mul(p_sq, sp_pos);
    let neg = tape.scale(neg, F::from_f64(1.0 - alpha));
    let pos_term = tape.mul(t, pos);
    let one_minus_t = tape.sub(one, t);
    let neg_term = tape.mul(one_minus_t, neg);
    let cell_losses = tape.add(pos_term, neg_term);
    let total = tape.sum_all(cell_losses);
    tape.scale(total, F::one() / F::from_usize(matched.len().max(1)))
}

/// Splits `[R, 4]` cxcywh boxes into xyxy plus width/height columns.
fn box_columns<F: Scalar>(tape: &mut Tape<F>, boxes: Value) -> [Value; 6] {
    let cx = tape.narrow2(boxes, 1, 0, 1);
    let cy = tape.narrow2(boxes, 1, 1, 1);
    let w = tape.narrow2(boxes, 1, 2, 1);
    let h = tape.narrow2(boxes, 1, 3, 1);
    let half = F::from_f64(0.5);
    let hw = tape.scale(w, half);
    let hh = tape.scale(h, half);
    let x1 = tape.sub(cx, hw);
    let x2 = tape.add(cx, hw);
    let y1 = tape.sub(cy, hh);
    let y2 = tape.add(cy, hh);
    [x1, y1, x2, y2, w, h]
}

/// Mean over matched pairs of `5 * L1(cxcywh) + 2 * (1 - GIoU)`.
pub fn box_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred_boxes: Value,
    target_boxes: &Array2<f64>,
    matched: &[(usize, usize)],
) -> Value {
    if matched.is_empty() {
        return tape.constant_scalar(F::zero());
    }
    let rows: Vec<usize> = matched.iter().map(|&(r, _)| r).collect();
    let pred = tape.gather_rows(pred_boxes, &rows);
    let tgt_arr = Array2::from_shape_fn((matched.len(), 4), |(i, j)| {
        F::from_f64(target_boxes[(matched[i].1, j)])
    });
    let tgt = tape.constant(tgt_arr.into_dyn());

    let diff = tape.sub(pred, tgt);
    let diff = tape.abs(diff);
    let l1 = tape.sum_axis1(diff); // [P, 1]

    let [px1, py1, px2, py2, pw, ph] = box_columns(tape, pred);
    let [tx1, ty1, tx2, ty2, tw, th] = box_columns(tape, tgt);
    let ix1 = tape.emax(px1, tx1);
    let iy1 = tape.emax(py1, ty1);
    let ix2 = tape.emin(px2, tx2);
    let iy2 = tape.emin(py2, ty2);
    let iw_raw = tape.sub(ix2, ix1);
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy2, iy1);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);
    let area_p = tape.mul(pw, ph);
    let area_t = tape.mul(tw, th);
    let sum_areas = tape.add(area_p, area_t);
    let union_raw = tape.sub(sum_areas, inter);
    let union = tape.clamp_min(union_raw, F::from_f64(1e-12));
    let iou = tape.div(inter, union);
    let hx1 = tape.emin(px1, tx1);
    let hy1 = tape.emin(py1, ty1);
    let hx2 = tape.emax(px2, tx2);
    let hy2 = tape.emax(py2, ty2);
    let hw_ = tape.sub(hx2, hx1);
    let hh_ = tape.sub(hy2, hy1);
    let hull_raw = tape.mul(hw_, hh_);
    let hull = tape.clamp_min(hull_raw, F::from_f64(1e-12));
    let excess = tape.sub(hull, union);
    let penalty = tape.div(excess, hull);
    let giou = tape.sub(iou, penalty);
    let one = tape.constant(ndarray::ArrayD::from_elem(
        IxDyn(&[matched.len(), 1]),
        F::one(),
    ));
    let giou_loss = tape.sub(one, giou); // [P, 1]

    let l1_term = tape.scale(l1, F::from_f64(BOX_L1_WEIGHT));
    let giou_term = tape.scale(giou_loss, F::from_f64(BOX_GIOU_WEIGHT));
    let per_pair = tape.add(l1_term, giou_term);
    let total = tape.sum_all(per_pair);
    tape.scale(total, F::one() / F::from_usize(matched.len()))
}

/// Mean over matched mask-bearing pairs of dice + per-pixel sigmoid focal
/// loss; pairs whose target lacks a mask are skipped.
pub fn mask_loss<F: Scalar>(
    tape: &mut Tape<F>,
    mask_logits: Value,
    targets: &LevelTargetArrays,
    matched: &[(usize, usize)],
) -> Value {
    let masked: Vec<(usize, usize)> = matched
        .iter()
        .copied()
        .filter(|&(_, t)| targets.target_has_mask(t))
        .collect();
    let Some(target_masks) = &targets.masks else {
        return tape.constant_scalar(F::zero());
    };
    if masked.is_empty() {
        return tape.constant_scalar(F::zero());
    }
    let hw = tape.value(mask_logits).shape()[1];
    let rows: Vec<usize> = masked.iter().map(|&(r, _)| r).collect();
    let logits = tape.gather_rows(mask_logits, &rows);
    let tgt_arr = Array2::from_shape_fn((masked.len(), hw), |(i, j)| {
        F::from_f64(target_masks[(masked[i].1, j)])
    });
    let t = tape.constant(tgt_arr.into_dyn());
    let one = tape.constant(ndarray::ArrayD::from_elem(
        IxDyn(&[masked.len(), hw]),
        F::one(),
    ));

    let p = tape.sigmoid(logits);
    // dice with +1 smoothing
    let pt = tape.mul(p, t);
    let inter2 = tape.sum_axis1(pt);
    let inter2 = tape.scale(inter2, F::from_f64(2.0));
    let num = tape.add_scalar(inter2, F::one());
    let psum = tape.sum_axis1(p);
    let tsum = tape.sum_axis1(t);
    let denom_raw = tape.add(psum, tsum);
    let denom = tape.add_scalar(denom_raw, F::one());
    let ratio = tape.div(num, denom);
    let ones_col = tape.constant(ndarray::ArrayD::from_elem(
        IxDyn(&[masked.len(), 1]),
        F::one(),
    ));
    let dice = tape.sub(ones_col, ratio);

    // per-pixel focal, averaged over pixels
    let one_minus_p = tape.sub(one, p);
    let neg_z = tape.neg(logits);
    let sp_neg = tape.softplus(neg_z);
    let sp_pos = tape.softplus(logits);
    let omp_sq = tape.mul(one_minus_p, one_minus_p);
    let p_sq = tape.mul(p, p);
    let pos = tape.mul(omp_sq, sp_neg);
    let pos = tape.scale(pos, F::from_f64(FOCAL_ALPHA));
    let neg = tape.mul(p_sq, sp_pos);
    let neg = tape.scale(neg, F::from_f64(1.0 - FOCAL_ALPHA));
    let pos_term = tape.mul(t, pos);
    let one_minus_t = tape.sub(one, t);
    let neg_term = tape.mul(one_minus_t, neg);
    let focal_cells = tape.add(pos_term, neg_term);
    let focal_rows = tape.sum_axis1(focal_cells);
    let focal = tape.scale(focal_rows, F::one() / F::from_usize(hw));

    let per_pair = tape.add(dice, focal);
    let total = tape.sum_all(per_pair);
    tape.scale(total, F::one() / F::from_usize(masked.len()))
}

/// Box restriction term: for every matched part row, one minus the fraction
/// of the part box contained in the box predicted at the part's generating
/// object slot. A sum over matched part rows; each term lies in [0, 1].
pub fn restriction_loss<F: Scalar>(
    tape: &mut Tape<F>,
    object_boxes: Value,
    part_boxes: Value,
    part_slot_of_row: &[usize],
    matched_part_rows: &[usize],
) -> Value {
    if matched_part_rows.is_empty() {
        return tape.constant_scalar(F::zero());
    }
    let parent_slots: Vec<usize> = matched_part_rows
        .iter()
        .map(|&r| part_slot_of_row[r])
        .collect();
    let parents = tape.gather_rows(object_boxes, &parent_slots);
    let parts = tape.gather_rows(part_boxes, matched_part_rows);

    let [ox1, oy1, ox2, oy2, _, _] = box_columns(tape, parents);
    let [px1, py1, px2, py2, pw, ph] = box_columns(tape, parts);
    let ix1 = tape.emax(ox1, px1);
    let iy1 = tape.emax(oy1, py1);
    let ix2 = tape.emin(ox2, px2);
    let iy2 = tape.emin(oy2, py2);
    let iw_raw = tape.sub(ix2, ix1);
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy2, iy1);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);
    let area_raw = tape.mul(pw, ph);
    let area = tape.clamp_min(area_raw, F::from_f64(RESTRICTION_AREA_EPS));
    let contained = tape.div(inter, area);
    let ones = tape.constant(ndarray::ArrayD::from_elem(
        IxDyn(&[matched_part_rows.len(), 1]),
        F::one(),
    ));
    let terms = tape.sub(ones, contained);
    tape.sum_all(terms)
}
