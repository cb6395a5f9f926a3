//! Exact geometric primitives: boxes, bitmap masks, overlap measures,
//! morphology, and the uncompressed RLE codec.
//!
//! All operations here are pure functions over immutable inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mask dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("empty mask list")]
    EmptyMaskList,
    #[error("empty box list")]
    EmptyBoxList,
    #[error("RLE counts sum {got} does not match {height}x{width} grid")]
    RleLengthMismatch {
        got: usize,
        height: usize,
        width: usize,
    },
}

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
///
/// Invariant: `x1 <= x2` and `y1 <= y2`. Degenerate (zero-area) boxes are
/// legal; overlap measures treat them as empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "invalid box ({x1},{y1},{x2},{y2})");
        Self { x1, y1, x2, y2 }
    }

    /// Builds a valid box from arbitrary corner order.
    pub fn from_corners(xa: f64, ya: f64, xb: f64, yb: f64) -> Self {
        Self {
            x1: xa.min(xb),
            y1: ya.min(yb),
            x2: xa.max(xb),
            y2: ya.max(yb),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection area with another box.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Clamps the box to `[0, w] x [0, h]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`, 0 when the union has zero area.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (|C| - |a ∪ b|) / |C|` with `C` the minimal
/// enclosing box. Ranges over `[-1, 1]`.
pub fn generalized_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let hull = BoundingBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    };
    let hull_area = hull.area();
    if hull_area <= 0.0 {
        return iou;
    }
    iou - (hull_area - union) / hull_area
}

/// Componentwise min of `(x1, y1)` and max of `(x2, y2)` over a box list.
pub fn enclosing_box(boxes: &[BoundingBox]) -> Result<BoundingBox, GeometryError> {
    let first = boxes.first().ok_or(GeometryError::EmptyBoxList)?;
    Ok(boxes.iter().skip(1).fold(*first, |acc, b| BoundingBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    }))
}

/// Dense binary mask on a pixel grid, row-major storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    m.data[y * width + x] = 1;
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Row-major bit payload, one byte per pixel (debug serialization).
    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize, GeometryError> {
        self.check_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize, GeometryError> {
        self.check_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 || b != 0)
            .count())
    }

    /// Tight bounding box around set pixels; `None` for an empty mask.
    /// The box spans whole pixels, so a single set pixel at (y, x) yields
    /// `(x, y, x+1, y+1)`.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    any = true;
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
            }
        }
        any.then(|| BoundingBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), GeometryError> {
        if self.height != other.height || self.width != other.width {
            return Err(GeometryError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }
}

/// Uncompressed run-length encoding, COCO convention: column-major run
/// counts, starting with the count of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

/// Encodes a mask into column-major RLE with a leading zero-run count.
pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = (mask.height, mask.width);
    let mut counts = Vec::new();
    let mut current: u8 = 0;
    let mut run: usize = 0;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x) as u8;
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    RleMask {
        size: [h, w],
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, GeometryError> {
    let [h, w] = rle.size;
    let total: usize = rle.counts.iter().sum();
    if total != h * w {
        return Err(GeometryError::RleLengthMismatch {
            got: total,
            height: h,
            width: w,
        });
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut idx = 0usize;
    let mut value = false;
    for &run in &rle.counts {
        if value {
            for k in idx..idx + run {
                let (x, y) = (k / h, k % h);
                mask.set(y, x, true);
            }
        }
        idx += run;
        value = !value;
    }
    Ok(mask)
}

/// `|a ∩ b| / max(area(a), area(b))`; 0 when both masks are empty.
pub fn overlap_ratio(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let denom = a.area().max(b.area());
    if denom == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / denom as f64)
    }
}

/// `|a ∩ b| / |a ∪ b|`; 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let union = a.union_area(b)?;
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Pixelwise OR over a nonempty list of same-sized masks.
pub fn mask_union(masks: &[BinaryMask]) -> Result<BinaryMask, GeometryError> {
    let first = masks.first().ok_or(GeometryError::EmptyMaskList)?;
    let mut out = first.clone();
    for m in &masks[1..] {
        first.check_dims(m)?;
        for (o, &v) in out.data.iter_mut().zip(&m.data) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Morphological erosion with a 3x3 square element. Pixels outside the grid
/// count as unset, so set pixels on the border always erode away.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = BinaryMask::zeros(h, w);
    if h == 0 || w == 0 {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                continue;
            }
            let mut all = true;
            'probe: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                    if !mask.get(ny, nx) {
                        all = false;
                        break 'probe;
                    }
                }
            }
            if all {
                out.set(y, x, true);
            }
        }
    }
    out
}

/// Labels set pixels into maximal 4-connected regions. Returns a grid of
/// labels (0 = background, components numbered from 1) and the component
/// count. Labels are assigned in raster-scan order of each component's first
/// pixel.
pub fn connected_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) || labels[y * w + x] != 0 {
                continue;
            }
            next += 1;
            labels[y * w + x] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && mask.get(ny, nx) && labels[ny * w + nx] == 0 {
                        labels[ny * w + nx] = next;
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn box_iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(5.0, 5.0, 7.0, 7.0)), 0.0);
        // intersection 1, union 7
        let b = bx(1.0, 1.0, 3.0, 3.0);
        assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        // degenerate boxes
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(box_iou(&p, &p), 0.0);
    }

    #[test]
    fn giou_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(generalized_iou(&a, &a), 1.0);
        // IoU 0, union 2, enclosure 3 -> -1/3
        let b = bx(2.0, 0.0, 3.0, 1.0);
        assert!((generalized_iou(&a, &b) + 1.0 / 3.0).abs() < 1e-12);
    }

    /// Rasterization oracle: IoU and GIoU estimated by counting pixels on a
    /// fine grid covering the hull of both boxes.
    fn rasterized_giou(a: &BoundingBox, b: &BoundingBox, res: usize) -> (f64, f64) {
        let x_lo = a.x1.min(b.x1);
        let y_lo = a.y1.min(b.y1);
        let x_hi = a.x2.max(b.x2);
        let y_hi = a.y2.max(b.y2);
        let (mut inter, mut union, mut hull) = (0usize, 0usize, 0usize);
        for iy in 0..res {
            for ix in 0..res {
                let x = x_lo + (x_hi - x_lo) * (ix as f64 + 0.5) / res as f64;
                let y = y_lo + (y_hi - y_lo) * (iy as f64 + 0.5) / res as f64;
                let ina = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
                let inb = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
                hull += 1;
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    union += 1;
                }
            }
        }
        let iou = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
        let giou = iou - (hull - union) as f64 / hull as f64;
        (iou, giou)
    }

    proptest! {
        #[test]
        fn giou_matches_rasterization(
            ax in 0.0f64..20.0, ay in 0.0f64..20.0, aw in 2.0f64..15.0, ah in 2.0f64..15.0,
            bx0 in 0.0f64..20.0, by0 in 0.0f64..20.0, bw in 2.0f64..15.0, bh in 2.0f64..15.0,
        ) {
            let a = bx(ax, ay, ax + aw, ay + ah);
            let b = bx(bx0, by0, bx0 + bw, by0 + bh);
            let (iou_est, giou_est) = rasterized_giou(&a, &b, 512);
            prop_assert!((box_iou(&a, &b) - iou_est).abs() < 0.02);
            prop_assert!((generalized_iou(&a, &b) - giou_est).abs() < 0.02);
        }

        #[test]
        fn rle_round_trip(h in 1usize..24, w in 1usize..24, seed in any::<u64>()) {
            let mut state = seed;
            let m = BinaryMask::from_fn(h, w, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) & 1 == 1
            });
            prop_assert_eq!(rle_decode(&rle_encode(&m)).unwrap(), m);
        }

        #[test]
        fn overlap_ratio_symmetric_and_bounded(
            h in 1usize..16, w in 1usize..16, sa in any::<u64>(), sb in any::<u64>()
        ) {
            let mk = |seed: u64| {
                let mut state = seed;
                BinaryMask::from_fn(h, w, |_, _| {
                    state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                    (state >> 40) & 3 == 0
                })
            };
            let (a, b) = (mk(sa), mk(sb));
            let r_ab = overlap_ratio(&a, &b).unwrap();
            let r_ba = overlap_ratio(&b, &a).unwrap();
            prop_assert_eq!(r_ab, r_ba);
            let (aa, ab) = (a.area(), b.area());
            if aa.max(ab) > 0 {
                prop_assert!(r_ab <= aa.min(ab) as f64 / aa.max(ab) as f64 + 1e-12);
            } else {
                prop_assert_eq!(r_ab, 0.0);
            }
        }

        #[test]
        fn erode_is_subset_and_matches_naive(h in 1usize..16, w in 1usize..16, seed in any::<u64>()) {
            let mut state = seed;
            let m = BinaryMask::from_fn(h, w, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 35) & 1 == 1
            });
            let e = erode(&m);
            for y in 0..h {
                for x in 0..w {
                    // naive scan with zero padding
                    let mut all = true;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            let inside = ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w;
                            if !(inside && m.get(ny as usize, nx as usize)) {
                                all = false;
                            }
                        }
                    }
                    prop_assert_eq!(e.get(y, x), all);
                    if e.get(y, x) {
                        prop_assert!(m.get(y, x));
                    }
                }
            }
        }

        #[test]
        fn union_matches_pixel_count(h in 1usize..16, w in 1usize..16, seeds in prop::collection::vec(any::<u64>(), 1..5)) {
            let masks: Vec<BinaryMask> = seeds
                .iter()
                .map(|&s| {
                    let mut state = s;
                    BinaryMask::from_fn(h, w, |_, _| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(7);
                        (state >> 37) & 3 == 0
                    })
                })
                .collect();
            let u = mask_union(&masks).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let any_set = masks.iter().any(|m| m.get(y, x));
                    prop_assert_eq!(u.get(y, x), any_set);
                }
            }
        }

        #[test]
        fn enclosing_box_contains_all_and_is_minimal(
            boxes in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.5f64..20.0, 0.5f64..20.0), 1..8)
        ) {
            let boxes: Vec<BoundingBox> =
                boxes.into_iter().map(|(x, y, w, h)| bx(x, y, x + w, y + h)).collect();
            let hull = enclosing_box(&boxes).unwrap();
            for b in &boxes {
                prop_assert!(hull.contains_box(b));
            }
            let eps = 1e-9;
            let shrunk = [
                BoundingBox { x1: hull.x1 + eps, ..hull },
                BoundingBox { y1: hull.y1 + eps, ..hull },
                BoundingBox { x2: hull.x2 - eps, ..hull },
                BoundingBox { y2: hull.y2 - eps, ..hull },
            ];
            for s in shrunk {
                prop_assert!(boxes.iter().any(|b| !s.contains_box(b)));
            }
        }

        #[test]
        fn components_match_flood_fill(h in 1usize..14, w in 1usize..14, seed in any::<u64>()) {
            let mut state = seed;
            let m = BinaryMask::from_fn(h, w, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(11);
                (state >> 36) & 1 == 1
            });
            let (labels, n) = connected_components(&m);
            // BFS oracle
            let mut seen = vec![false; h * w];
            let mut oracle_n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x) && !seen[y * w + x] {
                        oracle_n += 1;
                        let mut queue = std::collections::VecDeque::from([(y, x)]);
                        seen[y * w + x] = true;
                        let this_label = labels[y * w + x];
                        while let Some((cy, cx)) = queue.pop_front() {
                            prop_assert_eq!(labels[cy * w + cx], this_label);
                            for (ny, nx) in [
                                (cy.wrapping_sub(1), cx),
                                (cy + 1, cx),
                                (cy, cx.wrapping_sub(1)),
                                (cy, cx + 1),
                            ] {
                                if ny < h && nx < w && m.get(ny, nx) && !seen[ny * w + nx] {
                                    seen[ny * w + nx] = true;
                                    queue.push_back((ny, nx));
                                }
                            }
                        }
                    }
                }
            }
            prop_assert_eq!(n, oracle_n);
            // labels partition set pixels
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(labels[y * w + x] != 0, m.get(y, x));
                }
            }
        }
    }

    #[test]
    fn overlap_ratio_cases() {
        let a = BinaryMask::from_fn(10, 10, |y, x| y < 4 && x < 5); // area 20
        let b = BinaryMask::from_fn(10, 10, |y, x| y < 2 && x < 5); // area 10, inside a
        assert_eq!(overlap_ratio(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&a, &b).unwrap(), 0.5);
        let c = BinaryMask::from_fn(10, 10, |y, _| y >= 8);
        assert_eq!(overlap_ratio(&a, &c).unwrap(), 0.0);
        let z = BinaryMask::zeros(10, 10);
        assert_eq!(overlap_ratio(&z, &z).unwrap(), 0.0);
        assert!(overlap_ratio(&a, &BinaryMask::zeros(3, 3)).is_err());
    }

    #[test]
    fn union_trivial_cases() {
        let a = BinaryMask::from_fn(6, 6, |y, x| y < 1 && x < 5); // area 5
        let b = BinaryMask::from_fn(6, 6, |y, x| y >= 4 && x < 4); // area 8? no: 2 rows * 4 = 8
        assert_eq!(mask_union(&[a.clone()]).unwrap(), a);
        let u = mask_union(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(u.area(), a.area() + b.area());
        assert!(mask_union(&[]).is_err());
    }

    #[test]
    fn erode_solid_square() {
        let m = BinaryMask::from_fn(7, 7, |y, x| (1..6).contains(&y) && (1..6).contains(&x));
        let e = erode(&m);
        assert_eq!(e.area(), 9);
        for y in 2..5 {
            for x in 2..5 {
                assert!(e.get(y, x));
            }
        }
        assert!(erode(&BinaryMask::zeros(5, 5)).is_empty());
    }

    #[test]
    fn components_trivial() {
        let m = BinaryMask::from_fn(8, 8, |y, x| (y < 3 && x < 3) || (y >= 5 && x >= 5));
        let (_, n) = connected_components(&m);
        assert_eq!(n, 2);
        let (_, zero) = connected_components(&BinaryMask::zeros(4, 4));
        assert_eq!(zero, 0);
    }

    #[test]
    fn enclosing_box_trivial() {
        let boxes = [bx(0.0, 0.0, 2.0, 2.0), bx(4.0, 4.0, 6.0, 6.0)];
        assert_eq!(enclosing_box(&boxes).unwrap(), bx(0.0, 0.0, 6.0, 6.0));
        assert_eq!(enclosing_box(&boxes[..1]).unwrap(), boxes[0]);
    }

    #[test]
    fn rle_is_column_major_with_leading_zero_count() {
        // 2x3 mask, set pixel at (y=0, x=1) only.
        // Column-major order: (0,0) (1,0) (0,1) (1,1) (0,2) (1,2)
        //                      0     0     1     0     0     0
        let mut m = BinaryMask::zeros(2, 3);
        m.set(0, 1, true);
        let rle = rle_encode(&m);
        assert_eq!(rle.size, [2, 3]);
        assert_eq!(rle.counts, vec![2, 1, 3]);
        // leading count is zero when the first pixel is set
        let mut m2 = BinaryMask::zeros(2, 2);
        m2.set(0, 0, true);
        assert_eq!(rle_encode(&m2).counts, vec![0, 1, 3]);
    }

    #[test]
    fn box_and_mask_iou_agree_when_rasterized() {
        // boxes rasterized at >= 64x their size
        let a = bx(1.0, 1.0, 3.0, 2.5);
        let b = bx(2.0, 1.5, 4.0, 3.0);
        let scale = 64.0;
        let rast = |bb: &BoundingBox| {
            BinaryMask::from_fn(256, 512, |y, x| {
                let (px, py) = ((x as f64 + 0.5) / scale, (y as f64 + 0.5) / scale);
                px > bb.x1 && px < bb.x2 && py > bb.y1 && py < bb.y2
            })
        };
        let (ma, mb) = (rast(&a), rast(&b));
        let est = mask_iou(&ma, &mb).unwrap();
        assert!((box_iou(&a, &b) - est).abs() < 0.02);
    }
}
