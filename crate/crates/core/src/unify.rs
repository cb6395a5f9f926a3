//! Procedures that manufacture two-level hierarchical annotations from
//! part-only, object-only, or class-agnostic sources.

use std::collections::HashMap;

use thiserror::Error;

use crate::dataset::{AnnotationRecord, Level};
use crate::geometry::{
    connected_components, enclosing_box, erode, mask_union, overlap_ratio, BinaryMask, BoundingBox,
    GeometryError,
};

#[derive(Debug, Error)]
pub enum UnifyError {
    #[error("empty part list")]
    EmptyPartList,
    #[error("parts span multiple images: {0} and {1}")]
    MixedImages(u64, u64),
    #[error("annotation {0} is not part-level")]
    NotPartLevel(u64),
    #[error("category map lacks an entry for part category {0}")]
    UnmappedPartCategory(u64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Overlap-ratio threshold for hierarchy inference; must lie strictly
/// inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchyThreshold(f64);

impl HierarchyThreshold {
    pub fn new(t: f64) -> Option<Self> {
        (t > 0.0 && t < 1.0).then_some(Self(t))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for HierarchyThreshold {
    fn default() -> Self {
        Self(0.5)
    }
}

/// Merges one object instance's parts into a synthetic object annotation:
/// the box is the enclosing box of the part boxes, the mask the union of
/// the part masks (when all parts carry masks). The inputs are returned
/// with their `parent_annotation_id` pointing at the new object.
pub fn merge_parts_to_object(
    parts: &[AnnotationRecord],
    new_object_id: u64,
    object_category_id: u64,
) -> Result<(AnnotationRecord, Vec<AnnotationRecord>), UnifyError> {
    if parts.is_empty() {
        return Err(UnifyError::EmptyPartList);
    }
    let image_id = parts[0].image_id;
    for p in parts {
        if p.level != Level::Part {
            return Err(UnifyError::NotPartLevel(p.id));
        }
        if p.image_id != image_id {
            return Err(UnifyError::MixedImages(image_id, p.image_id));
        }
    }

    let boxes: Vec<BoundingBox> = parts.iter().map(|p| p.bounding_box()).collect();
    let object_box = enclosing_box(&boxes)?;

    let masks: Option<Vec<BinaryMask>> = parts
        .iter()
        .map(|p| p.mask().and_then(|r| r.ok()))
        .collect();
    let object_mask = match masks {
        Some(ms) if ms.len() == parts.len() => Some(mask_union(&ms)?),
        _ => None,
    };

    let mut object = AnnotationRecord {
        id: new_object_id,
        image_id,
        category_id: object_category_id,
        bbox: [0.0; 4],
        segmentation: None,
        level: Level::Object,
        parent_annotation_id: None,
    };
    object.set_bounding_box(object_box);
    if let Some(m) = &object_mask {
        object.set_mask(m);
    }

    let linked = parts
        .iter()
        .map(|p| AnnotationRecord {
            parent_annotation_id: Some(new_object_id),
            ..p.clone()
        })
        .collect();
    Ok((object, linked))
}

/// Attaches existing object annotations to part annotations: each part gets
/// the parent of its mapped object category with the highest overlap ratio
/// (mask against mask when both carry masks, box rasterized overlap
/// otherwise). Parts whose best overlap is zero stay unattached.
///
/// `category_map` maps part category id to the object category id its parts
/// may attach to.
pub fn attach_object_annotations(
    parts: &[AnnotationRecord],
    objects: &[AnnotationRecord],
    category_map: &HashMap<u64, u64>,
) -> Result<Vec<AnnotationRecord>, UnifyError> {
    let mut out = Vec::with_capacity(parts.len());
    for part in parts {
        let &object_cat = category_map
            .get(&part.category_id)
            .ok_or(UnifyError::UnmappedPartCategory(part.category_id))?;
        let part_mask = part.mask().and_then(|r| r.ok());

        let mut best: Option<(f64, f64, u64)> = None; // (ratio, object area, id)
        for obj in objects {
            if obj.image_id != part.image_id
                || obj.level != Level::Object
                || obj.category_id != object_cat
            {
                continue;
            }
            let obj_mask = obj.mask().and_then(|r| r.ok());
            let ratio = match (&part_mask, &obj_mask) {
                (Some(pm), Some(om)) => overlap_ratio(pm, om)?,
                _ => {
                    // box fallback: intersection over the larger box area
                    let (pb, ob) = (part.bounding_box(), obj.bounding_box());
                    let denom = pb.area().max(ob.area());
                    if denom <= 0.0 {
                        0.0
                    } else {
                        pb.intersection_area(&ob) / denom
                    }
                }
            };
            let area = obj.bounding_box().area();
            let better = match best {
                None => ratio > 0.0,
                Some((br, ba, bid)) => {
                    ratio > br
                        || (ratio == br && area > ba)
                        || (ratio == br && area == ba && obj.id < bid)
                }
            };
            if better && ratio > 0.0 {
                best = Some((ratio, area, obj.id));
            }
        }

        out.push(AnnotationRecord {
            parent_annotation_id: best.map(|(_, _, id)| id),
            ..part.clone()
        });
    }
    Ok(out)
}

/// One mask of a class-agnostic set, labeled by inferred hierarchy level.
#[derive(Debug, Clone)]
pub struct HierarchyLabel {
    /// Index into the input mask list.
    pub mask_index: usize,
    pub level: Level,
    /// Index of the parent mask for part-level entries.
    pub parent_index: Option<usize>,
}

/// Infers a two-level hierarchy over class-agnostic masks of one image.
///
/// For every pair whose overlap ratio strictly exceeds `t`, the larger-area
/// mask is object-level and the smaller part-level with the larger as
/// parent. A part's parent is the qualifying larger mask of greatest ratio
/// (ties broken by larger area, then lower index). Masks in no qualifying
/// pair stay object-level.
pub fn build_overlap_hierarchy(
    masks: &[BinaryMask],
    t: HierarchyThreshold,
) -> Result<Vec<HierarchyLabel>, UnifyError> {
    let areas: Vec<usize> = masks.iter().map(|m| m.area()).collect();
    let mut labels: Vec<HierarchyLabel> = (0..masks.len())
        .map(|i| HierarchyLabel {
            mask_index: i,
            level: Level::Object,
            parent_index: None,
        })
        .collect();

    for i in 0..masks.len() {
        // candidate parents: strictly-qualifying masks that do not lose the
        // area comparison against i
        let mut best: Option<(f64, usize, usize)> = None; // (ratio, area, index)
        for j in 0..masks.len() {
            if i == j {
                continue;
            }
            let r = overlap_ratio(&masks[i], &masks[j])?;
            if r <= t.value() {
                continue;
            }
            // the larger mask is the object; on equal areas the pair's lower
            // index acts as the larger one
            let j_is_larger = areas[j] > areas[i] || (areas[j] == areas[i] && j < i);
            if !j_is_larger {
                continue;
            }
            let better = match best {
                None => true,
                Some((br, ba, bj)) => {
                    r > br || (r == br && areas[j] > ba) || (r == br && areas[j] == ba && j < bj)
                }
            };
            if better {
                best = Some((r, areas[j], j));
            }
        }
        if let Some((_, _, j)) = best {
            labels[i].level = Level::Part;
            labels[i].parent_index = Some(j);
        }
    }

    // A mask can be both someone's parent and someone else's part under
    // chained containment; the output stays two-level, so anything that
    // parents a part is forced object-level.
    let parents: Vec<usize> = labels.iter().filter_map(|l| l.parent_index).collect();
    for p in parents {
        if labels[p].level == Level::Part {
            // re-target children of p to p's own parent if it qualifies,
            // otherwise promote p back to object
            labels[p].level = Level::Object;
            labels[p].parent_index = None;
        }
    }
    Ok(labels)
}

/// One instance extracted from a semantic label map.
#[derive(Debug, Clone)]
pub struct SemanticInstance {
    pub category: u32,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
}

/// Converts a per-pixel category grid (0 = background) into instances:
/// per category, erode once, split into 4-connected components, then assign
/// every original category pixel to the nearest surviving component center
/// (ties toward the lower component label). A category plane that erodes to
/// nothing falls back to components of the raw plane.
pub fn semantic_to_instances(label_map: &[u32], height: usize, width: usize) -> Vec<SemanticInstance> {
    assert_eq!(label_map.len(), height * width, "label map size mismatch");
    let mut categories: Vec<u32> = label_map.iter().copied().filter(|&c| c != 0).collect();
    categories.sort_unstable();
    categories.dedup();

    let mut out = Vec::new();
    for cat in categories {
        let plane = BinaryMask::from_fn(height, width, |y, x| label_map[y * width + x] == cat);
        let eroded = erode(&plane);
        let seed_plane = if eroded.is_empty() { &plane } else { &eroded };
        let (labels, n) = connected_components(seed_plane);
        if n == 0 {
            continue;
        }

        // component centers: pixel-mean of each seed component
        let mut sums = vec![(0f64, 0f64, 0usize); n];
        for y in 0..height {
            for x in 0..width {
                let l = labels[y * width + x];
                if l != 0 {
                    let s = &mut sums[(l - 1) as usize];
                    s.0 += y as f64;
                    s.1 += x as f64;
                    s.2 += 1;
                }
            }
        }
        let centers: Vec<(f64, f64)> = sums
            .iter()
            .map(|&(sy, sx, c)| (sy / c as f64, sx / c as f64))
            .collect();

        let mut instance_masks = vec![BinaryMask::zeros(height, width); n];
        for y in 0..height {
            for x in 0..width {
                if !plane.get(y, x) {
                    continue;
                }
                // pixels still covered by a seed component keep that label;
                // eroded-away pixels go to the nearest center
                let direct = labels[y * width + x];
                let idx = if direct != 0 {
                    (direct - 1) as usize
                } else {
                    let mut best = 0usize;
                    let mut best_d = f64::INFINITY;
                    for (k, &(cy, cx)) in centers.iter().enumerate() {
                        let d = (cy - y as f64).powi(2) + (cx - x as f64).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = k;
                        }
                    }
                    best
                };
                instance_masks[idx].set(y, x, true);
            }
        }

        for m in instance_masks {
            if let Some(bbox) = m.tight_box() {
                out.push(SemanticInstance {
                    category: cat,
                    mask: m,
                    bbox,
                });
            }
        }
    }
    out
}
