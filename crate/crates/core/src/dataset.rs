//! Hierarchical annotation schema: a COCO-style file format extended with
//! `level`, `parent_object_category_id`, `parent_annotation_id`, and `split`
//! keys. See `docs/format.md` for the field-by-field description.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rle_decode, rle_encode, BinaryMask, BoundingBox, RleMask};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed dataset file {path}: {source}")]
    Malformed {
        path: String,
        source: serde_json::Error,
    },
    #[error("cannot write dataset file {path}: {source}")]
    Unwritable {
        path: String,
        source: std::io::Error,
    },
    #[error("validation failed:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("unknown category names in novel set: {}", .0.join(", "))]
    UnknownNovelNames(Vec<String>),
    #[error("invalid RLE payload in annotation {ann_id}: {source}")]
    BadRle {
        ann_id: u64,
        source: crate::geometry::GeometryError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Object,
    Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
    pub level: Level,
    /// Required iff `level == Part`: the object category this part belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_object_category_id: Option<u64>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Base
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// COCO convention in files: `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<RleMask>,
    pub level: Level,
    /// Object instance this part belongs to; absent when no parent is
    /// recoverable (legal for converted datasets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_annotation_id: Option<u64>,
}

impl AnnotationRecord {
    pub fn bounding_box(&self) -> BoundingBox {
        let [x, y, w, h] = self.bbox;
        BoundingBox::new(x, y, x + w, y + h)
    }

    pub fn set_bounding_box(&mut self, b: BoundingBox) {
        self.bbox = [b.x1, b.y1, b.width(), b.height()];
    }

    pub fn mask(&self) -> Option<Result<BinaryMask, DatasetError>> {
        self.segmentation.as_ref().map(|rle| {
            rle_decode(rle).map_err(|source| DatasetError::BadRle {
                ann_id: self.id,
                source,
            })
        })
    }

    pub fn set_mask(&mut self, m: &BinaryMask) {
        self.segmentation = Some(rle_encode(m));
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HierarchicalDataset {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<CategoryRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

impl HierarchicalDataset {
    pub fn category(&self, id: u64) -> Option<&CategoryRecord> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotation(&self, id: u64) -> Option<&AnnotationRecord> {
        self.annotations.iter().find(|a| a.id == id)
    }

    pub fn annotations_for_image(&self, image_id: u64) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations
            .iter()
            .filter(move |a| a.image_id == image_id)
    }

    pub fn object_categories(&self) -> impl Iterator<Item = &CategoryRecord> {
        self.categories.iter().filter(|c| c.level == Level::Object)
    }

    pub fn part_categories(&self) -> impl Iterator<Item = &CategoryRecord> {
        self.categories.iter().filter(|c| c.level == Level::Part)
    }

    /// Checks every schema invariant, reporting all violations with the ids
    /// of the offending records.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut problems = Vec::new();

        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if !cat_ids.insert(c.id) {
                problems.push(format!("duplicate category id {}", c.id));
            }
        }
        let mut image_ids = HashSet::new();
        for im in &self.images {
            if !image_ids.insert(im.id) {
                problems.push(format!("duplicate image id {}", im.id));
            }
        }
        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                problems.push(format!("duplicate annotation id {}", a.id));
            }
        }

        let cat_by_id: HashMap<u64, &CategoryRecord> =
            self.categories.iter().map(|c| (c.id, c)).collect();
        let img_by_id: HashMap<u64, &ImageRecord> = self.images.iter().map(|i| (i.id, i)).collect();
        let ann_by_id: HashMap<u64, &AnnotationRecord> =
            self.annotations.iter().map(|a| (a.id, a)).collect();

        for c in &self.categories {
            match (c.level, c.parent_object_category_id) {
                (Level::Part, None) => problems.push(format!(
                    "part category {} ({:?}) lacks parent_object_category_id",
                    c.id, c.name
                )),
                (Level::Part, Some(pid)) => match cat_by_id.get(&pid) {
                    None => problems.push(format!(
                        "part category {} references missing object category {}",
                        c.id, pid
                    )),
                    Some(parent) if parent.level != Level::Object => problems.push(format!(
                        "part category {} references category {} which is not object-level",
                        c.id, pid
                    )),
                    _ => {}
                },
                (Level::Object, Some(_)) => problems.push(format!(
                    "object category {} must not carry parent_object_category_id",
                    c.id
                )),
                (Level::Object, None) => {}
            }
        }

        for a in &self.annotations {
            let img = match img_by_id.get(&a.image_id) {
                Some(img) => Some(*img),
                None => {
                    problems.push(format!(
                        "annotation {} references missing image {}",
                        a.id, a.image_id
                    ));
                    None
                }
            };
            match cat_by_id.get(&a.category_id) {
                None => problems.push(format!(
                    "annotation {} references missing category {}",
                    a.id, a.category_id
                )),
                Some(cat) if cat.level != a.level => problems.push(format!(
                    "annotation {} has level {:?} but category {} is {:?}",
                    a.id, a.level, cat.id, cat.level
                )),
                _ => {}
            }
            if let Some(pid) = a.parent_annotation_id {
                if a.level != Level::Part {
                    problems.push(format!(
                        "object annotation {} must not carry parent_annotation_id",
                        a.id
                    ));
                } else {
                    match ann_by_id.get(&pid) {
                        None => problems.push(format!(
                            "annotation {} references missing parent annotation {}",
                            a.id, pid
                        )),
                        Some(parent) => {
                            if parent.level != Level::Object {
                                problems.push(format!(
                                    "annotation {} parent {} is not object-level",
                                    a.id, pid
                                ));
                            }
                            if parent.image_id != a.image_id {
                                problems.push(format!(
                                    "annotation {} parent {} lies on a different image",
                                    a.id, pid
                                ));
                            }
                        }
                    }
                }
            }
            let [x, y, w, h] = a.bbox;
            if w < 0.0 || h < 0.0 {
                problems.push(format!("annotation {} has negative box extent", a.id));
            }
            if let Some(img) = img {
                let b = a.bounding_box().clamp_to(img.width as f64, img.height as f64);
                let orig = a.bounding_box();
                if (b.x1 - orig.x1).abs() > 1e-9
                    || (b.y1 - orig.y1).abs() > 1e-9
                    || (b.x2 - orig.x2).abs() > 1e-9
                    || (b.y2 - orig.y2).abs() > 1e-9
                {
                    problems.push(format!(
                        "annotation {} box ({x},{y},{w},{h}) exceeds image {} bounds",
                        a.id, img.id
                    ));
                }
                if let Some(rle) = &a.segmentation {
                    if rle.size != [img.height as usize, img.width as usize] {
                        problems.push(format!(
                            "annotation {} mask size {:?} does not match image {}x{}",
                            a.id, rle.size, img.height, img.width
                        ));
                    }
                }
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Invalid(problems))
        }
    }
}

/// Loads and fully validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<HierarchicalDataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ds: HierarchicalDataset =
        serde_json::from_str(&text).map_err(|source| DatasetError::Malformed {
            path: path.display().to_string(),
            source,
        })?;
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset as pretty-printed JSON readable by [`load_dataset`].
pub fn save_dataset(ds: &HierarchicalDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(ds).expect("dataset serialization cannot fail");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|source| DatasetError::Unwritable {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    std::fs::write(path, text).map_err(|source| DatasetError::Unwritable {
        path: path.display().to_string(),
        source,
    })
}

/// Train/eval views of a base/novel category split. Both views share image
/// lists with the source dataset; the train view drops annotations of novel
/// categories, while the eval view keeps everything and marks splits.
#[derive(Debug, Clone)]
pub struct SplitViews {
    pub train: HierarchicalDataset,
    pub eval: HierarchicalDataset,
}

/// Splits by category name: names in `novel_names` are marked novel, their
/// annotations are dropped from the train view.
pub fn split_base_novel(
    ds: &HierarchicalDataset,
    novel_names: &HashSet<String>,
) -> Result<SplitViews, DatasetError> {
    let known: HashSet<&str> = ds.categories.iter().map(|c| c.name.as_str()).collect();
    let mut unknown: Vec<String> = novel_names
        .iter()
        .filter(|n| !known.contains(n.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(DatasetError::UnknownNovelNames(unknown));
    }

    let mark = |c: &CategoryRecord| CategoryRecord {
        split: if novel_names.contains(&c.name) {
            Split::Novel
        } else {
            Split::Base
        },
        ..c.clone()
    };
    let categories: Vec<CategoryRecord> = ds.categories.iter().map(mark).collect();
    let novel_ids: HashSet<u64> = categories
        .iter()
        .filter(|c| c.split == Split::Novel)
        .map(|c| c.id)
        .collect();

    // Dropping an object annotation orphans its parts' parent links, so the
    // train view also clears links pointing at dropped annotations.
    let dropped: HashSet<u64> = ds
        .annotations
        .iter()
        .filter(|a| novel_ids.contains(&a.category_id))
        .map(|a| a.id)
        .collect();
    let train_annotations: Vec<AnnotationRecord> = ds
        .annotations
        .iter()
        .filter(|a| !novel_ids.contains(&a.category_id))
        .map(|a| {
            let mut a = a.clone();
            if let Some(pid) = a.parent_annotation_id {
                if dropped.contains(&pid) {
                    a.parent_annotation_id = None;
                }
            }
            a
        })
        .collect();

    Ok(SplitViews {
        train: HierarchicalDataset {
            images: ds.images.clone(),
            categories: categories.clone(),
            annotations: train_annotations,
        },
        eval: HierarchicalDataset {
            images: ds.images.clone(),
            categories,
            annotations: ds.annotations.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_dataset() -> HierarchicalDataset {
        HierarchicalDataset {
            images: vec![ImageRecord {
                id: 1,
                width: 64,
                height: 48,
                file_name: "im1.png".into(),
            }],
            categories: vec![
                CategoryRecord {
                    id: 1,
                    name: "creature".into(),
                    level: Level::Object,
                    parent_object_category_id: None,
                    split: Split::Base,
                },
                CategoryRecord {
                    id: 2,
                    name: "creature:head".into(),
                    level: Level::Part,
                    parent_object_category_id: Some(1),
                    split: Split::Base,
                },
            ],
            annotations: vec![
                AnnotationRecord {
                    id: 10,
                    image_id: 1,
                    category_id: 1,
                    bbox: [2.0, 2.0, 30.0, 20.0],
                    segmentation: None,
                    level: Level::Object,
                    parent_annotation_id: None,
                },
                AnnotationRecord {
                    id: 11,
                    image_id: 1,
                    category_id: 2,
                    bbox: [4.0, 4.0, 10.0, 8.0],
                    segmentation: None,
                    level: Level::Part,
                    parent_annotation_id: Some(10),
                },
            ],
        }
    }

    #[test]
    fn minimal_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = tiny_dataset();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.images.len(), 1);
        assert_eq!(loaded.categories.len(), 2);
        assert_eq!(loaded.annotations.len(), 2);
        // save(load(x)) is byte-identical
        let path2 = dir.path().join("ds2.json");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn part_category_without_parent_is_rejected() {
        let mut ds = tiny_dataset();
        ds.categories[1].parent_object_category_id = None;
        let err = ds.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("part category 2"), "{msg}");
    }

    #[test]
    fn dangling_references_are_reported_with_ids() {
        let mut ds = tiny_dataset();
        ds.annotations[1].image_id = 99;
        ds.annotations[1].parent_annotation_id = Some(77);
        let msg = ds.validate().unwrap_err().to_string();
        assert!(msg.contains("missing image 99"), "{msg}");
        assert!(msg.contains("missing parent annotation 77"), "{msg}");
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let mut ds = tiny_dataset();
        ds.annotations[0].bbox = [50.0, 2.0, 30.0, 10.0]; // x2 = 80 > width 64
        assert!(ds.validate().is_err());
    }

    #[test]
    fn level_mismatch_is_rejected() {
        let mut ds = tiny_dataset();
        ds.annotations[1].level = Level::Object;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn masks_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let mut ds = tiny_dataset();
        let m = BinaryMask::from_fn(48, 64, |y, x| (y + x) % 3 == 0 && y < 24);
        ds.annotations[0].set_mask(&m);
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.annotations[0].mask().unwrap().unwrap(), m);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        save_dataset(&HierarchicalDataset::default(), &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.images.is_empty() && loaded.annotations.is_empty());
    }

    #[test]
    fn split_empty_novel_set_is_identity() {
        let ds = tiny_dataset();
        let views = split_base_novel(&ds, &HashSet::new()).unwrap();
        assert_eq!(views.train.annotations.len(), ds.annotations.len());
        assert!(views
            .train
            .categories
            .iter()
            .all(|c| c.split == Split::Base));
    }

    #[test]
    fn split_all_parts_novel_leaves_objects_only() {
        let ds = tiny_dataset();
        let novel: HashSet<String> = ["creature:head".to_string()].into();
        let views = split_base_novel(&ds, &novel).unwrap();
        assert!(views
            .train
            .annotations
            .iter()
            .all(|a| a.level == Level::Object));
        assert_eq!(views.eval.annotations.len(), ds.annotations.len());
    }

    #[test]
    fn split_counts_and_immutability() {
        // toy Pascal-Part-style split: one template's parts novel
        let mut ds = tiny_dataset();
        ds.categories.push(CategoryRecord {
            id: 3,
            name: "creature:tail".into(),
            level: Level::Part,
            parent_object_category_id: Some(1),
            split: Split::Base,
        });
        ds.annotations.push(AnnotationRecord {
            id: 12,
            image_id: 1,
            category_id: 3,
            bbox: [20.0, 10.0, 6.0, 6.0],
            segmentation: None,
            level: Level::Part,
            parent_annotation_id: Some(10),
        });
        let before = serde_json::to_string(&ds).unwrap();
        let novel: HashSet<String> = ["creature:tail".to_string()].into();
        let views = split_base_novel(&ds, &novel).unwrap();
        let total_parts = ds
            .annotations
            .iter()
            .filter(|a| a.level == Level::Part)
            .count();
        let kept_parts = views
            .train
            .annotations
            .iter()
            .filter(|a| a.level == Level::Part)
            .count();
        assert_eq!(kept_parts, total_parts - 1);
        // input untouched
        assert_eq!(serde_json::to_string(&ds).unwrap(), before);

        let unknown: HashSet<String> = ["no-such-category".to_string()].into();
        let err = split_base_novel(&ds, &unknown).unwrap_err();
        assert!(err.to_string().contains("no-such-category"));
    }

    #[test]
    fn validation_is_idempotent_after_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = tiny_dataset();
        ds.validate().unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        loaded.validate().unwrap();
    }
}
