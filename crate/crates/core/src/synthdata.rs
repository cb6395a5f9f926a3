//! Deterministic generator of composed-shape scenes with exact two-level
//! ground truth. Each object template is a named layout of colored part
//! shapes; object annotations are manufactured from the parts by the same
//! merge rules the unification module implements, so the corpus doubles as a
//! verification oracle.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    save_dataset, AnnotationRecord, CategoryRecord, DatasetError, HierarchicalDataset,
    ImageRecord, Level, Split,
};
use crate::geometry::BinaryMask;
use crate::unify::merge_parts_to_object;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("placement failed for template {template:?} after {retries} retries")]
    PlacementFailed { template: String, retries: usize },
    #[error("template {template:?} has overlapping parts {a:?} and {b:?}")]
    OverlappingParts {
        template: String,
        a: String,
        b: String,
    },
    #[error("spec invalid: {0}")]
    BadSpec(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
    Bar,
}

/// One part of a template: a shape in the object-local unit square.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartShape {
    pub name: String,
    pub kind: ShapeKind,
    pub color: [u8; 3],
    /// Center in object-local coordinates (x, y), each in (0, 1).
    pub center: (f64, f64),
    /// Full extent in object-local coordinates (w, h).
    pub size: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub name: String,
    pub parts: Vec<PartShape>,
}

/// Built-in templates: three object categories with 2-3 parts each, every
/// part in its own saturated color over a muted background.
pub fn default_templates() -> Vec<ObjectTemplate> {
    vec![
        ObjectTemplate {
            name: "beacon".into(),
            parts: vec![
                PartShape {
                    name: "lamp".into(),
                    kind: ShapeKind::Disc,
                    color: [220, 40, 40],
                    center: (0.5, 0.13),
                    size: (0.30, 0.22),
                },
                PartShape {
                    name: "pole".into(),
                    kind: ShapeKind::Bar,
                    color: [235, 200, 40],
                    center: (0.5, 0.44),
                    size: (0.18, 0.36),
                },
                PartShape {
                    name: "base".into(),
                    kind: ShapeKind::Rect,
                    color: [40, 70, 200],
                    center: (0.5, 0.80),
                    size: (0.72, 0.28),
                },
            ],
        },
        ObjectTemplate {
            name: "cart".into(),
            parts: vec![
                PartShape {
                    name: "hull".into(),
                    kind: ShapeKind::Rect,
                    color: [40, 170, 60],
                    center: (0.5, 0.33),
                    size: (0.88, 0.46),
                },
                PartShape {
                    name: "wheel".into(),
                    kind: ShapeKind::Disc,
                    color: [200, 40, 180],
                    center: (0.5, 0.80),
                    size: (0.36, 0.32),
                },
            ],
        },
        ObjectTemplate {
            name: "critter".into(),
            parts: vec![
                PartShape {
                    name: "head".into(),
                    kind: ShapeKind::Disc,
                    color: [235, 130, 30],
                    center: (0.20, 0.20),
                    size: (0.34, 0.34),
                },
                PartShape {
                    name: "body".into(),
                    kind: ShapeKind::Rect,
                    color: [30, 190, 200],
                    center: (0.64, 0.60),
                    size: (0.60, 0.48),
                },
                PartShape {
                    name: "tail".into(),
                    kind: ShapeKind::Bar,
                    color: [140, 60, 220],
                    center: (0.15, 0.62),
                    size: (0.26, 0.12),
                },
            ],
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    /// Inclusive range of objects per image.
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object box side range in pixels.
    pub object_size_min: f64,
    pub object_size_max: f64,
    pub seed: u64,
    /// Template excluded from training images but present in validation
    /// images; its part categories are marked novel.
    pub novel_template: Option<String>,
    #[serde(default = "default_templates")]
    pub templates: Vec<ObjectTemplate>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            train_images: 500,
            val_images: 100,
            objects_min: 1,
            objects_max: 3,
            object_size_min: 36.0,
            object_size_max: 64.0,
            seed: 0,
            novel_template: None,
            templates: default_templates(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.templates.is_empty() {
            return Err(SynthError::BadSpec("no templates".into()));
        }
        if self.objects_min > self.objects_max {
            return Err(SynthError::BadSpec("objects_min > objects_max".into()));
        }
        if self.object_size_min < 8.0 || self.object_size_max > self.image_size as f64 {
            return Err(SynthError::BadSpec("object size out of range".into()));
        }
        if let Some(novel) = &self.novel_template {
            if !self.templates.iter().any(|t| &t.name == novel) {
                return Err(SynthError::BadSpec(format!(
                    "novel template {novel:?} not among templates"
                )));
            }
        }
        Ok(())
    }
}

/// Rasterizes one shape into a pixel region. Pixels are set when their
/// center falls inside the shape.
pub fn rasterize_shape(
    kind: ShapeKind,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    grid_h: usize,
    grid_w: usize,
) -> BinaryMask {
    BinaryMask::from_fn(grid_h, grid_w, |py, px| {
        let x = px as f64 + 0.5;
        let y = py as f64 + 0.5;
        match kind {
            ShapeKind::Rect | ShapeKind::Bar => {
                x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
            }
            ShapeKind::Disc => {
                let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
                let (rx, ry) = (w / 2.0, h / 2.0);
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    })
}

/// One placed object instance.
#[derive(Debug, Clone)]
pub struct PlacedObject {
    pub template_index: usize,
    /// Object frame in pixels: (x0, y0, width, height).
    pub frame: (f64, f64, f64, f64),
}

#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub objects: Vec<PlacedObject>,
}

/// Deterministic muted background texture.
fn background_pixel(seed: u64, y: usize, x: usize) -> [u8; 3] {
    let mut state = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((y as u64) << 24)
        .wrapping_add(x as u64);
    state ^= state >> 31;
    state = state.wrapping_mul(0xBF58476D1CE4E5B9);
    state ^= state >> 29;
    let n = (state >> 40) as u8;
    let base = 105u8.saturating_add((y * 20 / 128.min(y + 128)) as u8);
    let v = base.saturating_add(n % 36);
    [v, v.saturating_sub(4), v.saturating_sub(8)]
}

/// Renders a scene: parts in their template colors over the textured
/// background. Returns interleaved RGB plus the exact per-part masks of each
/// object, in object order.
pub fn render_image(
    scene: &Scene,
    templates: &[ObjectTemplate],
    size: usize,
    bg_seed: u64,
) -> (Vec<u8>, Vec<Vec<BinaryMask>>) {
    let mut rgb = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let c = background_pixel(bg_seed, y, x);
            rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    let mut masks = Vec::with_capacity(scene.objects.len());
    for obj in &scene.objects {
        let template = &templates[obj.template_index];
        let (fx, fy, fw, fh) = obj.frame;
        let mut part_masks = Vec::with_capacity(template.parts.len());
        for part in &template.parts {
            let w = part.size.0 * fw;
            let h = part.size.1 * fh;
            let x0 = fx + part.center.0 * fw - w / 2.0;
            let y0 = fy + part.center.1 * fh - h / 2.0;
            let mask = rasterize_shape(part.kind, x0, y0, w, h, size, size);
            for y in 0..size {
                for x in 0..size {
                    if mask.get(y, x) {
                        rgb[(y * size + x) * 3..(y * size + x) * 3 + 3]
                            .copy_from_slice(&part.color);
                    }
                }
            }
            part_masks.push(mask);
        }
        masks.push(part_masks);
    }
    (rgb, masks)
}

/// Category table: one object category per template, one part category per
/// template part named `template:part`. Ids are stable across runs.
pub fn build_categories(spec: &SynthSpec) -> Vec<CategoryRecord> {
    let mut categories = Vec::new();
    let mut next_id = 1u64;
    for template in &spec.templates {
        let is_novel = spec.novel_template.as_deref() == Some(template.name.as_str());
        let object_id = next_id;
        next_id += 1;
        categories.push(CategoryRecord {
            id: object_id,
            name: template.name.clone(),
            level: Level::Object,
            parent_object_category_id: None,
            split: Split::Base,
        });
        for part in &template.parts {
            categories.push(CategoryRecord {
                id: next_id,
                name: format!("{}:{}", template.name, part.name),
                level: Level::Part,
                parent_object_category_id: Some(object_id),
                split: if is_novel { Split::Novel } else { Split::Base },
            });
            next_id += 1;
        }
    }
    categories
}

struct CategoryIds {
    object_of_template: Vec<u64>,
    part_of_template_part: Vec<Vec<u64>>,
}

fn category_ids(spec: &SynthSpec, categories: &[CategoryRecord]) -> CategoryIds {
    let mut object_of_template = Vec::new();
    let mut part_of_template_part = Vec::new();
    for template in &spec.templates {
        let oid = categories
            .iter()
            .find(|c| c.name == template.name)
            .unwrap()
            .id;
        object_of_template.push(oid);
        part_of_template_part.push(
            template
                .parts
                .iter()
                .map(|p| {
                    categories
                        .iter()
                        .find(|c| c.name == format!("{}:{}", template.name, p.name))
                        .unwrap()
                        .id
                })
                .collect(),
        );
    }
    CategoryIds {
        object_of_template,
        part_of_template_part,
    }
}

fn place_scene(
    spec: &SynthSpec,
    templates_allowed: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Scene, SynthError> {
    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    let size = spec.image_size as f64;
    let mut objects: Vec<PlacedObject> = Vec::new();
    for _ in 0..count {
        let template_index = templates_allowed[rng.gen_range(0..templates_allowed.len())];
        let mut placed = false;
        let retries = 60;
        for _ in 0..retries {
            let side = rng.gen_range(spec.object_size_min..=spec.object_size_max);
            let aspect = rng.gen_range(0.85..1.18);
            let fw = (side * aspect).min(size - 4.0);
            let fh = (side / aspect).min(size - 4.0);
            let fx = rng.gen_range(2.0..size - fw - 2.0);
            let fy = rng.gen_range(2.0..size - fh - 2.0);
            let overlaps = objects.iter().any(|o| {
                let (ox, oy, ow, oh) = o.frame;
                fx < ox + ow + 3.0 && ox < fx + fw + 3.0 && fy < oy + oh + 3.0 && oy < fy + fh + 3.0
            });
            if !overlaps {
                objects.push(PlacedObject {
                    template_index,
                    frame: (fx, fy, fw, fh),
                });
                placed = true;
                break;
            }
        }
        // crowded scenes fall back to fewer objects, but never below the
        // configured minimum
        if !placed && objects.len() < spec.objects_min {
            return Err(SynthError::PlacementFailed {
                template: spec.templates[template_index].name.clone(),
                retries,
            });
        }
    }
    Ok(Scene { objects })
}

/// Files and in-memory records of one generated corpus.
pub struct GeneratedCorpus {
    pub train: HierarchicalDataset,
    pub val: HierarchicalDataset,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
}

/// Generates the full corpus under `out_dir`: `train.json`, `val.json`, and
/// an `images/` directory of PNG files. Identical specs produce identical
/// files. Per-image RNG streams are partitioned by image index, so the
/// corpus does not depend on generation order.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus, SynthError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| SynthError::Io {
        path: images_dir.display().to_string(),
        source,
    })?;

    let categories = build_categories(spec);
    let ids = category_ids(spec, &categories);

    let train_templates: Vec<usize> = (0..spec.templates.len())
        .filter(|&i| spec.novel_template.as_deref() != Some(spec.templates[i].name.as_str()))
        .collect();
    let all_templates: Vec<usize> = (0..spec.templates.len()).collect();
    if train_templates.is_empty() {
        return Err(SynthError::BadSpec(
            "novel template leaves no training templates".into(),
        ));
    }

    let mut make_split = |prefix: &str,
                          count: usize,
                          allowed: &[usize],
                          stream_base: u64|
     -> Result<HierarchicalDataset, SynthError> {
        let mut ds = HierarchicalDataset {
            images: Vec::new(),
            categories: categories.clone(),
            annotations: Vec::new(),
        };
        let mut next_ann_id = 1u64;
        for index in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream_base + index as u64);
            let scene = place_scene(spec, allowed, &mut rng)?;
            let bg_seed = rng.gen::<u64>();
            let (rgb, part_masks) = render_image(&scene, &spec.templates, spec.image_size, bg_seed);

            let image_id = index as u64 + 1;
            let file_name = format!("images/{prefix}_{index:05}.png");
            let file_path = out_dir.join(&file_name);
            let img = image::RgbImage::from_raw(
                spec.image_size as u32,
                spec.image_size as u32,
                rgb,
            )
            .expect("buffer size");
            img.save(&file_path).map_err(|e| SynthError::Io {
                path: file_path.display().to_string(),
                source: std::io::Error::other(e),
            })?;
            ds.images.push(ImageRecord {
                id: image_id,
                width: spec.image_size as u32,
                height: spec.image_size as u32,
                file_name,
            });

            for (obj, masks) in scene.objects.iter().zip(&part_masks) {
                let template = &spec.templates[obj.template_index];
                // parts first, then the object manufactured from them
                let mut parts = Vec::with_capacity(template.parts.len());
                for (pi, mask) in masks.iter().enumerate() {
                    for (pj, other) in masks.iter().enumerate().skip(pi + 1) {
                        if mask.intersection_area(other).unwrap() > 0 {
                            return Err(SynthError::OverlappingParts {
                                template: template.name.clone(),
                                a: template.parts[pi].name.clone(),
                                b: template.parts[pj].name.clone(),
                            });
                        }
                    }
                    let bbox = mask
                        .tight_box()
                        .expect("placed parts rasterize to nonempty masks");
                    let mut ann = AnnotationRecord {
                        id: next_ann_id,
                        image_id,
                        category_id: ids.part_of_template_part[obj.template_index][pi],
                        bbox: [0.0; 4],
                        segmentation: None,
                        level: Level::Part,
                        parent_annotation_id: None,
                    };
                    next_ann_id += 1;
                    ann.set_bounding_box(bbox);
                    ann.set_mask(mask);
                    parts.push(ann);
                }
                let object_id = next_ann_id;
                next_ann_id += 1;
                let (object_ann, linked_parts) = merge_parts_to_object(
                    &parts,
                    object_id,
                    ids.object_of_template[obj.template_index],
                )
                .expect("nonempty same-image parts");
                ds.annotations.push(object_ann);
                ds.annotations.extend(linked_parts);
            }
        }
        ds.validate()?;
        Ok(ds)
    };

    let train = make_split("train", spec.train_images, &train_templates, 1)?;
    let val = make_split("val", spec.val_images, &all_templates, 1_000_000)?;

    let train_path = out_dir.join("train.json");
    let val_path = out_dir.join("val.json");
    save_dataset(&train, &train_path)?;
    save_dataset(&val, &val_path)?;
    Ok(GeneratedCorpus {
        train,
        val,
        train_path,
        val_path,
    })
}

/// Loads one dataset image as a CHW float tensor in [0, 1].
pub fn load_image_tensor(
    root: impl AsRef<Path>,
    file_name: &str,
) -> Result<Array3<f32>, SynthError> {
    let path = root.as_ref().join(file_name);
    let img = image::open(&path)
        .map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(crate::model::image_to_tensor(img.as_raw(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enclosing_box, mask_union};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            image_size: 64,
            train_images: 6,
            val_images: 3,
            objects_min: 1,
            objects_max: 2,
            object_size_min: 24.0,
            object_size_max: 40.0,
            seed: 5,
            novel_template: None,
            templates: default_templates(),
        }
    }

    #[test]
    fn counting_single_template_single_object() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            templates: vec![default_templates().remove(1)], // cart: 2 parts
            objects_min: 1,
            objects_max: 1,
            train_images: 10,
            val_images: 0,
            ..small_spec()
        };
        let corpus = generate_dataset(&spec, dir.path()).unwrap();
        let objects = corpus
            .train
            .annotations
            .iter()
            .filter(|a| a.level == Level::Object)
            .count();
        let parts = corpus
            .train
            .annotations
            .iter()
            .filter(|a| a.level == Level::Part)
            .count();
        assert_eq!(objects, 10);
        assert_eq!(parts, 20);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = small_spec();
        generate_dataset(&spec, dir_a.path()).unwrap();
        generate_dataset(&spec, dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("train.json")).unwrap();
        let b = std::fs::read(dir_b.path().join("train.json")).unwrap();
        assert_eq!(a, b);
        let img_a = std::fs::read(dir_a.path().join("images/train_00000.png")).unwrap();
        let img_b = std::fs::read(dir_b.path().join("images/train_00000.png")).unwrap();
        assert_eq!(img_a, img_b);
    }

    #[test]
    fn generated_corpus_satisfies_merge_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_dataset(&small_spec(), dir.path()).unwrap();
        corpus.train.validate().unwrap();
        for ds in [&corpus.train, &corpus.val] {
            for obj in ds.annotations.iter().filter(|a| a.level == Level::Object) {
                let parts: Vec<_> = ds
                    .annotations
                    .iter()
                    .filter(|a| a.parent_annotation_id == Some(obj.id))
                    .collect();
                assert!(!parts.is_empty());
                let boxes: Vec<_> = parts.iter().map(|p| p.bounding_box()).collect();
                assert_eq!(enclosing_box(&boxes).unwrap(), obj.bounding_box());
                let masks: Vec<BinaryMask> = parts
                    .iter()
                    .map(|p| p.mask().unwrap().unwrap())
                    .collect();
                let union = mask_union(&masks).unwrap();
                assert_eq!(union, obj.mask().unwrap().unwrap());
            }
        }
    }

    #[test]
    fn empty_scene_renders_pure_background() {
        let templates = default_templates();
        let (rgb, masks) = render_image(&Scene::default(), &templates, 32, 7);
        assert!(masks.is_empty());
        for y in 0..32 {
            for x in 0..32 {
                let c = background_pixel(7, y, x);
                assert_eq!(&rgb[(y * 32 + x) * 3..(y * 32 + x) * 3 + 3], &c);
            }
        }
    }

    #[test]
    fn disc_area_close_to_ellipse_formula() {
        let r = 40.0;
        let mask = rasterize_shape(ShapeKind::Disc, 10.0, 10.0, 2.0 * r, 2.0 * r, 128, 128);
        let expected = std::f64::consts::PI * r * r;
        let got = mask.area() as f64;
        assert!((got - expected).abs() / expected < 0.02, "{got} vs {expected}");
    }

    #[test]
    fn mask_pixels_carry_part_colors() {
        let templates = default_templates();
        let scene = Scene {
            objects: vec![PlacedObject {
                template_index: 2,
                frame: (8.0, 8.0, 44.0, 44.0),
            }],
        };
        let (rgb, masks) = render_image(&scene, &templates, 64, 3);
        for (part, mask) in templates[2].parts.iter().zip(&masks[0]) {
            assert!(mask.area() > 0);
            for y in 0..64 {
                for x in 0..64 {
                    if mask.get(y, x) {
                        assert_eq!(&rgb[(y * 64 + x) * 3..(y * 64 + x) * 3 + 3], &part.color);
                    }
                }
            }
        }
    }

    #[test]
    fn novel_template_excluded_from_training_images() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            novel_template: Some("critter".into()),
            ..small_spec()
        };
        let corpus = generate_dataset(&spec, dir.path()).unwrap();
        let critter_id = corpus
            .train
            .categories
            .iter()
            .find(|c| c.name == "critter")
            .unwrap()
            .id;
        assert!(corpus
            .train
            .annotations
            .iter()
            .all(|a| a.category_id != critter_id));
        // novel parts are marked
        assert!(corpus
            .train
            .categories
            .iter()
            .filter(|c| c.name.starts_with("critter:"))
            .all(|c| c.split == Split::Novel));
    }
}
