//! Synthetic shapes detection benchmark.
//!
//! Twelve classes (four shapes times three colors) rendered anti-aliased on a
//! gray-noise background, split into eight base and four novel classes. The
//! base split holds every red/green combination plus the blue circle and blue
//! square; the novel split holds the three stars and the blue triangle, so a
//! novel class always shares either its shape or its color with base classes.

mod draw;
mod io;

pub use io::{load_dataset, save_dataset, DatasetManifest, ManifestRecord};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::evalkit::{match_iou, ClassSplit};

pub type ClassId = usize;

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLOR_NAMES: [&str; 3] = ["red", "green", "blue"];

/// class id = color_index * 4 + shape_index
pub fn class_name(id: ClassId) -> String {
    if id / 4 < COLOR_NAMES.len() {
        format!("{}_{}", COLOR_NAMES[id / 4], SHAPE_NAMES[id % 4])
    } else {
        format!("class_{id}")
    }
}

/// Axis-aligned box in continuous pixel coordinates, corners (x0,y0)-(x1,y1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }
}

/// A raster image with its ground-truth boxes and class labels.
///
/// `pixels` is stored channel-first `[3, H, W]` with intensities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub pixels: Array3<f64>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<ClassId>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Generation parameters for the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub base_class_ids: BTreeSet<ClassId>,
    pub novel_class_ids: BTreeSet<ClassId>,
    /// Inclusive range of objects drawn per image.
    pub objects_per_image: (usize, usize),
    /// Side length of the (square) ground-truth box, in pixels.
    pub object_size: (f64, f64),
    pub max_gt_overlap_iou: f64,
    pub background_noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_classes: 12,
            base_class_ids: [0, 1, 2, 4, 5, 6, 8, 9].into(),
            novel_class_ids: [3, 7, 10, 11].into(),
            objects_per_image: (1, 4),
            object_size: (16.0, 48.0),
            max_gt_overlap_iou: 0.3,
            background_noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.base_class_ids.is_disjoint(&self.novel_class_ids) {
            return Err(CoreError::Config(
                "base and novel class id sets overlap".into(),
            ));
        }
        let union: BTreeSet<ClassId> = self
            .base_class_ids
            .union(&self.novel_class_ids)
            .copied()
            .collect();
        let expected: BTreeSet<ClassId> = (0..self.num_classes).collect();
        if union != expected {
            return Err(CoreError::Config(format!(
                "base union novel must cover exactly 0..{}",
                self.num_classes
            )));
        }
        if self.objects_per_image.0 < 1 || self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(CoreError::Config("invalid objects_per_image range".into()));
        }
        if !(self.object_size.0 > 0.0 && self.object_size.0 <= self.object_size.1) {
            return Err(CoreError::Config("invalid object_size range".into()));
        }
        if self.object_size.1 > self.image_size as f64 {
            return Err(CoreError::Config(
                "object_size exceeds the image size".into(),
            ));
        }
        Ok(())
    }

    pub fn class_split(&self) -> ClassSplit {
        ClassSplit::new(self.base_class_ids.clone(), self.novel_class_ids.clone())
    }
}

/// Class-balanced K-shot set (novel shots plus subsampled base shots).
#[derive(Debug, Clone)]
pub struct FewShotSet {
    pub images: Vec<AnnotatedImage>,
    pub per_class_instance_count: BTreeMap<ClassId, usize>,
    pub k: usize,
}

/// How a training batch keeps the annotations of its sampled images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Every annotation the image carries in the few-shot set is retained.
    ImageLevel,
    /// Each image keeps exactly one annotation; the others are removed and
    /// their (still visible) objects fall to background downstream.
    InstanceLevel,
}

impl std::str::FromStr for BatchMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_level" => Ok(BatchMode::ImageLevel),
            "instance_level" => Ok(BatchMode::InstanceLevel),
            other => Err(CoreError::Config(format!("unknown batch mode {other:?}"))),
        }
    }
}

fn per_image_rng(seed: u64, index: usize) -> ChaCha12Rng {
    // Per-image derived seed (seed XOR image index) keeps generation
    // reentrant: images can be produced in any order or concurrently with
    // results identical to the sequential pass.
    ChaCha12Rng::seed_from_u64(seed ^ index as u64)
}

/// Generate `num_images` images whose objects are drawn only from
/// `class_filter`. Deterministic given `(spec.seed, num_images, class_filter)`.
pub fn generate_dataset(
    spec: &DatasetSpec,
    num_images: usize,
    class_filter: &BTreeSet<ClassId>,
) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    if num_images < 1 {
        return Err(CoreError::Config("num_images must be >= 1".into()));
    }
    if class_filter.is_empty() {
        return Err(CoreError::Config("class filter is empty".into()));
    }
    let all: BTreeSet<ClassId> = (0..spec.num_classes).collect();
    if !class_filter.is_subset(&all) {
        return Err(CoreError::Config(
            "class filter names ids outside the spec".into(),
        ));
    }
    let filter: Vec<ClassId> = class_filter.iter().copied().collect();

    (0..num_images)
        .map(|i| generate_image(spec, &filter, per_image_rng(spec.seed, i)))
        .collect()
}

const PLACEMENT_ATTEMPTS: usize = 100;

fn generate_image(
    spec: &DatasetSpec,
    filter: &[ClassId],
    mut rng: ChaCha12Rng,
) -> Result<AnnotatedImage> {
    let size = spec.image_size;
    let mut pixels = draw::noise_background(size, spec.background_noise_std, &mut rng);

    let count = rng.gen_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut labels: Vec<ClassId> = Vec::with_capacity(count);

    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class = filter[rng.gen_range(0..filter.len())];
            let side = rng.gen_range(spec.object_size.0..=spec.object_size.1);
            let half = side / 2.0;
            let cx = rng.gen_range(half..=size as f64 - half);
            let cy = rng.gen_range(half..=size as f64 - half);
            let candidate = BBox::new(cx - half, cy - half, cx + half, cy + half);
            if boxes
                .iter()
                .all(|b| match_iou(b, &candidate) <= spec.max_gt_overlap_iou)
            {
                let rotation = draw::sample_rotation(class % 4, &mut rng);
                draw::render_shape(&mut pixels, class, &candidate, rotation);
                boxes.push(candidate);
                labels.push(class);
                placed = true;
                break;
            }
        }
        if !placed {
            // Crowded canvas: drop the object rather than violate the
            // overlap bound.
            continue;
        }
    }

    Ok(AnnotatedImage {
        pixels,
        boxes,
        labels,
    })
}

/// Build the class-balanced few-shot set: for every class in
/// `expected_classes`, select `min(k, available)` instances across the two
/// pools. Host images enter once with exactly their selected annotations.
pub fn build_fewshot_set(
    novel_pool: &[AnnotatedImage],
    base_pool: &[AnnotatedImage],
    k: usize,
    seed: u64,
    expected_classes: &BTreeSet<ClassId>,
) -> Result<FewShotSet> {
    if k < 1 {
        return Err(CoreError::Config("K must be >= 1".into()));
    }
    let pool: Vec<&AnnotatedImage> = novel_pool.iter().chain(base_pool.iter()).collect();

    let mut by_class: BTreeMap<ClassId, Vec<(usize, usize)>> = BTreeMap::new();
    for (img_idx, img) in pool.iter().enumerate() {
        for (ann_idx, &label) in img.labels.iter().enumerate() {
            by_class.entry(label).or_default().push((img_idx, ann_idx));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut per_class_instance_count = BTreeMap::new();
    let mut selected: BTreeMap<usize, Vec<usize>> = BTreeMap::new();

    for &class in expected_classes {
        let instances = by_class.get(&class).cloned().unwrap_or_default();
        if instances.is_empty() {
            return Err(CoreError::Data(format!(
                "class {class} ({}) has zero available instances",
                class_name(class)
            )));
        }
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut rng);
        let take = k.min(instances.len());
        if take < k {
            log::warn!(
                "class {class} ({}) has only {} instances for K={k}",
                class_name(class),
                instances.len()
            );
        }
        for &oi in order.iter().take(take) {
            let (img_idx, ann_idx) = instances[oi];
            selected.entry(img_idx).or_default().push(ann_idx);
        }
        per_class_instance_count.insert(class, take);
    }

    let images = selected
        .into_iter()
        .map(|(img_idx, mut ann_idxs)| {
            ann_idxs.sort_unstable();
            let src = pool[img_idx];
            AnnotatedImage {
                pixels: src.pixels.clone(),
                boxes: ann_idxs.iter().map(|&i| src.boxes[i]).collect(),
                labels: ann_idxs.iter().map(|&i| src.labels[i]).collect(),
            }
        })
        .collect();

    Ok(FewShotSet {
        images,
        per_class_instance_count,
        k,
    })
}

/// Draw a training batch from the few-shot set.
///
/// Sampling is without replacement while the batch fits in the set, with
/// replacement otherwise. Pixels are never touched; `InstanceLevel` only
/// drops annotations.
pub fn sample_batch(
    fewshot: &FewShotSet,
    mode: BatchMode,
    batch_size: usize,
    seed: u64,
) -> Vec<AnnotatedImage> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    assert!(!fewshot.images.is_empty(), "few-shot set is empty");

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = fewshot.images.len();
    let indices: Vec<usize> = if batch_size <= n {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.truncate(batch_size);
        order
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
    };

    indices
        .into_iter()
        .map(|i| {
            let src = &fewshot.images[i];
            match mode {
                BatchMode::ImageLevel => src.clone(),
                BatchMode::InstanceLevel => {
                    let keep = rng.gen_range(0..src.labels.len());
                    AnnotatedImage {
                        pixels: src.pixels.clone(),
                        boxes: vec![src.boxes[keep]],
                        labels: vec![src.labels[keep]],
                    }
                }
            }
        })
        .collect()
}
