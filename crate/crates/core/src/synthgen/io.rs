//! Dataset directory persistence: `manifest.json` plus one lossless 8-bit
//! RGB PNG per record.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{class_name, AnnotatedImage, BBox, ClassId, DatasetSpec};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<ClassId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub classes: Vec<String>,
    pub base_ids: Vec<ClassId>,
    pub novel_ids: Vec<ClassId>,
    pub records: Vec<ManifestRecord>,
    pub spec: DatasetSpec,
    pub split: String,
}

pub fn save_dataset(
    dir: &Path,
    spec: &DatasetSpec,
    split: &str,
    images: &[AnnotatedImage],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut records = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let file = format!("img_{i:05}.png");
        save_png(&dir.join(&file), &img.pixels)?;
        records.push(ManifestRecord {
            file,
            boxes: img
                .boxes
                .iter()
                .map(|b| [b.x0, b.y0, b.x1, b.y1])
                .collect(),
            labels: img.labels.clone(),
        });
    }
    let manifest = DatasetManifest {
        image_size: spec.image_size,
        classes: (0..spec.num_classes).map(class_name).collect(),
        base_ids: spec.base_class_ids.iter().copied().collect(),
        novel_ids: spec.novel_class_ids.iter().copied().collect(),
        records,
        spec: spec.clone(),
        split: split.to_string(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CoreError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| CoreError::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<AnnotatedImage>)> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| CoreError::json(&path, e))?;
    let mut images = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let pixels = load_png(&dir.join(&rec.file))?;
        if pixels.shape()[1] != manifest.image_size || pixels.shape()[2] != manifest.image_size {
            return Err(CoreError::Data(format!(
                "{}: image size does not match manifest",
                rec.file
            )));
        }
        if rec.boxes.len() != rec.labels.len() {
            return Err(CoreError::Data(format!(
                "{}: box/label count mismatch",
                rec.file
            )));
        }
        images.push(AnnotatedImage {
            pixels,
            boxes: rec
                .boxes
                .iter()
                .map(|&[x0, y0, x1, y1]| BBox::new(x0, y0, x1, y1))
                .collect(),
            labels: rec.labels.clone(),
        });
    }
    let known: BTreeSet<ClassId> = (0..manifest.spec.num_classes).collect();
    for img in &images {
        for l in &img.labels {
            if !known.contains(l) {
                return Err(CoreError::Data(format!("unknown label {l} in dataset")));
            }
        }
    }
    Ok((manifest, images))
}

fn save_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((pixels[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from dimensions");
    img.save(path)
        .map_err(|e| CoreError::Data(format!("failed to write {}: {e}", path.display())))
}

fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| CoreError::Data(format!("failed to read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(pixels)
}
