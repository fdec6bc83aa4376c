//! Dataset serialization: COCO-like annotation JSON plus PNG images.
//!
//! On-disk layout:
//!
//! ```text
//! <dir>/annotations.json
//! <dir>/images/img_00001.png
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::generate::{generate_scenes, GenConfig};
use crate::synth::rle::{self, Rle};
use crate::synth::shapes::Family;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRec {
    pub id: u32,
    pub file: String,
    pub height: u32,
    pub width: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnRec {
    pub id: u32,
    pub image_id: u32,
    /// `class + 1` (category ids start at 1).
    pub category_id: u32,
    /// Tight `[x0, y0, w, h]` in pixels.
    pub bbox: [u32; 4],
    pub rle: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRec {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRec {
    pub seed: u64,
    pub config: GenConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetJson {
    pub images: Vec<ImageRec>,
    pub annotations: Vec<AnnRec>,
    pub categories: Vec<CategoryRec>,
    pub meta: MetaRec,
}

/// A dataset held in memory: annotations plus raw RGB pixels per image
/// (aligned with `json.images`).
pub struct Dataset {
    pub json: DatasetJson,
    pub images_rgb: Vec<Vec<u8>>,
}

/// Category name for a zero-based class index.
pub fn category_name(class: usize) -> String {
    format!("{}_{}", Family::of_class(class).name(), class)
}

/// Generate the full dataset in memory.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    let scenes = generate_scenes(cfg)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut images_rgb = Vec::new();
    let mut ann_id = 1u32;
    for (i, scene) in scenes.iter().enumerate() {
        let image_id = i as u32 + 1;
        images.push(ImageRec {
            id: image_id,
            file: format!("images/img_{image_id:05}.png"),
            height: scene.height as u32,
            width: scene.width as u32,
        });
        for obj in &scene.objects {
            annotations.push(AnnRec {
                id: ann_id,
                image_id,
                category_id: obj.instance.class as u32 + 1,
                bbox: obj.visible.bbox().expect("retained object has pixels"),
                rle: rle::encode(&obj.visible),
            });
            ann_id += 1;
        }
        images_rgb.push(scene.rgb.clone());
    }
    let categories = (0..cfg.num_classes)
        .map(|c| CategoryRec { id: c as u32 + 1, name: category_name(c) })
        .collect();
    let json = DatasetJson {
        images,
        annotations,
        categories,
        meta: MetaRec { seed: cfg.seed, config: cfg.clone() },
    };
    Ok(Dataset { json, images_rgb })
}

/// Structural validation of a dataset: dense unique ids, valid references,
/// decodable RLEs whose tight box matches the stored box.
pub fn validate(ds: &Dataset) -> Result<()> {
    let json = &ds.json;
    if ds.images_rgb.len() != json.images.len() {
        return Err(Error::Dataset("pixel buffers do not match image records".into()));
    }
    for (i, img) in json.images.iter().enumerate() {
        if img.id != i as u32 + 1 {
            return Err(Error::Dataset(format!("image ids not dense at index {i}")));
        }
        if ds.images_rgb[i].len() != (img.height * img.width * 3) as usize {
            return Err(Error::Dataset(format!("image {} pixel buffer size mismatch", img.id)));
        }
    }
    for (i, cat) in json.categories.iter().enumerate() {
        if cat.id != i as u32 + 1 {
            return Err(Error::Dataset(format!("category ids not dense at index {i}")));
        }
    }
    for (i, ann) in json.annotations.iter().enumerate() {
        if ann.id != i as u32 + 1 {
            return Err(Error::Dataset(format!("annotation ids not dense at index {i}")));
        }
        let img = json
            .images
            .get(ann.image_id as usize - 1)
            .filter(|im| im.id == ann.image_id)
            .ok_or_else(|| {
                Error::Dataset(format!("annotation {} references missing image {}", ann.id, ann.image_id))
            })?;
        if ann.category_id == 0 || ann.category_id as usize > json.categories.len() {
            return Err(Error::Dataset(format!(
                "annotation {} references missing category {}",
                ann.id, ann.category_id
            )));
        }
        if ann.rle.size != [img.height, img.width] {
            return Err(Error::Dataset(format!("annotation {} rle size mismatch", ann.id)));
        }
        let mask = rle::decode(&ann.rle)?;
        let tight = mask
            .bbox()
            .ok_or_else(|| Error::Dataset(format!("annotation {} mask is empty", ann.id)))?;
        if tight != ann.bbox {
            return Err(Error::Dataset(format!(
                "annotation {} box {:?} is not the tight box {:?} of its mask",
                ann.id, ann.bbox, tight
            )));
        }
    }
    Ok(())
}

/// Write `annotations.json` and the PNG images under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (img, rgb) in ds.json.images.iter().zip(&ds.images_rgb) {
        let buf = image::RgbImage::from_raw(img.width, img.height, rgb.clone())
            .ok_or_else(|| Error::Dataset(format!("image {} pixel buffer size mismatch", img.id)))?;
        buf.save_with_format(dir.join(&img.file), image::ImageFormat::Png)?;
    }
    let json = serde_json::to_string_pretty(&ds.json)?;
    std::fs::write(dir.join("annotations.json"), json)?;
    Ok(())
}

/// Load a dataset from `dir`, validating its structure.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw = std::fs::read_to_string(dir.join("annotations.json"))?;
    let json: DatasetJson = serde_json::from_str(&raw)?;
    let mut images_rgb = Vec::with_capacity(json.images.len());
    for img in &json.images {
        let decoded = image::open(dir.join(&img.file))?.into_rgb8();
        if decoded.dimensions() != (img.width, img.height) {
            return Err(Error::Dataset(format!(
                "image {} has size {:?}, annotations say {}x{}",
                img.id,
                decoded.dimensions(),
                img.width,
                img.height
            )));
        }
        images_rgb.push(decoded.into_raw());
    }
    let ds = Dataset { json, images_rgb };
    validate(&ds)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig { num_images: 4, seed: 5, ..Default::default() }
    }

    #[test]
    fn generated_dataset_validates() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        validate(&ds).unwrap();
        assert_eq!(ds.json.categories.len(), 8);
        assert!(ds.json.annotations.len() >= ds.json.images.len());
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_cfg()).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.json, ds.json);
        assert_eq!(loaded.images_rgb, ds.images_rgb);
    }

    #[test]
    fn validation_catches_corruption() {
        let ds = generate_dataset(&small_cfg()).unwrap();

        let mut bad = Dataset {
            json: ds.json.clone(),
            images_rgb: ds.images_rgb.clone(),
        };
        bad.json.annotations[0].bbox[0] += 1;
        assert!(validate(&bad).is_err(), "loose box accepted");

        let mut bad = Dataset {
            json: ds.json.clone(),
            images_rgb: ds.images_rgb.clone(),
        };
        bad.json.annotations[0].image_id = 9999;
        assert!(validate(&bad).is_err(), "dangling image reference accepted");

        let mut bad = Dataset { json: ds.json.clone(), images_rgb: ds.images_rgb };
        bad.json.annotations[0].rle.counts.push(3);
        assert!(validate(&bad).is_err(), "inconsistent rle accepted");
    }
}
