//! DOTA-style dataset directories:
//!
//! ```text
//! <root>/classes.txt        one category per line (optional; DOTA-v1.0 otherwise)
//! <root>/images/<id>.ppm    or .pgm / .f64
//! <root>/labelTxt/<id>.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::data::dota::{format_dota_annotation, read_dota_annotation, Instance, LabelMap};
use crate::data::image::Image;
use crate::data::synth::{synthesize_scene, SynthConfig};
use crate::error::{Error, Result};

pub const IMAGE_DIR: &str = "images";
pub const LABEL_DIR: &str = "labelTxt";
pub const CLASSES_FILE: &str = "classes.txt";
const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "f64"];

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image_path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

impl AnnotatedImage {
    pub fn load_image(&self) -> Result<Image> {
        Image::read(&self.image_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub labels: LabelMap,
    pub items: Vec<AnnotatedImage>,
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| dir.join(format!("{}.{}", id, e)))
        .find(|p| p.is_file())
}

impl Dataset {
    /// Loads every annotation file with a matching image, sorted by id.
    /// Annotations without an image are skipped with a warning.
    pub fn load(root: &Path, labels: Option<LabelMap>) -> Result<Self> {
        let labels = match labels {
            Some(l) => l,
            None => {
                let p = root.join(CLASSES_FILE);
                if p.is_file() {
                    LabelMap::read(&p)?
                } else {
                    LabelMap::dota_v1()
                }
            }
        };
        let label_dir = root.join(LABEL_DIR);
        let image_dir = root.join(IMAGE_DIR);
        let mut ids: Vec<String> = fs::read_dir(&label_dir)
            .map_err(|e| Error::io(&label_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        let mut items = Vec::with_capacity(ids.len());
        for id in ids {
            let Some(image_path) = find_image(&image_dir, &id) else {
                warn!("{}: no image for annotation {}", image_dir.display(), id);
                continue;
            };
            let parsed = read_dota_annotation(&label_dir.join(format!("{}.txt", id)), &labels)?;
            let img = Image::read(&image_path)?;
            items.push(AnnotatedImage {
                id,
                image_path,
                height: img.height,
                width: img.width,
                instances: parsed.instances,
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            labels,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: &str) -> Option<&AnnotatedImage> {
        self.items.iter().find(|i| i.id == id)
    }
}

/// Renders scenes `first..first + count` of `seed` into a dataset directory.
/// Returns how many scenes ran out of placement attempts.
pub fn write_synthetic(root: &Path, cfg: &SynthConfig, seed: u64, first: u64, count: u64) -> Result<usize> {
    cfg.validate()?;
    let image_dir = root.join(IMAGE_DIR);
    let label_dir = root.join(LABEL_DIR);
    for d in [&image_dir, &label_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let labels = LabelMap::numbered(cfg.classes);
    labels.write(&root.join(CLASSES_FILE))?;
    let mut truncated = 0;
    for index in first..first + count {
        let scene = synthesize_scene(seed, index, cfg)?;
        truncated += usize::from(scene.truncated);
        let id = format!("{:06}", index);
        scene.image.write_pnm(&image_dir.join(format!("{}.ppm", id)))?;
        let path = label_dir.join(format!("{}.txt", id));
        let text = format_dota_annotation(&scene.instances, &labels)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(truncated)
}
