//! Annotations, images, manifests and the synthetic dataset generator.
//!
//! On disk a dataset directory holds `images/<id>.pgm` (or `.ppm`),
//! `annotations/<id>.xml` and `manifest.json`.

pub mod image;
pub mod manifest;
pub mod synthetic;
pub mod voc;

use std::fs;
use std::path::{Path, PathBuf};

pub use image::{decode_pnm, encode_pnm, load_image, save_image};
pub use manifest::{DatasetManifest, STEEL_DEFECT_CLASSES};
pub use synthetic::{generate_synthetic, SyntheticSample, SyntheticSpec};
pub use voc::{parse_voc_xml, write_voc_xml, AnnotatedObject, Annotation};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// One training/evaluation image with class-labelled boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Converts annotations to labelled boxes using the class vocabulary.
    pub fn from_annotated(classes: Vec<String>, items: Vec<(Tensor, Annotation)>) -> Result<Self> {
        let samples = items
            .into_iter()
            .map(|(image, ann)| {
                let boxes = ann
                    .objects
                    .iter()
                    .map(|o| {
                        let c = classes
                            .iter()
                            .position(|n| *n == o.name)
                            .ok_or_else(|| Error::Validation(format!("class `{}` is not in the vocabulary", o.name)))?;
                        Ok(o.bbox.with_label(c))
                    })
                    .collect::<Result<_>>()?;
                Ok(Sample {
                    id: ann.id,
                    image,
                    boxes,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { classes, samples })
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    let pgm = root.join("images").join(format!("{id}.pgm"));
    if pgm.exists() {
        pgm
    } else {
        root.join("images").join(format!("{id}.ppm"))
    }
}

/// Loads one split of a dataset directory.
pub fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    let manifest = DatasetManifest::load(&root.join("manifest.json"))?;
    let mut items = Vec::new();
    for id in manifest.split(split)? {
        let image = load_image(&image_path(root, id))?;
        let mut ann = parse_voc_xml(&fs::read(root.join("annotations").join(format!("{id}.xml")))?)?;
        let (_, h, w) = image.dims3()?;
        if (ann.width, ann.height) != (w, h) {
            return Err(Error::Validation(format!(
                "annotation for `{id}` says {}x{}, image is {w}x{h}",
                ann.width, ann.height
            )));
        }
        ann.id = id.clone();
        items.push((image, ann));
    }
    Dataset::from_annotated(manifest.classes, items)
}

/// Generates `n_train + n_test` synthetic images and writes them, with
/// annotations and a manifest, under `root`.
pub fn write_synthetic_dataset(root: &Path, spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<DatasetManifest> {
    let samples = generate_synthetic(spec, n_train + n_test)?;
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("annotations"))?;
    let mut ids = Vec::with_capacity(samples.len());
    for s in &samples {
        let id = &s.annotation.id;
        save_image(&s.image, &root.join("images").join(format!("{id}.pgm")))?;
        fs::write(root.join("annotations").join(format!("{id}.xml")), write_voc_xml(&s.annotation))?;
        ids.push(id.clone());
    }
    let test = ids.split_off(n_train);
    let manifest = DatasetManifest {
        classes: spec.classes.clone(),
        train: ids,
        test,
    };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

/// In-memory train/test datasets for a synthetic spec, identical to what
/// [`write_synthetic_dataset`] followed by [`load_split`] produces.
pub fn synthetic_splits(spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    let mut items: Vec<(Tensor, Annotation)> = generate_synthetic(spec, n_train + n_test)?
        .into_iter()
        .map(|s| (s.image, s.annotation))
        .collect();
    let test = items.split_off(n_train);
    Ok((
        Dataset::from_annotated(spec.classes.clone(), items)?,
        Dataset::from_annotated(spec.classes.clone(), test)?,
    ))
}
