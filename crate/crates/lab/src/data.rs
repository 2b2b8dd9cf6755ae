//! Dataset persistence and the image-folder loader.
//!
//! Datasets travel as `dataset` archives (one blob per class). Real images
//! load from a `root/<class_name>/<file>.png|jpg` layout through a JSON
//! split-spec file mapping each split to its class names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fewshot_core::episodes::{Dataset, Split};
use fewshot_core::{ImageShape, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{IoContext, LabError, Result};

const KIND: &str = "dataset";

#[derive(Serialize, Deserialize)]
struct ClassMeta {
    name: String,
    samples: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    split: Split,
    channels: usize,
    height: usize,
    width: usize,
    classes: Vec<ClassMeta>,
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let shape = ds.image_shape();
    let meta = DatasetMeta {
        split: ds.split(),
        channels: shape.channels,
        height: shape.height,
        width: shape.width,
        classes: ds
            .iter_classes()
            .map(|(name, imgs)| ClassMeta {
                name: name.clone(),
                samples: imgs.len(),
            })
            .collect(),
    };
    let mut ar = Archive::new(KIND, &meta)?;
    for (name, imgs) in ds.iter_classes() {
        let mut data = Vec::with_capacity(imgs.len() * shape.len());
        for img in imgs {
            data.extend_from_slice(img.data());
        }
        ar.add_blob(name, data)?;
    }
    ar.write(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let ar = Archive::read(path)?;
    ar.expect_kind(KIND, path)?;
    let meta: DatasetMeta = ar.meta_as()?;
    let shape = ImageShape::new(meta.channels, meta.height, meta.width);
    let mut samples = BTreeMap::new();
    for class in &meta.classes {
        let data = ar.blob(&class.name)?;
        if data.len() != class.samples * shape.len() {
            return Err(LabError::format(
                path,
                format!(
                    "class `{}` declares {} samples of {} values but the blob holds {}",
                    class.name,
                    class.samples,
                    shape.len(),
                    data.len()
                ),
            ));
        }
        let imgs = data
            .chunks_exact(shape.len())
            .map(|c| Tensor::from_vec(shape, c.to_vec()))
            .collect::<fewshot_core::Result<Vec<_>>>()?;
        samples.insert(class.name.clone(), imgs);
    }
    Ok(Dataset::new(meta.split, samples)?)
}

/// Which classes belong to which split, as stored in a split-spec JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn classes_of(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Splits must be pairwise disjoint — a class leaking across them would
    /// silently break the few-shot evaluation protocol.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (name, list) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for class in list {
                if let Some(other) = seen.insert(class.clone(), name) {
                    return Err(LabError::run(format!(
                        "class `{class}` appears in both `{other}` and `{name}` splits"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn load_split_spec(path: &Path) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).at(path)?;
    let spec: SplitSpec = serde_json::from_str(&text)
        .map_err(|e| LabError::format(path, format!("malformed split spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads the named classes from a `root/<class>/<file>.png|jpg` folder as one
/// split. Images decode to RGB and scale to `[0, 1]`; with `resize` set they
/// are first resampled to (height, width), otherwise all files must already
/// share one size.
pub fn load_image_folder(
    root: &Path,
    split: Split,
    classes: &[String],
    resize: Option<(usize, usize)>,
) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(LabError::run(format!("split `{split}` lists no classes")));
    }
    let mut samples = BTreeMap::new();
    for class in classes {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(LabError::run(format!(
                "class `{class}`: no directory at {}",
                dir.display()
            )));
        }
        let mut files: Vec<_> = fs::read_dir(&dir)
            .at(&dir)?
            .collect::<std::io::Result<Vec<_>>>()
            .at(&dir)?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(LabError::run(format!(
                "class `{class}` has no image files under {}",
                dir.display()
            )));
        }
        let mut imgs = Vec::with_capacity(files.len());
        for file in &files {
            imgs.push(load_image(file, resize)?);
        }
        samples.insert(class.clone(), imgs);
    }
    Ok(Dataset::new(split, samples)?)
}

fn load_image(path: &Path, resize: Option<(usize, usize)>) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| LabError::format(path, format!("decode failed: {e}")))?;
    let img = match resize {
        Some((h, w)) => img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle),
        None => img,
    };
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let shape = ImageShape::new(3, h, w);
    let mut data = vec![0.0; shape.len()];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(shape, data)?)
}
