//! Labeled image collections, train/test membership, the JSON manifest, and
//! the class-per-subdirectory folder loader.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Image, MIN_IMAGE_SIDE};
use crate::rng::rng_from_seed;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: Image,
    pub label: usize,
    pub split: Split,
}

/// An immutable labeled dataset. All images share one size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    items: Vec<Item>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(items: Vec<Item>, class_names: Vec<String>) -> Result<Self> {
        ensure!(!items.is_empty(), Empty, "dataset has no items");
        ensure!(!class_names.is_empty(), Empty, "dataset has no classes");
        let (h, w) = (items[0].image.height(), items[0].image.width());
        ensure!(
            h >= MIN_IMAGE_SIDE && w >= MIN_IMAGE_SIDE,
            InvalidArgument,
            "images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
        );
        for (i, it) in items.iter().enumerate() {
            ensure!(
                it.label < class_names.len(),
                InvalidArgument,
                "item {i} has label {} but only {} classes",
                it.label,
                class_names.len()
            );
            ensure!(
                it.image.height() == h && it.image.width() == w,
                DimensionMismatch,
                "item {i} is {}x{}, expected {h}x{w}",
                it.image.height(),
                it.image.width()
            );
        }
        Ok(Self { items, class_names })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.items[0].image.height(), self.items[0].image.width())
    }

    fn filtered(&self, split: Split) -> Result<Self> {
        let items: Vec<Item> = self.items.iter().filter(|i| i.split == split).cloned().collect();
        ensure!(!items.is_empty(), Empty, "no {split:?} items in dataset");
        Ok(Self {
            items,
            class_names: self.class_names.clone(),
        })
    }

    pub fn train(&self) -> Result<Self> {
        self.filtered(Split::Train)
    }

    pub fn test(&self) -> Result<Self> {
        self.filtered(Split::Test)
    }

    /// Seeded subsample of `n` items (all items when `n >= len`), preserving original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if n >= self.items.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.shuffle(&mut rng_from_seed(seed));
        let mut keep = idx[..n.max(1)].to_vec();
        keep.sort_unstable();
        Self {
            items: keep.into_iter().map(|i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Assigns splits by a seeded per-class shuffle, sending `test_fraction` of each class to test.
    pub fn with_random_split(mut self, test_fraction: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        for class in 0..self.class_names.len() {
            let mut idx: Vec<usize> =
                (0..self.items.len()).filter(|&i| self.items[i].label == class).collect();
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            for (j, &i) in idx.iter().enumerate() {
                self.items[i].split = if j < n_test { Split::Test } else { Split::Train };
            }
        }
        self
    }

    /// Writes every image as PNG under `dir/images/` plus `dir/manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut entries = Vec::with_capacity(self.items.len());
        for (i, it) in self.items.iter().enumerate() {
            let rel = format!("images/{i:06}.png");
            it.image.save(dir.join(&rel))?;
            entries.push(ManifestItem {
                path: rel,
                label: it.label,
                split: it.split,
            });
        }
        let (h, w) = self.image_dims();
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            class_names: self.class_names.clone(),
            image_height: h,
            image_width: w,
            items: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// On-disk description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub image_height: usize,
    pub image_width: usize,
    pub items: Vec<ManifestItem>,
}

/// Loads a dataset from a manifest file (or a directory containing `manifest.json`).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join("manifest.json");
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::malformed(
            &path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let items = manifest
        .items
        .iter()
        .map(|m| {
            Ok(Item {
                image: Image::load(root.join(&m.path))?,
                label: m.label,
                split: m.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(items, manifest.class_names)
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
}

/// Loads `path/<class>/<image>.{png,ppm}`. Labels follow sorted class-directory names.
/// Every item is marked as training data; use [`LabeledDataset::with_random_split`] to split.
pub fn load_image_folder(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let mut classes: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    ensure!(!classes.is_empty(), Empty, "no class directories in {}", path.display());
    let mut items = Vec::new();
    let mut names = Vec::with_capacity(classes.len());
    for (label, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        ensure!(!files.is_empty(), Empty, "class directory {} has no images", dir.display());
        for f in files {
            items.push(Item {
                image: Image::load(&f)?,
                label,
                split: Split::Train,
            });
        }
    }
    LabeledDataset::new(items, names)
}

/// Loads PNG/PPM files from a flat directory (e.g. a background corpus), sorted by name.
pub fn load_image_dir(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    let path = path.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    files.iter().map(Image::load).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_folder(root: &Path, classes: &[(&str, usize)]) {
        for (name, n) in classes {
            let d = root.join(name);
            std::fs::create_dir_all(&d).unwrap();
            for i in 0..*n {
                Image::filled(16, 16, [i as f32 * 0.1, 0.0, 0.0])
                    .save(d.join(format!("{i}.png")))
                    .unwrap();
            }
        }
    }

    #[test]
    fn folder_counts_and_sorted_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_folder(dir.path(), &[("b", 3), ("a", 3)]);
        let ds = load_image_folder(dir.path()).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.class_names()[0], "a");
    }

    #[test]
    fn empty_folder_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_folder(dir.path()).is_err());
    }

    #[test]
    fn empty_class_directory_is_error() {
        let dir = tempfile::tempdir().unwrap();
        write_folder(dir.path(), &[("a", 2)]);
        std::fs::create_dir_all(dir.path().join("b")).unwrap();
        assert!(matches!(load_image_folder(dir.path()), Err(Error::Empty(_))));
    }

    #[test]
    fn random_split_is_disjoint_and_covering() {
        let items = (0..20)
            .map(|i| Item {
                image: Image::filled(16, 16, [0.0; 3]),
                label: i % 2,
                split: Split::Train,
            })
            .collect();
        let ds = LabeledDataset::new(items, vec!["x".into(), "y".into()])
            .unwrap()
            .with_random_split(0.25, 3);
        let (tr, te) = (ds.train().unwrap(), ds.test().unwrap());
        assert_eq!(tr.len() + te.len(), 20);
        assert_eq!(te.len(), 6);
    }

    #[test]
    fn labels_must_be_in_range() {
        let items = vec![Item {
            image: Image::filled(16, 16, [0.0; 3]),
            label: 1,
            split: Split::Train,
        }];
        assert!(LabeledDataset::new(items, vec!["a".into()]).is_err());
    }
}
