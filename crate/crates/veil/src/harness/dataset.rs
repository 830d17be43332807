//! Class-indexed image collections with a train/test split: the tracker's
//! scraped corpus and the user's album.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seed::derive_seed;

/// Train/test images of one class.
#[derive(Debug, Clone, Default)]
pub struct ClassSplit {
    pub train: Vec<Image>,
    pub test: Vec<Image>,
}

/// File-level record of how a dataset was assembled.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: Option<PathBuf>,
    pub split_fraction: f64,
    pub seed: u64,
    /// Per class: the PNG file names in each split, in split order.
    pub files: BTreeMap<String, (Vec<String>, Vec<String>)>,
}

/// A labeled image dataset keyed by class id (directory name).
///
/// Class ids are ordered lexicographically everywhere; ties elsewhere in
/// the crate break toward the lowest id under that order.
#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    classes: BTreeMap<String, ClassSplit>,
    manifest: DatasetManifest,
}

impl LabeledDataset {
    /// Loads `root/<class>/*.png`, splitting each class deterministically.
    ///
    /// Per class, file names are sorted, shuffled with a seed derived from
    /// `(seed, class)`, and the first `round(n * split_fraction)` (clamped
    /// to `[1, n]`) become training images.
    pub fn load(root: impl AsRef<Path>, split_fraction: f64, seed: u64) -> Result<LabeledDataset> {
        let root = root.as_ref();
        if !(0.0..=1.0).contains(&split_fraction) {
            return Err(Error::Param(format!(
                "split fraction must be in [0, 1], got {split_fraction}"
            )));
        }
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Dataset(format!("no class directories under {}", root.display())));
        }

        let mut classes = BTreeMap::new();
        let mut files = BTreeMap::new();
        for dir in class_dirs {
            let class_id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut names: Vec<String> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|entry| entry.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::Dataset(format!("class directory {} has no png files", dir.display())));
            }

            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split/{class_id}")));
            names.shuffle(&mut rng);
            let n_train = ((names.len() as f64 * split_fraction).round() as usize)
                .clamp(1, names.len());
            let (train_names, test_names) = names.split_at(n_train);

            let load_all = |list: &[String]| -> Result<Vec<Image>> {
                list.iter().map(|n| Image::load_png(dir.join(n))).collect()
            };
            classes.insert(
                class_id.clone(),
                ClassSplit {
                    train: load_all(train_names)?,
                    test: load_all(test_names)?,
                },
            );
            files.insert(class_id, (train_names.to_vec(), test_names.to_vec()));
        }

        Ok(LabeledDataset {
            classes,
            manifest: DatasetManifest {
                root: Some(root.to_path_buf()),
                split_fraction,
                seed,
                files,
            },
        })
    }

    /// Assembles a dataset from in-memory parts (experiment plumbing and
    /// tests).
    pub fn from_parts(classes: BTreeMap<String, ClassSplit>) -> LabeledDataset {
        LabeledDataset {
            classes,
            manifest: DatasetManifest::default(),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> Vec<&str> {
        self.classes.keys().map(String::as_str).collect()
    }

    pub fn get(&self, class_id: &str) -> Option<&ClassSplit> {
        self.classes.get(class_id)
    }

    pub fn classes(&self) -> impl Iterator<Item = (&str, &ClassSplit)> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// All training images flattened as `(class id, image)`, class-ordered.
    pub fn train_items(&self) -> Vec<(&str, &Image)> {
        self.classes
            .iter()
            .flat_map(|(id, split)| split.train.iter().map(move |img| (id.as_str(), img)))
            .collect()
    }

    /// All test images flattened as `(class id, image)`, class-ordered.
    pub fn test_items(&self) -> Vec<(&str, &Image)> {
        self.classes
            .iter()
            .flat_map(|(id, split)| split.test.iter().map(move |img| (id.as_str(), img)))
            .collect()
    }

    /// A new dataset with only the named classes.
    pub fn subset(&self, ids: &[&str]) -> Result<LabeledDataset> {
        let mut classes = BTreeMap::new();
        for id in ids {
            let split = self
                .classes
                .get(*id)
                .ok_or_else(|| Error::Dataset(format!("class {id} not in dataset")))?;
            classes.insert((*id).to_string(), split.clone());
        }
        Ok(LabeledDataset::from_parts(classes))
    }

    /// A copy with one class's training images replaced (poisoning hook).
    pub fn with_train_replaced(&self, class_id: &str, train: Vec<Image>) -> Result<LabeledDataset> {
        let mut copy = self.clone();
        let split = copy
            .classes
            .get_mut(class_id)
            .ok_or_else(|| Error::Dataset(format!("class {class_id} not in dataset")))?;
        split.train = train;
        Ok(copy)
    }

    /// Adds a class; errors if the id is taken.
    pub fn insert_class(&mut self, class_id: &str, split: ClassSplit) -> Result<()> {
        if self.classes.contains_key(class_id) {
            return Err(Error::Dataset(format!("class {class_id} already present")));
        }
        self.classes.insert(class_id.to_string(), split);
        Ok(())
    }
}
