//! Datasets, manifests, checkpoints and embedding export.

mod checkpoint;
mod export;
mod folder;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use export::{export_embeddings, write_embeddings_csv};
pub use folder::load_folder_dataset;
pub use synthetic::{generate_synthetic, render_sample, SyntheticSpec};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Folder { root: String },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrigin {
    File { path: String },
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub origin: SampleOrigin,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: DataSource,
    pub image_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes();
        let mut seen = vec![false; k];
        for (i, s) in self.samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::Manifest(format!("sample {i} has id {}", s.id)));
            }
            if s.class_id >= k {
                return Err(Error::Manifest(format!(
                    "sample {i} has class id {} but there are {k} classes",
                    s.class_id
                )));
            }
            seen[s.class_id] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Manifest(format!("class `{}` has no samples", self.class_names[c])));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}

/// Decoded images (`[C × H × W]`, values in `[0, 1]`) in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.samples.iter().map(|s| s.class_id).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.manifest.samples.iter().map(|s| s.id).collect()
    }

    /// Samples of one split, in manifest order; ids are kept.
    pub fn split(&self, split: Split) -> Subset<'_> {
        let idx = (0..self.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect();
        Subset { data: self, idx }
    }

    pub fn all(&self) -> Subset<'_> {
        Subset {
            data: self,
            idx: (0..self.len()).collect(),
        }
    }

    /// Bitwise equality of manifests and pixels.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.images.len() == other.images.len()
            && self.images.iter().zip(&other.images).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// A view of some samples of a [`Dataset`].
#[derive(Clone, Debug)]
pub struct Subset<'a> {
    data: &'a Dataset,
    idx: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn from_indices(data: &'a Dataset, idx: Vec<usize>) -> Self {
        Self { data, idx }
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.data.n_classes()
    }

    pub fn image(&self, i: usize) -> &'a Tensor {
        &self.data.images[self.idx[i]]
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.idx.iter().map(|&i| self.data.images[i].clone()).collect()
    }

    pub fn label(&self, i: usize) -> usize {
        self.data.manifest.samples[self.idx[i]].class_id
    }

    pub fn labels(&self) -> Vec<usize> {
        self.idx.iter().map(|&i| self.data.manifest.samples[i].class_id).collect()
    }

    /// Source sample id of element `i`.
    pub fn id(&self, i: usize) -> usize {
        self.data.manifest.samples[self.idx[i]].id
    }

    pub fn ids(&self) -> Vec<usize> {
        self.idx.iter().map(|&i| self.data.manifest.samples[i].id).collect()
    }
}

/// Stratified seeded split: within each class a fraction `train_fraction`
/// (rounded) goes to train, the rest to test. With a fraction below 1, every
/// class of two or more samples keeps at least one sample on each side.
pub fn assign_splits(class_ids: &[usize], n_classes: usize, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train_fraction must be in (0, 1], got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(&[seed, 0x5B1_17]));
    let mut out = vec![Split::Test; class_ids.len()];
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..class_ids.len()).filter(|&i| class_ids[i] == c).collect();
        members.shuffle(&mut rng);
        let mut n_train = (members.len() as f64 * train_fraction).round() as usize;
        if train_fraction < 1.0 && members.len() >= 2 {
            n_train = n_train.clamp(1, members.len() - 1);
        }
        for &i in &members[..n_train] {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}

/// Loads a dataset directory: with a `manifest.json` the manifest is
/// honoured (synthetic sources are regenerated), otherwise the directory is
/// read as one sub-directory per class.
pub fn load_dataset(root: &Path, image_size: usize, channels: usize, train_fraction: f64, seed: u64) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    if !manifest_path.exists() {
        return load_folder_dataset(root, image_size, channels, train_fraction, seed);
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    if manifest.image_size != image_size || manifest.channels != channels {
        return Err(Error::Manifest(format!(
            "{} holds {}-channel {}px images but the encoder expects {channels}-channel {image_size}px",
            manifest_path.display(),
            manifest.channels,
            manifest.image_size
        )));
    }
    match &manifest.source {
        DataSource::Synthetic(spec) => {
            let data = generate_synthetic(spec)?;
            if data.manifest != manifest {
                return Err(Error::Manifest(format!(
                    "{} does not match its regenerated synthetic dataset",
                    manifest_path.display()
                )));
            }
            Ok(data)
        }
        DataSource::Folder { .. } => {
            let images = manifest
                .samples
                .iter()
                .map(|s| match &s.origin {
                    SampleOrigin::File { path } => folder::decode_png(&root.join(path), image_size, channels),
                    SampleOrigin::Synthetic { .. } => Err(Error::Manifest(format!(
                        "folder manifest lists synthetic sample {}",
                        s.id
                    ))),
                })
                .collect::<Result<_>>()?;
            Ok(Dataset { manifest, images })
        }
    }
}

/// Writes a dataset directory: PNG previews under `<class>/` plus
/// `manifest.json`, which [`load_dataset`] prefers over the PNGs.
pub fn save_dataset_dir(root: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    folder::write_pngs(root, data)?;
    let mut manifest = data.manifest.clone();
    if let DataSource::Folder { .. } = manifest.source {
        for s in &mut manifest.samples {
            s.origin = SampleOrigin::File {
                path: format!("{}/{:05}.png", manifest.class_names[s.class_id], s.id),
            };
        }
    }
    manifest.save(&root.join("manifest.json"))
}
