//! Datasets: PNM decoding, manifests, the synthetic generator, P×K sampling
//! and augmentation.

pub mod augment;
pub mod manifest;
pub mod pnm;
pub mod sampler;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use augment::{augment, AugmentFlags};
pub use manifest::{Manifest, SampleRecord, Split, DISTRACTOR};
pub use pnm::load_image;
pub use sampler::{pk_sample, IdentityIndex, PkSampler};
pub use synthetic::{generate_synthetic, synthesize, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Preprocessing recipe named after the benchmark it imitates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetProfile {
    /// Elongated 1:2 chips, full augmentation, ship-size metadata available.
    Hoss,
    /// Square chips, no augmentation.
    CmShip,
}

impl DatasetProfile {
    pub fn name(self) -> &'static str {
        match self {
            DatasetProfile::Hoss => "hoss",
            DatasetProfile::CmShip => "cmship",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hoss" => Ok(DatasetProfile::Hoss),
            "cmship" => Ok(DatasetProfile::CmShip),
            _ => Err(Error::Config(format!("unknown dataset profile {s:?}, expected hoss or cmship"))),
        }
    }

    /// Toy `(H, W)`: 128×256 and 224×224 scaled down.
    pub fn image_size(self) -> (usize, usize) {
        match self {
            DatasetProfile::Hoss => (32, 64),
            DatasetProfile::CmShip => (32, 32),
        }
    }

    pub fn augment(self) -> AugmentFlags {
        match self {
            DatasetProfile::Hoss => AugmentFlags::ALL,
            DatasetProfile::CmShip => AugmentFlags::NONE,
        }
    }
}

/// A manifest with every referenced image decoded once.
#[derive(Clone, Debug)]
pub struct Dataset<T: Real> {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// Parallel to `manifest.records`.
    pub images: Vec<Tensor<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn open(root: &Path, channels: usize) -> Result<Self> {
        let manifest = Manifest::load(&root.join(MANIFEST_FILE))?;
        Self::from_manifest(root, manifest, channels)
    }

    pub fn from_manifest(root: &Path, manifest: Manifest, channels: usize) -> Result<Self> {
        let images = manifest
            .records
            .par_iter()
            .map(|r| load_image(&root.join(&r.path), channels))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = images.first() {
            if let Some((i, bad)) = images.iter().enumerate().find(|(_, t)| t.shape() != first.shape()) {
                return Err(Error::Data(format!(
                    "{} has shape {:?}, expected {:?}",
                    manifest.records[i].path,
                    bad.shape(),
                    first.shape()
                )));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            images,
        })
    }

    /// In-memory dataset straight from the generator.
    pub fn from_synthetic(set: &synthetic::SyntheticSet, channels: usize) -> Result<Self> {
        let by_path: std::collections::HashMap<&str, &pnm::PnmImage> =
            set.images.iter().map(|(p, i)| (p.as_str(), i)).collect();
        let images = set
            .manifest
            .records
            .iter()
            .map(|r| by_path[r.path.as_str()].to_tensor(channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: PathBuf::new(),
            manifest: set.manifest.clone(),
            images,
        })
    }

    /// Record indices of one split, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.records.len())
            .filter(|&i| self.manifest.records[i].split == split)
            .collect()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }
}
