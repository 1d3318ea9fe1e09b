//! Patch records, dataset manifests and their on-disk representation.

mod image_io;
mod manifest;

pub use image_io::{read_image, read_mask, write_image, write_mask};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, Role};

use std::path::PathBuf;

use thiserror::Error;

pub type PatchId = u64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("malformed entry {id}: {reason}")]
    MalformedEntry { id: PatchId, reason: String },
    #[error("duplicate id {0}")]
    DuplicateId(PatchId),
    #[error("image/mask shape mismatch for id {id}: image {image_hw:?}, mask {mask_hw:?}")]
    ShapeMismatch { id: PatchId, image_hw: (usize, usize), mask_hw: (usize, usize) },
    #[error("faulty flag mismatch for id {id}: entry says {declared}, mask says {actual}")]
    FaultyMismatch { id: PatchId, declared: bool, actual: bool },
    #[error("unknown id {0}")]
    UnknownId(PatchId),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("manifest has no entries")]
    Empty,
}

/// One image patch with its binary defect mask.
///
/// `image` is channel-major (`channels × height × width`) with values in
/// `[0, 1]`; `mask` is `height × width` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub id: PatchId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub faulty: bool,
}

impl PatchRecord {
    /// Builds a record, deriving `faulty` from the mask.
    pub fn new(
        id: PatchId,
        channels: usize,
        height: usize,
        width: usize,
        image: Vec<f32>,
        mask: Vec<u8>,
    ) -> Result<Self, DataError> {
        let bad = |reason: String| DataError::MalformedEntry { id, reason };
        if channels != 1 && channels != 3 {
            return Err(bad(format!("unsupported channel count {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(bad("empty patch".into()));
        }
        if image.len() != channels * height * width {
            return Err(bad(format!(
                "image buffer has {} values, expected {}",
                image.len(),
                channels * height * width
            )));
        }
        if mask.len() != height * width {
            return Err(DataError::ShapeMismatch {
                id,
                image_hw: (height, width),
                mask_hw: (mask.len() / width.max(1), width),
            });
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(bad("mask values must be 0 or 1".into()));
        }
        let faulty = mask.contains(&1);
        Ok(Self { id, channels, height, width, image, mask, faulty })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.image[c * n..(c + 1) * n]
    }

    pub fn defect_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}
