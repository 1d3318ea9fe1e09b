use std::collections::BTreeSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image_io::{read_image, read_mask};
use super::{DataError, PatchId, PatchRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pool,
    Test,
}

/// A manifest entry. Paths are held absolute in memory and written
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: PatchId,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub faulty: bool,
}

/// Ordered, id-unique collection of patch references.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    role: Role,
    entries: Vec<ManifestEntry>,
    faulty_fraction: Ratio<u64>,
}

impl DatasetManifest {
    /// Sorts entries by id and enforces uniqueness. Faulty flags are taken
    /// as given; use [`load_manifest`] to validate them against masks.
    pub fn new(role: Role, mut entries: Vec<ManifestEntry>) -> Result<Self, DataError> {
        if entries.is_empty() {
            return Err(DataError::Empty);
        }
        entries.sort_by_key(|e| e.id);
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(DataError::DuplicateId(w[0].id));
        }
        let faulty = entries.iter().filter(|e| e.faulty).count() as u64;
        let faulty_fraction = Ratio::new(faulty, entries.len() as u64);
        Ok(Self { role, entries, faulty_fraction })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<PatchId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn faulty_count(&self) -> usize {
        self.entries.iter().filter(|e| e.faulty).count()
    }

    /// Exact `#faulty / #entries`.
    pub fn realized_faulty_fraction(&self) -> Ratio<u64> {
        self.faulty_fraction
    }

    pub fn realized_faulty_fraction_f64(&self) -> f64 {
        *self.faulty_fraction.numer() as f64 / *self.faulty_fraction.denom() as f64
    }

    pub fn get(&self, id: PatchId) -> Option<&ManifestEntry> {
        self.entries.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.entries[i])
    }

    pub fn contains(&self, id: PatchId) -> bool {
        self.get(id).is_some()
    }

    /// Decodes one patch; the image is normalised to `[0, 1]` and the mask
    /// binarised.
    pub fn read_patch(&self, id: PatchId) -> Result<PatchRecord, DataError> {
        let entry = self.get(id).ok_or(DataError::UnknownId(id))?;
        read_entry(entry)
    }

    /// Decodes every patch (in id order), in parallel.
    pub fn read_all(&self) -> Result<Vec<PatchRecord>, DataError> {
        self.entries.par_iter().map(read_entry).collect()
    }

    /// Manifest restricted to `ids`, keeping this manifest's role.
    pub fn subset(&self, ids: &[PatchId]) -> Result<Self, DataError> {
        let entries = ids
            .iter()
            .map(|&id| self.get(id).cloned().ok_or(DataError::UnknownId(id)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(self.role, entries)
    }

    /// Union of two id-disjoint manifests referencing compatible files.
    pub fn union(&self, other: &Self, role: Role) -> Result<Self, DataError> {
        let entries = self.entries.iter().chain(other.entries.iter()).cloned().collect();
        Self::new(role, entries)
    }
}

fn read_entry(entry: &ManifestEntry) -> Result<PatchRecord, DataError> {
    let (channels, h, w, image) = read_image(&entry.image)?;
    let (mh, mw, mask) = read_mask(&entry.mask)?;
    if (mh, mw) != (h, w) {
        return Err(DataError::ShapeMismatch { id: entry.id, image_hw: (h, w), mask_hw: (mh, mw) });
    }
    PatchRecord::new(entry.id, channels, h, w, image, mask)
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    role: Role,
    entries: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    id: PatchId,
    image: PathBuf,
    mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    faulty: Option<bool>,
}

/// Loads and validates a manifest.
///
/// Every entry's image and mask are decoded to check shapes and the faulty
/// flag; missing flags are filled in from the mask.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| DataError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    let base = base.canonicalize().map_err(|source| DataError::Io { path: base.clone(), source })?;

    let mut seen = BTreeSet::new();
    for e in &file.entries {
        if !seen.insert(e.id) {
            return Err(DataError::DuplicateId(e.id));
        }
    }

    let entries = file
        .entries
        .par_iter()
        .map(|e| {
            let entry = ManifestEntry {
                id: e.id,
                image: normalize(&base.join(&e.image)),
                mask: normalize(&base.join(&e.mask)),
                faulty: false,
            };
            let (_, h, w, _) = read_image(&entry.image).map_err(|err| tag(e.id, err))?;
            let (mh, mw, mask) = read_mask(&entry.mask).map_err(|err| tag(e.id, err))?;
            if (mh, mw) != (h, w) {
                return Err(DataError::ShapeMismatch { id: e.id, image_hw: (h, w), mask_hw: (mh, mw) });
            }
            let actual = mask.iter().any(|&m| m != 0);
            if let Some(declared) = e.faulty {
                if declared != actual {
                    return Err(DataError::FaultyMismatch { id: e.id, declared, actual });
                }
            }
            Ok(ManifestEntry { faulty: actual, ..entry })
        })
        .collect::<Result<Vec<_>, _>>()?;
    DatasetManifest::new(file.role, entries)
}

fn tag(id: PatchId, err: DataError) -> DataError {
    DataError::MalformedEntry { id, reason: err.to_string() }
}

/// Writes a manifest with paths relative to `path`'s directory.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| DataError::Io { path: p, source }
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io(dir))?;
    let dir = dir.canonicalize().map_err(io(dir))?;
    let entries = manifest
        .entries
        .iter()
        .map(|e| EntryFile {
            id: e.id,
            image: relative_to(&e.image, &dir),
            mask: relative_to(&e.mask, &dir),
            faulty: Some(e.faulty),
        })
        .collect();
    let file = ManifestFile { role: manifest.role, entries };
    let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

/// Lexically resolves `.` and `..` components.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let target = normalize(target);
    let base = normalize(base);
    if !target.is_absolute() {
        return target;
    }
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}
