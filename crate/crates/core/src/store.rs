//! On-disk persistence of volumes, annotations and dataset manifests.
//!
//! A volume named `<name>` occupies two files:
//!
//! * `<name>.f32raw`: little-endian IEEE-754 binary32 voxels, x fastest;
//! * `<name>.meta.json`: a sidecar with `shape`, `spacing_mm`, `value_kind`,
//!   `case_id` and `label`.
//!
//! The payload is single precision, so values are rounded to the nearest
//! `f32` on write; anything that already is an `f32` round-trips exactly.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{voxel_count, Dims, Volume};

pub const PAYLOAD_EXT: &str = ".f32raw";
pub const SIDECAR_EXT: &str = ".meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Hounsfield,
    Normalized,
    Mask,
    Heatmap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub shape: Dims,
    #[serde(rename = "spacing_mm")]
    pub spacing: [f64; 3],
    pub value_kind: ValueKind,
    pub case_id: String,
    /// 1 = typical, 0 = non-typical; only set on classification cases.
    pub label: Option<u8>,
}

impl VolumeMeta {
    pub fn new(shape: Dims, spacing: [f64; 3], value_kind: ValueKind, case_id: impl Into<String>) -> Self {
        Self {
            shape,
            spacing,
            value_kind,
            case_id: case_id.into(),
            label: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("shape components must be >= 1: {:?}", self.shape)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("spacing must be positive: {:?}", self.spacing)));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::invalid(format!("label must be 0 or 1, got {l}")));
            }
        }
        Ok(())
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

/// Payload and sidecar paths for a volume name. A trailing `.f32raw` on the
/// given path is accepted and ignored.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.to_str() {
        Some(s) if s.ends_with(PAYLOAD_EXT) => PathBuf::from(&s[..s.len() - PAYLOAD_EXT.len()]),
        _ => path.to_path_buf(),
    };
    (with_suffix(&stem, PAYLOAD_EXT), with_suffix(&stem, SIDECAR_EXT))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn write_volume(data: &Volume, meta: &VolumeMeta, path: impl AsRef<Path>) -> Result<()> {
    meta.validate()?;
    if data.dims() != meta.shape {
        return Err(Error::invalid(format!(
            "tensor shape {:?} differs from meta shape {:?}",
            data.dims(),
            meta.shape
        )));
    }
    let (payload_path, sidecar_path) = volume_paths(path.as_ref());
    ensure_parent(&payload_path)?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    let header = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&sidecar_path, header + "\n").map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

pub fn read_volume_meta(path: impl AsRef<Path>) -> Result<VolumeMeta> {
    let (_, sidecar_path) = volume_paths(path.as_ref());
    let text = fs::read_to_string(&sidecar_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(format!("missing sidecar {}", sidecar_path.display()))
        } else {
            Error::io(&sidecar_path, e)
        }
    })?;
    let meta: VolumeMeta = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", sidecar_path.display())))?;
    meta.validate()
        .map_err(|e| Error::format(format!("{}: {e}", sidecar_path.display())))?;
    Ok(meta)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume, VolumeMeta)> {
    let meta = read_volume_meta(path.as_ref())?;
    let (payload_path, _) = volume_paths(path.as_ref());
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = voxel_count(meta.shape) * 4;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{} holds {} bytes but the sidecar shape {:?} needs {expected}",
            payload_path.display(),
            bytes.len(),
            meta.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Volume::new(meta.shape, data)?, meta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lobe {
    #[serde(rename = "LUL")]
    LeftUpper,
    #[serde(rename = "LLL")]
    LeftLower,
    #[serde(rename = "RUL")]
    RightUpper,
    #[serde(rename = "RML")]
    RightMiddle,
    #[serde(rename = "RLL")]
    RightLower,
}

impl Lobe {
    pub const ALL: [Lobe; 5] = [
        Lobe::LeftUpper,
        Lobe::LeftLower,
        Lobe::RightUpper,
        Lobe::RightMiddle,
        Lobe::RightLower,
    ];

    pub fn abbreviation(self) -> &'static str {
        match self {
            Lobe::LeftUpper => "LUL",
            Lobe::LeftLower => "LLL",
            Lobe::RightUpper => "RUL",
            Lobe::RightMiddle => "RML",
            Lobe::RightLower => "RLL",
        }
    }

    /// Label value used in lobe maps (0 is reserved for "outside the lung").
    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Lobe> {
        Lobe::ALL.get((code as usize).checked_sub(1)?).copied()
    }

    pub fn is_lower(self) -> bool {
        matches!(self, Lobe::LeftLower | Lobe::RightLower)
    }
}

impl std::fmt::Display for Lobe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.abbreviation())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    Ggo,
    Consolidation,
}

/// An ellipsoidal lesion in voxel coordinates of its CT volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    pub lobe: Lobe,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub kind: LesionKind,
}

impl LesionAnnotation {
    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid(format!("lesion radii must be positive: {:?}", self.radii)));
        }
        for a in 0..3 {
            let c = self.center[a];
            if !(c >= 0.0 && c <= (dims[a] - 1) as f64) {
                return Err(Error::invalid(format!(
                    "lesion center {:?} is outside volume {dims:?}",
                    self.center
                )));
            }
        }
        Ok(())
    }

    /// Normalized ellipsoidal radius of a voxel centre; `< 1` is inside.
    pub fn normalized_radius(&self, x: usize, y: usize, z: usize) -> f64 {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.normalized_radius(x, y, z) < 1.0
    }

    /// Every voxel of `dims` inside the lesion, as `(x, y, z)`.
    pub fn support(&self, dims: Dims) -> Vec<(usize, usize, usize)> {
        let range = |a: usize| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize).min(dims[a] - 1);
            lo..=hi
        };
        let mut out = Vec::new();
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    if self.contains(x, y, z) {
                        out.push((x, y, z));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One case in a manifest. Volume and mask paths are volume names (no
/// extension), relative to the directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub label: u8,
    #[serde(default)]
    pub lesions: Vec<LesionAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, seed: u64) -> Self {
        Self {
            split,
            seed,
            entries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::invalid(format!("duplicate case_id {:?}", e.case_id)));
            }
            if e.label > 1 {
                return Err(Error::invalid(format!("case {} has label {}", e.case_id, e.label)));
            }
        }
        Ok(())
    }

    pub fn find(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    write_json(manifest, path.as_ref())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(path.as_ref())?;
    manifest.validate()?;
    Ok(manifest)
}

/// A manifest loaded together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct ManifestFile {
    pub manifest: DatasetManifest,
    pub base_dir: PathBuf,
}

impl ManifestFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = read_manifest(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, base_dir })
    }

    pub fn volume_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.volume)
    }

    pub fn mask_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.mask)
    }

    pub fn read_case(&self, entry: &ManifestEntry) -> Result<(Volume, VolumeMeta, Volume)> {
        let (ct, meta) = read_volume(self.volume_path(entry))?;
        let (mask, _) = read_volume(self.mask_path(entry))?;
        Ok((ct, meta, mask))
    }
}

/// Top-level `manifest.json` of a generated dataset: where each split's
/// manifest lives, relative to the index file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub splits: BTreeMap<String, PathBuf>,
}

impl DatasetIndex {
    pub fn split_path(&self, index_path: &Path, split: Split) -> Result<PathBuf> {
        let rel = self.splits.get(split.name()).ok_or_else(|| {
            Error::format(format!("dataset index has no {} split", split.name()))
        })?;
        Ok(index_path.parent().unwrap_or(Path::new("")).join(rel))
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}
