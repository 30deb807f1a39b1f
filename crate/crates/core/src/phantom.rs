//! Synthetic lung phantoms with annotated lesions.
//!
//! Voxel axes: x runs toward the patient's left (the right lung sits at
//! `x < nx/2`), y runs posterior, z runs superior.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{
    write_json, write_manifest, DatasetIndex, DatasetManifest, LesionAnnotation, LesionKind, Lobe, ManifestEntry,
    Split, ValueKind, VolumeMeta,
};
use crate::tensor::{linear_index, Dims, Volume};

pub const AIR_HU: f64 = -1000.0;
pub const TISSUE_HU: f64 = 40.0;
pub const PARENCHYMA_HU: f64 = -850.0;
pub const GGO_HU: [f64; 2] = [-600.0, -300.0];
pub const CONSOLIDATION_HU: [f64; 2] = [-100.0, 50.0];

/// Probability that a lesion is placed in a lower lobe's posterior half.
const DEPENDENT_BIAS: f64 = 0.7;
const GGO_PROBABILITY: f64 = 0.6;
/// Normalized radius up to which a lesion has its full intensity.
const FLAT_CORE: f64 = 0.7;
const PLACEMENT_ATTEMPTS: usize = 200;

fn default_spacing() -> [f64; 3] {
    [3.5, 3.5, 6.0]
}

fn default_fractions() -> [f64; 2] {
    [0.64, 0.16]
}

/// Parameters of a phantom dataset. Also the schema of `gen --spec` files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub volume_shape: Dims,
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub n_typical: usize,
    pub n_nontypical: usize,
    /// Inclusive range of lesions per typical case.
    pub lesion_count_range: [usize; 2],
    pub lesion_radius_range_mm: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
    /// Train and validation fractions; the remainder is the test split.
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            volume_shape: [96, 96, 48],
            spacing_mm: default_spacing(),
            n_typical: 50,
            n_nontypical: 50,
            lesion_count_range: [1, 4],
            lesion_radius_range_mm: [12.0, 24.0],
            noise_sigma: 20.0,
            seed: 0,
            split_fractions: default_fractions(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.iter().any(|&d| d < 8) {
            return Err(Error::invalid(format!(
                "volume_shape {:?} must be at least 8 on every axis",
                self.volume_shape
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("spacing_mm must be positive"));
        }
        let [lo, hi] = self.lesion_count_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!(
                "lesion_count_range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
            )));
        }
        let [rlo, rhi] = self.lesion_radius_range_mm;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::invalid(format!(
                "lesion_radius_range_mm [{rlo}, {rhi}] must be positive and ordered"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        let [ft, fv] = self.split_fractions;
        if !(ft >= 0.0 && fv >= 0.0 && ft + fv <= 1.0) {
            return Err(Error::invalid(format!(
                "split_fractions [{ft}, {fv}] must be non-negative and sum to at most 1"
            )));
        }
        Ok(())
    }

    pub fn total_cases(&self) -> usize {
        self.n_typical + self.n_nontypical
    }

    /// Case counts of the train, val and test splits.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.total_cases();
        let train = (self.split_fractions[0] * n as f64 + 1e-9).floor() as usize;
        let val = ((self.split_fractions[1] * n as f64 + 1e-9).floor() as usize).min(n - train);
        [train, val, n - train - val]
    }

    /// Label of every case index: `n_typical` ones shuffled among zeros.
    pub fn labels(&self) -> Vec<u8> {
        let mut labels = vec![1u8; self.n_typical];
        labels.resize(self.total_cases(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        labels.shuffle(&mut rng);
        labels
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// One generated case.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    /// Hounsfield units.
    pub volume: Volume,
    pub mask: Volume,
    pub label: u8,
    pub lesions: Vec<LesionAnnotation>,
}

/// Per-voxel lobe codes (0 outside the lung, otherwise [`Lobe::code`]).
#[derive(Clone, Debug, PartialEq)]
pub struct LobeMap {
    pub dims: Dims,
    pub labels: Vec<u8>,
}

impl LobeMap {
    pub fn get(&self, x: usize, y: usize, z: usize) -> Option<Lobe> {
        Lobe::from_code(self.labels[linear_index(self.dims, x, y, z)])
    }

    pub fn count(&self, lobe: Lobe) -> usize {
        self.labels.iter().filter(|&&l| l == lobe.code()).count()
    }
}

/// 6-connected components of the mask, largest first.
fn components(mask: &Volume) -> Vec<Vec<usize>> {
    let d = mask.dims();
    let data = mask.data();
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    for start in 0..data.len() {
        if data[start] == 0.0 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y, z) = (i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1]));
            let mut visit = |j: usize| {
                if data[j] != 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < d[0] {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - d[0]);
            }
            if y + 1 < d[1] {
                visit(i + d[0]);
            }
            if z > 0 {
                visit(i - d[0] * d[1]);
            }
            if z + 1 < d[2] {
                visit(i + d[0] * d[1]);
            }
        }
        out.push(comp);
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.len()));
    out
}

/// Splits a two-lung mask into five lobes. The left lung is cut by the
/// axial plane through its centroid; the right lung into thirds of its
/// z extent.
pub fn lobe_partition(mask: &Volume) -> Result<LobeMap> {
    let d = mask.dims();
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::invalid("lobe partition of an empty mask"));
    }
    let comps = components(mask);
    if comps.len() != 2 {
        return Err(Error::invalid(format!(
            "lung mask must have exactly 2 connected components, found {}",
            comps.len()
        )));
    }
    let plane = d[0] * d[1];
    let mean_x = |c: &[usize]| c.iter().map(|&i| (i % d[0]) as f64).sum::<f64>() / c.len() as f64;
    let (right, left) = if mean_x(&comps[0]) < mean_x(&comps[1]) {
        (&comps[0], &comps[1])
    } else {
        (&comps[1], &comps[0])
    };
    let mut labels = vec![0u8; mask.len()];

    let zc = left.iter().map(|&i| (i / plane) as f64).sum::<f64>() / left.len() as f64;
    for &i in left {
        let lobe = if ((i / plane) as f64) < zc {
            Lobe::LeftLower
        } else {
            Lobe::LeftUpper
        };
        labels[i] = lobe.code();
    }

    let zmin = right.iter().map(|&i| i / plane).min().expect("non-empty");
    let zmax = right.iter().map(|&i| i / plane).max().expect("non-empty");
    let n = zmax - zmin + 1;
    for &i in right {
        let lobe = match 3 * (i / plane - zmin) / n {
            0 => Lobe::RightLower,
            1 => Lobe::RightMiddle,
            _ => Lobe::RightUpper,
        };
        labels[i] = lobe.code();
    }
    Ok(LobeMap { dims: d, labels })
}

/// Ellipsoid semi-axes (voxels) and centres of the two lungs.
struct LungGeometry {
    centers: [[f64; 3]; 2],
    radii: [[f64; 3]; 2],
}

impl LungGeometry {
    fn sample(dims: Dims, rng: &mut ChaCha8Rng) -> Self {
        let [nx, ny, nz] = dims.map(|v| v as f64);
        let mut jitter = || rng.gen_range(0.92..1.08);
        let radii = [
            [0.15 * nx * jitter(), 0.29 * ny * jitter(), 0.42 * nz * jitter()],
            [0.14 * nx * jitter(), 0.29 * ny * jitter(), 0.40 * nz * jitter()],
        ];
        let cy = 0.52 * ny;
        let cz = 0.5 * nz - 0.5;
        Self {
            centers: [[0.30 * nx - 0.5, cy, cz], [0.70 * nx - 0.5, cy, cz]],
            radii,
        }
    }

    fn inside(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..2).any(|l| {
            (0..3)
                .map(|a| ((p[a] - self.centers[l][a]) / self.radii[l][a]).powi(2))
                .sum::<f64>()
                < 1.0
        })
    }
}

fn body_contains(dims: Dims, x: usize, y: usize) -> bool {
    let [nx, ny, _] = dims.map(|v| v as f64);
    let dx = (x as f64 - (nx / 2.0 - 0.5)) / (0.47 * nx);
    let dy = (y as f64 - (ny / 2.0 - 0.5)) / (0.42 * ny);
    dx * dx + dy * dy < 1.0
}

/// Lesion weight as a function of normalized radius: 1 in the core, a
/// cosine ramp to 0 at the boundary.
pub fn lesion_profile(rho: f64) -> f64 {
    if rho <= FLAT_CORE {
        1.0
    } else if rho < 1.0 {
        0.5 * (1.0 + (std::f64::consts::PI * (rho - FLAT_CORE) / (1.0 - FLAT_CORE)).cos())
    } else {
        0.0
    }
}

fn place_lesion(
    spec: &PhantomSpec,
    mask: &Volume,
    lobes: &LobeMap,
    lung_center_y: f64,
    rng: &mut ChaCha8Rng,
) -> Option<LesionAnnotation> {
    let dims = spec.volume_shape;
    let dependent = rng.gen_bool(DEPENDENT_BIAS);
    let candidates: Vec<(usize, usize, usize)> = (0..mask.len())
        .filter_map(|i| {
            let lobe = Lobe::from_code(lobes.labels[i])?;
            let (x, y, z) = (i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]));
            if dependent && !(lobe.is_lower() && y as f64 >= lung_center_y) {
                return None;
            }
            Some((x, y, z))
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let kind = if rng.gen_bool(GGO_PROBABILITY) {
        LesionKind::Ggo
    } else {
        LesionKind::Consolidation
    };
    let [rlo, rhi] = spec.lesion_radius_range_mm;
    for attempt in 0..PLACEMENT_ATTEMPTS {
        // Shrink gradually so crowded lobes still admit a lesion.
        let shrink = 1.0 - 0.6 * attempt as f64 / PLACEMENT_ATTEMPTS as f64;
        let r_mm = rng.gen_range(rlo..=rhi) * shrink;
        let mut radii = [0.0; 3];
        for a in 0..3 {
            radii[a] = (r_mm * rng.gen_range(0.8..1.2) / spec.spacing_mm[a]).max(1.0);
        }
        let (x, y, z) = candidates[rng.gen_range(0..candidates.len())];
        let lesion = LesionAnnotation {
            lobe: lobes.get(x, y, z).expect("candidate is in the lung"),
            center: [x as f64, y as f64, z as f64],
            radii,
            kind,
        };
        let contained = lesion
            .support(dims)
            .iter()
            .all(|&(x, y, z)| mask.get(x, y, z) == 1.0);
        if contained {
            return Some(lesion);
        }
    }
    None
}

/// Generates case `index`. The result depends only on `(spec, index, label)`.
pub fn generate_case(spec: &PhantomSpec, index: usize, label: u8) -> Result<PhantomCase> {
    spec.validate()?;
    if index >= spec.total_cases() {
        return Err(Error::invalid(format!(
            "case index {index} is out of range for {} cases",
            spec.total_cases()
        )));
    }
    if label > 1 {
        return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
    }
    let dims = spec.volume_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let lungs = LungGeometry::sample(dims, &mut rng);
    let mask = Volume::from_fn(dims, |x, y, z| f64::from(u8::from(lungs.inside(x, y, z))));
    let mut volume = Volume::from_fn(dims, |x, y, z| {
        if mask.get(x, y, z) == 1.0 {
            PARENCHYMA_HU
        } else if body_contains(dims, x, y) {
            TISSUE_HU
        } else {
            AIR_HU
        }
    });

    let mut lesions = Vec::new();
    if label == 1 {
        let lobes = lobe_partition(&mask)?;
        let [lo, hi] = spec.lesion_count_range;
        let count = rng.gen_range(lo..=hi);
        let mut guard = 0;
        while lesions.len() < count {
            guard += 1;
            if guard > 10 * count {
                return Err(Error::invalid(format!(
                    "could not place {count} lesions inside the lungs of case {index}; lesion radii are too large"
                )));
            }
            if let Some(l) = place_lesion(spec, &mask, &lobes, lungs.centers[0][1], &mut rng) {
                lesions.push(l);
            }
        }
        for lesion in &lesions {
            let range = match lesion.kind {
                LesionKind::Ggo => GGO_HU,
                LesionKind::Consolidation => CONSOLIDATION_HU,
            };
            let hu = rng.gen_range(range[0]..=range[1]);
            for (x, y, z) in lesion.support(dims) {
                let w = lesion_profile(lesion.normalized_radius(x, y, z));
                let v = volume.get(x, y, z);
                // Overlapping lesions keep the denser value.
                volume.set(x, y, z, v.max((1.0 - w) * PARENCHYMA_HU + w * hu));
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        volume.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    Ok(PhantomCase {
        case_id: case_id(index),
        volume,
        mask,
        label,
        lesions,
    })
}

/// Volume names of a case inside the `cases/` directory.
pub fn case_paths(out_dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let cases = out_dir.join("cases");
    (cases.join(format!("{id}_ct")), cases.join(format!("{id}_mask")))
}

/// Writes every case plus one manifest per split and a top-level
/// `manifest.json` index.
pub fn generate_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    let labels = spec.labels();
    let cases_dir = out_dir.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;

    let entries: Vec<ManifestEntry> = (0..spec.total_cases())
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let case = generate_case(spec, i, labels[i])?;
            let (ct_path, mask_path) = case_paths(out_dir, &case.case_id);
            let meta = VolumeMeta::new(spec.volume_shape, spec.spacing_mm, ValueKind::Hounsfield, &case.case_id)
                .with_label(case.label);
            crate::store::write_volume(&case.volume, &meta, &ct_path)?;
            let mmeta = VolumeMeta::new(spec.volume_shape, spec.spacing_mm, ValueKind::Mask, &case.case_id);
            crate::store::write_volume(&case.mask, &mmeta, &mask_path)?;
            let rel = |p: &Path| Path::new("..").join("cases").join(p.file_name().expect("file name"));
            Ok(ManifestEntry {
                case_id: case.case_id,
                volume: rel(&ct_path),
                mask: rel(&mask_path),
                label: case.label,
                lesions: case.lesions,
            })
        })
        .collect::<Result<_>>()?;

    let sizes = spec.split_sizes();
    let mut index = DatasetIndex {
        seed: spec.seed,
        splits: Default::default(),
    };
    let mut start = 0;
    for (split, n) in Split::ALL.into_iter().zip(sizes) {
        let mut manifest = DatasetManifest::new(split, spec.seed);
        manifest.entries = entries[start..start + n].to_vec();
        start += n;
        let rel = PathBuf::from(split.name()).join("manifest.json");
        let path = out_dir.join(&rel);
        let dir = path.parent().expect("has parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(&manifest, &path)?;
        index.splits.insert(split.name().to_string(), rel);
    }
    write_json(&index, &out_dir.join("manifest.json"))?;
    write_json(spec, &out_dir.join("phantom_spec.json"))?;
    Ok(index)
}
