//! CT windowing, lung-mask gating and trilinear resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{ValueKind, VolumeMeta};
use crate::tensor::{Dims, Volume};

/// Display window in Hounsfield units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSetting {
    pub level: f64,
    pub width: f64,
}

impl Default for WindowSetting {
    fn default() -> Self {
        Self {
            level: -550.0,
            width: 1500.0,
        }
    }
}

impl WindowSetting {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite() && self.level.is_finite()) {
            return Err(Error::invalid(format!(
                "window needs a finite level and positive width, got level {} width {}",
                self.level, self.width
            )));
        }
        Ok(())
    }
}

/// A normalized, mask-gated volume with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LungVolume {
    pub data: Volume,
    pub meta: VolumeMeta,
}

/// Clamps to `[level - width/2, level + width/2]` and maps that range
/// affinely onto [-1, 1].
pub fn apply_lung_window(ct: &Volume, w: WindowSetting) -> Result<Volume> {
    w.validate()?;
    if let Some(i) = ct.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite H.U. value at voxel {i}")));
    }
    let half = w.width / 2.0;
    Ok(ct.map(|v| ((v - w.level) / half).clamp(-1.0, 1.0)))
}

/// Zeroes every voxel outside the mask.
pub fn apply_mask(v_hat: &Volume, mask: &Volume) -> Result<Volume> {
    if v_hat.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "volume {:?} and mask {:?} differ in shape",
            v_hat.dims(),
            mask.dims()
        )));
    }
    if let Some(m) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid(format!("mask value {m} is not 0 or 1")));
    }
    let data = v_hat.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect();
    Volume::new(v_hat.dims(), data)
}

/// Source coordinate and interpolation weight for each output index along
/// one axis, sampling at voxel centres with edge clamping.
fn axis_samples(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Trilinear resampling of a raw volume to `target`.
pub fn resample_volume(v: &Volume, target: Dims) -> Result<Volume> {
    let src = v.dims();
    if v.is_empty() {
        return Err(Error::invalid("cannot resample an empty volume"));
    }
    if target.iter().any(|&t| t == 0) {
        return Err(Error::invalid(format!("target shape {target:?} has a zero axis")));
    }
    if src == target {
        return Ok(v.clone());
    }
    let [sx, sy, sz] = [0, 1, 2].map(|a| axis_samples(src[a], target[a]));
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    Ok(Volume::from_fn(target, |x, y, z| {
        let (x0, x1, tx) = sx[x];
        let (y0, y1, ty) = sy[y];
        let (z0, z1, tz) = sz[z];
        let row = |yy: usize, zz: usize| lerp(v.get(x0, yy, zz), v.get(x1, yy, zz), tx);
        let plane = |zz: usize| lerp(row(y0, zz), row(y1, zz), ty);
        lerp(plane(z0), plane(z1), tz)
    }))
}

/// Resamples a lung volume, scaling the voxel spacing to keep the physical
/// extent.
pub fn resample(v: &LungVolume, target: Dims) -> Result<LungVolume> {
    let data = resample_volume(&v.data, target)?;
    let src = v.data.dims();
    let mut meta = v.meta.clone();
    meta.shape = target;
    for a in 0..3 {
        meta.spacing[a] = v.meta.spacing[a] * src[a] as f64 / target[a] as f64;
    }
    Ok(LungVolume { data, meta })
}

/// Window, mask, then resample a CT volume into the model input.
pub fn preprocess(
    ct: &Volume,
    ct_meta: &VolumeMeta,
    mask: &Volume,
    window: WindowSetting,
    target: Dims,
) -> Result<LungVolume> {
    let gated = apply_mask(&apply_lung_window(ct, window)?, mask)?;
    let mut meta = VolumeMeta::new(gated.dims(), ct_meta.spacing, ValueKind::Normalized, ct_meta.case_id.clone());
    meta.label = ct_meta.label;
    resample(&LungVolume { data: gated, meta }, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_midpoint_and_clamps() {
        let ct = Volume::new([4, 1, 1], vec![-550.0, -2000.0, 500.0, -925.0]).unwrap();
        let w = apply_lung_window(&ct, WindowSetting::default()).unwrap();
        assert_eq!(w.data(), &[0.0, -1.0, 1.0, -0.5]);
    }

    #[test]
    fn window_rejects_nan() {
        let ct = Volume::new([2, 1, 1], vec![0.0, f64::NAN]).unwrap();
        assert!(apply_lung_window(&ct, WindowSetting::default()).is_err());
        let bad = WindowSetting { level: 0.0, width: 0.0 };
        assert!(apply_lung_window(&Volume::zeros([1, 1, 1]), bad).is_err());
    }

    #[test]
    fn mask_rules() {
        let v = Volume::filled([2, 2, 1], 0.7);
        let checker = Volume::from_fn([2, 2, 1], |x, y, _| ((x + y) % 2) as f64);
        let g = apply_mask(&v, &checker).unwrap();
        assert_eq!(g.data(), &[0.0, 0.7, 0.7, 0.0]);
        assert_eq!(apply_mask(&g, &checker).unwrap(), g);
        assert_eq!(apply_mask(&v, &Volume::filled([2, 2, 1], 1.0)).unwrap(), v);
        assert!(apply_mask(&v, &Volume::filled([2, 2, 1], 0.5)).is_err());
        assert!(apply_mask(&v, &Volume::zeros([2, 1, 1])).is_err());
    }

    #[test]
    fn identity_and_constant_resampling() {
        let v = Volume::from_fn([5, 3, 2], |x, y, z| (x * 7 + y + z * 3) as f64);
        assert_eq!(resample_volume(&v, [5, 3, 2]).unwrap(), v);
        let c = Volume::filled([5, 3, 2], 0.25);
        let r = resample_volume(&c, [9, 2, 7]).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn resample_spacing_follows_extent() {
        let meta = VolumeMeta::new([8, 8, 4], [1.0, 1.0, 2.0], ValueKind::Normalized, "c");
        let lv = LungVolume {
            data: Volume::zeros([8, 8, 4]),
            meta,
        };
        let r = resample(&lv, [4, 16, 4]).unwrap();
        assert_eq!(r.meta.spacing, [2.0, 0.5, 2.0]);
        assert_eq!(r.meta.shape, [4, 16, 4]);
    }

    proptest! {
        #[test]
        fn window_range_and_monotone(a in -5000.0f64..5000.0, d in 0.0f64..3000.0) {
            let ct = Volume::new([2, 1, 1], vec![a, a + d]).unwrap();
            let w = apply_lung_window(&ct, WindowSetting::default()).unwrap();
            prop_assert!(w.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(w.data()[0] <= w.data()[1]);
        }

        #[test]
        fn resample_stays_within_bounds(
            seed in 0u64..1000,
            tx in 1usize..12, ty in 1usize..12, tz in 1usize..6,
        ) {
            let v = Volume::from_fn([6, 5, 4], |x, y, z| (seed as f64 + x as f64 * 1.7 + y as f64 * 0.9 + z as f64 * 2.3).sin());
            let r = resample_volume(&v, [tx, ty, tz]).unwrap();
            prop_assert!(r.min() >= v.min() - 1e-12);
            prop_assert!(r.max() <= v.max() + 1e-12);
        }
    }
}
