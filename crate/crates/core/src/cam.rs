//! Positive-gradient 3D class activation maps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{score_gradient, FeatureStack, ModelConfig, Params};
use crate::preprocess::resample_volume;
use crate::tensor::{Dims, FeatureMap, Volume};

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampling {
    #[default]
    Trilinear,
    Nearest,
}

/// A finalized activation map at feature and at volume resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub raw: Volume,
    pub normalized: Volume,
    pub thresholded: Volume,
    pub volume_scale: Volume,
    pub tau: f64,
}

/// A heatmap with the class and layer it explains.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub class_index: u8,
    pub layer_name: String,
    pub alpha: Vec<f64>,
    pub heatmap: Heatmap,
}

/// `α_c`: the spatial mean of the positive part of the gradient in channel `c`.
pub fn neuron_importance(grads: &FeatureMap) -> Vec<f64> {
    let n = grads.voxels() as f64;
    (0..grads.channels())
        .map(|c| grads.channel(c).iter().map(|g| g.max(0.0)).sum::<f64>() / n)
        .collect()
}

/// `ReLU(Σ_c α_c v_c)` at every voxel.
pub fn activation_map(alpha: &[f64], features: &FeatureMap) -> Result<Volume> {
    if alpha.len() != features.channels() {
        return Err(Error::invalid(format!(
            "{} weights for {} channels",
            alpha.len(),
            features.channels()
        )));
    }
    let mut acc = vec![0.0; features.voxels()];
    for (c, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (s, v) in acc.iter_mut().zip(features.channel(c)) {
            *s += a * v;
        }
    }
    acc.iter_mut().for_each(|s| *s = s.max(0.0));
    Volume::new(features.dims(), acc)
}

/// The last convolution output before the final pooling of the 3D encoder.
pub fn select_layer(config: &ModelConfig) -> String {
    format!("enc3d.stage{}.conv", config.enc3d_stages)
}

fn threshold(v: &Volume, tau: f64) -> Volume {
    v.map(|x| if x > tau { x } else { 0.0 })
}

fn nearest(v: &Volume, target: Dims) -> Volume {
    let src = v.dims();
    let idx = |i: usize, a: usize| (((i as f64 + 0.5) * src[a] as f64 / target[a] as f64) as usize).min(src[a] - 1);
    Volume::from_fn(target, |x, y, z| v.get(idx(x, 0), idx(y, 1), idx(z, 2)))
}

/// Max-normalizes, thresholds at `tau`, upsamples to `target` and
/// thresholds again.
pub fn finalize(raw: &Volume, tau: f64, target: Dims, mode: Upsampling) -> Result<Heatmap> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1), got {tau}")));
    }
    if raw.is_empty() {
        return Err(Error::invalid("empty activation map"));
    }
    if let Some(v) = raw.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("activation map value {v} is negative or non-finite")));
    }
    let max = raw.max();
    let normalized = if max > 0.0 {
        raw.map(|v| v / max)
    } else {
        Volume::zeros(raw.dims())
    };
    let thresholded = threshold(&normalized, tau);
    let up = match mode {
        Upsampling::Trilinear => resample_volume(&thresholded, target)?,
        Upsampling::Nearest => nearest(&thresholded, target),
    };
    Ok(Heatmap {
        raw: raw.clone(),
        normalized,
        volume_scale: threshold(&up, tau),
        thresholded,
        tau,
    })
}

/// Explains `class` for a cached forward pass.
pub fn explain(
    params: &Params,
    config: &ModelConfig,
    stack: &FeatureStack,
    class: u8,
    tau: f64,
    target: Dims,
    mode: Upsampling,
) -> Result<Explanation> {
    let layer = select_layer(config);
    let grads = score_gradient(params, config, stack, class, &layer)?;
    let features = stack
        .get(&layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} is not cached")))?;
    let alpha = neuron_importance(&grads);
    let raw = activation_map(&alpha, features)?;
    Ok(Explanation {
        class_index: class,
        layer_name: layer,
        alpha,
        heatmap: finalize(&raw, tau, target, mode)?,
    })
}

/// Axial slices worth rendering: those touching the heatmap support, plus
/// the slice of its peak. A zero heatmap yields the middle slice only.
pub fn overlay_slices(heat: &Volume) -> Vec<usize> {
    let [nx, ny, nz] = heat.dims();
    if heat.max() <= 0.0 {
        return vec![nz / 2];
    }
    let plane = nx * ny;
    let mut out: Vec<usize> = (0..nz)
        .filter(|&z| heat.data()[z * plane..(z + 1) * plane].iter().any(|&v| v > 0.0))
        .collect();
    let (_, _, zmax) = heat.argmax();
    if !out.contains(&zmax) {
        out.push(zmax);
        out.sort_unstable();
    }
    out
}

fn warm(h: f64) -> [f64; 3] {
    [255.0, 255.0 * h, 0.0]
}

/// Renders one axial slice: the volume in [-1, 1] as grayscale, with
/// positive heat blended in a red-to-yellow colormap.
pub fn render_slice(volume: &Volume, heat: &Volume, z: usize, alpha: f64) -> Result<RgbImage> {
    if volume.dims() != heat.dims() {
        return Err(Error::invalid(format!(
            "volume {:?} and heatmap {:?} differ in shape",
            volume.dims(),
            heat.dims()
        )));
    }
    let [nx, ny, nz] = volume.dims();
    if z >= nz {
        return Err(Error::invalid(format!("slice {z} is outside 0..{nz}")));
    }
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let g = ((volume.get(x, y, z).clamp(-1.0, 1.0) + 1.0) * 127.5).round();
            let h = heat.get(x, y, z);
            let px = if h > 0.0 && alpha > 0.0 {
                let c = warm(h.min(1.0));
                [0, 1, 2].map(|i| ((1.0 - alpha) * g + alpha * c[i]).round().clamp(0.0, 255.0) as u8)
            } else {
                [g as u8; 3]
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Writes `<case_id>_z<index>.png` for every slice chosen by
/// [`overlay_slices`] and returns the paths.
pub fn overlay_export(
    volume: &Volume,
    heat: &Volume,
    case_id: &str,
    out_dir: &Path,
    alpha: f64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for z in overlay_slices(heat) {
        let img = render_slice(volume, heat, z, alpha)?;
        let path = out_dir.join(format!("{case_id}_z{z}.png"));
        img.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        paths.push(path);
    }
    Ok(paths)
}
