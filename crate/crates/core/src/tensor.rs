//! Dense volumetric tensors.
//!
//! Every tensor in the crate uses the same memory order: x varies fastest,
//! then y, then z, then channel. A voxel `(x, y, z)` of a volume with dims
//! `[nx, ny, nz]` lives at `x + nx * (y + ny * z)`.

use crate::error::{Error, Result};

/// Voxel extents along x, y and z.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// A single-channel 3D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::invalid(format!(
                "volume dims {dims:?} need {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "volume dims must be positive");
        Self {
            dims,
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = value;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Position of the first maximal voxel.
    pub fn argmax(&self) -> (usize, usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        let nx = self.dims[0];
        let ny = self.dims[1];
        (best % nx, (best / nx) % ny, best / (nx * ny))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A stack of equally-shaped channels, `C × X × Y × Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "feature map needs positive extents, got {channels} channels of {dims:?}"
            )));
        }
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::invalid(format!(
                "feature map {channels}x{dims:?} needs {} values, got {}",
                channels * voxel_count(dims),
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    pub fn from_volume(volume: Volume) -> Self {
        Self {
            channels: 1,
            dims: volume.dims,
            data: volume.data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// `[channels, x, y, z]`
    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_volume(&self, c: usize) -> Volume {
        Volume {
            dims: self.dims,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Stacks maps along the channel axis, in argument order.
    pub fn concat(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one feature map"))?;
        let dims = first.dims;
        if let Some(bad) = parts.iter().find(|p| p.dims != dims) {
            return Err(Error::invalid(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                dims, bad.dims
            )));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * voxel_count(dims));
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(FeatureMap {
            channels,
            dims,
            data,
        })
    }

    /// Splits channels into consecutive blocks of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Vec<FeatureMap> {
        assert_eq!(sizes.iter().sum::<usize>(), self.channels);
        let n = self.voxels();
        let mut start = 0;
        sizes
            .iter()
            .map(|&c| {
                let part = FeatureMap {
                    channels: c,
                    dims: self.dims,
                    data: self.data[start * n..(start + c) * n].to_vec(),
                };
                start += c;
                part
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_fastest_layout() {
        let v = Volume::from_fn([3, 2, 2], |x, y, z| (x + 10 * y + 100 * z) as f64);
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[3], 10.0);
        assert_eq!(v.data()[6], 100.0);
        assert_eq!(v.get(2, 1, 1), 112.0);
        assert_eq!(v.argmax(), (2, 1, 1));
    }

    #[test]
    fn concat_then_split_restores_blocks() {
        let a = FeatureMap::new(1, [2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = FeatureMap::new(2, [2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = FeatureMap::concat(&[&a, &b]).unwrap();
        assert_eq!(c.channels(), 3);
        assert_eq!(c.channel(0), a.channel(0));
        let parts = c.split(&[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Volume::new([2, 2, 2], vec![0.0; 7]).is_err());
        assert!(FeatureMap::new(2, [1, 1, 1], vec![0.0; 3]).is_err());
        let a = FeatureMap::zeros(1, [2, 1, 1]);
        let b = FeatureMap::zeros(1, [1, 2, 1]);
        assert!(FeatureMap::concat(&[&a, &b]).is_err());
    }
}
