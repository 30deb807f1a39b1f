//! Pooling: axis-wise average pooling and learnable mixed max/average pooling.

use crate::error::{Error, Result};
use crate::tensor::{linear_index, Dims, FeatureMap};

fn pooled_dims(dims: Dims, factors: [usize; 3]) -> Result<Dims> {
    let mut out = [0; 3];
    for a in 0..3 {
        if factors[a] == 0 || dims[a] % factors[a] != 0 {
            return Err(Error::invalid(format!(
                "axis {a} of length {} is not divisible by pooling factor {}",
                dims[a], factors[a]
            )));
        }
        out[a] = dims[a] / factors[a];
    }
    Ok(out)
}

/// Non-overlapping average pooling with an independent factor per axis.
pub fn avg_pool(input: &FeatureMap, factors: [usize; 3]) -> Result<FeatureMap> {
    let din = input.dims();
    let dout = pooled_dims(din, factors)?;
    let scale = 1.0 / (factors[0] * factors[1] * factors[2]) as f64;
    let mut out = FeatureMap::zeros(input.channels(), dout);
    for c in 0..input.channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..din[2] {
            for y in 0..din[1] {
                let orow = linear_index(dout, 0, y / factors[1], z / factors[2]);
                let irow = linear_index(din, 0, y, z);
                for x in 0..din[0] {
                    dst[orow + x / factors[0]] += src[irow + x];
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

pub fn avg_pool_backward(grad_out: &FeatureMap, in_dims: Dims, factors: [usize; 3]) -> FeatureMap {
    let dout = grad_out.dims();
    let scale = 1.0 / (factors[0] * factors[1] * factors[2]) as f64;
    let mut grad_in = FeatureMap::zeros(grad_out.channels(), in_dims);
    for c in 0..grad_out.channels() {
        let g = grad_out.channel(c);
        let dst = grad_in.channel_mut(c);
        for z in 0..in_dims[2] {
            for y in 0..in_dims[1] {
                let orow = linear_index(dout, 0, y / factors[1], z / factors[2]);
                let irow = linear_index(in_dims, 0, y, z);
                for x in 0..in_dims[0] {
                    dst[irow + x] = g[orow + x / factors[0]] * scale;
                }
            }
        }
    }
    grad_in
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Output of a 2×2×2 mixed pooling pass, with what the backward pass needs.
#[derive(Clone, Debug)]
pub struct MixedPoolOutput {
    pub output: FeatureMap,
    pub max: FeatureMap,
    pub avg: FeatureMap,
    /// Flat input index (within the channel) of each window's maximum.
    pub argmax: Vec<u32>,
    pub lambda: f64,
}

/// `λ · maxpool + (1 − λ) · avgpool` over 2×2×2 windows, `λ = sigmoid(mix_logit)`.
/// Ties in the max resolve to the first voxel in x-fastest order.
pub fn mixed_pool(input: &FeatureMap, mix_logit: f64) -> Result<MixedPoolOutput> {
    let din = input.dims();
    let dout = pooled_dims(din, [2, 2, 2])?;
    let lambda = sigmoid(mix_logit);
    let channels = input.channels();
    let mut max = FeatureMap::zeros(channels, dout);
    let avg = avg_pool(input, [2, 2, 2])?;
    let mut argmax = vec![0u32; channels * dout.iter().product::<usize>()];
    let n_out = max.voxels();
    for c in 0..channels {
        let src = input.channel(c);
        let mdst = max.channel_mut(c);
        for z in 0..dout[2] {
            for y in 0..dout[1] {
                for x in 0..dout[0] {
                    let mut best_i = linear_index(din, 2 * x, 2 * y, 2 * z);
                    let mut best = src[best_i];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = linear_index(din, 2 * x + dx, 2 * y + dy, 2 * z + dz);
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = linear_index(dout, x, y, z);
                    mdst[o] = best;
                    argmax[c * n_out + o] = best_i as u32;
                }
            }
        }
    }
    let mut output = FeatureMap::zeros(channels, dout);
    for ((o, m), a) in output.data_mut().iter_mut().zip(max.data()).zip(avg.data()) {
        *o = lambda * m + (1.0 - lambda) * a;
    }
    Ok(MixedPoolOutput {
        output,
        max,
        avg,
        argmax,
        lambda,
    })
}

/// Returns (input gradient, gradient of the mixing logit).
pub fn mixed_pool_backward(
    pooled: &MixedPoolOutput,
    grad_out: &FeatureMap,
    in_dims: Dims,
) -> (FeatureMap, f64) {
    let lambda = pooled.lambda;
    let mut grad_in = avg_pool_backward(grad_out, in_dims, [2, 2, 2]);
    grad_in.data_mut().iter_mut().for_each(|v| *v *= 1.0 - lambda);
    let n_out = grad_out.voxels();
    for c in 0..grad_out.channels() {
        let g = grad_out.channel(c);
        let dst = grad_in.channel_mut(c);
        for o in 0..n_out {
            dst[pooled.argmax[c * n_out + o] as usize] += lambda * g[o];
        }
    }
    let dlambda: f64 = grad_out
        .data()
        .iter()
        .zip(pooled.max.data().iter().zip(pooled.avg.data()))
        .map(|(g, (m, a))| g * (m - a))
        .sum();
    (grad_in, dlambda * lambda * (1.0 - lambda))
}
