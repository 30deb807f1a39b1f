//! Channel and spatial attention for volumetric feature maps.
//!
//! Channel gate: `a_c` and `b_c` are the spatial mean and max of channel `c`;
//! `m = σ(W1ᵀ ρ(W0ᵀ a) + W1ᵀ ρ(W0ᵀ b))` with one shared pair `(W0, W1)`.
//! Spatial gate: `A`, `B` are the channel mean and max of `F' = m ⊙ F`;
//! `M = σ(K * [A, B] + bias)` with a 3×3×3 kernel and zero padding.
//! Gated output: `F''_c = M ⊙ F'_c`.

use crate::error::{Error, Result};
use crate::nn::conv::{conv_backward, conv_forward, ConvGeometry};
use crate::nn::pool::sigmoid;
use crate::tensor::{FeatureMap, Volume};

pub const SPATIAL_KERNEL_LEN: usize = 2 * 27;

pub fn spatial_geometry() -> ConvGeometry {
    ConvGeometry::cubic(2, 1, 3, 1)
}

/// Learnable weights of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub channels: usize,
    pub hidden: usize,
    /// `W0`, `channels × hidden`, row-major.
    pub w0: Vec<f64>,
    /// `W1`, `hidden × channels`, row-major.
    pub w1: Vec<f64>,
    /// `[A, B] → M` kernel, laid out `[in=2][kz][ky][kx]`.
    pub spatial_kernel: Vec<f64>,
    pub spatial_bias: f64,
}

impl AttentionWeights {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(Self {
            channels,
            hidden,
            w0: vec![0.0; channels * hidden],
            w1: vec![0.0; hidden * channels],
            spatial_kernel: vec![0.0; SPATIAL_KERNEL_LEN],
            spatial_bias: 0.0,
        })
    }
}

pub fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::invalid(format!(
            "channel count {channels} is not divisible by reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

/// Per-channel spatial mean, spatial max, and the flat position of the max.
pub fn channel_descriptors(features: &FeatureMap) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = features.voxels() as f64;
    let mut a = Vec::with_capacity(features.channels());
    let mut b = Vec::with_capacity(features.channels());
    let mut arg = Vec::with_capacity(features.channels());
    for c in 0..features.channels() {
        let ch = features.channel(c);
        a.push(ch.iter().sum::<f64>() / n);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        b.push(ch[best]);
        arg.push(best);
    }
    (a, b, arg)
}

fn mlp_hidden(w0: &[f64], input: &[f64], hidden: usize) -> Vec<f64> {
    let mut h = vec![0.0; hidden];
    for (c, &x) in input.iter().enumerate() {
        for (j, hj) in h.iter_mut().enumerate() {
            *hj += w0[c * hidden + j] * x;
        }
    }
    h
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// The channel attention vector `m ∈ (0, 1)^C`.
pub fn channel_attention(features: &FeatureMap, weights: &AttentionWeights) -> Result<Vec<f64>> {
    Ok(channel_gate(features, weights)?.m)
}

#[derive(Clone, Debug)]
struct ChannelGate {
    a: Vec<f64>,
    b: Vec<f64>,
    b_arg: Vec<usize>,
    h_a: Vec<f64>,
    h_b: Vec<f64>,
    m: Vec<f64>,
}

fn channel_gate(features: &FeatureMap, w: &AttentionWeights) -> Result<ChannelGate> {
    let c = features.channels();
    if c != w.channels {
        return Err(Error::invalid(format!(
            "attention block built for {} channels applied to {c}",
            w.channels
        )));
    }
    if w.w0.len() != c * w.hidden || w.w1.len() != w.hidden * c {
        return Err(Error::invalid("attention MLP weights have the wrong shape"));
    }
    let (a, b, b_arg) = channel_descriptors(features);
    let h_a = mlp_hidden(&w.w0, &a, w.hidden);
    let h_b = mlp_hidden(&w.w0, &b, w.hidden);
    let s: Vec<f64> = relu(&h_a).iter().zip(relu(&h_b)).map(|(x, y)| x + y).collect();
    let m = (0..c)
        .map(|ch| {
            let z: f64 = (0..w.hidden).map(|j| w.w1[j * c + ch] * s[j]).sum();
            sigmoid(z)
        })
        .collect();
    Ok(ChannelGate {
        a,
        b,
        b_arg,
        h_a,
        h_b,
        m,
    })
}

/// Channel-wise mean and max maps, stacked as a 2-channel tensor, plus the
/// argmax channel of every voxel.
fn channel_pool(f_prime: &FeatureMap) -> (FeatureMap, Vec<u32>) {
    let n = f_prime.voxels();
    let c = f_prime.channels();
    let mut pooled = FeatureMap::zeros(2, f_prime.dims());
    let mut arg = vec![0u32; n];
    {
        let data = pooled.data_mut();
        let (mean, max) = data.split_at_mut(n);
        max.copy_from_slice(f_prime.channel(0));
        mean.copy_from_slice(f_prime.channel(0));
        for ch in 1..c {
            let src = f_prime.channel(ch);
            for i in 0..n {
                mean[i] += src[i];
                if src[i] > max[i] {
                    max[i] = src[i];
                    arg[i] = ch as u32;
                }
            }
        }
        let inv = 1.0 / c as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
    }
    (pooled, arg)
}

/// The spatial attention map `M ∈ (0, 1)^{W×H×D}` for channel-gated features.
pub fn spatial_attention(f_prime: &FeatureMap, weights: &AttentionWeights) -> Result<Volume> {
    let (pooled, _) = channel_pool(f_prime);
    spatial_map(&pooled, weights)
}

fn spatial_map(pooled: &FeatureMap, w: &AttentionWeights) -> Result<Volume> {
    let logits = conv_forward(&spatial_geometry(), &w.spatial_kernel, &[w.spatial_bias], pooled)?;
    Volume::new(logits.dims(), logits.data().iter().map(|&v| sigmoid(v)).collect())
}

/// `F''_c = M ⊙ (m_c F_c)`.
pub fn apply_attention(features: &FeatureMap, m: &[f64], spatial: &Volume) -> Result<FeatureMap> {
    let f_prime = scale_channels(features, m)?;
    gate_spatially(&f_prime, spatial)
}

fn scale_channels(features: &FeatureMap, m: &[f64]) -> Result<FeatureMap> {
    if m.len() != features.channels() {
        return Err(Error::invalid("channel gate length differs from channel count"));
    }
    let mut out = features.clone();
    for (c, &mc) in m.iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v *= mc);
    }
    Ok(out)
}

fn gate_spatially(f_prime: &FeatureMap, spatial: &Volume) -> Result<FeatureMap> {
    if spatial.dims() != f_prime.dims() {
        return Err(Error::invalid("spatial gate shape differs from the feature grid"));
    }
    let mut out = f_prime.clone();
    for c in 0..out.channels() {
        for (v, g) in out.channel_mut(c).iter_mut().zip(spatial.data()) {
            *v *= g;
        }
    }
    Ok(out)
}

/// Everything one attention block computes in a forward pass.
#[derive(Clone, Debug)]
pub struct GateCache {
    pub m: Vec<f64>,
    pub spatial: Volume,
    pub channel_gated: FeatureMap,
    pub gated: FeatureMap,
    channel: ChannelGate,
    pooled: FeatureMap,
    pooled_arg: Vec<u32>,
}

pub fn gate_forward(features: &FeatureMap, weights: &AttentionWeights) -> Result<GateCache> {
    let channel = channel_gate(features, weights)?;
    let channel_gated = scale_channels(features, &channel.m)?;
    let (pooled, pooled_arg) = channel_pool(&channel_gated);
    let spatial = spatial_map(&pooled, weights)?;
    let gated = gate_spatially(&channel_gated, &spatial)?;
    Ok(GateCache {
        m: channel.m.clone(),
        spatial,
        channel_gated,
        gated,
        channel,
        pooled,
        pooled_arg,
    })
}

/// Backpropagates through one attention block. Weight gradients accumulate
/// into `grads`; returns the gradient with respect to the block input.
pub fn gate_backward(
    features: &FeatureMap,
    weights: &AttentionWeights,
    cache: &GateCache,
    grad_gated: &FeatureMap,
    grads: &mut AttentionWeights,
) -> Result<FeatureMap> {
    let c = features.channels();
    let n = features.voxels();
    let spatial = cache.spatial.data();

    // F'' = M ⊙ F'
    let mut grad_fp = grad_gated.clone();
    let mut grad_logit = vec![0.0; n];
    for ch in 0..c {
        let g = grad_gated.channel(ch);
        let fp = cache.channel_gated.channel(ch);
        for i in 0..n {
            grad_logit[i] += g[i] * fp[i];
        }
        grad_fp
            .channel_mut(ch)
            .iter_mut()
            .zip(spatial)
            .for_each(|(v, m)| *v *= m);
    }
    for (g, m) in grad_logit.iter_mut().zip(spatial) {
        *g *= m * (1.0 - m);
    }
    let grad_logit = FeatureMap::new(1, features.dims(), grad_logit)?;
    let mut gk = vec![0.0; SPATIAL_KERNEL_LEN];
    let mut gbias = [0.0];
    let grad_pooled = conv_backward(
        &spatial_geometry(),
        &weights.spatial_kernel,
        &cache.pooled,
        &grad_logit,
        &mut gk,
        &mut gbias,
        true,
    )?
    .expect("input gradient requested");
    grads
        .spatial_kernel
        .iter_mut()
        .zip(&gk)
        .for_each(|(a, b)| *a += b);
    grads.spatial_bias += gbias[0];

    // A = mean_c F', B = max_c F'
    let (g_mean, g_max) = grad_pooled.data().split_at(n);
    let inv_c = 1.0 / c as f64;
    for ch in 0..c {
        grad_fp
            .channel_mut(ch)
            .iter_mut()
            .zip(g_mean)
            .for_each(|(v, g)| *v += g * inv_c);
    }
    for i in 0..n {
        let ch = cache.pooled_arg[i] as usize;
        grad_fp.channel_mut(ch)[i] += g_max[i];
    }

    // F' = m ⊙ F
    let gate = &cache.channel;
    let mut grad_f = grad_fp.clone();
    let mut grad_z = vec![0.0; c];
    for ch in 0..c {
        let gm: f64 = grad_fp
            .channel(ch)
            .iter()
            .zip(features.channel(ch))
            .map(|(g, f)| g * f)
            .sum();
        let m = gate.m[ch];
        grad_z[ch] = gm * m * (1.0 - m);
        grad_f.channel_mut(ch).iter_mut().for_each(|v| *v *= m);
    }

    // z = W1ᵀ (ρ(h_a) + ρ(h_b)), h = W0ᵀ x
    let hidden = weights.hidden;
    let s: Vec<f64> = gate
        .h_a
        .iter()
        .zip(&gate.h_b)
        .map(|(x, y)| x.max(0.0) + y.max(0.0))
        .collect();
    let mut grad_s = vec![0.0; hidden];
    for j in 0..hidden {
        for ch in 0..c {
            grads.w1[j * c + ch] += s[j] * grad_z[ch];
            grad_s[j] += weights.w1[j * c + ch] * grad_z[ch];
        }
    }
    let grad_ha: Vec<f64> = (0..hidden)
        .map(|j| if gate.h_a[j] > 0.0 { grad_s[j] } else { 0.0 })
        .collect();
    let grad_hb: Vec<f64> = (0..hidden)
        .map(|j| if gate.h_b[j] > 0.0 { grad_s[j] } else { 0.0 })
        .collect();
    let inv_n = 1.0 / n as f64;
    for ch in 0..c {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for j in 0..hidden {
            grads.w0[ch * hidden + j] += gate.a[ch] * grad_ha[j] + gate.b[ch] * grad_hb[j];
            ga += weights.w0[ch * hidden + j] * grad_ha[j];
            gb += weights.w0[ch * hidden + j] * grad_hb[j];
        }
        let dst = grad_f.channel_mut(ch);
        dst.iter_mut().for_each(|v| *v += ga * inv_n);
        dst[gate.b_arg[ch]] += gb;
    }
    Ok(grad_f)
}
