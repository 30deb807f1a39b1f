use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::hidden_width;
use crate::tensor::Dims;

/// Slice orientation of a 2D encoder. The slice axis is the one the 2D
/// kernels do not span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    pub fn short_name(self) -> &'static str {
        match self {
            Orientation::Axial => "ax",
            Orientation::Coronal => "cor",
            Orientation::Sagittal => "sag",
        }
    }

    /// 0 = x, 1 = y, 2 = z.
    pub fn slice_axis(self) -> usize {
        match self {
            Orientation::Axial => 2,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 0,
        }
    }

    /// Per-axis 2D kernel extent (1 on the slice axis).
    pub fn kernel(self) -> [usize; 3] {
        let mut k = [3, 3, 3];
        k[self.slice_axis()] = 1;
        k
    }

    /// Per-axis stride of a downsampling layer (in-plane only).
    pub fn downsample_stride(self) -> [usize; 3] {
        let mut s = [2, 2, 2];
        s[self.slice_axis()] = 1;
        s
    }

    /// Pooling factors that bring the slice axis onto the common grid.
    pub fn slice_pool(self) -> [usize; 3] {
        let mut f = [1, 1, 1];
        f[self.slice_axis()] = 4;
        f
    }

    pub fn feature_name(self) -> String {
        format!("F_{}", self.short_name())
    }
}

/// A place in the network where an attention block may gate features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GatingSite {
    /// Output (after pooling) of the 3D stage with this 1-based index.
    Stage(usize),
    /// The concatenated 2D features.
    Fused,
    Encoder(Orientation),
}

impl GatingSite {
    /// Name of the feature map this site gates.
    pub fn layer_name(self) -> String {
        match self {
            GatingSite::Stage(k) => format!("enc3d.stage{k}.pool"),
            GatingSite::Fused => "F_con".to_string(),
            GatingSite::Encoder(o) => o.feature_name(),
        }
    }

    pub fn gated_name(self) -> String {
        format!("{}.gated", self.layer_name())
    }

    pub fn channel_gated_name(self) -> String {
        format!("{}.channel_gated", self.layer_name())
    }
}

fn default_stages() -> usize {
    2
}

/// Architecture hyperparameters of the 2.5D classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_shape: Dims,
    /// Output width of every 2D encoder.
    pub enc2d_channels: usize,
    /// Width after concatenation; always `3 * enc2d_channels`.
    pub fused_channels: usize,
    /// Width of the last 3D stage; earlier stages halve it.
    pub enc3d_channels: usize,
    #[serde(default = "default_stages")]
    pub enc3d_stages: usize,
    pub mlp_reduction: usize,
    /// 0 disables attention; `k` gates the `k` deepest sites.
    pub attention_blocks: usize,
    pub dilation_rate: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size architecture: 192×192×64 input, 32/96/256 channels.
    pub fn paper() -> Self {
        Self {
            input_shape: [192, 192, 64],
            enc2d_channels: 32,
            fused_channels: 96,
            enc3d_channels: 256,
            enc3d_stages: 2,
            mlp_reduction: 8,
            attention_blocks: 1,
            dilation_rate: 2,
            seed: 0,
        }
    }

    /// Reduced widths on a 96×96×48 grid, trainable on a CPU.
    pub fn desk() -> Self {
        Self {
            input_shape: [96, 96, 48],
            enc2d_channels: 4,
            fused_channels: 12,
            enc3d_channels: 32,
            enc3d_stages: 2,
            mlp_reduction: 8,
            attention_blocks: 1,
            dilation_rate: 2,
            seed: 0,
        }
    }

    pub fn with_attention_blocks(mut self, blocks: usize) -> Self {
        self.attention_blocks = blocks;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Total downsampling factor from input to the last 3D stage output.
    pub fn total_reduction(&self) -> usize {
        4 << self.enc3d_stages
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.total_reduction();
        if self.input_shape.iter().any(|&d| d == 0 || d % r != 0) {
            return Err(Error::invalid(format!(
                "input shape {:?} must be divisible by {r} on every axis",
                self.input_shape
            )));
        }
        if self.enc2d_channels < 2 || self.enc2d_channels % 2 != 0 {
            return Err(Error::invalid("enc2d_channels must be even and >= 2"));
        }
        if self.fused_channels != 3 * self.enc2d_channels {
            return Err(Error::invalid(format!(
                "fused_channels must equal 3 x enc2d_channels = {}",
                3 * self.enc2d_channels
            )));
        }
        if self.enc3d_stages == 0 {
            return Err(Error::invalid("the 3D encoder needs at least one stage"));
        }
        if self.enc3d_channels % (1 << (self.enc3d_stages - 1)) != 0 {
            return Err(Error::invalid("enc3d_channels must halve cleanly across stages"));
        }
        if self.dilation_rate == 0 {
            return Err(Error::invalid("dilation_rate must be >= 1"));
        }
        let sites = self.gating_sites();
        if self.attention_blocks > sites.len() {
            return Err(Error::invalid(format!(
                "attention_blocks = {} exceeds the {} gating sites",
                self.attention_blocks,
                sites.len()
            )));
        }
        for site in self.active_sites() {
            hidden_width(self.site_channels(site), self.mlp_reduction)?;
        }
        Ok(())
    }

    /// Channel widths of the four layers of a 2D encoder.
    pub fn enc2d_widths(&self) -> [usize; 4] {
        let c = self.enc2d_channels;
        [c / 2, c, c, c]
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        let n = self.enc3d_stages;
        (0..n).map(|i| self.enc3d_channels >> (n - 1 - i)).collect()
    }

    /// All gating sites, deepest first.
    pub fn gating_sites(&self) -> Vec<GatingSite> {
        let mut sites: Vec<GatingSite> = (1..=self.enc3d_stages).rev().map(GatingSite::Stage).collect();
        sites.push(GatingSite::Fused);
        sites.extend(Orientation::ALL.iter().map(|&o| GatingSite::Encoder(o)));
        sites
    }

    pub fn active_sites(&self) -> Vec<GatingSite> {
        let mut sites = self.gating_sites();
        sites.truncate(self.attention_blocks);
        sites
    }

    /// Index of the attention block gating `site`, if that site is active.
    pub fn attention_slot(&self, site: GatingSite) -> Option<usize> {
        self.active_sites().iter().position(|&s| s == site)
    }

    pub fn site_channels(&self, site: GatingSite) -> usize {
        match site {
            GatingSite::Stage(k) => self.stage_widths()[k - 1],
            GatingSite::Fused => self.fused_channels,
            GatingSite::Encoder(_) => self.enc2d_channels,
        }
    }

    /// Common grid of the 2D encoder outputs (input / 4).
    pub fn fused_dims(&self) -> Dims {
        self.input_shape.map(|d| d / 4)
    }

    /// Spatial dims of the output of 3D stage `k` (1-based).
    pub fn stage_dims(&self, k: usize) -> Dims {
        self.fused_dims().map(|d| d >> k)
    }

    /// Every named layer with its `[channels, x, y, z]` shape, in forward order.
    pub fn layer_shapes(&self) -> Vec<(String, [usize; 4])> {
        let mut out = vec![("input".to_string(), shape4(1, self.input_shape))];
        let widths = self.enc2d_widths();
        for o in Orientation::ALL {
            let mut dims = self.input_shape;
            for (i, &w) in widths.iter().enumerate() {
                if i < 2 {
                    let s = o.downsample_stride();
                    dims = [dims[0] / s[0], dims[1] / s[1], dims[2] / s[2]];
                }
                out.push((format!("enc2d.{}.conv{}", o.short_name(), i + 1), shape4(w, dims)));
            }
            out.push((o.feature_name(), shape4(self.enc2d_channels, self.fused_dims())));
        }
        out.push(("F_con".into(), shape4(self.fused_channels, self.fused_dims())));
        let widths = self.stage_widths();
        for (i, &w) in widths.iter().enumerate() {
            let k = i + 1;
            let pre = self.stage_dims(i);
            out.push((format!("enc3d.stage{k}.dilated"), shape4(w, pre)));
            out.push((format!("enc3d.stage{k}.conv"), shape4(w, pre)));
            out.push((format!("enc3d.stage{k}.pool"), shape4(w, self.stage_dims(k))));
        }
        out.push(("logits".into(), [2, 1, 1, 1]));
        out
    }
}

fn shape4(c: usize, d: Dims) -> [usize; 4] {
    [c, d[0], d[1], d[2]]
}
