use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Orientation};
use crate::nn::attention::AttentionWeights;
use crate::nn::conv::ConvGeometry;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub geometry: ConvGeometry,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    fn zeros(geometry: ConvGeometry) -> Self {
        Self {
            geometry,
            weight: vec![0.0; geometry.weight_len()],
            bias: vec![0.0; geometry.out_channels],
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        let g = &self.geometry;
        vec![g.out_channels, g.in_channels, g.kernel[2], g.kernel[1], g.kernel[0]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder2dParams {
    pub orientation: Orientation,
    pub layers: Vec<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage3dParams {
    pub dilated: ConvParams,
    pub pointwise: ConvParams,
    /// Mixed pooling weight before the sigmoid; 0 gives λ = 0.5.
    pub mix_logit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `2 × C`, row-major.
    pub weight: Vec<f64>,
    pub bias: [f64; 2],
}

/// Every learnable tensor of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub encoders: Vec<Encoder2dParams>,
    pub stages: Vec<Stage3dParams>,
    /// One block per active gating site, in `ModelConfig::active_sites` order.
    pub attention: Vec<AttentionWeights>,
    pub head: HeadParams,
}

/// A named, shaped view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl Params {
    /// All-zero parameters shaped for `config` (also the gradient accumulator).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.enc2d_widths();
        let encoders = Orientation::ALL
            .iter()
            .map(|&o| {
                let mut in_ch = 1;
                let layers = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let g = ConvGeometry {
                            in_channels: in_ch,
                            out_channels: w,
                            kernel: o.kernel(),
                            stride: if i < 2 { o.downsample_stride() } else { [1, 1, 1] },
                            dilation: 1,
                        };
                        in_ch = w;
                        ConvParams::zeros(g)
                    })
                    .collect();
                Encoder2dParams {
                    orientation: o,
                    layers,
                }
            })
            .collect();
        let mut in_ch = config.fused_channels;
        let stages = config
            .stage_widths()
            .into_iter()
            .map(|w| {
                let s = Stage3dParams {
                    dilated: ConvParams::zeros(ConvGeometry::cubic(in_ch, w, 3, config.dilation_rate)),
                    pointwise: ConvParams::zeros(ConvGeometry::cubic(w, w, 1, 1)),
                    mix_logit: 0.0,
                };
                in_ch = w;
                s
            })
            .collect();
        let attention = config
            .active_sites()
            .into_iter()
            .map(|s| AttentionWeights::zeros(config.site_channels(s), config.mlp_reduction))
            .collect::<Result<_>>()?;
        Ok(Self {
            encoders,
            stages,
            attention,
            head: HeadParams {
                weight: vec![0.0; 2 * config.enc3d_channels],
                bias: [0.0; 2],
            },
        })
    }

    /// Fan-in scaled uniform initialization, seeded by `config.seed`.
    ///
    /// Weights feeding a ReLU draw from `±sqrt(6 / fan_in)`, the rest from
    /// `±sqrt(3 / fan_in)`. Biases and mixing logits start at zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |w: &mut [f64], fan_in: usize, gain: f64| {
            let bound = (gain / fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        };
        for enc in &mut p.encoders {
            for layer in &mut enc.layers {
                let fan_in = layer.geometry.fan_in();
                fill(&mut layer.weight, fan_in, 6.0);
            }
        }
        for stage in &mut p.stages {
            let f = stage.dilated.geometry.fan_in();
            fill(&mut stage.dilated.weight, f, 6.0);
            let f = stage.pointwise.geometry.fan_in();
            fill(&mut stage.pointwise.weight, f, 6.0);
        }
        for block in &mut p.attention {
            fill(&mut block.w0, block.channels, 6.0);
            fill(&mut block.w1, block.hidden, 3.0);
            fill(&mut block.spatial_kernel, 54, 3.0);
        }
        let c = config.enc3d_channels;
        fill(&mut p.head.weight, c, 3.0);
        Ok(p)
    }

    /// Checks that these parameters fit `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(config)?;
        let mine = self.views();
        let theirs = reference.views();
        if mine.len() != theirs.len() {
            return Err(Error::invalid(format!(
                "parameter set has {} tensors, config expects {}",
                mine.len(),
                theirs.len()
            )));
        }
        for (a, b) in mine.iter().zip(&theirs) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::invalid(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn views(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            for (i, l) in enc.layers.iter().enumerate() {
                let base = format!("enc2d.{}.conv{}", enc.orientation.short_name(), i + 1);
                out.push(ParamView {
                    name: format!("{base}.weight"),
                    shape: l.weight_shape(),
                    data: &l.weight,
                });
                out.push(ParamView {
                    name: format!("{base}.bias"),
                    shape: vec![l.bias.len()],
                    data: &l.bias,
                });
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let base = format!("enc3d.stage{}", i + 1);
            for (tag, l) in [("dilated", &s.dilated), ("pointwise", &s.pointwise)] {
                out.push(ParamView {
                    name: format!("{base}.{tag}.weight"),
                    shape: l.weight_shape(),
                    data: &l.weight,
                });
                out.push(ParamView {
                    name: format!("{base}.{tag}.bias"),
                    shape: vec![l.bias.len()],
                    data: &l.bias,
                });
            }
            out.push(ParamView {
                name: format!("{base}.pool.mix_logit"),
                shape: vec![1],
                data: std::slice::from_ref(&s.mix_logit),
            });
        }
        for (i, a) in self.attention.iter().enumerate() {
            let base = format!("attention{i}");
            out.push(ParamView {
                name: format!("{base}.mlp0"),
                shape: vec![a.channels, a.hidden],
                data: &a.w0,
            });
            out.push(ParamView {
                name: format!("{base}.mlp1"),
                shape: vec![a.hidden, a.channels],
                data: &a.w1,
            });
            out.push(ParamView {
                name: format!("{base}.spatial.weight"),
                shape: vec![1, 2, 3, 3, 3],
                data: &a.spatial_kernel,
            });
            out.push(ParamView {
                name: format!("{base}.spatial.bias"),
                shape: vec![1],
                data: std::slice::from_ref(&a.spatial_bias),
            });
        }
        out.push(ParamView {
            name: "head.weight".into(),
            shape: vec![2, self.head.weight.len() / 2],
            data: &self.head.weight,
        });
        out.push(ParamView {
            name: "head.bias".into(),
            shape: vec![2],
            data: &self.head.bias,
        });
        out
    }

    /// Mutable counterpart of [`Params::views`], in the same order.
    pub fn views_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            let o = enc.orientation.short_name();
            for (i, l) in enc.layers.iter_mut().enumerate() {
                let base = format!("enc2d.{o}.conv{}", i + 1);
                let shape = l.weight_shape();
                let bias_len = l.bias.len();
                out.push(ParamViewMut {
                    name: format!("{base}.weight"),
                    shape,
                    data: &mut l.weight,
                });
                out.push(ParamViewMut {
                    name: format!("{base}.bias"),
                    shape: vec![bias_len],
                    data: &mut l.bias,
                });
            }
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            let base = format!("enc3d.stage{}", i + 1);
            for (tag, l) in [("dilated", &mut s.dilated), ("pointwise", &mut s.pointwise)] {
                let shape = l.weight_shape();
                let bias_len = l.bias.len();
                out.push(ParamViewMut {
                    name: format!("{base}.{tag}.weight"),
                    shape,
                    data: &mut l.weight,
                });
                out.push(ParamViewMut {
                    name: format!("{base}.{tag}.bias"),
                    shape: vec![bias_len],
                    data: &mut l.bias,
                });
            }
            out.push(ParamViewMut {
                name: format!("{base}.pool.mix_logit"),
                shape: vec![1],
                data: std::slice::from_mut(&mut s.mix_logit),
            });
        }
        for (i, a) in self.attention.iter_mut().enumerate() {
            let base = format!("attention{i}");
            let (c, h) = (a.channels, a.hidden);
            out.push(ParamViewMut {
                name: format!("{base}.mlp0"),
                shape: vec![c, h],
                data: &mut a.w0,
            });
            out.push(ParamViewMut {
                name: format!("{base}.mlp1"),
                shape: vec![h, c],
                data: &mut a.w1,
            });
            out.push(ParamViewMut {
                name: format!("{base}.spatial.weight"),
                shape: vec![1, 2, 3, 3, 3],
                data: &mut a.spatial_kernel,
            });
            out.push(ParamViewMut {
                name: format!("{base}.spatial.bias"),
                shape: vec![1],
                data: std::slice::from_mut(&mut a.spatial_bias),
            });
        }
        let c = self.head.weight.len() / 2;
        out.push(ParamViewMut {
            name: "head.weight".into(),
            shape: vec![2, c],
            data: &mut self.head.weight,
        });
        out.push(ParamViewMut {
            name: "head.bias".into(),
            shape: vec![2],
            data: &mut self.head.bias,
        });
        out
    }

    pub fn count(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let src = other.views();
        for (dst, src) in self.views_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.views().iter().all(|v| v.data.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::desk().with_seed(5);
        assert_eq!(Params::init(&cfg).unwrap(), Params::init(&cfg).unwrap());
        let other = Params::init(&cfg.clone().with_seed(6)).unwrap();
        assert_ne!(Params::init(&cfg).unwrap(), other);
    }

    #[test]
    fn views_agree_in_order_and_shape() {
        let cfg = ModelConfig::desk().with_attention_blocks(2);
        let mut p = Params::init(&cfg).unwrap();
        let names: Vec<(String, Vec<usize>)> =
            p.views().into_iter().map(|v| (v.name, v.shape)).collect();
        let names_mut: Vec<(String, Vec<usize>)> =
            p.views_mut().into_iter().map(|v| (v.name, v.shape)).collect();
        assert_eq!(names, names_mut);
        for v in p.views() {
            assert_eq!(v.shape.iter().product::<usize>(), v.data.len(), "{}", v.name);
        }
        assert!(names.iter().any(|(n, _)| n == "attention1.spatial.weight"));
    }

    #[test]
    fn compatibility_is_checked() {
        let p = Params::init(&ModelConfig::desk()).unwrap();
        p.check_compatible(&ModelConfig::desk()).unwrap();
        assert!(p.check_compatible(&ModelConfig::desk().with_attention_blocks(0)).is_err());
    }
}
