//! Direct 3D convolution with per-axis kernel extent, per-axis stride and a
//! shared dilation rate. Padding is always "same": `dilation * (k - 1) / 2`
//! on each side, so an axis of length `n` maps to `n / stride`.
//!
//! Weights are laid out `[out][in][kz][ky][kx]`. A 2D kernel that slides
//! over the (x, y) plane is the special case `kernel = [3, 3, 1]`, which is
//! how the per-slice encoders are expressed.

use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k, k, k],
            stride: [1, 1, 1],
            dilation,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.taps()
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.taps()
    }

    fn padding(&self, axis: usize) -> isize {
        (self.dilation * (self.kernel[axis] - 1) / 2) as isize
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] % 2 == 0 {
                return Err(Error::invalid("convolution kernels must have odd extent"));
            }
            if input[a] % self.stride[a] != 0 {
                return Err(Error::invalid(format!(
                    "axis {a} of length {} is not divisible by stride {}",
                    input[a], self.stride[a]
                )));
            }
            out[a] = input[a] / self.stride[a];
        }
        Ok(out)
    }

    /// Input offset contributed by tap `t` along `axis`.
    #[inline]
    fn offset(&self, axis: usize, t: usize) -> isize {
        (t * self.dilation) as isize - self.padding(axis)
    }
}

/// Range of output indices `o` for which `o * stride + off` is inside `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
    let hi_excl = if off >= n_in as isize {
        0
    } else {
        ((n_in as isize - 1 - off) / s + 1).min(n_out as isize)
    };
    let lo = lo.max(0) as usize;
    let hi = hi_excl.max(0) as usize;
    (lo, hi.max(lo))
}

struct TapPlan {
    /// (z_lo, z_hi, y_lo, y_hi, x_lo, x_hi, off_x, off_y, off_z)
    ranges: Vec<[isize; 9]>,
}

impl TapPlan {
    fn new(geom: &ConvGeometry, input: Dims, output: Dims) -> Self {
        let mut ranges = Vec::with_capacity(geom.taps());
        for tz in 0..geom.kernel[2] {
            for ty in 0..geom.kernel[1] {
                for tx in 0..geom.kernel[0] {
                    let ox = geom.offset(0, tx);
                    let oy = geom.offset(1, ty);
                    let oz = geom.offset(2, tz);
                    let (xl, xh) = valid_range(output[0], input[0], geom.stride[0], ox);
                    let (yl, yh) = valid_range(output[1], input[1], geom.stride[1], oy);
                    let (zl, zh) = valid_range(output[2], input[2], geom.stride[2], oz);
                    ranges.push([
                        zl as isize, zh as isize, yl as isize, yh as isize, xl as isize,
                        xh as isize, ox, oy, oz,
                    ]);
                }
            }
        }
        Self { ranges }
    }
}

fn check_shapes(geom: &ConvGeometry, weight: &[f64], input: &FeatureMap) -> Result<Dims> {
    if input.channels() != geom.in_channels {
        return Err(Error::invalid(format!(
            "convolution expects {} input channels, got {}",
            geom.in_channels,
            input.channels()
        )));
    }
    if weight.len() != geom.weight_len() {
        return Err(Error::invalid(format!(
            "convolution weight has {} entries, expected {}",
            weight.len(),
            geom.weight_len()
        )));
    }
    geom.output_dims(input.dims())
}

pub fn conv_forward(
    geom: &ConvGeometry,
    weight: &[f64],
    bias: &[f64],
    input: &FeatureMap,
) -> Result<FeatureMap> {
    let out_dims = check_shapes(geom, weight, input)?;
    if bias.len() != geom.out_channels {
        return Err(Error::invalid("convolution bias length mismatch"));
    }
    let in_dims = input.dims();
    let plan = TapPlan::new(geom, in_dims, out_dims);
    let taps = geom.taps();
    let [sx, sy, sz] = geom.stride;
    let mut out = FeatureMap::zeros(geom.out_channels, out_dims);
    for co in 0..geom.out_channels {
        let dst = out.channel_mut(co);
        dst.fill(bias[co]);
        for ci in 0..geom.in_channels {
            let src = input.channel(ci);
            let wbase = (co * geom.in_channels + ci) * taps;
            for (t, r) in plan.ranges.iter().enumerate() {
                let w = weight[wbase + t];
                if w == 0.0 {
                    continue;
                }
                let [zl, zh, yl, yh, xl, xh, ox, oy, oz] = *r;
                if xl >= xh {
                    continue;
                }
                let (xl, xh) = (xl as usize, xh as usize);
                for zo in zl..zh {
                    let zi = (zo * sz as isize + oz) as usize;
                    for yo in yl..yh {
                        let yi = (yo * sy as isize + oy) as usize;
                        let orow = (zo as usize * out_dims[1] + yo as usize) * out_dims[0];
                        let irow = (zi * in_dims[1] + yi) * in_dims[0];
                        let o = &mut dst[orow + xl..orow + xh];
                        if sx == 1 {
                            let start = (irow as isize + xl as isize + ox) as usize;
                            let i = &src[start..start + (xh - xl)];
                            for (a, b) in o.iter_mut().zip(i) {
                                *a += w * b;
                            }
                        } else {
                            let base = irow as isize + ox;
                            for (k, a) in o.iter_mut().enumerate() {
                                let xi = ((xl + k) * sx) as isize + base;
                                *a += w * src[xi as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates weight and bias gradients into `grad_weight` / `grad_bias` and
/// returns the gradient with respect to the input when `need_input` is set.
pub fn conv_backward(
    geom: &ConvGeometry,
    weight: &[f64],
    input: &FeatureMap,
    grad_out: &FeatureMap,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input: bool,
) -> Result<Option<FeatureMap>> {
    let out_dims = check_shapes(geom, weight, input)?;
    if grad_out.dims() != out_dims || grad_out.channels() != geom.out_channels {
        return Err(Error::invalid("convolution output gradient has the wrong shape"));
    }
    let in_dims = input.dims();
    let plan = TapPlan::new(geom, in_dims, out_dims);
    let taps = geom.taps();
    let [sx, sy, sz] = geom.stride;
    let mut grad_in = need_input.then(|| FeatureMap::zeros(geom.in_channels, in_dims));

    for co in 0..geom.out_channels {
        let g = grad_out.channel(co);
        grad_bias[co] += g.iter().sum::<f64>();
        for ci in 0..geom.in_channels {
            let src = input.channel(ci);
            let wbase = (co * geom.in_channels + ci) * taps;
            for (t, r) in plan.ranges.iter().enumerate() {
                let [zl, zh, yl, yh, xl, xh, ox, oy, oz] = *r;
                if xl >= xh {
                    continue;
                }
                let (xl, xh) = (xl as usize, xh as usize);
                let w = weight[wbase + t];
                let mut acc = 0.0;
                for zo in zl..zh {
                    let zi = (zo * sz as isize + oz) as usize;
                    for yo in yl..yh {
                        let yi = (yo * sy as isize + oy) as usize;
                        let orow = (zo as usize * out_dims[1] + yo as usize) * out_dims[0];
                        let irow = (zi * in_dims[1] + yi) * in_dims[0];
                        let grow = &g[orow + xl..orow + xh];
                        if sx == 1 {
                            let start = (irow as isize + xl as isize + ox) as usize;
                            let i = &src[start..start + (xh - xl)];
                            acc += grow.iter().zip(i).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            let base = irow as isize + ox;
                            for (k, a) in grow.iter().enumerate() {
                                let xi = ((xl + k) * sx) as isize + base;
                                acc += a * src[xi as usize];
                            }
                        }
                    }
                }
                grad_weight[wbase + t] += acc;

                if let Some(gin) = grad_in.as_mut() {
                    if w == 0.0 {
                        continue;
                    }
                    let dst = gin.channel_mut(ci);
                    for zo in zl..zh {
                        let zi = (zo * sz as isize + oz) as usize;
                        for yo in yl..yh {
                            let yi = (yo * sy as isize + oy) as usize;
                            let orow = (zo as usize * out_dims[1] + yo as usize) * out_dims[0];
                            let irow = (zi * in_dims[1] + yi) * in_dims[0];
                            let grow = &g[orow + xl..orow + xh];
                            if sx == 1 {
                                let start = (irow as isize + xl as isize + ox) as usize;
                                let d = &mut dst[start..start + (xh - xl)];
                                for (a, b) in d.iter_mut().zip(grow) {
                                    *a += w * b;
                                }
                            } else {
                                let base = irow as isize + ox;
                                for (k, b) in grow.iter().enumerate() {
                                    let xi = ((xl + k) * sx) as isize + base;
                                    dst[xi as usize] += w * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
