//! Forward and backward passes of the 2.5D classifier.
//!
//! Layer names used by [`FeatureStack::get`], overrides and gradient capture:
//!
//! | name                         | tensor                                          |
//! |------------------------------|-------------------------------------------------|
//! | `input`                      | the model input `V̂`                             |
//! | `enc2d.{ax,cor,sag}.conv{k}` | post-ReLU output of layer `k` of a 2D encoder   |
//! | `F_ax`, `F_cor`, `F_sag`     | encoder outputs on the common grid              |
//! | `F_con`                      | concatenation of the (possibly gated) encoders  |
//! | `enc3d.stage{k}.dilated`     | post-ReLU dilated 3×3×3 convolution             |
//! | `enc3d.stage{k}.conv`        | post-ReLU 1×1×1 convolution (pre-pooling)       |
//! | `enc3d.stage{k}.pool`        | mixed pooling output                            |
//! | `<site>.channel_gated`       | `F'` of the attention block at a gating site    |
//! | `<site>.gated`               | `F''` of the attention block at a gating site   |
//! | `F`, `F'`, `F''`             | aliases at the deepest stage output             |
//! | `logits`                     | the two pre-softmax class scores                |

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::{GatingSite, ModelConfig, Orientation};
use crate::model::params::{ConvParams, Encoder2dParams, HeadParams, Params, Stage3dParams};
use crate::nn::attention::{gate_backward, gate_forward, AttentionWeights, GateCache};
use crate::nn::pool::{avg_pool, avg_pool_backward, mixed_pool, mixed_pool_backward, MixedPoolOutput};
use crate::nn::{conv_backward, conv_forward, relu_backward_in_place, relu_in_place};
use crate::tensor::{FeatureMap, Volume};

/// Gates of one attention block after a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub site: String,
    /// Channel gate `m`.
    pub channel: Vec<f64>,
    /// Spatial gate `M`.
    pub spatial: Volume,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    pub orientation: Orientation,
    pub activations: Vec<FeatureMap>,
    pub pooled: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct StageCache {
    pub dilated: FeatureMap,
    pub conv: FeatureMap,
    pub pool: MixedPoolOutput,
}

/// All intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub input: FeatureMap,
    pub encoders: Vec<EncoderCache>,
    pub fused: FeatureMap,
    pub stages: Vec<StageCache>,
    /// Attention caches keyed by site, for the active sites only.
    pub gates: Vec<(GatingSite, GateCache)>,
    /// Spatial mean of the final features, the classifier head input.
    pub pooled: Vec<f64>,
    pub logits: [f64; 2],
    pub likelihoods: [f64; 2],
    pub predicted_class: u8,
}

impl FeatureStack {
    fn gate(&self, site: GatingSite) -> Option<&GateCache> {
        self.gates.iter().find(|(s, _)| *s == site).map(|(_, g)| g)
    }

    /// The output of `site` after its attention block, or the raw output
    /// when the site is not gated.
    fn gated_or_raw<'a>(&'a self, site: GatingSite, raw: &'a FeatureMap) -> &'a FeatureMap {
        self.gate(site).map(|g| &g.gated).unwrap_or(raw)
    }

    /// Input of 3D stage `i` (0-based).
    fn stage_input(&self, i: usize) -> &FeatureMap {
        if i == 0 {
            self.gated_or_raw(GatingSite::Fused, &self.fused)
        } else {
            self.gated_or_raw(GatingSite::Stage(i), &self.stages[i - 1].pool.output)
        }
    }

    /// `F`: the last 3D stage output before attention.
    pub fn pre_attention(&self) -> &FeatureMap {
        &self.stages.last().expect("at least one stage").pool.output
    }

    fn deepest_site(&self) -> GatingSite {
        GatingSite::Stage(self.stages.len())
    }

    /// `F'`: channel-gated deepest features (equal to `F` without attention).
    pub fn channel_gated(&self) -> &FeatureMap {
        self.gate(self.deepest_site())
            .map(|g| &g.channel_gated)
            .unwrap_or_else(|| self.pre_attention())
    }

    /// `F''`: the features the classifier head consumes.
    pub fn final_features(&self) -> &FeatureMap {
        self.gated_or_raw(self.deepest_site(), self.pre_attention())
    }

    pub fn attention_states(&self) -> Vec<AttentionState> {
        self.gates
            .iter()
            .map(|(site, g)| AttentionState {
                site: site.layer_name(),
                channel: g.m.clone(),
                spatial: g.spatial.clone(),
            })
            .collect()
    }

    pub fn logits_map(&self) -> FeatureMap {
        FeatureMap::new(2, [1, 1, 1], self.logits.to_vec()).expect("2 logits")
    }

    /// Looks up a cached layer by name (see the module docs for the names).
    pub fn get(&self, name: &str) -> Option<&FeatureMap> {
        match name {
            "input" => return Some(&self.input),
            "F_con" => return Some(&self.fused),
            "F" => return Some(self.pre_attention()),
            "F'" => return Some(self.channel_gated()),
            "F''" => return Some(self.final_features()),
            _ => {}
        }
        for e in &self.encoders {
            let o = e.orientation.short_name();
            if name == e.orientation.feature_name() {
                return Some(&e.pooled);
            }
            for (k, a) in e.activations.iter().enumerate() {
                if name == format!("enc2d.{o}.conv{}", k + 1) {
                    return Some(a);
                }
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let base = format!("enc3d.stage{}", i + 1);
            if name == format!("{base}.dilated") {
                return Some(&s.dilated);
            }
            if name == format!("{base}.conv") {
                return Some(&s.conv);
            }
            if name == format!("{base}.pool") {
                return Some(&s.pool.output);
            }
        }
        for (site, g) in &self.gates {
            if name == site.gated_name() {
                return Some(&g.gated);
            }
            if name == site.channel_gated_name() {
                return Some(&g.channel_gated);
            }
        }
        None
    }

    /// Names accepted by [`FeatureStack::get`] and by gradient capture.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        for e in &self.encoders {
            let o = e.orientation.short_name();
            for k in 0..e.activations.len() {
                names.push(format!("enc2d.{o}.conv{}", k + 1));
            }
            names.push(e.orientation.feature_name());
        }
        names.push("F_con".into());
        for i in 0..self.stages.len() {
            let base = format!("enc3d.stage{}", i + 1);
            names.push(format!("{base}.dilated"));
            names.push(format!("{base}.conv"));
            names.push(format!("{base}.pool"));
        }
        for (site, _) in &self.gates {
            names.push(site.channel_gated_name());
            names.push(site.gated_name());
        }
        names.extend(["F".into(), "F'".into(), "F''".into(), "logits".into()]);
        names
    }
}

/// Replaces one named layer's value during a forward pass; everything
/// downstream is recomputed from the replacement.
#[derive(Clone, Copy)]
pub struct Override<'a> {
    pub layer: &'a str,
    pub value: &'a FeatureMap,
}

struct Pass<'a> {
    over: Option<Override<'a>>,
}

impl Pass<'_> {
    fn emit(&self, name: &str, t: FeatureMap) -> FeatureMap {
        match self.over {
            Some(o) if o.layer == name => o.value.clone(),
            _ => t,
        }
    }
}

fn conv_relu(layer: &ConvParams, input: &FeatureMap) -> Result<FeatureMap> {
    let mut out = conv_forward(&layer.geometry, &layer.weight, &layer.bias, input)?;
    relu_in_place(out.data_mut());
    Ok(out)
}

fn encoder_forward(input: &FeatureMap, enc: &Encoder2dParams, pass: &Pass) -> Result<EncoderCache> {
    let o = enc.orientation;
    let mut activations: Vec<FeatureMap> = Vec::with_capacity(enc.layers.len());
    for (k, layer) in enc.layers.iter().enumerate() {
        let x = activations.last().unwrap_or(input);
        let y = conv_relu(layer, x)?;
        activations.push(pass.emit(&format!("enc2d.{}.conv{}", o.short_name(), k + 1), y));
    }
    let last = activations.last().expect("encoder has layers");
    let pooled = pass.emit(&o.feature_name(), avg_pool(last, o.slice_pool())?);
    Ok(EncoderCache {
        orientation: o,
        activations,
        pooled,
    })
}

/// One 2D encoder on its own: four per-slice 3×3 convolutions (two of them
/// in-plane stride 2) followed by average pooling of the slice axis by 4.
pub fn encode_2d(v_hat: &Volume, enc: &Encoder2dParams) -> Result<FeatureMap> {
    let input = FeatureMap::from_volume(v_hat.clone());
    Ok(encoder_forward(&input, enc, &Pass { over: None })?.pooled)
}

/// Channel concatenation in the order (axial, coronal, sagittal).
pub fn fuse_concat(f_ax: &FeatureMap, f_cor: &FeatureMap, f_sag: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::concat(&[f_ax, f_cor, f_sag])
}

fn stage_forward(
    input: &FeatureMap,
    stage: &Stage3dParams,
    k: usize,
    pass: &Pass,
) -> Result<StageCache> {
    let base = format!("enc3d.stage{k}");
    let dilated = pass.emit(&format!("{base}.dilated"), conv_relu(&stage.dilated, input)?);
    let conv = pass.emit(&format!("{base}.conv"), conv_relu(&stage.pointwise, &dilated)?);
    let mut pool = mixed_pool(&conv, stage.mix_logit)?;
    pool.output = pass.emit(&format!("{base}.pool"), pool.output);
    Ok(StageCache {
        dilated,
        conv,
        pool,
    })
}

/// The 3D encoder on its own (no attention): per stage, a dilated 3×3×3
/// convolution, a 1×1×1 convolution, and 2×2×2 mixed pooling.
pub fn encode_3d(f_con: &FeatureMap, stages: &[Stage3dParams]) -> Result<FeatureMap> {
    let pass = Pass { over: None };
    let mut x = f_con.clone();
    for (i, s) in stages.iter().enumerate() {
        x = stage_forward(&x, s, i + 1, &pass)?.pool.output;
    }
    Ok(x)
}

fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Output of the classifier head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub logits: [f64; 2],
    pub likelihoods: [f64; 2],
    /// Argmax of the likelihoods; an exact tie goes to class 0.
    pub predicted_class: u8,
}

/// Global average pooling, an affine map to two logits, and softmax.
pub fn classify(features: &FeatureMap, head: &HeadParams) -> Result<Classification> {
    Ok(classify_pooled(&global_average(features), head)?.1)
}

fn global_average(features: &FeatureMap) -> Vec<f64> {
    let n = features.voxels() as f64;
    (0..features.channels())
        .map(|c| features.channel(c).iter().sum::<f64>() / n)
        .collect()
}

fn classify_pooled(pooled: &[f64], head: &HeadParams) -> Result<(Vec<f64>, Classification)> {
    let c = pooled.len();
    if head.weight.len() != 2 * c {
        return Err(Error::invalid(format!(
            "head expects {} channels, features have {c}",
            head.weight.len() / 2
        )));
    }
    let mut logits = head.bias;
    for (l, logit) in logits.iter_mut().enumerate() {
        *logit += (0..c).map(|i| head.weight[l * c + i] * pooled[i]).sum::<f64>();
    }
    let likelihoods = softmax(logits);
    let predicted_class = u8::from(likelihoods[1] > likelihoods[0]);
    Ok((
        pooled.to_vec(),
        Classification {
            logits,
            likelihoods,
            predicted_class,
        },
    ))
}

fn check_params(params: &Params, config: &ModelConfig) -> Result<()> {
    if params.encoders.len() != 3 || params.stages.len() != config.enc3d_stages {
        return Err(Error::invalid("parameters do not match the model configuration"));
    }
    if params.attention.len() < config.attention_blocks {
        return Err(Error::invalid(format!(
            "config asks for {} attention blocks, parameters hold {}",
            config.attention_blocks,
            params.attention.len()
        )));
    }
    Ok(())
}

fn gate_site(
    site: GatingSite,
    features: &FeatureMap,
    config: &ModelConfig,
    params: &Params,
    pass: &Pass,
    gates: &mut Vec<(GatingSite, GateCache)>,
) -> Result<()> {
    if let Some(slot) = config.attention_slot(site) {
        let mut cache = gate_forward(features, &params.attention[slot])?;
        cache.channel_gated = pass.emit(&site.channel_gated_name(), cache.channel_gated);
        cache.gated = pass.emit(&site.gated_name(), cache.gated);
        gates.push((site, cache));
    }
    Ok(())
}

/// Runs the classifier and caches every intermediate tensor.
pub fn forward(v_hat: &Volume, params: &Params, config: &ModelConfig) -> Result<(FeatureStack, Vec<AttentionState>)> {
    let stack = forward_with(v_hat, params, config, None)?;
    let states = stack.attention_states();
    Ok((stack, states))
}

/// [`forward`] with an optional replacement of one named layer.
pub fn forward_with(
    v_hat: &Volume,
    params: &Params,
    config: &ModelConfig,
    over: Option<Override>,
) -> Result<FeatureStack> {
    config.validate()?;
    check_params(params, config)?;
    if v_hat.dims() != config.input_shape {
        return Err(Error::invalid(format!(
            "input volume {:?} does not match configured input shape {:?}",
            v_hat.dims(),
            config.input_shape
        )));
    }
    if let Some(o) = over {
        let known = config.layer_shapes().iter().any(|(n, _)| n == o.layer)
            || config
                .active_sites()
                .iter()
                .any(|s| s.gated_name() == o.layer || s.channel_gated_name() == o.layer);
        if !known {
            return Err(Error::invalid(format!("cannot override unknown layer {:?}", o.layer)));
        }
    }
    let pass = Pass { over };
    let input = pass.emit("input", FeatureMap::from_volume(v_hat.clone()));
    let mut gates = Vec::new();

    let mut encoders = Vec::with_capacity(3);
    for enc in &params.encoders {
        let cache = encoder_forward(&input, enc, &pass)?;
        gate_site(GatingSite::Encoder(enc.orientation), &cache.pooled, config, params, &pass, &mut gates)?;
        encoders.push(cache);
    }
    let outputs: Vec<&FeatureMap> = encoders
        .iter()
        .map(|e| {
            gates
                .iter()
                .find(|(s, _)| *s == GatingSite::Encoder(e.orientation))
                .map(|(_, g)| &g.gated)
                .unwrap_or(&e.pooled)
        })
        .collect();
    let fused = pass.emit("F_con", fuse_concat(outputs[0], outputs[1], outputs[2])?);
    gate_site(GatingSite::Fused, &fused, config, params, &pass, &mut gates)?;

    let mut stages: Vec<StageCache> = Vec::with_capacity(params.stages.len());
    for (i, sp) in params.stages.iter().enumerate() {
        let k = i + 1;
        let input = if i == 0 {
            gates
                .iter()
                .find(|(s, _)| *s == GatingSite::Fused)
                .map(|(_, g)| &g.gated)
                .unwrap_or(&fused)
        } else {
            let prev = GatingSite::Stage(i);
            gates
                .iter()
                .find(|(s, _)| *s == prev)
                .map(|(_, g)| &g.gated)
                .unwrap_or(&stages[i - 1].pool.output)
        };
        let cache = stage_forward(input, sp, k, &pass)?;
        gate_site(GatingSite::Stage(k), &cache.pool.output, config, params, &pass, &mut gates)?;
        stages.push(cache);
    }

    let last_site = GatingSite::Stage(params.stages.len());
    let final_features = gates
        .iter()
        .find(|(s, _)| *s == last_site)
        .map(|(_, g)| &g.gated)
        .unwrap_or(&stages.last().expect("validated").pool.output);
    let (pooled, cls) = classify_pooled(&global_average(final_features), &params.head)?;

    Ok(FeatureStack {
        input,
        encoders,
        fused,
        stages,
        gates,
        pooled,
        logits: cls.logits,
        likelihoods: cls.likelihoods,
        predicted_class: cls.predicted_class,
    })
}

/// What a backward pass should produce.
#[derive(Clone, Debug, Default)]
pub struct BackwardRequest {
    pub param_grads: bool,
    pub capture: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Option<Params>,
    pub layers: BTreeMap<String, FeatureMap>,
}

struct Collector<'a> {
    want: &'a [String],
    layers: BTreeMap<String, FeatureMap>,
    param_grads: bool,
}

impl Collector<'_> {
    fn record(&mut self, name: &str, g: &FeatureMap) {
        if self.want.iter().any(|w| w == name) {
            self.layers.insert(name.to_string(), g.clone());
        }
    }

    fn done(&self) -> bool {
        !self.param_grads && self.layers.len() == self.want.len()
    }
}

/// Backpropagates `dlogits` (the gradient of some scalar with respect to the
/// two logits) through a cached forward pass.
///
/// When parameter gradients are not requested the pass stops as soon as
/// every captured layer has been reached.
pub fn backward(
    params: &Params,
    config: &ModelConfig,
    stack: &FeatureStack,
    dlogits: [f64; 2],
    request: &BackwardRequest,
) -> Result<Gradients> {
    check_params(params, config)?;
    let known = stack.layer_names();
    let mut want: Vec<String> = Vec::new();
    for name in &request.capture {
        if !known.contains(name) {
            return Err(Error::invalid(format!("unknown layer {name:?}")));
        }
        if !want.contains(name) {
            want.push(name.clone());
        }
    }
    let mut grads = if request.param_grads {
        Some(Params::zeros(config)?)
    } else {
        None
    };
    let mut col = Collector {
        want: &want,
        layers: BTreeMap::new(),
        param_grads: request.param_grads,
    };
    let finish = |col: Collector, grads: Option<Params>| Gradients {
        params: grads,
        layers: col.layers,
    };

    col.record("logits", &FeatureMap::new(2, [1, 1, 1], dlogits.to_vec())?);

    // Head: logits = W · mean(F'') + b
    let fin = stack.final_features();
    let c = fin.channels();
    let n = fin.voxels() as f64;
    let w = &params.head.weight;
    if let Some(g) = grads.as_mut() {
        for l in 0..2 {
            for i in 0..c {
                g.head.weight[l * c + i] += dlogits[l] * stack.pooled[i];
            }
            g.head.bias[l] += dlogits[l];
        }
    }
    let mut g = FeatureMap::zeros(c, fin.dims());
    for i in 0..c {
        let gi = (w[i] * dlogits[0] + w[c + i] * dlogits[1]) / n;
        g.channel_mut(i).fill(gi);
    }
    col.record("F''", &g);
    if col.done() {
        return Ok(finish(col, grads));
    }

    // 3D stages, deepest first.
    for i in (0..stack.stages.len()).rev() {
        let k = i + 1;
        let site = GatingSite::Stage(k);
        let cache = &stack.stages[i];
        g = backward_through_gate(site, &cache.pool.output, g, config, params, stack, &mut grads, &mut col)?;
        if k == stack.stages.len() {
            col.record("F", &g);
        }
        col.record(&format!("enc3d.stage{k}.pool"), &g);
        if col.done() {
            return Ok(finish(col, grads));
        }
        let (mut g_conv, g_mix) = mixed_pool_backward(&cache.pool, &g, cache.conv.dims());
        col.record(&format!("enc3d.stage{k}.conv"), &g_conv);
        if col.done() {
            return Ok(finish(col, grads));
        }
        relu_backward_in_place(g_conv.data_mut(), cache.conv.data());
        let sp = &params.stages[i];
        let (mut gw, mut gb) = scratch(&sp.pointwise);
        let mut g_dil = conv_backward(&sp.pointwise.geometry, &sp.pointwise.weight, &cache.dilated, &g_conv, &mut gw, &mut gb, true)?
            .expect("input gradient requested");
        if let Some(gr) = grads.as_mut() {
            accumulate(&mut gr.stages[i].pointwise, &gw, &gb);
            gr.stages[i].mix_logit += g_mix;
        }
        col.record(&format!("enc3d.stage{k}.dilated"), &g_dil);
        relu_backward_in_place(g_dil.data_mut(), cache.dilated.data());
        let (mut gw, mut gb) = scratch(&sp.dilated);
        g = conv_backward(&sp.dilated.geometry, &sp.dilated.weight, stack.stage_input(i), &g_dil, &mut gw, &mut gb, true)?
            .expect("input gradient requested");
        if let Some(gr) = grads.as_mut() {
            accumulate(&mut gr.stages[i].dilated, &gw, &gb);
        }
    }

    g = backward_through_gate(GatingSite::Fused, &stack.fused, g, config, params, stack, &mut grads, &mut col)?;
    col.record("F_con", &g);
    if col.done() {
        return Ok(finish(col, grads));
    }

    let widths: Vec<usize> = stack.encoders.iter().map(|e| e.pooled.channels()).collect();
    let parts = g.split(&widths);
    let want_input = want.iter().any(|w| w == "input");
    let mut g_input: Option<FeatureMap> = None;
    for (ei, g_part) in parts.into_iter().enumerate() {
        let enc = &stack.encoders[ei];
        let o = enc.orientation;
        let site = GatingSite::Encoder(o);
        let g_pooled = backward_through_gate(site, &enc.pooled, g_part, config, params, stack, &mut grads, &mut col)?;
        col.record(&o.feature_name(), &g_pooled);
        let last = enc.activations.last().expect("encoder has layers");
        let mut g_act = avg_pool_backward(&g_pooled, last.dims(), o.slice_pool());
        let ep = &params.encoders[ei];
        for k in (0..enc.activations.len()).rev() {
            col.record(&format!("enc2d.{}.conv{}", o.short_name(), k + 1), &g_act);
            if !request.param_grads && (k == 0 && !want_input || col.done()) {
                break;
            }
            relu_backward_in_place(g_act.data_mut(), enc.activations[k].data());
            let layer = &ep.layers[k];
            let x = if k == 0 { &stack.input } else { &enc.activations[k - 1] };
            let need_input = k > 0 || want_input;
            let (mut gw, mut gb) = scratch(layer);
            let g_in = conv_backward(&layer.geometry, &layer.weight, x, &g_act, &mut gw, &mut gb, need_input)?;
            if let Some(gr) = grads.as_mut() {
                accumulate(&mut gr.encoders[ei].layers[k], &gw, &gb);
            }
            match g_in {
                Some(gi) if k > 0 => g_act = gi,
                Some(gi) => match g_input.as_mut() {
                    Some(acc) => acc.add_assign(&gi),
                    None => g_input = Some(gi),
                },
                None => {}
            }
        }
    }
    if let Some(gi) = g_input {
        col.record("input", &gi);
    }
    Ok(finish(col, grads))
}

fn scratch(layer: &ConvParams) -> (Vec<f64>, Vec<f64>) {
    (vec![0.0; layer.weight.len()], vec![0.0; layer.bias.len()])
}

fn accumulate(dst: &mut ConvParams, gw: &[f64], gb: &[f64]) {
    dst.weight.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
    dst.bias.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
}

#[allow(clippy::too_many_arguments)]
fn backward_through_gate(
    site: GatingSite,
    raw: &FeatureMap,
    g: FeatureMap,
    config: &ModelConfig,
    params: &Params,
    stack: &FeatureStack,
    grads: &mut Option<Params>,
    col: &mut Collector,
) -> Result<FeatureMap> {
    let Some(slot) = config.attention_slot(site) else {
        return Ok(g);
    };
    let cache = stack
        .gate(site)
        .ok_or_else(|| Error::invalid("feature stack lacks an active attention block"))?;
    col.record(&site.gated_name(), &g);
    let weights = &params.attention[slot];
    let mut scratch = AttentionWeights::zeros(weights.channels, weights.channels / weights.hidden)?;
    let g_in = gate_backward(raw, weights, cache, &g, &mut scratch)?;
    if let Some(gr) = grads.as_mut() {
        let dst = &mut gr.attention[slot];
        dst.w0.iter_mut().zip(&scratch.w0).for_each(|(a, b)| *a += b);
        dst.w1.iter_mut().zip(&scratch.w1).for_each(|(a, b)| *a += b);
        dst.spatial_kernel
            .iter_mut()
            .zip(&scratch.spatial_kernel)
            .for_each(|(a, b)| *a += b);
        dst.spatial_bias += scratch.spatial_bias;
    }
    Ok(g_in)
}

/// Exact gradient of the pre-softmax logit of `class` with respect to every
/// voxel of the named layer.
pub fn score_gradient(
    params: &Params,
    config: &ModelConfig,
    stack: &FeatureStack,
    class: u8,
    layer: &str,
) -> Result<FeatureMap> {
    if class > 1 {
        return Err(Error::invalid(format!("class index must be 0 or 1, got {class}")));
    }
    let mut dlogits = [0.0; 2];
    dlogits[class as usize] = 1.0;
    let request = BackwardRequest {
        param_grads: false,
        capture: vec![layer.to_string()],
    };
    let mut g = backward(params, config, stack, dlogits, &request)?;
    g.layers
        .remove(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer:?} was not reached")))
}

/// Cross-entropy of the softmax likelihoods against `label`, and its
/// gradient with respect to the logits.
pub fn cross_entropy(stack: &FeatureStack, label: u8) -> (f64, [f64; 2]) {
    let p = stack.likelihoods;
    let l = label as usize;
    let loss = -(p[l].max(f64::MIN_POSITIVE)).ln();
    let mut d = p;
    d[l] -= 1.0;
    (loss, d)
}
