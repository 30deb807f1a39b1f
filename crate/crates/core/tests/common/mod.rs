//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and the first violation otherwise.

#![allow(dead_code)]

use std::path::Path;
use std::time::Instant;

use camscope_core::cam::{activation_map, finalize, neuron_importance, select_layer, Upsampling};
use camscope_core::eval::{evaluate, write_report, EvalOptions, EvalReport};
use camscope_core::metrics::{format_percent, identification_rate, roc_auc, CaseLocalization};
use camscope_core::model::{
    classify, forward_with, load_checkpoint, save_checkpoint, score_gradient, GatingSite, HeadParams, ModelConfig,
    Override, Params,
};
use camscope_core::nn::{apply_attention, channel_attention, channel_descriptors, spatial_attention, AttentionWeights};
use camscope_core::phantom::{generate_case, generate_dataset, lobe_partition, PhantomSpec};
use camscope_core::preprocess::{apply_lung_window, apply_mask, resample_volume, WindowSetting};
use camscope_core::store::{read_json, DatasetIndex, LesionAnnotation, LesionKind, Lobe, ManifestFile, Split};
use camscope_core::train::{load_samples, train, write_log_csv, Sample, TrainConfig, TrainOutcome};
use camscope_core::{FeatureMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, expected {want}"))
    }
}

fn ensure(name: &str, ok: bool) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(format!("{name} does not hold"))
    }
}

fn fm(c: usize, dims: [usize; 3], data: Vec<f64>) -> FeatureMap {
    FeatureMap::new(c, dims, data).unwrap()
}

// ---------------------------------------------------------------- equations

pub fn equations() -> Check {
    let t = Instant::now();
    const TOL: f64 = 1e-9;
    let mut n = 0;
    let mut case = |r: Result<(), String>| -> Result<(), String> {
        n += 1;
        r
    };

    // Descriptors: a constant channel has mean = max = k.
    let f = fm(2, [2, 2, 1], vec![1.5, 1.5, 1.5, 1.5, 0.0, 3.0, -1.0, 2.0]);
    let (a, b, _) = channel_descriptors(&f);
    case(close("mean of constant channel", a[0], 1.5, TOL))?;
    case(close("max of constant channel", b[0], 1.5, TOL))?;
    case(close("mean of channel 1", a[1], 1.0, TOL))?;
    case(close("max of channel 1", b[1], 3.0, TOL))?;

    // Channel gate with zero MLP weights is 0.5 everywhere.
    let w = AttentionWeights::zeros(2, 1).unwrap();
    for m in channel_attention(&f, &w).unwrap() {
        case(close("sigma(0)", m, 0.5, TOL))?;
    }
    // C = 2, r = 1, hand-set weights on a 2×1×1×1 map (a = b = (2, 1)).
    // hidden = W0ᵀ(2, 1) = (1.25, -1.5) → ReLU (1.25, 0); summed over both
    // paths: (2.5, 0). m = σ(W1ᵀ (2.5, 0)) = (σ(1.0), σ(-0.5)).
    let mut w = AttentionWeights::zeros(2, 1).unwrap();
    w.w0 = vec![0.5, -1.0, 0.25, 0.5];
    w.w1 = vec![0.4, -0.2, 1.0, 3.0];
    let m = channel_attention(&fm(2, [1, 1, 1], vec![2.0, 1.0]), &w).unwrap();
    case(close("m_0 = σ(1)", m[0], 0.7310585786300049, TOL))?;
    case(close("m_1 = σ(-0.5)", m[1], 0.3775406687981454, TOL))?;

    // Spatial gate: zero kernel → 0.5.
    let w = AttentionWeights::zeros(2, 1).unwrap();
    let sp = spatial_attention(&f, &w).unwrap();
    case(ensure("zero kernel gives 0.5", sp.data().iter().all(|&v| (v - 0.5).abs() < TOL)))?;
    // C = 1: A = B = F', so kernel taps (k, -k) on A and B cancel.
    let mut w1 = AttentionWeights::zeros(1, 1).unwrap();
    w1.spatial_kernel[13] = 0.8;
    w1.spatial_kernel[27 + 13] = -0.8;
    let single = fm(1, [2, 2, 1], vec![0.3, -1.0, 2.0, 0.7]);
    let sp = spatial_attention(&single, &w1).unwrap();
    case(ensure("A = B for one channel", sp.data().iter().all(|&v| (v - 0.5).abs() < TOL)))?;
    // 1×1×1 grid, F' = (0.6, -0.2): A = 0.2, B = 0.6; k_A = 1.5, k_B = 2.
    let mut w = AttentionWeights::zeros(2, 1).unwrap();
    w.spatial_kernel[13] = 1.5;
    w.spatial_kernel[27 + 13] = 2.0;
    let sp = spatial_attention(&fm(2, [1, 1, 1], vec![0.6, -0.2]), &w).unwrap();
    case(close("M = σ(1.5·0.2 + 2·0.6)", sp.data()[0], 0.8175744761936437, TOL))?;

    // Gating: identity, annihilation, attenuation.
    let ones = Volume::filled([2, 2, 1], 1.0);
    let g = apply_attention(&f, &[1.0, 1.0], &ones).unwrap();
    case(ensure("m = 1, M = 1 is the identity", g == f))?;
    let g = apply_attention(&f, &[0.0, 0.0], &ones).unwrap();
    case(ensure("m = 0 annihilates", g.data().iter().all(|&v| v == 0.0)))?;
    let half = Volume::from_fn([2, 2, 1], |x, y, _| 0.1 + 0.2 * (x + y) as f64);
    let g = apply_attention(&f, &[0.3, 0.9], &half).unwrap();
    case(ensure(
        "|F''| <= |F|",
        g.data().iter().zip(f.data()).all(|(a, b)| a.abs() <= b.abs()),
    ))?;

    // Neuron importance.
    let grads = fm(2, [2, 1, 1], vec![1.0, -1.0, 3.0, 1.0]);
    let alpha = neuron_importance(&grads);
    case(close("α_0", alpha[0], 0.5, TOL))?;
    case(close("α_1", alpha[1], 2.0, TOL))?;
    let neg = fm(2, [2, 1, 1], vec![-1.0, -0.1, -3.0, -2.0]);
    case(ensure("negative gradients give α = 0", neuron_importance(&neg) == vec![0.0, 0.0]))?;
    let constant = fm(1, [3, 1, 1], vec![0.7; 3]);
    case(close("constant gradient", neuron_importance(&constant)[0], 0.7, TOL))?;

    // Activation map.
    let s = activation_map(&[1.0, 2.0], &fm(2, [1, 1, 1], vec![3.0, -2.0])).unwrap();
    case(close("ReLU(3 - 4)", s.data()[0], 0.0, TOL))?;
    let s = activation_map(&[0.0, 0.0], &f).unwrap();
    case(ensure("α = 0 gives a zero map", s.data().iter().all(|&v| v == 0.0)))?;
    let s = activation_map(&[1.0], &single).unwrap();
    case(ensure(
        "single channel, α = 1 is ReLU(features)",
        s.data().iter().zip(single.data()).all(|(a, b)| *a == b.max(0.0)),
    ))?;

    // Threshold arithmetic: 0.4 / 5 = 0.08 <= 0.1.
    let h = finalize(&Volume::new([2, 1, 1], vec![5.0, 0.4]).unwrap(), 0.1, [2, 1, 1], Upsampling::Trilinear).unwrap();
    case(close("normalized 0.4/5", h.normalized.data()[1], 0.08, TOL))?;
    case(close("thresholded", h.thresholded.data()[1], 0.0, 0.0))?;
    let uni = finalize(&Volume::filled([2, 2, 2], 3.0), 0.95, [2, 2, 2], Upsampling::Trilinear).unwrap();
    case(ensure("uniform map survives", uni.thresholded.data().iter().all(|&v| v == 1.0)))?;

    // Windowing.
    let ct = Volume::new([4, 1, 1], vec![-550.0, -2000.0, 500.0, -925.0]).unwrap();
    let win = apply_lung_window(&ct, WindowSetting::default()).unwrap();
    for (got, want) in win.data().iter().zip([0.0, -1.0, 1.0, -0.5]) {
        case(close("window", *got, want, TOL))?;
    }
    // Masking.
    let v = Volume::filled([2, 2, 1], 0.7);
    let checker = Volume::from_fn([2, 2, 1], |x, y, _| ((x + y) % 2) as f64);
    case(ensure(
        "checkerboard mask",
        apply_mask(&v, &checker).unwrap().data() == [0.0, 0.7, 0.7, 0.0],
    ))?;
    // Ramp 8 → 4 samples the ramp at 2j + 0.5.
    let ramp = Volume::from_fn([8, 1, 1], |x, _, _| x as f64);
    let r = resample_volume(&ramp, [4, 1, 1]).unwrap();
    for (j, v) in r.data().iter().enumerate() {
        case(close("ramp sample", *v, 2.0 * j as f64 + 0.5, TOL))?;
    }

    // Head.
    let head = HeadParams {
        weight: vec![0.0; 4],
        bias: [0.0, 0.0],
    };
    let c = classify(&FeatureMap::zeros(2, [2, 2, 2]), &head).unwrap();
    case(ensure("tie goes to class 0", c.likelihoods == [0.5, 0.5] && c.predicted_class == 0))?;
    let head = HeadParams {
        weight: vec![0.0; 4],
        bias: [0.0, 10.0],
    };
    let c = classify(&FeatureMap::zeros(2, [2, 2, 2]), &head).unwrap();
    case(ensure("logits (0, 10)", c.likelihoods[1] > 0.9999 && c.predicted_class == 1))?;
    case(close("likelihoods sum", c.likelihoods[0] + c.likelihoods[1], 1.0, 1e-12))?;

    // Schedule: epoch 11 (1-based) has been decayed once.
    case(close("lr at epoch 11", TrainConfig::paper().learning_rate(10), 8.5e-5, 1e-18))?;

    // Lobes: right-lung thirds of a z-homogeneous mask.
    let mask = Volume::from_fn([12, 4, 13], |x, y, _| f64::from((x < 4 || x >= 8) && y < 3));
    let lobes = lobe_partition(&mask).map_err(|e| e.to_string())?;
    let plane_count = |z0: usize, z1: usize| (z0..z1).count() * 4 * 3;
    case(ensure(
        "right-lung thirds",
        lobes.count(Lobe::RightLower) == plane_count(0, 5)
            && lobes.count(Lobe::RightMiddle) == plane_count(5, 9)
            && lobes.count(Lobe::RightUpper) == plane_count(9, 13),
    ))?;
    let counts = [Lobe::RightLower, Lobe::RightMiddle, Lobe::RightUpper].map(|l| lobes.count(l));
    let slice = 4 * 3;
    case(ensure(
        "thirds within one slice",
        counts.iter().max().unwrap() - counts.iter().min().unwrap() <= slice,
    ))?;

    // Shape arithmetic on the desk grid at full widths.
    let desk_grid = ModelConfig {
        input_shape: [96, 96, 48],
        ..ModelConfig::paper()
    };
    let shapes = desk_grid.layer_shapes();
    let shape_of = |name: &str| shapes.iter().find(|(n, _)| n == name).map(|(_, s)| *s);
    case(ensure("F_ax at 32×24×24×12", shape_of("F_ax") == Some([32, 24, 24, 12])))?;
    let cam = select_layer(&desk_grid);
    case(ensure("CAM layer at 12×12×6", shape_of(&cam).map(|s| [s[1], s[2], s[3]]) == Some([12, 12, 6])))?;

    // AUC hand example.
    let (_, auc) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    case(close("AUC", auc, 0.75, 1e-12))?;

    let secs = t.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Err(format!("equation suite took {secs:.1} s"));
    }
    Ok(format!("{n} closed-form examples in {secs:.2} s"))
}

// ---------------------------------------------------------------- gradients

/// Desk-sized model with every gating site active and generic parameters
/// (non-zero biases and pooling logits), on a phantom input.
pub fn gradient_fixture() -> (ModelConfig, Params, Volume) {
    let mut cfg = ModelConfig::desk().with_attention_blocks(6).with_seed(17);
    cfg.mlp_reduction = 4;
    let mut params = Params::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for v in params.views_mut() {
        if v.name.ends_with(".bias") || v.name.ends_with("mix_logit") {
            v.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let spec = PhantomSpec::default();
    let case = generate_case(&spec, 1, 1).unwrap();
    let win = apply_lung_window(&case.volume, WindowSetting::default()).unwrap();
    let input = resample_volume(&apply_mask(&win, &case.mask).unwrap(), cfg.input_shape).unwrap();

    // Rescale every convolution, in forward order, to unit output RMS. At
    // the raw init scale (~0.05) a step of 1e-3 crosses a ReLU or max
    // switch for most voxels.
    let mut convs: Vec<(String, usize, usize)> = Vec::new();
    for (e, enc) in params.encoders.iter().enumerate() {
        for k in 0..enc.layers.len() {
            convs.push((format!("enc2d.{}.conv{}", enc.orientation.short_name(), k + 1), e, k));
        }
    }
    for i in 0..params.stages.len() {
        convs.push((format!("enc3d.stage{}.dilated", i + 1), usize::MAX, 2 * i));
        convs.push((format!("enc3d.stage{}.conv", i + 1), usize::MAX, 2 * i + 1));
    }
    for (name, e, k) in convs {
        let stack = forward_with(&input, &params, &cfg, None).unwrap();
        let out = stack.get(&name).unwrap();
        let rms = (out.data().iter().map(|v| v * v).sum::<f64>() / out.data().len() as f64).sqrt();
        let conv = if e == usize::MAX {
            let st = &mut params.stages[k / 2];
            if k % 2 == 0 {
                &mut st.dilated
            } else {
                &mut st.pointwise
            }
        } else {
            &mut params.encoders[e].layers[k]
        };
        conv.weight.iter_mut().chain(conv.bias.iter_mut()).for_each(|w| *w /= rms);
    }
    (cfg, params, input)
}

pub fn gradients() -> Check {
    let t = Instant::now();
    let (cfg, params, input) = gradient_fixture();
    let stack = forward_with(&input, &params, &cfg, None).map_err(|e| e.to_string())?;
    let class = 1u8;
    let mut layers = vec![select_layer(&cfg)];
    layers.extend(cfg.active_sites().into_iter().map(GatingSite::layer_name));

    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut summary = Vec::new();
    for layer in &layers {
        let grad = score_gradient(&params, &cfg, &stack, class, layer).map_err(|e| e.to_string())?;
        let base = stack.get(layer).ok_or(format!("{layer} not cached"))?.clone();
        let logit = |value: &FeatureMap| -> f64 {
            let o = Override { layer, value };
            forward_with(&input, &params, &cfg, Some(o)).unwrap().logits[class as usize]
        };
        let f0 = stack.logits[class as usize];
        let (mut checked, mut skipped, mut attempts) = (0, 0, 0);
        let mut layer_worst: f64 = 0.0;
        while checked < 20 {
            attempts += 1;
            if attempts > 400 {
                return Err(format!("{layer}: only {checked} smooth voxels with a non-zero gradient"));
            }
            let i = rng.gen_range(0..base.data().len());
            let an = grad.data()[i];
            if an == 0.0 {
                continue;
            }
            let at = |step: f64| {
                let mut v = base.clone();
                v.data_mut()[i] += step;
                logit(&v)
            };
            let (fp, fm_) = (at(h), at(-h));
            // A max/ReLU switch inside [x - h, x + h], or a tie right at x,
            // shows up as disagreeing one-sided slopes, or as a central
            // difference that moves when the step shrinks a hundredfold.
            // The analytic value takes no part here.
            let fine = h / 100.0;
            let (fp_fine, fm_fine) = (at(fine), at(-fine));
            let slopes = [
                (fp - f0) / h,
                (f0 - fm_) / h,
                (fp_fine - f0) / fine,
                (f0 - fm_fine) / fine,
            ];
            let scale = slopes.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            let spread = slopes.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s))
                - slopes.iter().fold(f64::INFINITY, |m, &s| m.min(s));
            let central = (fp - fm_) / (2.0 * h);
            let central_fine = (fp_fine - fm_fine) / (2.0 * fine);
            if spread > 2e-4 * scale || (central - central_fine).abs() > 1e-5 * scale {
                skipped += 1;
                continue;
            }
            let fd = central;
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            if !(rel < 1e-4) {
                return Err(format!("{layer}[{i}]: analytic {an:e}, finite difference {fd:e}, rel err {rel:e}"));
            }
            worst = worst.max(rel);
            layer_worst = layer_worst.max(rel);
            checked += 1;
        }
        summary.push(format!("{layer}: {checked} ok/{skipped} kinks/max {layer_worst:.0e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("gradient check took {secs:.0} s"));
    }
    Ok(format!("max rel err {worst:.1e} in {secs:.1} s [{}]", summary.join(", ")))
}

// ---------------------------------------------------------------- shapes

pub fn paper_shapes() -> Check {
    let cfg = ModelConfig::paper();
    cfg.validate().map_err(|e| e.to_string())?;
    let shapes = cfg.layer_shapes();
    let get = |name: &str| shapes.iter().find(|(n, _)| n == name).map(|(_, s)| *s);
    let expect = [
        ("F_ax", [32, 48, 48, 16]),
        ("F_cor", [32, 48, 48, 16]),
        ("F_sag", [32, 48, 48, 16]),
        ("F_con", [96, 48, 48, 16]),
        ("enc3d.stage2.pool", [256, 12, 12, 4]),
    ];
    for (name, want) in expect {
        let got = get(name).ok_or(format!("no layer {name}"))?;
        if got != want {
            return Err(format!("{name}: {got:?} != {want:?}"));
        }
    }
    let cam = select_layer(&cfg);
    let cam_shape = get(&cam).ok_or("no CAM layer")?;
    if cam_shape[1..] != [24, 24, 8] {
        return Err(format!("CAM layer {cam} has shape {cam_shape:?}"));
    }
    let params = Params::zeros(&cfg).map_err(|e| e.to_string())?;
    params.check_compatible(&cfg).map_err(|e| e.to_string())?;
    let head = &params.head.weight;
    if head.len() != 2 * 256 {
        return Err("head does not read 256 channels".into());
    }
    Ok(format!(
        "F_o 32×48×48×16, F_con 96×48×48×16, F 256×12×12×4, CAM layer {cam} 24×24×8, {} parameters",
        params.count()
    ))
}

// ---------------------------------------------------------------- CAM properties

fn random_map(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> FeatureMap {
    let n = c * dims.iter().product::<usize>();
    fm(c, dims, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

fn random_dims(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..5)]
}

pub fn cam_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    const TRIALS: usize = 100;
    for trial in 0..TRIALS {
        let dims = random_dims(&mut rng);
        let c = rng.gen_range(1..6);
        let grads = random_map(&mut rng, c, dims);
        let feats = random_map(&mut rng, c, dims);
        let alpha = neuron_importance(&grads);
        let raw = activation_map(&alpha, &feats).unwrap();
        if raw.data().iter().any(|&v| v < 0.0) {
            return Err(format!("trial {trial}: negative raw heat"));
        }

        let tau = 0.1;
        let target = [dims[0] * 2, dims[1] + 3, dims[2] * 3];
        let mode = if trial % 2 == 0 {
            Upsampling::Trilinear
        } else {
            Upsampling::Nearest
        };
        let h = finalize(&raw, tau, target, mode).unwrap();
        for v in h.thresholded.data().iter().chain(h.volume_scale.data()) {
            if !(*v == 0.0 || (*v > tau && *v <= 1.0)) {
                return Err(format!("trial {trial}: thresholded value {v}"));
            }
        }

        let k = rng.gen_range(0.01..100.0);
        let scaled = finalize(&raw.map(|v| v * k), tau, target, mode).unwrap();
        for (a, b) in scaled.normalized.data().iter().zip(h.normalized.data()) {
            if (a - b).abs() > 1e-12 {
                return Err(format!("trial {trial}: normalized map changed under scale {k}"));
            }
        }

        // Channels whose gradients are all negative get α = 0 and cannot
        // influence the map.
        let mut neg = grads.clone();
        let dead = rng.gen_range(0..c);
        neg.channel_mut(dead).iter_mut().for_each(|g| *g = -g.abs() - 1e-3);
        let alpha_neg = neuron_importance(&neg);
        if alpha_neg[dead] != 0.0 {
            return Err(format!("trial {trial}: α = {} for an all-negative channel", alpha_neg[dead]));
        }
        let mut perturbed = feats.clone();
        perturbed.channel_mut(dead).iter_mut().for_each(|v| *v += 5.0);
        if activation_map(&alpha_neg, &perturbed).unwrap() != activation_map(&alpha_neg, &feats).unwrap() {
            return Err(format!("trial {trial}: annihilated channel still contributes"));
        }
        let mut all_neg = grads.clone();
        all_neg.data_mut().iter_mut().for_each(|g| *g = -g.abs());
        if activation_map(&neuron_importance(&all_neg), &feats).unwrap().max() != 0.0 {
            return Err(format!("trial {trial}: all-negative gradients left heat"));
        }
    }
    Ok(format!(
        "{TRIALS} trials each: non-negativity, threshold soundness, scale invariance, annihilation"
    ))
}

// ---------------------------------------------------------------- metrics

/// Mann–Whitney statistic by explicit pair counting.
pub fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn lesion(lobe: Lobe, k: usize) -> LesionAnnotation {
    LesionAnnotation {
        lobe,
        center: [2.0 + 4.0 * k as f64, 3.0, 3.0],
        radii: [1.2; 3],
        kind: LesionKind::Ggo,
    }
}

/// Builds cases whose lesion outcomes reproduce the published table counts
/// and runs them through `identification_rate`.
pub fn table_counts() -> Result<Vec<(String, String)>, String> {
    let table = [
        (Lobe::LeftUpper, 21, 2),
        (Lobe::LeftLower, 33, 22),
        (Lobe::RightUpper, 23, 9),
        (Lobe::RightMiddle, 11, 2),
        (Lobe::RightLower, 29, 27),
    ];
    let (n_cases, n_hit_cases) = (47, 39);
    let mut hits = Vec::new();
    let mut misses = Vec::new();
    for (lobe, total, identified) in table {
        hits.extend(std::iter::repeat(lobe).take(identified));
        misses.extend(std::iter::repeat(lobe).take(total - identified));
    }
    // Identified lesions go to the first 39 cases, missed ones start at
    // case 39 so the last 8 cases hold only missed lesions.
    let mut cases: Vec<Vec<(Lobe, bool)>> = vec![Vec::new(); n_cases];
    for (i, l) in hits.into_iter().enumerate() {
        cases[i % n_hit_cases].push((l, true));
    }
    for (i, l) in misses.into_iter().enumerate() {
        cases[(n_hit_cases + i) % n_cases].push((l, false));
    }
    let dims = [4 + 4 * cases.iter().map(Vec::len).max().unwrap(), 7, 7];
    let mut heatmaps = Vec::new();
    let mut annotations = Vec::new();
    for case in &cases {
        let mut heat = Volume::zeros(dims);
        let mut ann = Vec::new();
        for (k, &(lobe, hit)) in case.iter().enumerate() {
            let l = lesion(lobe, k);
            for (x, y, z) in l.support(dims) {
                heat.set(x, y, z, if hit { 0.6 } else { 0.05 });
            }
            ann.push(l);
        }
        heatmaps.push(heat);
        annotations.push(ann);
    }
    let ids: Vec<String> = (0..n_cases).map(|i| format!("c{i}")).collect();
    let loc: Vec<CaseLocalization> = (0..n_cases)
        .map(|i| CaseLocalization {
            case_id: &ids[i],
            lesions: &annotations[i],
            heatmap: Some(&heatmaps[i]),
        })
        .collect();
    let rep = identification_rate(&loc, 0.1).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for lobe in Lobe::ALL {
        let r = rep.per_lobe[&lobe];
        out.push((
            lobe.to_string(),
            format!("{}/{} {}", r.identified, r.total, format_percent(r.rate.unwrap())),
        ));
    }
    let c = rep.case_level;
    out.push((
        "case".into(),
        format!("{}/{} {}", c.identified, c.total, format_percent(c.rate.unwrap())),
    ));
    Ok(out)
}

pub fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores so ties occur.
        let levels = rng.gen_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let (points, auc) = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let oracle = pair_auc(&scores, &labels);
        let err = (auc - oracle).abs();
        if err > 1e-12 {
            return Err(format!("trial {trial}: trapezoid {auc} vs pairs {oracle}"));
        }
        if points.windows(2).any(|w| w[1].fpr < w[0].fpr || w[1].tpr < w[0].tpr) {
            return Err(format!("trial {trial}: ROC not monotone"));
        }
        worst = worst.max(err);
    }
    let expected = [
        ("LUL", "2/21 9.52"),
        ("LLL", "22/33 66.7"),
        ("RUL", "9/23 39.1"),
        ("RML", "2/11 18.2"),
        ("RLL", "27/29 93.1"),
        ("case", "39/47 83.0"),
    ];
    let got = table_counts()?;
    for ((name, want), (gname, gval)) in expected.iter().zip(&got) {
        if name != gname || want != gval {
            return Err(format!("{gname}: {gval}, expected {name}: {want}"));
        }
    }
    Ok(format!(
        "200 random instances, max |trapezoid - pairs| = {worst:.1e}; table: {}",
        got.iter().map(|(n, v)| format!("{n} {v}%")).collect::<Vec<_>>().join(", ")
    ))
}

// ---------------------------------------------------------------- end to end

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub seconds: f64,
}

pub struct Benchmark {
    pub with_attention: RunResult,
    pub without_attention: RunResult,
    pub split_sizes: [usize; 3],
}

pub fn benchmark_spec() -> PhantomSpec {
    PhantomSpec {
        n_typical: 160,
        n_nontypical: 160,
        split_fractions: [0.625, 0.1875],
        seed: 2024,
        ..PhantomSpec::default()
    }
}

fn load(dir: &Path, split: Split, cfg: &ModelConfig) -> Vec<Sample> {
    let index_path = dir.join("manifest.json");
    let index: DatasetIndex = read_json(&index_path).unwrap();
    let manifest = ManifestFile::open(index.split_path(&index_path, split).unwrap()).unwrap();
    load_samples(&manifest, cfg.input_shape, WindowSetting::default()).unwrap()
}

fn run(dir: &Path, name: &str, cfg: &ModelConfig, sets: &[Vec<Sample>; 3]) -> RunResult {
    let t = Instant::now();
    let tc = TrainConfig::desk();
    let outcome = train(&sets[0], &sets[1], cfg, &tc, |e| {
        println!(
            "    [{name}] epoch {:>2} lr {:.2e} loss {:.4} acc {:.3} val loss {:.4} val acc {:.3}",
            e.epoch, e.lr, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        )
    })
    .unwrap();
    let run_dir = dir.join(name);
    std::fs::create_dir_all(&run_dir).unwrap();
    write_log_csv(&outcome.log, &run_dir.join("train_log.csv")).unwrap();
    let ckpt = run_dir.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, cfg, &outcome.params, &serde_json::json!({"best_epoch": outcome.best_epoch})).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    let report = evaluate(&loaded.params, &loaded.config, &sets[2], &EvalOptions::default()).unwrap();
    write_report(&report, &run_dir).unwrap();
    RunResult {
        outcome,
        report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Generates the benchmark split on disk and trains the proposed model and
/// the attention-free ablation on it.
pub fn benchmark(dir: &Path) -> Benchmark {
    let spec = benchmark_spec();
    generate_dataset(&spec, &dir.join("data")).unwrap();
    let cfg = ModelConfig::desk().with_seed(spec.seed);
    let sets = [Split::Train, Split::Val, Split::Test].map(|s| load(&dir.join("data"), s, &cfg));
    let split_sizes = [sets[0].len(), sets[1].len(), sets[2].len()];
    let with_attention = run(dir, "attention1", &cfg, &sets);
    let without_attention = run(dir, "attention0", &cfg.clone().with_attention_blocks(0), &sets);
    Benchmark {
        with_attention,
        without_attention,
        split_sizes,
    }
}

pub fn end_to_end(b: &Benchmark) -> Check {
    let r = &b.with_attention;
    if b.split_sizes != [200, 60, 60] {
        return Err(format!("split sizes {:?}", b.split_sizes));
    }
    let ir = r.report.identification.case_level;
    let ir_rate = ir.rate.unwrap_or(0.0);
    let detail = format!(
        "test AUC {:.4}, case IR {}/{} = {}% (best epoch {}, {:.0} s)",
        r.report.auc,
        ir.identified,
        ir.total,
        format_percent(ir_rate),
        r.outcome.best_epoch,
        r.seconds
    );
    if r.report.auc >= 0.95 && ir_rate >= 0.80 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn ablation(b: &Benchmark) -> Check {
    let a = b.with_attention.report.auc;
    let n = b.without_attention.report.auc;
    let detail = format!(
        "AUC attention_blocks=1 {a:.4} vs attention_blocks=0 {n:.4} (logs: {} and {} epochs)",
        b.with_attention.outcome.log.len(),
        b.without_attention.outcome.log.len()
    );
    if a >= n - 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- determinism

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_shape: [32, 32, 16],
        enc2d_channels: 2,
        fused_channels: 6,
        enc3d_channels: 4,
        enc3d_stages: 2,
        mlp_reduction: 2,
        attention_blocks: 1,
        dilation_rate: 2,
        seed: 5,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(dir: &Path) {
    let spec = PhantomSpec {
        volume_shape: [32, 32, 16],
        n_typical: 8,
        n_nontypical: 8,
        lesion_count_range: [1, 2],
        lesion_radius_range_mm: [8.0, 12.0],
        seed: 31,
        split_fractions: [0.5, 0.25],
        ..PhantomSpec::default()
    };
    generate_dataset(&spec, &dir.join("data")).unwrap();
    let cfg = tiny_model();
    let sets = [Split::Train, Split::Val, Split::Test].map(|s| load(&dir.join("data"), s, &cfg));
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::desk()
    };
    let out = train(&sets[0], &sets[1], &cfg, &tc, |_| {}).unwrap();
    let run = dir.join("run");
    std::fs::create_dir_all(&run).unwrap();
    write_log_csv(&out.log, &run.join("train_log.csv")).unwrap();
    save_checkpoint(&run.join("checkpoint.ckpt"), &cfg, &out.params, &serde_json::json!({})).unwrap();
    let report = evaluate(&out.params, &cfg, &sets[2], &EvalOptions::default()).unwrap();
    write_report(&report, &run.join("eval")).unwrap();
}

pub fn determinism() -> Check {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let fa = files(a.path());
    let fb = files(b.path());
    if fa.len() != fb.len() {
        return Err(format!("{} files vs {}", fa.len(), fb.len()));
    }
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        if na != nb || da != db {
            return Err(format!("{na} differs between runs"));
        }
    }
    let kinds = ["manifest.json", "checkpoint.ckpt", "report.json", "roc.csv", "train_log.csv"];
    for k in kinds {
        if !fa.iter().any(|(n, _)| n.ends_with(k)) {
            return Err(format!("no {k} produced"));
        }
    }
    Ok(format!("{} files bit-identical across two runs (manifests, volumes, checkpoint, log, report)", fa.len()))
}
