//! Central finite-difference verification of every backward pass.
//!
//! Runs entirely in f64. Each check draws random instances, perturbs
//! random coordinates by ±ε, and compares the central difference
//! quotient of a scalar readout against the analytic gradient. Probes
//! that land across a ReLU, max-pool, or hinge switch are redrawn so
//! the quotient is taken on a single smooth piece. The reports feed
//! the `gradcheck` CLI subcommand and the release test suite.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{conv_backward, conv_forward, maxpool_backward, maxpool_forward, ConvLayer};
use crate::capsroute::{margin_loss, margin_loss_grad, route, routing_backward, CapsuleWeights, MarginParams};
use crate::error::Result;
use crate::harness::model::{Model, ModelConfig};
use crate::slic::Segmentation;
use crate::sppool::{tile_map, FeatureMap, PoolPlan, SpFeatures};
use crate::tensorio::{ColorSpace, Image};

const EPS: f64 = 1e-5;
const PROBE_ATTEMPTS: usize = 60;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.probes >= 20 && self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} probes, max rel err {:.3e} (tolerance {:.0e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.name,
            self.probes,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Relative error with an absolute floor so near-zero pairs compare
/// cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn relu_pattern(fm: &FeatureMap<f64>) -> Vec<bool> {
    fm.data.iter().map(|&y| y > 0.0).collect()
}

fn check_conv(seed: u64) -> Result<CheckReport> {
    let (h, w, ic, oc) = (5usize, 6usize, 2usize, 3usize);
    let mut max_err = 0.0f64;
    let mut probes = 0;
    for instance in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xc4c0 + instance);
        let input = FeatureMap::from_data(h, w, ic, uniform(&mut rng, h * w * ic, 1.0));
        let layer = ConvLayer {
            in_channels: ic,
            out_channels: oc,
            kernels: uniform(&mut rng, oc * 9 * ic, 0.6),
            bias: uniform(&mut rng, oc, 0.2),
        };
        let readout = uniform(&mut rng, h * w * oc, 1.0);
        let output = conv_forward(&input, &layer)?;
        let grad_out = FeatureMap::from_data(h, w, oc, readout.clone());
        let grads = conv_backward(&input, &output, &layer, &grad_out)?;
        let n_in = input.data.len();
        let n_k = layer.kernels.len();
        let total = n_in + n_k + layer.bias.len();
        for _ in 0..4 {
            for attempt in 0..PROBE_ATTEMPTS {
                let idx = rng.gen_range(0..total);
                let mut input_m = input.clone();
                let mut layer_m = layer.clone();
                let slot: &mut f64 = if idx < n_in {
                    &mut input_m.data[idx]
                } else if idx < n_in + n_k {
                    &mut layer_m.kernels[idx - n_in]
                } else {
                    &mut layer_m.bias[idx - n_in - n_k]
                };
                let center = *slot;
                *slot = center + EPS;
                let plus = conv_forward(&input_m, &layer_m)?;
                let slot: &mut f64 = if idx < n_in {
                    &mut input_m.data[idx]
                } else if idx < n_in + n_k {
                    &mut layer_m.kernels[idx - n_in]
                } else {
                    &mut layer_m.bias[idx - n_in - n_k]
                };
                *slot = center - EPS;
                let minus = conv_forward(&input_m, &layer_m)?;
                if relu_pattern(&plus) != relu_pattern(&minus) && attempt + 1 < PROBE_ATTEMPTS {
                    continue;
                }
                let fd = (dot(&plus.data, &readout) - dot(&minus.data, &readout)) / (2.0 * EPS);
                let analytic = if idx < n_in {
                    grads.input.data[idx]
                } else if idx < n_in + n_k {
                    grads.kernels[idx - n_in]
                } else {
                    grads.bias[idx - n_in - n_k]
                };
                max_err = max_err.max(rel_err(analytic, fd));
                probes += 1;
                break;
            }
        }
    }
    Ok(CheckReport {
        name: "conv",
        probes,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

fn check_maxpool(seed: u64) -> Result<CheckReport> {
    let (h, w, c) = (4usize, 4usize, 2usize);
    let mut max_err = 0.0f64;
    let mut probes = 0;
    for instance in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x3a70 + instance);
        let input = FeatureMap::from_data(h, w, c, uniform(&mut rng, h * w * c, 1.0));
        let (output, argmax) = maxpool_forward(&input)?;
        let readout = uniform(&mut rng, output.data.len(), 1.0);
        let grad_out = FeatureMap::from_data(h / 2, w / 2, c, readout.clone());
        let grad_in = maxpool_backward(&grad_out, &argmax, h, w)?;
        for _ in 0..4 {
            for attempt in 0..PROBE_ATTEMPTS {
                let idx = rng.gen_range(0..input.data.len());
                let mut input_m = input.clone();
                input_m.data[idx] += EPS;
                let (plus, am_plus) = maxpool_forward(&input_m)?;
                input_m.data[idx] -= 2.0 * EPS;
                let (minus, am_minus) = maxpool_forward(&input_m)?;
                if am_plus != am_minus && attempt + 1 < PROBE_ATTEMPTS {
                    continue;
                }
                let fd = (dot(&plus.data, &readout) - dot(&minus.data, &readout)) / (2.0 * EPS);
                max_err = max_err.max(rel_err(grad_in.data[idx], fd));
                probes += 1;
                break;
            }
        }
    }
    Ok(CheckReport {
        name: "maxpool",
        probes,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

fn check_pooling(seed: u64) -> Result<CheckReport> {
    let (image_side, feat_side, channels, regions) = (16usize, 8usize, 3usize, 5usize);
    let mut max_err = 0.0f64;
    let mut probes = 0;
    for instance in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x9001 + instance);
        let labels: Vec<u32> = (0..image_side * image_side)
            .map(|_| rng.gen_range(0..regions as u32))
            .collect();
        let seg = Segmentation::from_parts(image_side, image_side, labels, regions)?;
        let assoc = tile_map(feat_side, feat_side, image_side, image_side)?;
        let plan = PoolPlan::new(&seg, &assoc)?;
        let features = FeatureMap::from_data(
            feat_side,
            feat_side,
            channels,
            uniform(&mut rng, feat_side * feat_side * channels, 1.0),
        );
        let pooled = plan.forward(&features)?;
        let readout: Vec<f64> = pooled
            .mask
            .iter()
            .flat_map(|&live| {
                let row: Vec<f64> = if live {
                    uniform(&mut rng, channels, 1.0)
                } else {
                    vec![0.0; channels]
                };
                row
            })
            .collect();
        let carrier = SpFeatures {
            values: readout.clone(),
            regions: pooled.regions,
            channels,
            mask: pooled.mask.clone(),
            image_h: image_side,
            image_w: image_side,
        };
        let grad_in = plan.backward(&carrier)?;
        for _ in 0..5 {
            let idx = rng.gen_range(0..features.data.len());
            let mut features_m = features.clone();
            features_m.data[idx] += EPS;
            let plus = plan.forward(&features_m)?;
            features_m.data[idx] -= 2.0 * EPS;
            let minus = plan.forward(&features_m)?;
            let fd = (dot(&plus.values, &readout) - dot(&minus.values, &readout)) / (2.0 * EPS);
            max_err = max_err.max(rel_err(grad_in.data[idx], fd));
            probes += 1;
        }
    }
    Ok(CheckReport {
        name: "pooling",
        probes,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

fn check_routing(seed: u64) -> Result<CheckReport> {
    let (inputs, classes, in_dim, out_dim) = (6usize, 4usize, 5usize, 4usize);
    let mut max_err = 0.0f64;
    let mut probes = 0;
    for instance in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x10c7 + instance);
        let u = uniform(&mut rng, inputs * in_dim, 1.0);
        let mut mask = vec![true; inputs];
        if instance % 2 == 1 {
            mask[4] = false;
        }
        let w: CapsuleWeights<f64> =
            CapsuleWeights::init(inputs, classes, in_dim, out_dim, 0.5, &mut rng);
        let readout = uniform(&mut rng, classes * out_dim, 1.0);
        let state = route(&u, &mask, &w, 3)?;
        let grads = routing_backward(&state, &w, &readout)?;
        let total = u.len() + w.w.len();
        for _ in 0..5 {
            let idx = rng.gen_range(0..total);
            let mut u_m = u.clone();
            let mut w_m = w.clone();
            let slot = if idx < u.len() {
                &mut u_m[idx]
            } else {
                &mut w_m.w[idx - u.len()]
            };
            let center = *slot;
            *slot = center + EPS;
            let plus = route(&u_m, &mask, &w_m, 3)?;
            let slot = if idx < u.len() {
                &mut u_m[idx]
            } else {
                &mut w_m.w[idx - u.len()]
            };
            *slot = center - EPS;
            let minus = route(&u_m, &mask, &w_m, 3)?;
            let fd = (dot(plus.outputs(), &readout) - dot(minus.outputs(), &readout)) / (2.0 * EPS);
            let analytic = if idx < u.len() {
                grads.u[idx]
            } else {
                grads.w[idx - u.len()]
            };
            max_err = max_err.max(rel_err(analytic, fd));
            probes += 1;
        }
    }
    Ok(CheckReport {
        name: "routing",
        probes,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

fn check_margin(seed: u64) -> Result<CheckReport> {
    let (classes, out_dim) = (4usize, 4usize);
    let params = MarginParams::default();
    let mut max_err = 0.0f64;
    let mut probes = 0;
    for instance in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x3a61 + instance);
        let v = loop {
            let v = uniform(&mut rng, classes * out_dim, 0.5);
            let clear = (0..classes).all(|j| {
                let norm = v[j * out_dim..(j + 1) * out_dim]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                (norm - params.m_plus).abs() > 1e-3 && (norm - params.m_minus).abs() > 1e-3
            });
            if clear {
                break v;
            }
        };
        let target = rng.gen_range(0..classes);
        let (_, grad) = margin_loss_grad(&v, classes, out_dim, target, &params)?;
        for _ in 0..5 {
            let idx = rng.gen_range(0..v.len());
            let mut v_m = v.clone();
            v_m[idx] += EPS;
            let plus: f64 = margin_loss(&v_m, classes, out_dim, target, &params)?;
            v_m[idx] -= 2.0 * EPS;
            let minus = margin_loss(&v_m, classes, out_dim, target, &params)?;
            let fd = (plus - minus) / (2.0 * EPS);
            max_err = max_err.max(rel_err(grad[idx], fd));
            probes += 1;
        }
    }
    Ok(CheckReport {
        name: "margin",
        probes,
        max_rel_err: max_err,
        tolerance: 1e-4,
    })
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    let data: Vec<f32> = (0..side * side * 3)
        .map(|_| rng.gen_range(0..256) as f32)
        .collect();
    Image::from_data(side, side, ColorSpace::Rgb8, data).unwrap()
}

fn hinge_pattern(probs: &[f64], params: &MarginParams) -> Vec<(bool, bool)> {
    probs
        .iter()
        .map(|&p| (p > params.m_plus, p > params.m_minus))
        .collect()
}

fn pipeline_config(input: usize, stages: Vec<(usize, usize)>, seed: u64) -> ModelConfig {
    let mut config = ModelConfig::default();
    config.input = input;
    config.stages = stages;
    config.superpixels = 6;
    config.class_dim = 4;
    config.caps_init = 0.3;
    config.seed = seed;
    config
}

struct ParamSlot {
    stage: usize,
    layer: usize,
    kind: u8,
    len: usize,
}

fn param_slots(model: &Model<f64>) -> Vec<ParamSlot> {
    let mut slots = Vec::new();
    for (si, stage) in model.backbone.stages.iter().enumerate() {
        for (li, layer) in stage.iter().enumerate() {
            slots.push(ParamSlot { stage: si, layer: li, kind: 0, len: layer.kernels.len() });
            slots.push(ParamSlot { stage: si, layer: li, kind: 1, len: layer.bias.len() });
        }
    }
    slots.push(ParamSlot { stage: 0, layer: 0, kind: 2, len: model.caps.w.len() });
    slots
}

fn nudge(model: &mut Model<f64>, slots: &[ParamSlot], mut idx: usize, delta: f64) {
    for slot in slots {
        if idx < slot.len {
            match slot.kind {
                0 => model.backbone.stages[slot.stage][slot.layer].kernels[idx] += delta,
                1 => model.backbone.stages[slot.stage][slot.layer].bias[idx] += delta,
                _ => model.caps.w[idx] += delta,
            }
            return;
        }
        idx -= slot.len;
    }
    unreachable!("parameter index out of range");
}

fn analytic_at(
    grads: &crate::harness::model::ModelGrads<f64>,
    slots: &[ParamSlot],
    mut idx: usize,
) -> f64 {
    for slot in slots {
        if idx < slot.len {
            return match slot.kind {
                0 => grads.backbone.stages[slot.stage][slot.layer].0[idx],
                1 => grads.backbone.stages[slot.stage][slot.layer].1[idx],
                _ => grads.caps[idx],
            };
        }
        idx -= slot.len;
    }
    unreachable!("parameter index out of range");
}

fn check_pipeline_with(
    name: &'static str,
    input: usize,
    stages: Vec<(usize, usize)>,
    seed: u64,
) -> Result<CheckReport> {
    let mut max_err = 0.0f64;
    let mut probes = 0;
    for instance in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xe2e0 + instance);
        let config = pipeline_config(input, stages.clone(), seed + instance);
        let model: Model<f64> = Model::init(&config)?;
        let image = random_image(&mut rng, input);
        let cache = model.cache_for(&image)?;
        let forward = model.forward(&image, &cache)?;
        let label = rng.gen_range(0..config.classes);
        let (_, grads) = model.gradients(&forward, &cache, label)?;
        let slots = param_slots(&model);
        let total: usize = slots.iter().map(|s| s.len).sum();
        let margin = config.margin();
        for _ in 0..6 {
            for attempt in 0..PROBE_ATTEMPTS {
                let idx = rng.gen_range(0..total);
                let mut model_m = model.clone();
                nudge(&mut model_m, &slots, idx, EPS);
                let plus = model_m.forward(&image, &cache)?;
                nudge(&mut model_m, &slots, idx, -2.0 * EPS);
                let minus = model_m.forward(&image, &cache)?;
                let smooth = plus.trace.activation_pattern() == minus.trace.activation_pattern()
                    && hinge_pattern(&plus.probs, &margin) == hinge_pattern(&minus.probs, &margin);
                if !smooth && attempt + 1 < PROBE_ATTEMPTS {
                    continue;
                }
                let loss_plus: f64 = margin_loss(
                    plus.state.outputs(),
                    config.classes,
                    config.class_dim,
                    label,
                    &margin,
                )?;
                let loss_minus = margin_loss(
                    minus.state.outputs(),
                    config.classes,
                    config.class_dim,
                    label,
                    &margin,
                )?;
                let fd = (loss_plus - loss_minus) / (2.0 * EPS);
                max_err = max_err.max(rel_err(analytic_at(&grads, &slots, idx), fd));
                probes += 1;
                break;
            }
        }
    }
    Ok(CheckReport {
        name,
        probes,
        max_rel_err: max_err,
        tolerance: 1e-3,
    })
}

fn check_pipeline(seed: u64) -> Result<CheckReport> {
    check_pipeline_with("pipeline", 8, vec![], seed)
}

fn check_pipeline_conv(seed: u64) -> Result<CheckReport> {
    check_pipeline_with("pipeline_conv", 16, vec![(1, 4)], seed)
}

/// Runs every gradient check with sub-streams of one seed.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_conv(seed)?,
        check_maxpool(seed)?,
        check_pooling(seed)?,
        check_routing(seed)?,
        check_margin(seed)?,
        check_pipeline(seed)?,
        check_pipeline_conv(seed)?,
    ])
}
