#![allow(dead_code)]

use foodwaste::deltanet::{DeltaNet, DeltaNetConfig, PairSample};
use foodwaste::scenegen::{gen_episode, SceneConfig};
use foodwaste::segnet::{MaskSample, UNet, UNetConfig};
use foodwaste_tensor::params::seeded_rng;
use foodwaste_tensor::{grad_check, GradCheckConfig, GradCheckReport, ParamSet, Tensor, TensorError};
use rand::Rng;

/// Finite-difference step for whole-model checks: small enough that ReLU and
/// max-pool kinks are rarely straddled, large enough to stay clear of round-off.
pub const MODEL_EPSILON: f64 = 3e-6;

fn lift(e: foodwaste::Error) -> TensorError {
    TensorError::Input(e.to_string())
}

/// Mask samples from consecutive bins: image = after, mask = cumulative mask.
pub fn mask_samples(seed: u64, bins: std::ops::Range<u64>, deposits: usize, size: usize) -> Vec<MaskSample> {
    let cfg = SceneConfig::new(5, size);
    bins.flat_map(|b| gen_episode(seed, b, deposits, &cfg).unwrap().events)
        .map(|e| MaskSample::new(e.after, e.cumulative_mask).unwrap())
        .collect()
}

pub fn pair_samples(seed: u64, bins: std::ops::Range<u64>, deposits: usize, classes: usize, size: usize) -> Vec<PairSample> {
    let cfg = SceneConfig::new(classes, size);
    bins.flat_map(|b| gen_episode(seed, b, deposits, &cfg).unwrap().events)
        .map(|e| PairSample {
            before: e.before,
            after: e.after,
            label: e.class_id,
        })
        .collect()
}

/// Gradient check of the U-Net's BCE loss on random images and masks.
pub fn unet_grad_check(config: UNetConfig, batch: usize, coords_per_param: usize, seed: u64) -> GradCheckReport {
    let (net, params) = UNet::build(config, seed).unwrap();
    let mut params: ParamSet<f64> = params.cast();
    let mut rng = seeded_rng(seed ^ 0xA5);
    // non-zero biases keep pre-activations off exact ties
    for (name, p) in params.iter_mut() {
        if name.ends_with("/bias") {
            p.value = Tensor::uniform(p.value.shape(), -0.1, 0.1, &mut rng);
        }
    }
    let s = config.input_size;
    let images = Tensor::<f64>::uniform(&[batch, 3, s, s], 0.0, 1.0, &mut rng);
    let masks = Tensor::<f64>::from_fn(&[batch, 1, s, s], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let cfg = GradCheckConfig {
        max_coords_per_param: coords_per_param,
        epsilon: MODEL_EPSILON,
        seed,
        ..Default::default()
    };
    grad_check(
        |g, p| net.loss(g, p, images.clone(), masks.clone()).map_err(lift),
        &params,
        &cfg,
    )
    .unwrap()
}

/// Gradient check of the classifier's cross-entropy. Lambdas are moved off
/// 1.0 and the inputs are random, so no delta sits exactly on its kink.
pub fn deltanet_grad_check(config: DeltaNetConfig, batch: usize, coords_per_param: usize, seed: u64) -> (GradCheckReport, ParamSet<f64>) {
    let k = config.num_classes;
    let s = config.input_size;
    let (net, params) = DeltaNet::build(config, None, seed).unwrap();
    let mut params: ParamSet<f64> = params.cast();
    let mut rng = seeded_rng(seed ^ 0x5A);
    for (name, p) in params.iter_mut() {
        if name.starts_with("delta/") {
            p.value = Tensor::uniform(p.value.shape(), 0.5, 1.5, &mut rng);
        } else if name.ends_with("/bias") {
            p.value = Tensor::uniform(p.value.shape(), -0.1, 0.1, &mut rng);
        }
    }
    let before = Tensor::<f64>::uniform(&[batch, 3, s, s], 0.0, 1.0, &mut rng);
    let after = Tensor::<f64>::uniform(&[batch, 3, s, s], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..k)).collect();
    let cfg = GradCheckConfig {
        max_coords_per_param: coords_per_param,
        epsilon: MODEL_EPSILON,
        seed,
        ..Default::default()
    };
    let report = grad_check(
        |g, p| {
            let b = g.input(before.clone());
            let a = g.input(after.clone());
            let logits = net.forward(g, p, b, a).map_err(lift)?;
            g.softmax_cross_entropy(logits, &labels)
        },
        &params,
        &cfg,
    )
    .unwrap();
    (report, params)
}
