//! U-Net background subtraction: per-pixel food / not-food segmentation.

use foodwaste_tensor::params::{derive_seed, kaiming_uniform, seeded_rng};
use foodwaste_tensor::{Graph, OptimConfig, Optimizer, ParamSet, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub input_size: usize,
    pub base_channels: usize,
    /// Number of 2x down-samplings.
    pub depth: usize,
    pub convs_per_block: usize,
}

impl UNetConfig {
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            base_channels: 8,
            depth: 3,
            convs_per_block: 2,
        }
    }

    /// 128x128 input, 19 convolutions, about 8.9M parameters.
    pub fn paper_scale() -> Self {
        Self {
            input_size: 128,
            base_channels: 34,
            depth: 4,
            convs_per_block: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.convs_per_block == 0 || self.input_size == 0 {
            return Err(Error::Config(format!("degenerate U-Net config {self:?}")));
        }
        if !self.input_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Weight-bearing convolutions: encoder, decoder and the final 1x1.
    pub fn conv_layer_count(&self) -> usize {
        (self.depth + 1) * self.convs_per_block + self.depth * self.convs_per_block + 1
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, S, S]`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

impl MaskSample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        let (mc, mh, mw) = mask.dims3()?;
        if c != 3 || mc != 1 || (h, w) != (mh, mw) {
            return Err(Error::Input(format!(
                "image {:?} and mask {:?} do not form a sample",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("mask is not binary".into()));
        }
        Ok(Self { image, mask })
    }
}

fn enc_name(level: usize, conv: usize) -> String {
    format!("enc{level}/conv{conv}")
}

fn dec_name(level: usize, conv: usize) -> String {
    format!("dec{level}/conv{conv}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Builds the network and its Kaiming-initialised parameters.
    pub fn build(config: UNetConfig, seed: u64) -> Result<(Self, ParamSet<f32>)> {
        let net = Self::new(config)?;
        let params = net.init_params(seed)?;
        Ok((net, params))
    }

    fn conv_specs(&self) -> Vec<(String, usize, usize, usize)> {
        let cfg = &self.config;
        let mut specs = Vec::new();
        let mut cin = 3;
        for level in 0..=cfg.depth {
            let cout = cfg.level_channels(level);
            for j in 0..cfg.convs_per_block {
                specs.push((enc_name(level, j), cin, cout, 3));
                cin = cout;
            }
        }
        for level in (0..cfg.depth).rev() {
            let cout = cfg.level_channels(level);
            cin = cfg.level_channels(level + 1) + cout;
            for j in 0..cfg.convs_per_block {
                specs.push((dec_name(level, j), cin, cout, 3));
                cin = cout;
            }
        }
        specs.push(("head".to_string(), cin, 1, 1));
        specs
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        let mut params = ParamSet::new();
        for (name, cin, cout, k) in self.conv_specs() {
            let wname = format!("{name}/weight");
            let w = kaiming_uniform(&[cout, cin, k, k], cin * k * k, seed, &wname);
            params.insert(wname, w, true)?;
            params.insert(format!("{name}/bias"), Tensor::zeros(&[cout]), true)?;
        }
        Ok(params)
    }

    fn conv<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        params: &'p ParamSet<T>,
        name: &str,
        x: Var,
        padding: usize,
    ) -> Result<Var> {
        let w = g.param(params, &format!("{name}/weight"))?;
        let b = g.param(params, &format!("{name}/bias"))?;
        Ok(g.conv2d(x, w, b, padding, 1)?)
    }

    /// Per-pixel food logits `[N, 1, S, S]` for images `[N, 3, S, S]`.
    pub fn forward_logits<'p, T: Real>(&self, g: &mut Graph<'p, T>, params: &'p ParamSet<T>, images: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
            return Err(Error::Input(format!(
                "U-Net expects [N, 3, {s}, {s}], got {shape:?}",
                s = cfg.input_size
            )));
        }
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut x = images;
        for level in 0..=cfg.depth {
            for j in 0..cfg.convs_per_block {
                let y = self.conv(g, params, &enc_name(level, j), x, 1)?;
                x = g.relu(y);
            }
            if level < cfg.depth {
                skips.push(x);
                x = g.maxpool2(x)?;
            }
        }
        for level in (0..cfg.depth).rev() {
            let skip = skips[level];
            let (_, _, h, w) = g.value(skip).dims4()?;
            let up = g.resize_bilinear(x, h, w)?;
            x = g.concat_channels(&[up, skip])?;
            for j in 0..cfg.convs_per_block {
                let y = self.conv(g, params, &dec_name(level, j), x, 1)?;
                x = g.relu(y);
            }
        }
        self.conv(g, params, "head", x, 0)
    }

    /// Food probabilities `[N, 1, S, S]`, each in `(0, 1)`.
    pub fn predict(&self, params: &ParamSet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let logits = self.forward_logits(&mut g, params, x)?;
        let probs = g.sigmoid(logits);
        Ok(g.value(probs).clone())
    }

    /// Mean per-pixel binary cross-entropy against `masks`.
    pub fn loss<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        params: &'p ParamSet<T>,
        images: Tensor<T>,
        masks: Tensor<T>,
    ) -> Result<Var> {
        let x = g.input(images);
        let logits = self.forward_logits(g, params, x)?;
        Ok(g.bce_with_logits(logits, masks)?)
    }
}

/// 1 where `p >= threshold`, else 0.
pub fn binarize(probs: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    probs.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// Fraction of pixels on which two binary masks agree.
pub fn pixel_accuracy(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Input(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let binary = |t: &Tensor<f32>| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(pred) || !binary(truth) {
        return Err(Error::Input("pixel_accuracy needs binary masks".into()));
    }
    let agree = pred.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.numel() as f64)
}

/// One element of the symmetry group of the square: `rotations` quarter
/// turns counter-clockwise, preceded by a horizontal flip if `flip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub rotations: u8,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        flip: false,
        rotations: 0,
    };

    pub fn draw(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            flip: rng.gen_bool(0.5),
            rotations: rng.gen_range(0..4),
        }
    }

    /// Source pixel of output pixel `(r, c)` in an `s x s` image.
    fn source(&self, r: usize, c: usize, s: usize) -> (usize, usize) {
        // undo the rotation first, then the flip
        let (mut r, mut c) = (r, c);
        for _ in 0..self.rotations {
            (r, c) = (c, s - 1 - r);
        }
        if self.flip {
            c = s - 1 - c;
        }
        (r, c)
    }

    /// Applies the transform to every channel of a square `[C, S, S]` tensor.
    pub fn apply(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (ch, h, w) = t.dims3()?;
        if h != w {
            return Err(Error::Input(format!("augmentation needs square images, got {h}x{w}")));
        }
        if *self == Self::IDENTITY {
            return Ok(t.clone());
        }
        let plane = h * w;
        let src = t.data();
        let mut out = vec![0f32; src.len()];
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = self.source(r, c, h);
                for k in 0..ch {
                    out[k * plane + r * w + c] = src[k * plane + sr * w + sc];
                }
            }
        }
        Ok(Tensor::new(t.shape(), out)?)
    }
}

/// Applies one random flip/rotation identically to image and mask.
pub fn augment(sample: &MaskSample, seed: u64) -> Result<MaskSample> {
    let aug = Augmentation::draw(seed);
    Ok(MaskSample {
        image: aug.apply(&sample.image)?,
        mask: aug.apply(&sample.mask)?,
    })
}

#[derive(Clone, Debug)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub augment: bool,
    pub threshold: f32,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optim: OptimConfig::default(),
            seed: 0,
            augment: true,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_pixel_accuracy: f64,
    pub val_pixel_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SegTraining {
    pub params: ParamSet<f32>,
    pub history: Vec<SegEpoch>,
    pub test_pixel_accuracy: f64,
}

fn stack_samples<'a>(samples: impl Iterator<Item = &'a MaskSample>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (images, masks): (Vec<_>, Vec<_>) = samples.map(|s| (&s.image, &s.mask)).unzip();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Pixel accuracy of the thresholded predictions over `samples`.
pub fn evaluate_pixel_accuracy(
    net: &UNet,
    params: &ParamSet<f32>,
    samples: &[MaskSample],
    batch_size: usize,
    threshold: f32,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let mut agree = 0.0;
    let mut total = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, masks) = stack_samples(chunk.iter())?;
        let pred = binarize(&net.predict(params, &images)?, threshold);
        agree += pixel_accuracy(&pred, &masks)? * pred.numel() as f64;
        total += pred.numel();
    }
    Ok(agree / total as f64)
}

/// Trains on `train`, tracks `val` each epoch and reports accuracy on `test`.
pub fn train_unet(
    net: &UNet,
    params: ParamSet<f32>,
    train: &[MaskSample],
    val: &[MaskSample],
    test: &[MaskSample],
    cfg: &SegTrainConfig,
) -> Result<SegTraining> {
    train_unet_with_progress(net, params, train, val, test, cfg, |_| {})
}

/// [`train_unet`], calling `progress` after every epoch.
pub fn train_unet_with_progress(
    net: &UNet,
    params: ParamSet<f32>,
    train: &[MaskSample],
    val: &[MaskSample],
    test: &[MaskSample],
    cfg: &SegTrainConfig,
    mut progress: impl FnMut(&SegEpoch),
) -> Result<SegTraining> {
    for (name, split) in [("train", train), ("val", val), ("test", test)] {
        if split.is_empty() {
            return Err(Error::Input(format!("{name} split is empty")));
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut params = params;
    let mut opt = Optimizer::new(cfg.optim);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded_rng(derive_seed(&[cfg.seed, epoch as u64, 0x5E6])));
        let mut loss_sum = 0.0;
        let mut agree = 0.0;
        let mut pixels = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<MaskSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train[i], derive_seed(&[cfg.seed, epoch as u64, step as u64, i as u64]))
                    } else {
                        Ok(train[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let (images, masks) = stack_samples(batch.iter())?;
            let grads = {
                let mut g = Graph::new();
                let x = g.input(images);
                let logits = net.forward_logits(&mut g, &params, x)?;
                let pred = binarize(g.value(logits), 0.0);
                agree += pixel_accuracy(&pred, &masks)? * pred.numel() as f64;
                pixels += pred.numel();
                let loss = g.bce_with_logits(logits, masks)?;
                loss_sum += g.value(loss).data()[0] as f64 * chunk.len() as f64;
                g.backward(loss)?
            };
            opt.step(&mut params, &grads)?;
        }
        let val_acc = evaluate_pixel_accuracy(net, &params, val, cfg.batch_size, cfg.threshold)?;
        history.push(SegEpoch {
            epoch: epoch + 1,
            loss: loss_sum / train.len() as f64,
            train_pixel_accuracy: agree / pixels as f64,
            val_pixel_accuracy: val_acc,
        });
        progress(&history[epoch]);
    }
    let test_pixel_accuracy = evaluate_pixel_accuracy(net, &params, test, cfg.batch_size, cfg.threshold)?;
    Ok(SegTraining {
        params,
        history,
        test_pixel_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use foodwaste_tensor::param_count;

    #[test]
    fn layer_counts() {
        assert_eq!(UNetConfig::paper_scale().conv_layer_count(), 19);
        let (net, params) = UNet::build(UNetConfig::paper_scale(), 0).unwrap();
        let convs = params.names().filter(|n| n.ends_with("/weight")).count();
        assert_eq!(convs, net.config.conv_layer_count());
        let (_, toy) = UNet::build(UNetConfig::toy(), 0).unwrap();
        assert_eq!(toy.names().filter(|n| n.ends_with("/weight")).count(), 15);
    }

    #[test]
    fn paper_scale_budget() {
        let (_, params) = UNet::build(UNetConfig::paper_scale(), 0).unwrap();
        let c = param_count(&params);
        assert_eq!(c.total, 8_857_885);
        assert_eq!(c.frozen, 0);
        assert!((c.total as f64 / 8.6e6 - 1.0).abs() < 0.05);
    }

    #[test]
    fn rejects_indivisible_size() {
        let cfg = UNetConfig {
            input_size: 100,
            ..UNetConfig::paper_scale()
        };
        assert!(matches!(UNet::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn toy_forward_in_unit_interval() {
        let (net, params) = UNet::build(UNetConfig::toy(), 1).unwrap();
        let x = Tensor::<f32>::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut seeded_rng(3));
        let p = net.predict(&params, &x).unwrap();
        assert_eq!(p.shape(), &[2, 1, 64, 64]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn identical_inputs_identical_planes() {
        let (net, params) = UNet::build(UNetConfig::toy(), 2).unwrap();
        let one = Tensor::<f32>::uniform(&[3, 64, 64], 0.0, 1.0, &mut seeded_rng(4));
        let x = Tensor::stack(&[&one, &one]).unwrap();
        let p = net.predict(&params, &x).unwrap();
        assert_eq!(p.batch_item(0).unwrap(), p.batch_item(1).unwrap());
        let constant = Tensor::<f32>::full(&[1, 3, 64, 64], 0.4);
        assert!(net.predict(&params, &constant).unwrap().all_finite());
    }

    #[test]
    fn wrong_size_rejected() {
        let (net, params) = UNet::build(UNetConfig::toy(), 0).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        assert!(matches!(net.predict(&params, &x), Err(Error::Input(_))));
    }

    #[test]
    fn binarize_examples() {
        let p = Tensor::<f32>::new(&[3], vec![0.4, 0.5, 0.9]).unwrap();
        assert_eq!(binarize(&p, 0.5).data(), &[0.0, 1.0, 1.0]);
        assert!(binarize(&p, 0.0).data().iter().all(|&v| v == 1.0));
        assert!(binarize(&p, 1.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_accuracy_examples() {
        let a = Tensor::<f32>::from_fn(&[1, 4, 4], |i| (i % 2) as f32);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &a.map(|v| 1.0 - v)).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        b.data_mut()[5] = 0.0;
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 0.875);
        assert!(pixel_accuracy(&a, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    fn sample(seed: u64) -> MaskSample {
        let mut rng = seeded_rng(seed);
        let image = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let mask = Tensor::from_fn(&[1, 8, 8], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        MaskSample::new(image, mask).unwrap()
    }

    #[test]
    fn augment_is_deterministic() {
        let s = sample(1);
        assert_eq!(augment(&s, 9).unwrap(), augment(&s, 9).unwrap());
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample(2);
        let flip = Augmentation {
            flip: true,
            rotations: 0,
        };
        let twice = flip.apply(&flip.apply(&s.image).unwrap()).unwrap();
        assert_eq!(twice, s.image);
        let quarter = Augmentation {
            flip: false,
            rotations: 1,
        };
        let mut t = s.mask.clone();
        for _ in 0..4 {
            t = quarter.apply(&t).unwrap();
        }
        assert_eq!(t, s.mask);
    }

    #[test]
    fn augmentation_preserves_foreground_count() {
        let s = sample(3);
        let count = |m: &Tensor<f32>| m.data().iter().filter(|&&v| v == 1.0).count();
        for seed in 0..100 {
            let a = augment(&s, seed).unwrap();
            assert_eq!(count(&a.mask), count(&s.mask));
            assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn zero_epochs_leaves_weights() {
        let cfg = UNetConfig {
            input_size: 16,
            base_channels: 2,
            depth: 2,
            convs_per_block: 1,
        };
        let (net, params) = UNet::build(cfg, 0).unwrap();
        let data: Vec<MaskSample> = (0..3)
            .map(|i| {
                let mut rng = seeded_rng(i);
                MaskSample::new(
                    Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
                    Tensor::from_fn(&[1, 16, 16], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
                )
                .unwrap()
            })
            .collect();
        let run = train_unet(
            &net,
            params.clone(),
            &data[..1],
            &data[1..2],
            &data[2..],
            &SegTrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(run.history.is_empty());
        assert_eq!(run.params, params);
        assert!(train_unet(&net, params, &[], &data[1..2], &data[2..], &SegTrainConfig::default()).is_err());
    }
}
