//! Change-driven classifier. Two frozen VGG-style paths see the before and
//! after images; per-level delta layers keep what newly appeared and feed a
//! third, trainable path; a three-layer dense head produces class logits.

use foodwaste_tensor::params::{derive_seed, kaiming_uniform, name_hash, seeded_rng};
use foodwaste_tensor::{ops, Graph, OptimConfig, Optimizer, ParamSet, Real, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKBONE: &str = "backbone/";
pub const TRUNK: &str = "trunk/";

/// Convolution blocks as `(conv_count, out_channels)`; 3x3 kernels with
/// padding 1, each block closed by a 2x2 max-pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggConfig {
    pub blocks: Vec<(usize, usize)>,
}

impl VggConfig {
    pub fn vgg16() -> Self {
        Self {
            blocks: vec![(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)],
        }
    }

    pub fn toy() -> Self {
        Self {
            blocks: vec![(1, 8), (1, 16), (2, 32)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaScope {
    PerChannel,
    PerLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaNetConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub vgg: VggConfig,
    pub dense_widths: [usize; 3],
    pub lambda_scope: LambdaScope,
    pub lambda_init: f32,
}

impl DeltaNetConfig {
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            num_classes: 5,
            vgg: VggConfig::toy(),
            dense_widths: [64, 64, 5],
            lambda_scope: LambdaScope::PerChannel,
            lambda_init: 1.0,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            input_size: 224,
            num_classes: 20,
            vgg: VggConfig::vgg16(),
            dense_widths: [256, 256, 20],
            lambda_scope: LambdaScope::PerChannel,
            lambda_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.vgg.blocks.len();
        if b == 0 || self.vgg.blocks.iter().any(|&(n, c)| n == 0 || c == 0) {
            return Err(Error::Config(format!("degenerate block list {:?}", self.vgg.blocks)));
        }
        if self.input_size == 0 || b >= usize::BITS as usize || !self.input_size.is_multiple_of(1 << b) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{b}",
                self.input_size
            )));
        }
        if self.num_classes < 2 || self.dense_widths[2] != self.num_classes || self.dense_widths.contains(&0) {
            return Err(Error::Config(format!(
                "dense widths {:?} must end in num_classes {}",
                self.dense_widths, self.num_classes
            )));
        }
        Ok(())
    }

    /// Channel count of the feature volume at each level; level 0 is the image.
    pub fn level_channels(&self) -> Vec<usize> {
        std::iter::once(3).chain(self.vgg.blocks.iter().map(|&(_, c)| c)).collect()
    }

    /// Size of the flattened merged volume entering the dense head.
    pub fn feature_len(&self) -> usize {
        let side = self.input_size >> self.vgg.blocks.len();
        side * side * self.vgg.blocks.last().map_or(3, |&(_, c)| c)
    }
}

fn conv_name(path: &str, block: usize, conv: usize) -> String {
    format!("{path}block{}/conv{conv}", block + 1)
}

fn lambda_name(level: usize) -> String {
    format!("delta/lambda{level}")
}

fn fc_name(i: usize) -> String {
    format!("head/fc{i}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaNet {
    pub config: DeltaNetConfig,
}

impl DeltaNet {
    pub fn new(config: DeltaNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Builds the model. Frozen backbone weights come from `frozen` when given,
    /// else from a seeded random initialisation.
    pub fn build(config: DeltaNetConfig, frozen: Option<&ParamSet<f32>>, seed: u64) -> Result<(Self, ParamSet<f32>)> {
        let net = Self::new(config)?;
        let mut params = net.init_params(seed)?;
        if let Some(src) = frozen {
            net.load_backbone(&mut params, src)?;
        }
        Ok((net, params))
    }

    fn conv_specs(&self, path: &str) -> Vec<(String, usize, usize)> {
        let mut specs = Vec::new();
        let mut cin = 3;
        for (b, &(n, cout)) in self.config.vgg.blocks.iter().enumerate() {
            for j in 0..n {
                specs.push((conv_name(path, b, j), cin, cout));
                cin = cout;
            }
        }
        specs
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        let cfg = &self.config;
        let mut params = ParamSet::new();
        // The backbone has its own seed stream so that the trainable parts
        // can be re-drawn without touching it.
        let backbone_seed = derive_seed(&[seed, name_hash(BACKBONE)]);
        for (path, trainable, uses, s) in [(BACKBONE, false, 2, backbone_seed), (TRUNK, true, 1, seed)] {
            for (name, cin, cout) in self.conv_specs(path) {
                let wname = format!("{name}/weight");
                let w = kaiming_uniform(&[cout, cin, 3, 3], cin * 9, s, &wname);
                params.insert_shared(wname, w, trainable, uses)?;
                params.insert_shared(format!("{name}/bias"), Tensor::zeros(&[cout]), trainable, uses)?;
            }
        }
        for (level, c) in cfg.level_channels().into_iter().enumerate() {
            let len = match cfg.lambda_scope {
                LambdaScope::PerChannel => c,
                LambdaScope::PerLevel => 1,
            };
            params.insert(lambda_name(level), Tensor::full(&[len], cfg.lambda_init), true)?;
        }
        let mut din = cfg.feature_len();
        for (i, &dout) in cfg.dense_widths.iter().enumerate() {
            let wname = format!("{}/weight", fc_name(i));
            params.insert(wname.clone(), kaiming_uniform(&[din, dout], din, seed, &wname), true)?;
            params.insert(format!("{}/bias", fc_name(i)), Tensor::zeros(&[dout]), true)?;
            din = dout;
        }
        Ok(params)
    }

    /// Replaces the backbone tensors with those of `src`, which must hold
    /// exactly the backbone names and shapes of this config.
    pub fn load_backbone(&self, params: &mut ParamSet<f32>, src: &ParamSet<f32>) -> Result<()> {
        for name in src.names() {
            if !name.starts_with(BACKBONE) || !params.contains(name) {
                return Err(Error::Mismatch {
                    name: name.to_string(),
                    detail: "not a backbone tensor of this config".into(),
                });
            }
        }
        let names: Vec<String> = params.subset(BACKBONE).names().map(str::to_string).collect();
        for name in names {
            let value = src.value(&name).map_err(|_| Error::Mismatch {
                name: name.clone(),
                detail: "missing from frozen weights".into(),
            })?;
            let slot = params.get_mut(&name)?;
            if slot.value.shape() != value.shape() {
                return Err(Error::Mismatch {
                    detail: format!("shape {:?}, expected {:?}", value.shape(), slot.value.shape()),
                    name,
                });
            }
            slot.value = value.clone();
            slot.trainable = false;
        }
        Ok(())
    }

    fn block<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        params: &'p ParamSet<T>,
        path: &str,
        b: usize,
        mut x: Var,
    ) -> Result<Var> {
        for j in 0..self.config.vgg.blocks[b].0 {
            let name = conv_name(path, b, j);
            let w = g.param(params, &format!("{name}/weight"))?;
            let bias = g.param(params, &format!("{name}/bias"))?;
            let y = g.conv2d(x, w, bias, 1, 1)?;
            x = g.relu(y);
        }
        Ok(g.maxpool2(x)?)
    }

    fn check_input(&self, t: &Tensor<impl Real>, what: &str) -> Result<()> {
        let s = self.config.input_size;
        let shape = t.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Input(format!("{what} must be [N, 3, {s}, {s}], got {shape:?}")));
        }
        Ok(())
    }

    /// Logits `[N, K]` for image batches `[N, 3, S, S]`.
    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, params: &'p ParamSet<T>, before: Var, after: Var) -> Result<Var> {
        self.check_input(g.value(before), "before")?;
        self.check_input(g.value(after), "after")?;
        if g.value(before).shape() != g.value(after).shape() {
            return Err(Error::Input("before and after batches differ in size".into()));
        }
        let lambda0 = g.param(params, &lambda_name(0))?;
        let mut x = g.delta(after, before, lambda0)?;
        let (mut fa, mut fb) = (after, before);
        for b in 0..self.config.vgg.blocks.len() {
            fa = self.block(g, params, BACKBONE, b, fa)?;
            fb = self.block(g, params, BACKBONE, b, fb)?;
            x = self.block(g, params, TRUNK, b, x)?;
            let lambda = g.param(params, &lambda_name(b + 1))?;
            let d = g.delta(fa, fb, lambda)?;
            x = g.add(x, d)?;
        }
        x = g.flatten(x)?;
        for i in 0..3 {
            let w = g.param(params, &format!("{}/weight", fc_name(i)))?;
            let bias = g.param(params, &format!("{}/bias", fc_name(i)))?;
            x = g.dense(x, w, bias)?;
            if i < 2 {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn logits(&self, params: &ParamSet<f32>, before: &Tensor<f32>, after: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let b = g.input(before.clone());
        let a = g.input(after.clone());
        let out = self.forward(&mut g, params, b, a)?;
        Ok(g.value(out).clone())
    }

    /// Predicted class and probability vector for one `[3, S, S]` pair.
    pub fn classify(&self, params: &ParamSet<f32>, before: &Tensor<f32>, after: &Tensor<f32>) -> Result<(usize, Vec<f32>)> {
        let s = self.config.input_size;
        let logits = self.logits(params, &before.clone().reshape(&[1, 3, s, s])?, &after.clone().reshape(&[1, 3, s, s])?)?;
        let probs = ops::softmax(&logits)?.into_data();
        Ok((argmax(&probs), probs))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// FNV-1a digest of the bits of every frozen tensor.
pub fn frozen_digest(params: &ParamSet<f32>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for (name, p) in params.iter().filter(|(_, p)| !p.trainable) {
        h = (h ^ name_hash(name)).wrapping_mul(0x0000_0100_0000_01b3);
        for v in p.value.data() {
            h = (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub before: Tensor<f32>,
    pub after: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct ClassTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for ClassTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ClassTraining {
    pub params: ParamSet<f32>,
    pub history: Vec<ClassEpoch>,
}

fn stack_pairs<'a>(samples: impl Iterator<Item = &'a PairSample>) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>)> {
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        before.push(&s.before);
        after.push(&s.after);
        labels.push(s.label);
    }
    Ok((Tensor::stack(&before)?, Tensor::stack(&after)?, labels))
}

/// Predicted class per sample, evaluated in batches.
pub fn predict_classes(net: &DeltaNet, params: &ParamSet<f32>, samples: &[PairSample], batch_size: usize) -> Result<Vec<usize>> {
    let k = net.config.num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (b, a, _) = stack_pairs(chunk.iter())?;
        let logits = net.logits(params, &b, &a)?;
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn check_labels(samples: &[PairSample], k: usize) -> Result<()> {
    match samples.iter().find(|s| s.label >= k) {
        Some(s) => Err(Error::Input(format!("label {} out of range for {k} classes", s.label))),
        None => Ok(()),
    }
}

/// Minimises cross-entropy over the trainable parameters. The frozen
/// backbone is verified bit-identical afterwards.
pub fn train_classifier(
    net: &DeltaNet,
    params: ParamSet<f32>,
    train: &[PairSample],
    val: &[PairSample],
    cfg: &ClassTrainConfig,
) -> Result<ClassTraining> {
    train_classifier_with_progress(net, params, train, val, cfg, |_| {})
}

/// [`train_classifier`], calling `progress` after every epoch.
pub fn train_classifier_with_progress(
    net: &DeltaNet,
    params: ParamSet<f32>,
    train: &[PairSample],
    val: &[PairSample],
    cfg: &ClassTrainConfig,
    mut progress: impl FnMut(&ClassEpoch),
) -> Result<ClassTraining> {
    let k = net.config.num_classes;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("train and val splits must be non-empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    check_labels(train, k)?;
    check_labels(val, k)?;
    if params.subset(BACKBONE).iter().any(|(_, p)| p.trainable) {
        return Err(Error::Config("backbone parameters must be frozen".into()));
    }
    let digest = frozen_digest(&params);
    let val_labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    let mut params = params;
    let mut opt = Optimizer::new(cfg.optim);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded_rng(derive_seed(&[cfg.seed, epoch as u64, 0xC1A5])));
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (b, a, labels) = stack_pairs(chunk.iter().map(|&i| &train[i]))?;
            let grads = {
                let mut g = Graph::new();
                let bv = g.input(b);
                let av = g.input(a);
                let logits = net.forward(&mut g, &params, bv, av)?;
                hits += g
                    .value(logits)
                    .data()
                    .chunks(k)
                    .zip(&labels)
                    .filter(|(row, &l)| argmax(row) == l)
                    .count();
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                loss_sum += g.value(loss).data()[0] as f64 * labels.len() as f64;
                g.backward(loss)?
            };
            opt.step(&mut params, &grads)?;
        }
        let val_pred = predict_classes(net, &params, val, cfg.batch_size)?;
        history.push(ClassEpoch {
            epoch: epoch + 1,
            loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_accuracy: accuracy(&val_pred, &val_labels),
        });
        progress(&history[epoch]);
    }
    if frozen_digest(&params) != digest {
        return Err(Error::Mismatch {
            name: BACKBONE.trim_end_matches('/').into(),
            detail: "frozen weights changed during training".into(),
        });
    }
    Ok(ClassTraining { params, history })
}
