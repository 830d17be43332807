//! Trainable, differentiable feature extractors: the map from images to
//! d-dimensional feature vectors that both the user (to compute cloaks)
//! and the tracker (to train recognition models) rely on, plus PGD
//! adversarial training for robust variants.

pub(crate) mod checkpoint;
pub(crate) mod nn;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::LabeledDataset;
use crate::imaging::Image;
use crate::seed::{derive_seed, derive_seed_indexed};
use nn::{softmax, softmax_xent, Adam, ConvNet, Dense, NetGrads};

/// A d-dimensional embedding produced by a feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> FeatureVector {
        FeatureVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Euclidean distance between two feature vectors.
pub fn feature_distance(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Dimension(format!(
            "feature dims differ: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    Ok(u.values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Architecture of the convolutional embedding network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Output channels of each conv block; each block halves the spatial
    /// size.
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            conv_channels: vec![16, 32, 64],
            embed_dim: 64,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Param("at least one conv block required".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Param("embed_dim must be positive".into()));
        }
        let div = 1 << self.conv_channels.len();
        if self.input_height % div != 0 || self.input_width % div != 0 {
            return Err(Error::Param(format!(
                "input {}x{} not divisible by 2^{} for pooling",
                self.input_height,
                self.input_width,
                self.conv_channels.len()
            )));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::Param("input channels must be 1 or 3".into()));
        }
        Ok(())
    }
}

/// Projected gradient descent configuration (adversarial examples and
/// adversarial training).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Max-norm ball radius in unit pixel scale.
    pub epsilon: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            steps: 100,
            step_size: 0.01,
            epsilon: 8.0 / 255.0,
        }
    }
}

impl PgdConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Param("pgd steps must be >= 1".into()));
        }
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(Error::Param("pgd step size must be > 0".into()));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Param("pgd epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Where an extractor came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    pub epochs: usize,
    pub robust_epochs: usize,
    pub seed: u64,
    pub robust: bool,
    pub pgd: Option<PgdConfig>,
    pub robust_seed: Option<u64>,
}

#[derive(Debug, Clone)]
enum Backbone {
    Conv(ConvNet),
    /// Embedding = flattened pixels; test oracle for the optimizers.
    Identity {
        height: usize,
        width: usize,
        channels: usize,
    },
}

/// A differentiable map from images to feature vectors, with an optional
/// classification head over its training classes.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    backbone: Backbone,
    head: Option<Dense>,
    head_labels: Vec<String>,
    provenance: Provenance,
}

/// Hyperparameters shared by the extractor/classifier training loops.
pub(crate) struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// When set, every batch is extended with PGD-perturbed copies
    /// (adversarial training).
    pub adversarial: Option<PgdConfig>,
}

impl TrainSettings {
    pub fn plain(epochs: usize) -> TrainSettings {
        TrainSettings {
            epochs,
            batch_size: 32,
            learning_rate: 1e-3,
            adversarial: None,
        }
    }
}

/// Trains a feature extractor by supervised classification over the
/// dataset's classes; the penultimate layer output is the embedding.
pub fn train_extractor(
    data: &LabeledDataset,
    arch: &ArchConfig,
    epochs: usize,
    seed: u64,
) -> Result<FeatureExtractor> {
    arch.validate()?;
    let labels = validate_training_data(data, arch)?;
    if epochs == 0 {
        return Err(Error::Param("epochs must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "extractor-init"));
    let mut net = ConvNet::new_seeded(
        arch.input_height,
        arch.input_width,
        arch.input_channels,
        &arch.conv_channels,
        arch.embed_dim,
        &mut rng,
    );
    let mut head = Dense::new_seeded(arch.embed_dim, labels.len(), &mut rng);

    let items = indexed_train_items(data, &labels);
    train_convnet(
        &mut net,
        &mut head,
        &items,
        &TrainSettings::plain(epochs),
        derive_seed(seed, "extractor-train"),
    );
    net.quantize_f32();
    quantize_dense(&mut head);

    Ok(FeatureExtractor {
        backbone: Backbone::Conv(net),
        head: Some(head),
        head_labels: labels,
        provenance: Provenance {
            dataset_id: dataset_id(data),
            epochs,
            robust_epochs: 0,
            seed,
            robust: false,
            pgd: None,
            robust_seed: None,
        },
    })
}

/// Continues training with PGD-perturbed batches, producing a robust
/// extractor. Each batch mixes the clean images with adversarial copies
/// generated against the current weights, both carrying correct labels.
pub fn robust_train(
    phi: &FeatureExtractor,
    data: &LabeledDataset,
    extra_epochs: usize,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<FeatureExtractor> {
    cfg.validate()?;
    if extra_epochs == 0 {
        return Err(Error::Param("extra_epochs must be >= 1".into()));
    }
    let (net, head) = match (&phi.backbone, &phi.head) {
        (Backbone::Conv(net), Some(head)) if phi.provenance.epochs > 0 => (net, head),
        _ => {
            return Err(Error::Model(
                "robust training needs a trained conv extractor with a head".into(),
            ))
        }
    };
    let arch = phi.arch().expect("conv backbone has an arch");
    let labels = validate_training_data(data, &arch)?;
    if labels != phi.head_labels {
        return Err(Error::Model(
            "dataset classes do not match the extractor's head".into(),
        ));
    }

    let mut net = net.clone();
    let mut head = head.clone();
    let items = indexed_train_items(data, &labels);
    train_convnet(
        &mut net,
        &mut head,
        &items,
        &TrainSettings {
            adversarial: Some(*cfg),
            ..TrainSettings::plain(extra_epochs)
        },
        derive_seed(seed, "robust-train"),
    );
    net.quantize_f32();
    quantize_dense(&mut head);

    Ok(FeatureExtractor {
        backbone: Backbone::Conv(net),
        head: Some(head),
        head_labels: labels,
        provenance: Provenance {
            robust: true,
            robust_epochs: phi.provenance.robust_epochs + extra_epochs,
            pgd: Some(*cfg),
            robust_seed: Some(seed),
            ..phi.provenance.clone()
        },
    })
}

/// Iterated sign-gradient ascent on the head's cross-entropy, projected
/// into the epsilon max-norm ball around `x` each step.
pub fn pgd_perturb(
    phi: &FeatureExtractor,
    x: &Image,
    label: &str,
    cfg: &PgdConfig,
    rng: &mut impl Rng,
) -> Result<Image> {
    cfg.validate()?;
    phi.check_input(x)?;
    let (net, head) = match (&phi.backbone, &phi.head) {
        (Backbone::Conv(net), Some(head)) => (net, head),
        _ => return Err(Error::Model("pgd needs a conv extractor with a classification head".into())),
    };
    let label_idx = phi
        .head_labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::Model(format!("label {label} not in classification head")))?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let pixels = pgd_attack(net, head, x.pixels(), label_idx, cfg, rng);
    Image::from_raw_clamped(x.height(), x.width(), x.channels(), pixels)
}

pub(crate) fn pgd_attack(
    net: &ConvNet,
    head: &Dense,
    x0: &[f64],
    label_idx: usize,
    cfg: &PgdConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let eps = cfg.epsilon;
    let lo: Vec<f64> = x0.iter().map(|p| (p - eps).max(0.0)).collect();
    let hi: Vec<f64> = x0.iter().map(|p| (p + eps).min(1.0)).collect();
    // Random start inside the ball.
    let mut p: Vec<f64> = x0
        .iter()
        .zip(lo.iter().zip(&hi))
        .map(|(x, (l, h))| (x + rng.gen_range(-eps..=eps)).clamp(*l, *h))
        .collect();
    for _ in 0..cfg.steps {
        let cache = net.forward(&p);
        let logits = head.forward(&cache.embedding);
        let (_, d_logits) = softmax_xent(&logits, label_idx);
        let d_embed = head.backward_input(&d_logits);
        let grad = net.backward(&cache, &d_embed, None);
        for i in 0..p.len() {
            // Ascend the loss.
            p[i] = (p[i] + cfg.step_size * grad[i].signum() * f64::from(grad[i] != 0.0))
                .clamp(lo[i], hi[i]);
        }
    }
    p
}

impl FeatureExtractor {
    /// An extractor whose embedding is the flattened pixel grid. Used as
    /// an analytically tractable oracle in tests and fixtures.
    pub fn identity(height: usize, width: usize, channels: usize) -> FeatureExtractor {
        FeatureExtractor {
            backbone: Backbone::Identity {
                height,
                width,
                channels,
            },
            head: None,
            head_labels: Vec::new(),
            provenance: Provenance {
                dataset_id: "identity".into(),
                epochs: 0,
                robust_epochs: 0,
                seed: 0,
                robust: false,
                pgd: None,
                robust_seed: None,
            },
        }
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn is_robust(&self) -> bool {
        self.provenance.robust
    }

    pub fn head_labels(&self) -> &[String] {
        &self.head_labels
    }

    /// Architecture of a conv backbone; `None` for the identity extractor.
    pub fn arch(&self) -> Option<ArchConfig> {
        match &self.backbone {
            Backbone::Conv(net) => Some(ArchConfig {
                input_height: net.input_h,
                input_width: net.input_w,
                input_channels: net.input_c,
                conv_channels: net.convs.iter().map(|c| c.out_ch).collect(),
                embed_dim: net.embed_dim(),
            }),
            Backbone::Identity { .. } => None,
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        match &self.backbone {
            Backbone::Conv(net) => (net.input_h, net.input_w, net.input_c),
            Backbone::Identity {
                height,
                width,
                channels,
            } => (*height, *width, *channels),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match &self.backbone {
            Backbone::Conv(net) => net.embed_dim(),
            Backbone::Identity {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        let (h, w, c) = self.input_shape();
        if x.height() != h || x.width() != w || x.channels() != c {
            return Err(Error::Dimension(format!(
                "image {}x{}x{} does not match extractor input {h}x{w}x{c}",
                x.height(),
                x.width(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Maps an image to its feature vector.
    pub fn embed(&self, x: &Image) -> Result<FeatureVector> {
        self.check_input(x)?;
        let values = match &self.backbone {
            Backbone::Conv(net) => net.forward(x.pixels()).embedding,
            Backbone::Identity { .. } => x.pixels().to_vec(),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("embedding has non-finite entries".into()));
        }
        Ok(FeatureVector { values })
    }

    /// Evaluates a scalar loss of the embedding and returns the loss value
    /// together with its gradient with respect to every pixel of `x`.
    ///
    /// The closure receives the embedding and must return the loss and
    /// `d loss / d embedding`.
    pub fn embed_with_grad(
        &self,
        x: &Image,
        loss: impl FnOnce(&[f64]) -> (f64, Vec<f64>),
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        match &self.backbone {
            Backbone::Conv(net) => {
                let cache = net.forward(x.pixels());
                let (value, d_embed) = loss(&cache.embedding);
                if d_embed.len() != cache.embedding.len() {
                    return Err(Error::Dimension(format!(
                        "loss gradient has dim {}, embedding has {}",
                        d_embed.len(),
                        cache.embedding.len()
                    )));
                }
                if !value.is_finite() {
                    return Err(Error::Numerical("loss is not finite".into()));
                }
                Ok((value, net.backward(&cache, &d_embed, None)))
            }
            Backbone::Identity { .. } => {
                let (value, d_embed) = loss(x.pixels());
                if d_embed.len() != x.pixels().len() {
                    return Err(Error::Dimension(format!(
                        "loss gradient has dim {}, embedding has {}",
                        d_embed.len(),
                        x.pixels().len()
                    )));
                }
                if !value.is_finite() {
                    return Err(Error::Numerical("loss is not finite".into()));
                }
                Ok((value, d_embed))
            }
        }
    }

    /// Predicts with the extractor's own classification head.
    pub fn classify(&self, x: &Image) -> Result<(String, f64)> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Model("extractor has no classification head".into()))?;
        let emb = self.embed(x)?;
        let probs = softmax(&head.forward(emb.values()));
        let (idx, p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .expect("head has outputs");
        Ok((self.head_labels[idx].clone(), *p))
    }

    /// FNV-1a over the f32-encoded weights, in checkpoint order.
    pub fn weight_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for group in self.weight_groups() {
            for v in group {
                eat(&(*v as f32).to_le_bytes());
            }
        }
        h
    }

    fn weight_groups(&self) -> Vec<&Vec<f64>> {
        let mut groups = match &self.backbone {
            Backbone::Conv(net) => net.param_groups(),
            Backbone::Identity { .. } => Vec::new(),
        };
        if let Some(head) = &self.head {
            groups.push(&head.w);
            groups.push(&head.b);
        }
        groups
    }

    pub(crate) fn conv_net(&self) -> Option<&ConvNet> {
        match &self.backbone {
            Backbone::Conv(net) => Some(net),
            Backbone::Identity { .. } => None,
        }
    }

    pub(crate) fn head_layer(&self) -> Option<&Dense> {
        self.head.as_ref()
    }

    pub(crate) fn from_parts(
        net: ConvNet,
        head: Option<Dense>,
        head_labels: Vec<String>,
        provenance: Provenance,
    ) -> FeatureExtractor {
        FeatureExtractor {
            backbone: Backbone::Conv(net),
            head,
            head_labels,
            provenance,
        }
    }

    pub(crate) fn identity_from_parts(
        height: usize,
        width: usize,
        channels: usize,
        provenance: Provenance,
    ) -> FeatureExtractor {
        FeatureExtractor {
            backbone: Backbone::Identity {
                height,
                width,
                channels,
            },
            head: None,
            head_labels: Vec::new(),
            provenance,
        }
    }
}

fn dataset_id(data: &LabeledDataset) -> String {
    data.manifest()
        .root
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| format!("memory:{}classes", data.num_classes()))
}

fn validate_training_data(data: &LabeledDataset, arch: &ArchConfig) -> Result<Vec<String>> {
    if data.num_classes() < 2 {
        return Err(Error::Dataset(format!(
            "training needs >= 2 classes, got {}",
            data.num_classes()
        )));
    }
    for (id, split) in data.classes() {
        if split.train.len() < 5 {
            return Err(Error::Dataset(format!(
                "class {id} has {} training images, need >= 5",
                split.train.len()
            )));
        }
        for img in &split.train {
            if img.height() != arch.input_height
                || img.width() != arch.input_width
                || img.channels() != arch.input_channels
            {
                return Err(Error::Dimension(format!(
                    "class {id} image {}x{}x{} does not match arch input {}x{}x{}",
                    img.height(),
                    img.width(),
                    img.channels(),
                    arch.input_height,
                    arch.input_width,
                    arch.input_channels
                )));
            }
        }
    }
    Ok(data.class_ids().iter().map(|s| s.to_string()).collect())
}

fn indexed_train_items<'a>(
    data: &'a LabeledDataset,
    labels: &[String],
) -> Vec<(usize, &'a Image)> {
    let index_of = |id: &str| labels.iter().position(|l| l == id).expect("label known");
    data.train_items()
        .into_iter()
        .map(|(id, img)| (index_of(id), img))
        .collect()
}

fn quantize_dense(layer: &mut Dense) {
    for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
        *v = *v as f32 as f64;
    }
}

/// Shared minibatch training loop for the conv net plus classification
/// head (plain and adversarial).
pub(crate) fn train_convnet(
    net: &mut ConvNet,
    head: &mut Dense,
    items: &[(usize, &Image)],
    settings: &TrainSettings,
    seed: u64,
) {
    use rand::seq::SliceRandom;

    let group_sizes: Vec<usize> = net
        .param_groups()
        .iter()
        .map(|g| g.len())
        .chain([head.w.len(), head.b.len()])
        .collect();
    let mut adam = Adam::new(&group_sizes, settings.learning_rate);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle"));

    for epoch in 0..settings.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_no, batch) in order.chunks(settings.batch_size).enumerate() {
            let mut owned_adversarial: Vec<(usize, Vec<f64>)> = Vec::new();
            if let Some(cfg) = &settings.adversarial {
                for (k, &i) in batch.iter().enumerate() {
                    let (label, img) = items[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                        seed,
                        "pgd",
                        ((epoch * 100_000 + batch_no) * 1000 + k) as u64,
                    ));
                    owned_adversarial.push((label, pgd_attack(net, head, img.pixels(), label, cfg, &mut rng)));
                }
            }

            let mut grads = NetGrads::zeros_like(net);
            let mut head_dw = vec![0.0; head.w.len()];
            let mut head_db = vec![0.0; head.b.len()];
            let mut count = 0.0;
            let mut backprop = |pixels: &[f64], label: usize| {
                let cache = net.forward(pixels);
                let logits = head.forward(&cache.embedding);
                let (_, d_logits) = softmax_xent(&logits, label);
                head.backward_params(&cache.embedding, &d_logits, &mut head_dw, &mut head_db);
                let d_embed = head.backward_input(&d_logits);
                net.backward(&cache, &d_embed, Some(&mut grads));
                count += 1.0;
            };
            for &i in batch {
                let (label, img) = items[i];
                backprop(img.pixels(), label);
            }
            for (label, pixels) in &owned_adversarial {
                backprop(pixels, *label);
            }

            let inv = 1.0 / count;
            grads.scale(inv);
            head_dw.iter_mut().for_each(|v| *v *= inv);
            head_db.iter_mut().for_each(|v| *v *= inv);

            let mut params = net.param_groups_mut();
            params.push(&mut head.w);
            params.push(&mut head.b);
            let mut grad_refs: Vec<&Vec<f64>> = Vec::with_capacity(params.len());
            for (w, b) in &grads.convs {
                grad_refs.push(w);
                grad_refs.push(b);
            }
            grad_refs.push(&grads.dense.0);
            grad_refs.push(&grads.dense.1);
            grad_refs.push(&head_dw);
            grad_refs.push(&head_db);
            adam.step(&mut params, &grad_refs);
        }
    }
}


#[cfg(test)]
mod probe {
    use super::tests::tiny_dataset;
    use super::*;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn probe_training() {
        let data = tiny_dataset(4, 10, 16, 3);
        for epochs in [20usize, 60, 120] {
            let t = Instant::now();
            let phi = train_extractor(&data, &ArchConfig {
                input_height: 16, input_width: 16, input_channels: 3,
                conv_channels: vec![8, 16], embed_dim: 16,
            }, epochs, 4).unwrap();
            let items = data.test_items();
            let hits = items.iter().filter(|(l, img)| phi.classify(img).unwrap().0 == *l).count();
            println!("epochs {epochs}: acc {}/{} in {:?}", hits, items.len(), t.elapsed());
            let train_items = data.train_items();
            let th = train_items.iter().filter(|(l, img)| phi.classify(img).unwrap().0 == *l).count();
            println!("  train acc {}/{}", th, train_items.len());
        }
    }

    #[test]
    #[ignore]
    fn probe_desk_scale_timing() {
        // 32x32x3, default arch: one forward+backward-to-input timing
        let data = tiny_dataset(4, 8, 32, 5);
        let arch = ArchConfig::default();
        let phi = train_extractor(&data, &arch, 2, 6).unwrap();
        let img = data.get("c00").unwrap().train[0].clone();
        let t = Instant::now();
        let n = 200;
        for _ in 0..n {
            let _ = phi.embed_with_grad(&img, |e| {
                let v: f64 = e.iter().map(|x| x * x).sum();
                (v, e.iter().map(|x| 2.0 * x).collect())
            }).unwrap();
        }
        println!("fwd+bwd-input: {:?} per call", t.elapsed() / n);
        let t = Instant::now();
        for _ in 0..n {
            let _ = phi.embed(&img).unwrap();
        }
        println!("fwd only: {:?} per call", t.elapsed() / n);
    }
}

#[cfg(test)]
mod probe3 {
    use super::tests::tiny_dataset_with_spread;
    use super::*;

    #[test]
    #[ignore]
    fn probe_robust_configs() {
        let arch = ArchConfig {
            input_height: 16, input_width: 16, input_channels: 3,
            conv_channels: vec![8, 16], embed_dim: 16,
        };
        for (spread, eps_num, robust_epochs) in
            [(0.15, 12.0, 25), (0.15, 16.0, 25), (0.20, 16.0, 25), (0.20, 20.0, 40)]
        {
            let data = tiny_dataset_with_spread(3, 12, 16, 16, spread);
            let phi = train_extractor(&data, &arch, 100, 6).unwrap();
            let cfg = PgdConfig { steps: 15, step_size: 0.01, epsilon: eps_num / 255.0 };
            let robust = robust_train(&phi, &data, robust_epochs, &cfg, 7).unwrap();
            let rate = |model: &FeatureExtractor| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
                let items = data.train_items();
                let mut flips = 0;
                for (label, img) in &items {
                    if model.classify(img).unwrap().0 != *label { continue; }
                    let adv = pgd_perturb(model, img, label, &cfg, &mut rng).unwrap();
                    if model.classify(&adv).unwrap().0 != *label { flips += 1; }
                }
                flips as f64 / items.len() as f64
            };
            let acc = |model: &FeatureExtractor| {
                let items = data.test_items();
                items.iter().filter(|(l, img)| model.classify(img).unwrap().0 == *l).count() as f64 / items.len() as f64
            };
            println!("spread={spread} eps={eps_num}/255 repochs={robust_epochs}: attack {:.2}->{:.2}, clean {:.2}->{:.2}",
                rate(&phi), rate(&robust), acc(&phi), acc(&robust));
        }
    }
}
