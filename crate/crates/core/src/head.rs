//! Discriminative baseline: a linear softmax head on spatially averaged features,
//! optionally trained on images carrying random-noise patches.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, FeatureMap};
use crate::dataset::LabeledDataset;
use crate::error::{ensure, Error, Result};
use crate::finetune::{extract_all, softmax_in_place};
use crate::image::Image;
use crate::rng::{derive_seed, derive_seed_path, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    pub n_classes: usize,
    pub dim: usize,
    /// `n_classes × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxHead {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.weights.len() == self.n_classes * self.dim && self.bias.len() == self.n_classes,
            DimensionMismatch,
            "head parameters have inconsistent shapes"
        );
        ensure!(
            self.weights.iter().chain(&self.bias).all(|w| w.is_finite()),
            InvalidArgument,
            "head has non-finite parameters"
        );
        Ok(())
    }

    pub fn logits_of(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|y| {
                let row = &self.weights[y * self.dim..(y + 1) * self.dim];
                self.bias[y] + row.iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn logits(&self, map: &FeatureMap) -> Result<Vec<f64>> {
        ensure!(
            map.depth() == self.dim,
            DimensionMismatch,
            "feature depth {} != head dimension {}",
            map.depth(),
            self.dim
        );
        Ok(self.logits_of(&map.mean_vector()))
    }

    pub fn probabilities(&self, map: &FeatureMap) -> Result<Vec<f64>> {
        let mut z = self.logits(map)?;
        softmax_in_place(&mut z);
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub holdout_fraction: f64,
    pub l2: f64,
    /// Augmented copies per training image when training with random patches.
    pub augment_copies: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            max_epochs: 2000,
            patience: 100,
            holdout_fraction: 0.2,
            l2: 1e-4,
            augment_copies: 4,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on mean cross-entropy over pooled feature vectors,
/// keeping the parameters with the lowest held-out loss.
pub fn train_head_on_vectors(
    vectors: &[Vec<f64>],
    labels: &[usize],
    holdout: &[bool],
    n_classes: usize,
    config: &HeadTrainConfig,
) -> Result<SoftmaxHead> {
    ensure!(!vectors.is_empty(), Empty, "no training vectors");
    ensure!(
        vectors.len() == labels.len() && labels.len() == holdout.len(),
        DimensionMismatch,
        "vectors, labels and holdout flags differ in length"
    );
    ensure!(config.learning_rate > 0.0, InvalidArgument, "learning rate must be positive");
    let dim = vectors[0].len();
    let mut head = SoftmaxHead::zeros(n_classes, dim);
    let fit: Vec<usize> = (0..vectors.len()).filter(|&i| !holdout[i]).collect();
    let held: Vec<usize> = (0..vectors.len()).filter(|&i| holdout[i]).collect();
    ensure!(!fit.is_empty(), Empty, "nothing left to fit after the held-out split");
    let loss_on = |h: &SoftmaxHead, idx: &[usize]| -> f64 {
        idx.iter()
            .map(|&i| {
                let mut z = h.logits_of(&vectors[i]);
                softmax_in_place(&mut z);
                -z[labels[i]].max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / idx.len().max(1) as f64
    };
    let mut best = (head.clone(), if held.is_empty() { f64::INFINITY } else { loss_on(&head, &held) });
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let mut gw = vec![0.0; head.weights.len()];
        let mut gb = vec![0.0; n_classes];
        let scale = 1.0 / fit.len() as f64;
        for &i in &fit {
            let mut z = head.logits_of(&vectors[i]);
            softmax_in_place(&mut z);
            z[labels[i]] -= 1.0;
            for (y, dz) in z.iter().enumerate() {
                gb[y] += scale * dz;
                gw[y * dim..(y + 1) * dim]
                    .iter_mut()
                    .zip(&vectors[i])
                    .for_each(|(g, x)| *g += scale * dz * x);
            }
        }
        let lr = config.learning_rate;
        for (w, g) in head.weights.iter_mut().zip(&gw) {
            *w -= lr * (g + config.l2 * *w);
        }
        head.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
        if head.weights.iter().chain(&head.bias).any(|w| !w.is_finite()) {
            return Err(Error::Diverged { step: epoch, loss: f64::NAN });
        }
        if held.is_empty() {
            best.0 = head.clone();
            continue;
        }
        let l = loss_on(&head, &held);
        if l < best.1 {
            best = (head.clone(), l);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(best.0)
}

/// Seeded held-out flags with at least one fitted item.
fn holdout_flags(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, "holdout")));
    let n_held = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let mut flags = vec![false; n];
    idx[..n_held].iter().for_each(|&i| flags[i] = true);
    flags
}

fn check_config(config: &HeadTrainConfig) -> Result<()> {
    ensure!(
        (0.0..1.0).contains(&config.holdout_fraction),
        InvalidArgument,
        "holdout fraction must lie in [0, 1)"
    );
    Ok(())
}

/// Trains the head on the training split of `dataset`.
pub fn train_softmax_head(dataset: &LabeledDataset, backbone: &BackboneParams, config: &HeadTrainConfig) -> Result<SoftmaxHead> {
    check_config(config)?;
    let train = dataset.train()?;
    let imgs: Vec<&Image> = train.items().iter().map(|it| &it.image).collect();
    let labels: Vec<usize> = train.items().iter().map(|it| it.label).collect();
    let vectors: Vec<Vec<f64>> = extract_all(&imgs, backbone)?.iter().map(|m| m.mean_vector()).collect();
    let holdout = holdout_flags(vectors.len(), config.holdout_fraction, config.seed);
    train_head_on_vectors(&vectors, &labels, &holdout, dataset.n_classes(), config)
}

/// Side of the square patch covering `area` of an `h × w` image (at least one pixel).
pub fn augmentation_side(area: f64, h: usize, w: usize) -> usize {
    ((area * (h * w) as f64).sqrt().floor() as usize).clamp(1, h.min(w))
}

/// Pastes a square of uniform random pixels at a uniformly random in-bounds location.
pub fn random_noise_patch<R: rand::Rng + ?Sized>(img: &Image, side: usize, rng: &mut R) -> Image {
    let mut out = img.clone();
    let row = rng.random_range(0..=img.height() - side);
    let col = rng.random_range(0..=img.width() - side);
    for r in row..row + side {
        for c in col..col + side {
            out.set(r, c, [rng.random(), rng.random(), rng.random()]);
        }
    }
    out
}

/// Like [`train_softmax_head`], but each training image is replaced by
/// `augment_copies` copies carrying one random-noise patch of the given area.
/// Copies of one source image stay on the same side of the held-out split.
pub fn train_with_random_patches(
    dataset: &LabeledDataset,
    backbone: &BackboneParams,
    area: f64,
    config: &HeadTrainConfig,
) -> Result<SoftmaxHead> {
    ensure!((0.0..=0.5).contains(&area), InvalidArgument, "patch area fraction must lie in [0, 0.5]");
    if area == 0.0 {
        return train_softmax_head(dataset, backbone, config);
    }
    check_config(config)?;
    ensure!(config.augment_copies >= 1, InvalidArgument, "need at least one augmented copy");
    let train = dataset.train()?;
    let (h, w) = dataset.image_dims();
    let side = augmentation_side(area, h, w);
    let source_holdout = holdout_flags(train.len(), config.holdout_fraction, config.seed);
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    let mut holdout = Vec::new();
    for (n, it) in train.items().iter().enumerate() {
        for c in 0..config.augment_copies {
            let mut rng = rng_from_seed(derive_seed_path(config.seed, &["augment", &n.to_string()], c as u64));
            imgs.push(random_noise_patch(&it.image, side, &mut rng));
            labels.push(it.label);
            holdout.push(source_holdout[n]);
        }
    }
    let refs: Vec<&Image> = imgs.iter().collect();
    let vectors: Vec<Vec<f64>> = extract_all(&refs, backbone)?.iter().map(|m| m.mean_vector()).collect();
    train_head_on_vectors(&vectors, &labels, &holdout, dataset.n_classes(), config)
}
