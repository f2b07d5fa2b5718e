//! Part-based finetuning: a linear classifier applied at every feature position,
//! max-pooled over positions, trained through the backbone so that local features
//! become predictive of the image class.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_gradient_cached, extract_features, forward, BackboneParams, FeatureMap};
use crate::compnet::{fit_compnet, CompNet, CompNetTrainConfig};
use crate::dataset::LabeledDataset;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, rng_from_seed};

/// `n_classes × D` weights, no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartClassifier {
    pub n_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl PartClassifier {
    pub fn new(n_classes: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        ensure!(n_classes >= 1 && dim >= 1, InvalidArgument, "empty part classifier");
        ensure!(
            weights.len() == n_classes * dim,
            DimensionMismatch,
            "expected {} weights, got {}",
            n_classes * dim,
            weights.len()
        );
        ensure!(weights.iter().all(|w| w.is_finite()), InvalidArgument, "non-finite weight");
        Ok(Self { n_classes, dim, weights })
    }

    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
        }
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.weights[y * self.dim..(y + 1) * self.dim]
    }

    fn softmax_into(&self, f: &[f64], out: &mut [f64]) {
        for (y, o) in out.iter_mut().enumerate() {
            *o = self.row(y).iter().zip(f).map(|(a, b)| a * b).sum();
        }
        softmax_in_place(out);
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Class distributions at every valid position of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct PartScores {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// `None` at invalid positions.
    pub probs: Vec<Option<Vec<f64>>>,
}

pub fn part_scores(map: &FeatureMap, pc: &PartClassifier) -> Result<PartScores> {
    ensure!(
        map.depth() == pc.dim,
        DimensionMismatch,
        "feature depth {} != classifier dimension {}",
        map.depth(),
        pc.dim
    );
    let probs = (0..map.n_positions())
        .map(|i| {
            map.vector(i).map(|f| {
                let mut p = vec![0.0; pc.n_classes];
                pc.softmax_into(f, &mut p);
                p
            })
        })
        .collect();
    Ok(PartScores {
        height: map.height(),
        width: map.width(),
        n_classes: pc.n_classes,
        probs,
    })
}

/// Per class, the maximum probability over positions and the first position attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledScores {
    pub values: Vec<f64>,
    pub positions: Vec<usize>,
}

pub fn part_pool(scores: &PartScores) -> Result<PooledScores> {
    let mut values = vec![f64::NEG_INFINITY; scores.n_classes];
    let mut positions = vec![usize::MAX; scores.n_classes];
    for (i, p) in scores.probs.iter().enumerate() {
        let Some(p) = p else { continue };
        for y in 0..scores.n_classes {
            if p[y] > values[y] {
                values[y] = p[y];
                positions[y] = i;
            }
        }
    }
    ensure!(positions[0] != usize::MAX, Empty, "every position is invalid");
    Ok(PooledScores { values, positions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub update_backbone: bool,
    /// Standard deviation of the initial part-classifier weights.
    pub init_scale: f64,
    /// Items per gradient step; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 20,
            update_backbone: true,
            init_scale: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            InvalidArgument,
            "learning rate must be finite and non-negative"
        );
        ensure!(self.init_scale >= 0.0, InvalidArgument, "init scale must be non-negative");
        Ok(())
    }
}

/// Mean loss over the items and its gradient with respect to both parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneGradient {
    pub loss: f64,
    pub classifier: Vec<f64>,
    pub filters: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `mean_n −log max_i p(y_n | f_i)` and its (sub)gradient. Gradient flows through the
/// lowest-index argmax position only. Items with no valid position are an error.
pub fn finetune_loss_and_gradient(
    items: &[(&Image, usize)],
    backbone: &BackboneParams,
    pc: &PartClassifier,
    with_backbone: bool,
) -> Result<FinetuneGradient> {
    ensure!(!items.is_empty(), Empty, "no training items");
    let d = pc.dim;
    ensure!(backbone.depth() == d, DimensionMismatch, "backbone depth {} != {}", backbone.depth(), d);
    let mut g = FinetuneGradient {
        loss: 0.0,
        classifier: vec![0.0; pc.weights.len()],
        filters: vec![0.0; backbone.filters.len()],
        bias: vec![0.0; backbone.bias.len()],
    };
    let scale = 1.0 / items.len() as f64;
    let mut dz = vec![0.0; pc.n_classes];
    for &(img, y) in items {
        ensure!(y < pc.n_classes, InvalidArgument, "label {y} out of range");
        let (map, cache) = forward(img, backbone)?;
        let pooled = part_pool(&part_scores(&map, pc)?)?;
        let i = pooled.positions[y];
        g.loss -= scale * pooled.values[y].ln();
        let f = map.vector(i).expect("pooled position is valid");
        pc.softmax_into(f, &mut dz);
        dz[y] -= 1.0;
        for (yy, dzy) in dz.iter().enumerate() {
            let row = &mut g.classifier[yy * d..(yy + 1) * d];
            row.iter_mut().zip(f).for_each(|(w, x)| *w += scale * dzy * x);
        }
        if with_backbone {
            let mut upstream = vec![0.0; map.n_positions() * d];
            let df = &mut upstream[i * d..(i + 1) * d];
            for (yy, dzy) in dz.iter().enumerate() {
                df.iter_mut().zip(pc.row(yy)).for_each(|(u, w)| *u += scale * dzy * w);
            }
            let bg = backbone_gradient_cached(img, backbone, &map, &cache, &upstream)?;
            g.filters.iter_mut().zip(&bg.filters).for_each(|(a, b)| *a += b);
            g.bias.iter_mut().zip(&bg.bias).for_each(|(a, b)| *a += b);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub classifier: PartClassifier,
    pub backbone: BackboneParams,
    /// Training loss before the first step and after every epoch.
    pub loss_trace: Vec<f64>,
}

/// Mean max-pooled part loss over the items (forward pass only).
pub fn finetune_loss(items: &[(&Image, usize)], backbone: &BackboneParams, pc: &PartClassifier) -> Result<f64> {
    use rayon::prelude::*;
    ensure!(!items.is_empty(), Empty, "no training items");
    let losses = items
        .par_iter()
        .map(|&(img, y)| {
            ensure!(y < pc.n_classes, InvalidArgument, "label {y} out of range");
            let pooled = part_pool(&part_scores(&extract_features(img, backbone)?, pc)?)?;
            Ok(-pooled.values[y].ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / items.len() as f64)
}

/// Gradient descent with a fixed step on the max-pooled part loss, over seeded
/// mini-batches (`batch_size = 0` uses the full training split per step).
pub fn finetune(dataset: &LabeledDataset, backbone: &BackboneParams, config: &FinetuneConfig) -> Result<FinetuneResult> {
    config.validate()?;
    backbone.validate()?;
    let train = dataset.train()?;
    let items: Vec<(&Image, usize)> = train.items().iter().map(|it| (&it.image, it.label)).collect();
    let n_classes = dataset.n_classes();
    let d = backbone.depth();
    let normal = Normal::new(0.0, config.init_scale.max(f64::MIN_POSITIVE)).expect("positive scale");
    let mut rng = rng_from_seed(derive_seed(config.seed, "part-classifier"));
    let weights = if config.init_scale == 0.0 {
        vec![0.0; n_classes * d]
    } else {
        (0..n_classes * d).map(|_| normal.sample(&mut rng)).collect()
    };
    let mut pc = PartClassifier::new(n_classes, d, weights)?;
    let mut bb = backbone.clone();
    let mut trace = vec![finetune_loss(&items, &bb, &pc)?];
    if !trace[0].is_finite() {
        return Err(Error::Diverged { step: 0, loss: trace[0] });
    }
    if config.learning_rate == 0.0 {
        return Ok(FinetuneResult {
            classifier: pc,
            backbone: bb,
            loss_trace: trace,
        });
    }
    let batch = if config.batch_size == 0 { items.len() } else { config.batch_size };
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, "batches"));
    let lr = config.learning_rate;
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            step += 1;
            let sub: Vec<(&Image, usize)> = chunk.iter().map(|&i| items[i]).collect();
            let g = finetune_loss_and_gradient(&sub, &bb, &pc, config.update_backbone)?;
            if !g.loss.is_finite() {
                return Err(Error::Diverged { step, loss: g.loss });
            }
            pc.weights.iter_mut().zip(&g.classifier).for_each(|(w, d)| *w -= lr * d);
            if config.update_backbone {
                bb.filters.iter_mut().zip(&g.filters).for_each(|(w, d)| *w -= lr * d);
                bb.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= lr * d);
            }
            if pc.weights.iter().chain(&bb.filters).chain(&bb.bias).any(|w| !w.is_finite()) {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
        }
        let loss = finetune_loss(&items, &bb, &pc)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
    }
    Ok(FinetuneResult {
        classifier: pc,
        backbone: bb,
        loss_trace: trace,
    })
}

/// Extracts features of every image in `dataset` with `backbone`.
pub fn extract_all(images: &[&Image], backbone: &BackboneParams) -> Result<Vec<FeatureMap>> {
    use rayon::prelude::*;
    images.par_iter().map(|img| extract_features(img, backbone)).collect()
}

/// Re-extracts features with the (finetuned) backbone and re-learns the dictionary,
/// class models and occluder on them.
pub fn refit_after_finetune(
    dataset: &LabeledDataset,
    backgrounds: &[Image],
    backbone: &BackboneParams,
    config: &CompNetTrainConfig,
) -> Result<CompNet> {
    let train = dataset.train()?;
    let imgs: Vec<&Image> = train.items().iter().map(|it| &it.image).collect();
    let labels: Vec<usize> = train.items().iter().map(|it| it.label).collect();
    let maps = extract_all(&imgs, backbone)?;
    let bg_refs: Vec<&Image> = backgrounds.iter().collect();
    let bg = extract_all(&bg_refs, backbone)?;
    fit_compnet(&maps, &labels, dataset.n_classes(), &bg, config)
}

/// Class purity of the dictionary's clusters over labeled feature maps, each valid
/// vector assigned to its nearest component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterPurity {
    /// Mean over non-empty clusters of the majority-class fraction.
    pub mean: f64,
    /// Majority counts summed over clusters, divided by the number of vectors.
    pub pooled: f64,
    pub clusters_used: usize,
}

pub fn cluster_purity(maps: &[FeatureMap], labels: &[usize], n_classes: usize, compnet: &CompNet) -> Result<ClusterPurity> {
    ensure!(maps.len() == labels.len(), DimensionMismatch, "maps and labels differ in length");
    let k = compnet.dictionary.len();
    let mut counts = vec![0usize; k * n_classes];
    for (m, &y) in maps.iter().zip(labels) {
        ensure!(y < n_classes, InvalidArgument, "label {y} out of range");
        for i in 0..m.n_positions() {
            if let Some(f) = m.vector(i) {
                counts[compnet.dictionary.nearest(f) * n_classes + y] += 1;
            }
        }
    }
    let (mut total, mut majority, mut sum, mut used) = (0usize, 0usize, 0.0, 0usize);
    for c in counts.chunks_exact(n_classes) {
        let n: usize = c.iter().sum();
        if n == 0 {
            continue;
        }
        let top = c.iter().copied().max().unwrap_or(0);
        total += n;
        majority += top;
        sum += top as f64 / n as f64;
        used += 1;
    }
    ensure!(total > 0, Empty, "no valid feature vectors");
    Ok(ClusterPurity {
        mean: sum / used as f64,
        pooled: majority as f64 / total as f64,
        clusters_used: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(h: usize, w: usize, d: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::from_raw(h, w, d, data, 1e-9).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let m = map_from(2, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let s = part_scores(&m, &PartClassifier::zeros(4, 3)).unwrap();
        for p in s.probs.iter().flatten() {
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn two_class_logistic() {
        let w = vec![0.3, -1.2, 2.0, -0.7, 0.4, 0.9];
        let pc = PartClassifier::new(2, 3, w.clone()).unwrap();
        let f = [0.48, 0.6, 0.64];
        let m = map_from(1, 1, 3, f.to_vec());
        let p = part_scores(&m, &pc).unwrap().probs[0].clone().unwrap();
        let z: f64 = (0..3).map(|j| (w[j] - w[3 + j]) * f[j]).sum();
        assert!((p[0] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-14);
    }

    #[test]
    fn all_invalid_pool_errors() {
        let m = map_from(1, 2, 2, vec![0.0; 4]);
        let s = part_scores(&m, &PartClassifier::zeros(2, 2)).unwrap();
        assert!(part_pool(&s).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let m = map_from(1, 1, 2, vec![1.0, 0.0]);
        assert!(part_scores(&m, &PartClassifier::zeros(2, 3)).is_err());
    }
}
