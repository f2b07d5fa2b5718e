//! Filter-bank initialization from whitened image patches.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::dataset::LabeledDataset;
use crate::dictionary::spherical_kmeans;
use crate::error::{ensure, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::vmf::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterInitConfig {
    pub channels: usize,
    pub kernel: usize,
    pub n_patches: usize,
    /// Regularizer added to covariance eigenvalues before whitening.
    pub whitening_eps: f64,
    pub stride: usize,
    pub pool: usize,
    pub pool_stride: usize,
    pub epsilon: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for FilterInitConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            kernel: 5,
            n_patches: 20_000,
            whitening_eps: 0.01,
            stride: 1,
            pool: 4,
            pool_stride: 4,
            epsilon: 1e-6,
            kmeans_iters: 40,
            seed: 0,
        }
    }
}

/// Samples patches, ZCA-whitens them, clusters the whitened directions on the
/// unit sphere and maps the centroids back to unit-norm pixel-space filters.
/// Each filter's bias centres its response on the mean patch.
pub fn init_filters(dataset: &LabeledDataset, config: &FilterInitConfig) -> Result<BackboneParams> {
    ensure!(!dataset.is_empty(), Empty, "dataset is empty");
    let k = config.kernel;
    ensure!(k % 2 == 1, InvalidArgument, "kernel size must be odd");
    let (h, w) = dataset.image_dims();
    ensure!(h >= k && w >= k, DimensionMismatch, "images smaller than kernel");
    let dim = k * k * 3;
    let mut rng = rng_from_seed(derive_seed(config.seed, "patches"));
    let items = dataset.items();
    let mut patches = Vec::with_capacity(config.n_patches);
    for _ in 0..config.n_patches {
        let img = &items[rng.random_range(0..items.len())].image;
        let (r, c) = (rng.random_range(0..=h - k), rng.random_range(0..=w - k));
        let mut p = Vec::with_capacity(dim);
        for dy in 0..k {
            for dx in 0..k {
                p.extend(img.get(r + dy, c + dx).iter().map(|&v| f64::from(v)));
            }
        }
        patches.push(p);
    }

    let mut mean = vec![0.0; dim];
    for p in &patches {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= patches.len().max(1) as f64);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for p in &patches {
        let d = DVector::from_iterator(dim, p.iter().zip(&mean).map(|(x, m)| x - m));
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= patches.len().max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let scale = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + config.whitening_eps).sqrt());
    let whiten = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();

    let mut white: Vec<Vec<f64>> = Vec::with_capacity(patches.len());
    for p in &patches {
        let d = DVector::from_iterator(dim, p.iter().zip(&mean).map(|(x, m)| x - m));
        let mut v: Vec<f64> = (&whiten * d).iter().copied().collect();
        if normalize(&mut v) > 1e-8 {
            white.push(v);
        }
    }
    ensure!(
        white.len() >= config.channels,
        InvalidArgument,
        "{} channels requested but only {} informative patches were sampled",
        config.channels,
        white.len()
    );
    let refs: Vec<&[f64]> = white.iter().map(|v| v.as_slice()).collect();
    let km = spherical_kmeans(&refs, config.channels, config.kmeans_iters, derive_seed(config.seed, "kmeans"))?;

    let mut filters = Vec::with_capacity(config.channels * dim);
    let mut bias = Vec::with_capacity(config.channels);
    for c in &km.centroids {
        let mut f: Vec<f64> = (&whiten * DVector::from_column_slice(c)).iter().copied().collect();
        normalize(&mut f);
        bias.push(-f.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>());
        filters.extend(f);
    }
    let params = BackboneParams {
        filters,
        bias,
        channels: config.channels,
        kernel: k,
        stride: config.stride,
        pool: config.pool,
        pool_stride: config.pool_stride,
        epsilon: config.epsilon,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_dataset, SyntheticSpec};

    fn data() -> LabeledDataset {
        generate_synthetic_dataset(&SyntheticSpec {
            n_classes: 3,
            image_size: 32,
            train_per_class: 4,
            test_per_class: 0,
            seed: 5,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let cfg = FilterInitConfig { channels: 8, n_patches: 2000, seed: 3, ..FilterInitConfig::default() };
        let ds = data();
        let a = init_filters(&ds, &cfg).unwrap();
        let b = init_filters(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        for f in a.filters.chunks_exact(a.kernel_len()) {
            let n: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn too_many_channels() {
        let cfg = FilterInitConfig { channels: 50, n_patches: 20, ..FilterInitConfig::default() };
        assert!(init_filters(&data(), &cfg).is_err());
    }
}
