//! Deterministic synthetic datasets.
//!
//! `class_blobs` makes an image-classification stand-in: one random prototype
//! image per class, samples are the prototype plus Gaussian pixel noise,
//! clamped to [0, 1]. `least_squares` makes a noisy linear regression problem.
//! Both are fully determined by their seed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::shard::Dataset;
use crate::rng;

/// Class-prototype blobs with pixel noise; labels cycle 0..n_classes.
pub fn class_blobs(
    n_samples: usize,
    dim: usize,
    n_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || dim == 0 || n_classes < 2 {
        return Err(Error::Config(format!(
            "class_blobs needs samples, dims and >= 2 classes (got {n_samples}, {dim}, {n_classes})"
        )));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::Config(format!("noise {noise} must be non-negative")));
    }
    let mut proto_rng = rng::stream(seed, &[rng::tag("blob-protos")]);
    let protos: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| proto_rng.gen_range(0.0..1.0)).collect())
        .collect();
    let mut sample_rng = rng::stream(seed, &[rng::tag("blob-samples")]);
    let normal = StandardNormal;
    let mut features = Vec::with_capacity(n_samples * dim);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let c = i % n_classes;
        for d in 0..dim {
            let eps: f64 = normal.sample(&mut sample_rng);
            features.push((protos[c][d] + noise * eps).clamp(0.0, 1.0));
        }
        labels.push(c as f64);
    }
    Dataset::new(features, dim, labels)
}

/// Renders a blobs dataset as u8 pixels (for IDX export).
pub fn to_u8_pixels(data: &Dataset) -> Vec<u8> {
    (0..data.n_samples())
        .flat_map(|i| {
            data.row(i)
                .iter()
                .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect::<Vec<u8>>()
        })
        .collect()
}

/// Gaussian-feature linear regression: y = <w*, x> + noise * N(0, 1).
pub fn least_squares(n_samples: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_samples == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "least_squares needs samples and dims (got {n_samples}, {dim})"
        )));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::Config(format!("noise {noise} must be non-negative")));
    }
    let mut w_rng = rng::stream(seed, &[rng::tag("lsq-weights")]);
    let w: Vec<f64> = (0..dim).map(|_| w_rng.gen_range(-1.0..1.0)).collect();
    let mut sample_rng = rng::stream(seed, &[rng::tag("lsq-samples")]);
    let normal = StandardNormal;
    let mut features = Vec::with_capacity(n_samples * dim);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut y = 0.0;
        for wd in &w {
            let x: f64 = normal.sample(&mut sample_rng);
            features.push(x);
            y += wd * x;
        }
        let eps: f64 = normal.sample(&mut sample_rng);
        labels.push(y + noise * eps);
    }
    Dataset::new(features, dim, labels)
}
