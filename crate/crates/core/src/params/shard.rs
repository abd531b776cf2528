//! Datasets, per-client shards, and mini-batch views.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Raw labeled dataset: `n` feature rows of width `dim`, one label per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("dataset dim must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "feature count {} != {} labels x dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().chain(labels.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Shape("dataset contains non-finite values".into()));
        }
        Ok(Self { features, dim, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of distinct integer labels, assuming labels 0..k.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().fold(0usize, |k, &y| k.max(y as usize + 1))
    }
}

/// One client's local data, carrying provenance back into the source dataset.
#[derive(Debug, Clone)]
pub struct ClientShard {
    client_id: u32,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    transform_id: Option<u32>,
    source_indices: Vec<usize>,
}

impl ClientShard {
    pub fn new(
        client_id: u32,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        let n = labels.len();
        let source_indices = (0..n).collect();
        Self::with_provenance(client_id, dim, features, labels, None, source_indices)
    }

    pub fn with_provenance(
        client_id: u32,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<f64>,
        transform_id: Option<u32>,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("shard dim must be positive".into()));
        }
        let n = labels.len();
        if n == 0 {
            return Err(Error::Shape(format!("client {client_id}: empty shard")));
        }
        if features.len() != n * dim {
            return Err(Error::Shape(format!(
                "client {client_id}: feature count {} != {n} samples x dim {dim}",
                features.len()
            )));
        }
        if source_indices.len() != n {
            return Err(Error::Shape(format!(
                "client {client_id}: {} source indices for {n} samples",
                source_indices.len()
            )));
        }
        Ok(Self {
            client_id,
            dim,
            features,
            labels,
            transform_id,
            source_indices,
        })
    }

    /// Builds a shard from the given sample indices of a source dataset.
    pub fn from_source(client_id: u32, data: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * data.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= data.n_samples() {
                return Err(Error::Shape(format!(
                    "sample index {i} out of range ({} samples)",
                    data.n_samples()
                )));
            }
            features.extend_from_slice(data.row(i));
            labels.push(data.labels()[i]);
        }
        Self::with_provenance(client_id, data.dim(), features, labels, None, indices.to_vec())
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn transform_id(&self) -> Option<u32> {
        self.transform_id
    }

    pub fn with_transform_id(mut self, id: Option<u32>) -> Self {
        self.transform_id = id;
        self
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn label_histogram(&self) -> BTreeMap<i64, usize> {
        let mut h = BTreeMap::new();
        for &y in &self.labels {
            *h.entry(y.round() as i64).or_insert(0) += 1;
        }
        h
    }

    /// Splits off a held-out part (seeded shuffle). Both parts stay non-empty.
    pub fn split_holdout(&self, holdout_fraction: f64, seed: u64) -> Result<(ClientShard, ClientShard)> {
        if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction == 0.0 {
            return Err(Error::Config(format!(
                "holdout fraction {holdout_fraction} must be in (0, 1)"
            )));
        }
        let n = self.n_samples();
        if n < 2 {
            return Err(Error::Infeasible(format!(
                "client {}: cannot hold out from a single-sample shard",
                self.client_id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag("holdout"), u64::from(self.client_id)]));
        let n_hold = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let (hold, keep) = order.split_at(n_hold);
        Ok((self.subset(keep)?, self.subset(hold)?))
    }

    fn subset(&self, local_indices: &[usize]) -> Result<ClientShard> {
        let mut features = Vec::with_capacity(local_indices.len() * self.dim);
        let mut labels = Vec::with_capacity(local_indices.len());
        let mut source = Vec::with_capacity(local_indices.len());
        for &i in local_indices {
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
            source.push(self.source_indices[i]);
        }
        Self::with_provenance(self.client_id, self.dim, features, labels, self.transform_id, source)
    }
}

/// A partitioned dataset: one shard per client plus a global test holdout.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub shards: Vec<ClientShard>,
    pub global_test: ClientShard,
}

/// Borrowed mini-batch: feature rows paired with labels.
#[derive(Debug)]
pub struct Batch<'a> {
    rows: Vec<(&'a [f64], f64)>,
    dim: usize,
}

impl<'a> Batch<'a> {
    pub fn from_shard(shard: &'a ClientShard) -> Self {
        let rows = (0..shard.n_samples())
            .map(|i| (shard.feature_row(i), shard.labels()[i]))
            .collect();
        Self { rows, dim: shard.dim() }
    }

    pub fn from_indices(shard: &'a ClientShard, indices: &[usize]) -> Self {
        let rows = indices
            .iter()
            .map(|&i| (shard.feature_row(i), shard.labels()[i]))
            .collect();
        Self { rows, dim: shard.dim() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [f64], f64)> + '_ {
        self.rows.iter().copied()
    }
}
