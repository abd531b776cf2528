//! Splitting a source dataset into per-client shards.

use rand::seq::SliceRandom;
use rand_distr::{Dirichlet, Distribution};

use crate::error::{Error, Result};
use crate::params::shard::{ClientShard, Dataset};
use crate::rng;

const DIRICHLET_REDRAWS: u64 = 100;

/// Seeded shuffle split into train and held-out test parts.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} must be in (0, 1)"
        )));
    }
    let n = data.n_samples();
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::Infeasible("cannot split fewer than 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("test-split")]));
    let (test_idx, train_idx) = order.split_at(n_test);
    Ok((gather(data, train_idx)?, gather(data, test_idx)?))
}

fn gather(data: &Dataset, indices: &[usize]) -> Result<Dataset> {
    let mut features = Vec::with_capacity(indices.len() * data.dim());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        features.extend_from_slice(data.row(i));
        labels.push(data.labels()[i]);
    }
    Dataset::new(features, data.dim(), labels)
}

/// Shuffles all samples and deals them out as evenly as possible.
/// Shard sizes differ by at most one and every shard is non-empty.
pub fn iid_partition(data: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let n = data.n_samples();
    check_feasible(n, n_clients)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("iid")]));
    let base = n / n_clients;
    let extra = n % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut cursor = 0;
    for c in 0..n_clients {
        let take = base + usize::from(c < extra);
        let idx = &order[cursor..cursor + take];
        cursor += take;
        shards.push(ClientShard::from_source(c as u32, data, idx)?);
    }
    Ok(shards)
}

/// Label-skewed partition: for every class, client proportions are drawn
/// from Dirichlet(alpha) and samples are dealt accordingly. Small alpha
/// concentrates each class on few clients; large alpha approaches iid.
/// Redraws (up to a fixed budget) until every shard is non-empty.
pub fn dirichlet_partition(
    data: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let n = data.n_samples();
    check_feasible(n, n_clients)?;
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Config(format!("dirichlet alpha {alpha} must be positive")));
    }
    if n_clients == 1 {
        let idx: Vec<usize> = (0..n).collect();
        return Ok(vec![ClientShard::from_source(0, data, &idx)?]);
    }

    // Group sample indices per class, classes ordered by label value.
    let mut class_indices: Vec<(u64, Vec<usize>)> = Vec::new();
    for (i, &y) in data.labels().iter().enumerate() {
        let key = y.to_bits();
        match class_indices.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => class_indices.push((key, vec![i])),
        }
    }
    class_indices.sort_by(|(a, _), (b, _)| f64::from_bits(*a).total_cmp(&f64::from_bits(*b)));

    for attempt in 0..DIRICHLET_REDRAWS {
        let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        let mut r = rng::stream(seed, &[rng::tag("dirichlet"), attempt]);
        for (_, indices) in &class_indices {
            let mut indices = indices.clone();
            indices.shuffle(&mut r);
            let dir = Dirichlet::new_with_size(alpha, n_clients)
                .map_err(|e| Error::Config(format!("dirichlet({alpha}, {n_clients}): {e}")))?;
            let proportions = dir.sample(&mut r);
            let counts = apportion(&proportions, indices.len());
            let mut cursor = 0;
            for (c, &count) in counts.iter().enumerate() {
                per_client[c].extend_from_slice(&indices[cursor..cursor + count]);
                cursor += count;
            }
        }
        if per_client.iter().all(|v| !v.is_empty()) {
            let mut shards = Vec::with_capacity(n_clients);
            for (c, idx) in per_client.iter().enumerate() {
                shards.push(ClientShard::from_source(c as u32, data, idx)?);
            }
            return Ok(shards);
        }
    }
    Err(Error::Infeasible(format!(
        "dirichlet(alpha {alpha}) left an empty shard after {DIRICHLET_REDRAWS} draws \
         ({n} samples over {n_clients} clients)"
    )))
}

fn check_feasible(n_samples: usize, n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::Config("n_clients must be positive".into()));
    }
    if n_clients > n_samples {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients cannot each get a sample from {n_samples}"
        )));
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` items by proportion.
/// Ties go to the lower index, so the result is deterministic.
fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|&p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}
