//! Round orchestration: cohort sampling, stale-gradient bookkeeping, and the
//! server/worker engine.

pub mod engine;

use rand::Rng;

use crate::aggregate::{combine_pseudo_gradients, make_weights, AggregationWeights, WeightScheme};
use crate::client::PseudoGradient;
use crate::error::{Error, Result};
use crate::params::vector::ParameterVector;

pub use engine::{
    ClientRunner, DataStore, Engine, EngineConfig, ExecMode, SimRunner, StalenessConfig,
    TrainOutcome, WorkerMessage,
};

/// Cohort size request: fixed, or uniformly drawn from a range per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortSpec {
    Fixed(usize),
    Range { min: usize, max: usize },
}

/// Samples a round's cohort: distinct client ids, without replacement.
pub fn sample_clients<R: Rng>(
    pool_size: usize,
    spec: &CohortSpec,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let k = match *spec {
        CohortSpec::Fixed(k) => k,
        CohortSpec::Range { min, max } => {
            if min == 0 || min > max {
                return Err(Error::Config(format!(
                    "cohort range {min}..={max} must satisfy 1 <= min <= max"
                )));
            }
            if max > pool_size {
                return Err(Error::Config(format!(
                    "cohort range max {max} exceeds pool of {pool_size}"
                )));
            }
            rng.gen_range(min..=max)
        }
    };
    if k == 0 {
        return Err(Error::Config("cohort size must be positive".into()));
    }
    if k > pool_size {
        return Err(Error::Config(format!(
            "cohort of {k} exceeds pool of {pool_size}"
        )));
    }
    let idx = rand::seq::index::sample(rng, pool_size, k);
    Ok(idx.iter().map(|i| i as u32).collect())
}

/// One round's marching orders.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub round: u32,
    pub cohort: Vec<u32>,
    /// Fraction of fresh responses deferred to the next round.
    pub defer_fraction: f64,
}

impl RoundPlan {
    pub fn new(round: u32, cohort: Vec<u32>, defer_fraction: f64) -> Result<Self> {
        if round == 0 {
            return Err(Error::Config("rounds are numbered from 1".into()));
        }
        if cohort.is_empty() {
            return Err(Error::Config(format!("round {round}: empty cohort")));
        }
        let mut sorted = cohort.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("round {round}: duplicate client in cohort")));
        }
        if !(0.0..=1.0).contains(&defer_fraction) {
            return Err(Error::Config(format!(
                "defer fraction {defer_fraction} outside [0, 1]"
            )));
        }
        Ok(Self { round, cohort, defer_fraction })
    }
}

/// Holds pseudo-gradients deferred by exactly one round.
#[derive(Debug, Default)]
pub struct StaleBuffer {
    items: Vec<PseudoGradient>,
}

impl StaleBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stores this round's deferred updates. The buffer must be empty:
    /// anything older than one round would otherwise silently pile up.
    pub fn defer(&mut self, items: Vec<PseudoGradient>) -> Result<()> {
        if !self.items.is_empty() {
            return Err(Error::Protocol(format!(
                "stale buffer still holds {} updates from an unfinished round",
                self.items.len()
            )));
        }
        self.items = items;
        Ok(())
    }

    /// Drains the buffer for consumption in `round`, checking every item is
    /// exactly one round old.
    pub fn take(&mut self, round: u32) -> Result<Vec<PseudoGradient>> {
        for pg in &self.items {
            if pg.born_round + 1 != round {
                return Err(Error::Protocol(format!(
                    "stale update from client {} born round {} cannot be used in round {round}; \
                     only one round of staleness is supported",
                    pg.client_id, pg.born_round
                )));
            }
        }
        Ok(std::mem::take(&mut self.items))
    }
}

/// Merges fresh and one-round-stale pseudo-gradients with weights normalized
/// over the union, reduced in client id order. A client present in both sets
/// contributes only its fresh update. With no stale items this is exactly the
/// plain weighted combination.
pub fn stale_aggregate(
    current: &[PseudoGradient],
    deferred: &[PseudoGradient],
    scheme: &WeightScheme,
    round: u32,
) -> Result<(ParameterVector, AggregationWeights)> {
    for pg in current {
        if pg.born_round != round {
            return Err(Error::Protocol(format!(
                "fresh update from client {} born round {} used in round {round}",
                pg.client_id, pg.born_round
            )));
        }
    }
    for pg in deferred {
        if pg.born_round + 1 != round {
            return Err(Error::Protocol(format!(
                "stale update from client {} born round {} used in round {round}",
                pg.client_id, pg.born_round
            )));
        }
    }
    let mut union: Vec<PseudoGradient> = current.to_vec();
    for pg in deferred {
        if !current.iter().any(|c| c.client_id == pg.client_id) {
            union.push(pg.clone());
        }
    }
    if union.is_empty() {
        return Err(Error::Aggregation("empty union of fresh and stale updates".into()));
    }
    let weights = make_weights(scheme, &union)?;
    let combined = combine_pseudo_gradients(&union, &weights)?;
    Ok((combined, weights))
}

/// l2 distance between two congruent parameter vectors.
pub fn model_delta_norm(a: &ParameterVector, b: &ParameterVector) -> Result<f64> {
    Ok(a.sub(b)?.l2_norm())
}

/// Staleness-adaptive server learning rate: min(c_floor / delta, eta_max),
/// with a zero delta (no movement) mapping to eta_max.
pub fn staleness_lr(delta: f64, c_floor: f64, eta_max: f64) -> Result<f64> {
    if !c_floor.is_finite() || c_floor <= 0.0 {
        return Err(Error::Domain(format!("c_floor {c_floor} must be positive")));
    }
    if !eta_max.is_finite() || eta_max <= 0.0 {
        return Err(Error::Domain(format!("eta_max {eta_max} must be positive")));
    }
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::Domain(format!("delta {delta} must be finite and >= 0")));
    }
    if delta == 0.0 {
        Ok(eta_max)
    } else {
        Ok((c_floor / delta).min(eta_max))
    }
}

/// Error contribution of one-round-stale gradients: the stale cohort pushes
/// the model along the previous round's change, scaled by the server lr and
/// the stale weight mass. Returns (error vector, its norm, the bound
/// eta * ||previous change||).
pub fn stale_error_term(
    eta: f64,
    prev_change: &ParameterVector,
    stale_weight_sum: f64,
) -> Result<(ParameterVector, f64, f64)> {
    if !(0.0..=1.0 + 1e-12).contains(&stale_weight_sum) {
        return Err(Error::Domain(format!(
            "stale weight sum {stale_weight_sum} outside [0, 1]"
        )));
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::Domain(format!("eta {eta} must be finite and >= 0")));
    }
    let err = prev_change.scale(eta * stale_weight_sum);
    let norm = err.l2_norm();
    let bound = eta * prev_change.l2_norm();
    Ok((err, norm, bound))
}

/// Everything a round reports to the caller. Wall time is returned for
/// observation but has no effect on any simulation output.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: u32,
    pub cohort_size: u32,
    pub deferred: u32,
    pub stale_used: u32,
    pub delta_tau: f64,
    pub eta_server: f64,
    pub stale_weight_sum: f64,
    pub stale_error_norm: f64,
    pub stale_error_bound: f64,
    pub payload_bytes: u64,
    pub idealized_bytes: f64,
    pub epsilon_spent: f64,
    pub wall: std::time::Duration,
}
