//! Differential privacy for uplinked pseudo-gradients: l2 clipping, seeded
//! Gaussian noise, and a Renyi-DP accountant for multi-round spends.
//!
//! Local mode clips and noises every client delta before aggregation; global
//! mode clips the deltas and adds a single noise draw to the aggregate. Noise
//! streams are derived from (noise_seed, client id, round), so results do not
//! depend on worker scheduling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::client::PseudoGradient;
use crate::error::{Error, Result};
use crate::params::vector::ParameterVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpMode {
    /// Clip and noise each client's delta.
    Local,
    /// Clip client deltas; noise the aggregate once.
    Global,
}

#[derive(Debug, Clone)]
pub struct DpConfig {
    pub mode: DpMode,
    pub clip: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub noise_seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.clip.is_finite() || self.clip <= 0.0 {
            return Err(Error::Config(format!("dp clip {} must be positive", self.clip)));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "dp epsilon {} must be positive",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.delta) || self.delta == 0.0 {
            return Err(Error::Config(format!("dp delta {} must be in (0, 1)", self.delta)));
        }
        Ok(())
    }

    pub fn sigma(&self) -> Result<f64> {
        self.validate()?;
        gaussian_sigma(self.epsilon, self.delta, self.clip)
    }

    /// sigma / clip, the per-round noise multiplier the accountant tracks.
    pub fn noise_multiplier(&self) -> Result<f64> {
        Ok(self.sigma()? / self.clip)
    }
}

/// Scales the vector onto the l2 ball of radius c when it sticks out;
/// vectors already inside pass through untouched.
pub fn clip(v: &ParameterVector, c: f64) -> Result<ParameterVector> {
    if !c.is_finite() || c <= 0.0 {
        return Err(Error::Domain(format!("clip radius {c} must be positive")));
    }
    let norm = v.l2_norm();
    if norm <= c {
        Ok(v.clone())
    } else {
        Ok(v.scale(c / norm))
    }
}

/// Gaussian mechanism noise scale:
/// sigma = (c / epsilon) * sqrt(2 ln(1.25 / delta)).
pub fn gaussian_sigma(epsilon: f64, delta: f64, c: f64) -> Result<f64> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Domain(format!("epsilon {epsilon} must be positive")));
    }
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(Error::Domain(format!("delta {delta} must be in (0, 1)")));
    }
    if !c.is_finite() || c <= 0.0 {
        return Err(Error::Domain(format!("sensitivity {c} must be positive")));
    }
    Ok(c / epsilon * (2.0 * (1.25 / delta).ln()).sqrt())
}

/// Adds iid N(0, sigma^2) noise to every component.
pub fn add_noise<R: Rng>(v: &ParameterVector, sigma: f64, r: &mut R) -> ParameterVector {
    let normal = StandardNormal;
    let mut out = v.clone();
    for x in out.values_mut() {
        let eps: f64 = normal.sample(r);
        *x += sigma * eps;
    }
    out
}

fn noise_stream(cfg: &DpConfig, client_id: u32, round: u32) -> impl Rng {
    rng::stream(
        cfg.noise_seed,
        &[rng::tag("dp-noise"), u64::from(client_id), u64::from(round)],
    )
}

/// Applies the configured mechanism to a batch of pseudo-gradients at
/// production time. Local mode clips and noises each delta; global mode only
/// clips (the aggregate gets its noise in [`apply_global_noise`]). Noise is
/// keyed by (client, born round), so the result is schedule-independent.
pub fn apply_dp(cohort: &[PseudoGradient], cfg: &DpConfig) -> Result<Vec<PseudoGradient>> {
    cfg.validate()?;
    let sigma = cfg.sigma()?;
    let mut out = Vec::with_capacity(cohort.len());
    for pg in cohort {
        let clipped = clip(&pg.delta, cfg.clip)?;
        let delta = match cfg.mode {
            DpMode::Local => {
                let mut r = noise_stream(cfg, pg.client_id, pg.born_round);
                add_noise(&clipped, sigma, &mut r)
            }
            DpMode::Global => clipped,
        };
        out.push(PseudoGradient {
            delta,
            client_id: pg.client_id,
            sample_count: pg.sample_count,
            born_round: pg.born_round,
        });
    }
    Ok(out)
}

/// Global-mode noise, added once per round to the aggregated delta.
pub fn apply_global_noise(
    aggregate: &ParameterVector,
    cfg: &DpConfig,
    round: u32,
) -> Result<ParameterVector> {
    cfg.validate()?;
    if cfg.mode != DpMode::Global {
        return Err(Error::Config("global noise requested in local dp mode".into()));
    }
    let sigma = cfg.sigma()?;
    let mut r = rng::stream(cfg.noise_seed, &[rng::tag("dp-global"), u64::from(round)]);
    Ok(add_noise(aggregate, sigma, &mut r))
}

/// Renyi-DP accountant for repeated Gaussian mechanisms with noise
/// multiplier z. Composition over R rounds gives the Renyi bound
/// eps(alpha) = R * alpha / (2 z^2); conversion to (eps, delta)-DP adds
/// ln(1/delta) / (alpha - 1) and minimizes over alpha.
#[derive(Debug, Clone)]
pub struct RdpAccountant {
    noise_multiplier: f64,
    rounds: u32,
    orders: Vec<f64>,
}

impl RdpAccountant {
    pub fn new(noise_multiplier: f64) -> Result<Self> {
        if !noise_multiplier.is_finite() || noise_multiplier <= 0.0 {
            return Err(Error::Domain(format!(
                "noise multiplier {noise_multiplier} must be positive"
            )));
        }
        let mut orders = vec![1.25, 1.5];
        orders.extend((2..=64).map(f64::from));
        orders.push(128.0);
        orders.push(256.0);
        Ok(Self {
            noise_multiplier,
            rounds: 0,
            orders,
        })
    }

    pub fn rounds(&self) -> u32 {
        self.rounds
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.noise_multiplier
    }

    /// One more round of the mechanism; the input stays untouched.
    pub fn account_round(&self) -> RdpAccountant {
        let mut next = self.clone();
        next.rounds += 1;
        next
    }

    /// Tightest (epsilon, delta) spend over the alpha grid plus the
    /// closed-form continuous minimizer. Zero rounds spend zero.
    pub fn spend(&self, delta: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&delta) || delta == 0.0 {
            return Err(Error::Domain(format!("delta {delta} must be in (0, 1)")));
        }
        if self.rounds == 0 {
            return Ok(0.0);
        }
        let r = f64::from(self.rounds);
        let z2 = self.noise_multiplier * self.noise_multiplier;
        let eps_at = |alpha: f64| r * alpha / (2.0 * z2) + (1.0 / delta).ln() / (alpha - 1.0);
        let mut best = f64::INFINITY;
        for &alpha in &self.orders {
            if alpha > 1.0 {
                best = best.min(eps_at(alpha));
            }
        }
        let alpha_star = 1.0 + (2.0 * (1.0 / delta).ln() * z2 / r).sqrt();
        if alpha_star > 1.0 && alpha_star.is_finite() {
            best = best.min(eps_at(alpha_star));
        }
        Ok(best)
    }
}
