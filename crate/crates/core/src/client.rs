//! Client-side work: local SGD, pseudo-gradient extraction, personalization,
//! and evaluation.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::params::model::Model;
use crate::params::shard::{Batch, ClientShard};
use crate::params::vector::ParameterVector;
use crate::rng;

/// Local optimization settings for one training call.
#[derive(Debug, Clone)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Proximal pull toward the seed parameters (0 disables it).
    pub prox_mu: f64,
    /// Seed for the per-epoch sample shuffle.
    pub shuffle_seed: u64,
}

impl LocalTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !self.prox_mu.is_finite() || self.prox_mu < 0.0 {
            return Err(Error::Config(format!(
                "prox_mu {} must be finite and >= 0",
                self.prox_mu
            )));
        }
        Ok(())
    }
}

/// What a training call reports back besides the weights.
#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub sample_count: u64,
    pub final_local_loss: f64,
}

/// The unit shipped from client to server: the parameter delta pointing
/// from the trained model back to the seed, so the server can apply it
/// like a gradient (w minus lr times delta moves toward the trained model).
#[derive(Debug, Clone)]
pub struct PseudoGradient {
    pub delta: ParameterVector,
    pub client_id: u32,
    pub sample_count: u64,
    pub born_round: u32,
}

/// Mini-batch SGD from the seed model over the client's shard.
///
/// Epochs iterate a seeded shuffle of the shard; the final partial batch is
/// kept. With prox_mu > 0 each step adds mu * (w - w_seed) to the gradient.
pub fn local_train(
    seed_model: &Model,
    shard: &ClientShard,
    cfg: &LocalTrainConfig,
) -> Result<(ParameterVector, TrainStats)> {
    cfg.validate()?;
    let mut w = seed_model.params().clone();
    let seed_params = seed_model.params();
    let mut shuffle_rng = rng::stream(cfg.shuffle_seed, &[rng::tag("local-shuffle")]);
    let mut step: u64 = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..shard.n_samples()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let model = seed_model.replace_params(w.clone())?;
            let batch = Batch::from_indices(shard, chunk);
            let (loss, mut grad) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("client {}: non-finite batch loss", shard.client_id()),
                });
            }
            if cfg.prox_mu > 0.0 {
                let pull = w.sub(seed_params)?;
                grad.axpy(cfg.prox_mu, &pull)?;
            }
            w.axpy(-cfg.lr, &grad)?;
            step += 1;
        }
    }
    // Report the post-training loss over the whole shard.
    let final_model = seed_model.replace_params(w.clone())?;
    let (final_local_loss, _) = final_model.forward_loss(&Batch::from_shard(shard))?;
    Ok((
        w,
        TrainStats {
            sample_count: shard.n_samples() as u64,
            final_local_loss,
        },
    ))
}

/// delta = seed - trained, tagged with provenance for aggregation.
pub fn pseudo_gradient(
    seed: &ParameterVector,
    trained: &ParameterVector,
    client_id: u32,
    sample_count: u64,
    born_round: u32,
) -> Result<PseudoGradient> {
    Ok(PseudoGradient {
        delta: seed.sub(trained)?,
        client_id,
        sample_count,
        born_round,
    })
}

/// theta = alpha * local + (1 - alpha) * global, component-wise.
/// The endpoints return exact copies of the corresponding input.
pub fn interpolate(
    local: &ParameterVector,
    global: &ParameterVector,
    alpha: f64,
) -> Result<ParameterVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    local.check_congruent(global)?;
    if alpha == 0.0 {
        return Ok(global.clone());
    }
    if alpha == 1.0 {
        return Ok(local.clone());
    }
    local.zip_map(global, |l, g| alpha * l + (1.0 - alpha) * g)
}

/// Grid search over alpha in {0.0, 0.1, ..., 1.0} minimizing validation
/// loss. Ties keep the smaller alpha (closer to the global model).
pub fn estimate_alpha(local: &Model, global: &Model, validation: &ClientShard) -> Result<f64> {
    let batch = Batch::from_shard(validation);
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=10 {
        let alpha = f64::from(k) / 10.0;
        let params = interpolate(local.params(), global.params(), alpha)?;
        let (loss, _) = global.replace_params(params)?.forward_loss(&batch)?;
        if loss < best.0 {
            best = (loss, alpha);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss plus argmax accuracy. Accuracy is meaningful for classifiers
/// only and reported as 0 for regression models.
pub fn evaluate(model: &Model, shard: &ClientShard) -> Result<EvalMetrics> {
    let batch = Batch::from_shard(shard);
    let (loss, preds) = model.forward_loss(&batch)?;
    if !model.is_classifier() {
        return Ok(EvalMetrics { loss, accuracy: 0.0 });
    }
    let mut correct = 0usize;
    for (pred, (_, y)) in preds.iter().zip(batch.iter()) {
        let mut arg = 0;
        for (k, &p) in pred.iter().enumerate() {
            if p > pred[arg] {
                arg = k;
            }
        }
        if arg == y as usize {
            correct += 1;
        }
    }
    Ok(EvalMetrics {
        loss,
        accuracy: correct as f64 / batch.len() as f64,
    })
}
