//! Server-side aggregation and federated optimizers.
//!
//! Two aggregation styles: classic weighted model averaging, and weighted
//! pseudo-gradient combination feeding a server optimizer (sgd, adam, yogi,
//! lamb, lars). The server update is always w <- w - f(aggregate), so plain
//! sgd with lr 1 and a single client reproduces that client's trained model.

use std::collections::BTreeMap;

use crate::client::PseudoGradient;
use crate::error::{Error, Result};
use crate::params::vector::ParameterVector;

/// How per-client aggregation weights are chosen.
#[derive(Debug, Clone)]
pub enum WeightScheme {
    /// Every cohort member counts the same.
    Uniform,
    /// Weight proportional to the client's sample count.
    DataSize,
    /// Caller-supplied weights by client id.
    Custom(BTreeMap<u32, f64>),
    /// Demo scheme: softmax over pseudo-gradient norms, so clients that
    /// moved farther get more say. Not from any published aggregation rule;
    /// it exists to exercise the custom-weight path end to end.
    GradNormSoftmax,
}

/// Normalized weights keyed by client id.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    weights: BTreeMap<u32, f64>,
}

impl AggregationWeights {
    pub fn get(&self, client_id: u32) -> Option<f64> {
        self.weights.get(&client_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.weights.iter().map(|(&k, &v)| (k, v))
    }

    pub fn sum(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Builds weights for a cohort of pseudo-gradients.
///
/// Uniform and data-size weights are normalized to sum to 1. Custom weights
/// must cover every cohort member and be non-negative; they are passed
/// through as given.
pub fn make_weights(scheme: &WeightScheme, cohort: &[PseudoGradient]) -> Result<AggregationWeights> {
    if cohort.is_empty() {
        return Err(Error::Aggregation("empty cohort".into()));
    }
    let mut weights = BTreeMap::new();
    match scheme {
        WeightScheme::Uniform => {
            let w = 1.0 / cohort.len() as f64;
            for pg in cohort {
                weights.insert(pg.client_id, w);
            }
        }
        WeightScheme::DataSize => {
            let total: u64 = cohort.iter().map(|pg| pg.sample_count).sum();
            if total == 0 {
                return Err(Error::Aggregation("cohort has zero total samples".into()));
            }
            for pg in cohort {
                weights.insert(pg.client_id, pg.sample_count as f64 / total as f64);
            }
        }
        WeightScheme::Custom(table) => {
            for pg in cohort {
                let w = table.get(&pg.client_id).copied().ok_or_else(|| {
                    Error::Config(format!("no custom weight for client {}", pg.client_id))
                })?;
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Config(format!(
                        "custom weight {w} for client {} must be finite and >= 0",
                        pg.client_id
                    )));
                }
                weights.insert(pg.client_id, w);
            }
        }
        WeightScheme::GradNormSoftmax => {
            let norms: Vec<(u32, f64)> = cohort
                .iter()
                .map(|pg| (pg.client_id, pg.delta.l2_norm()))
                .collect();
            let m = norms.iter().map(|(_, n)| *n).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = norms.iter().map(|(_, n)| (n - m).exp()).sum();
            for (id, n) in norms {
                weights.insert(id, (n - m).exp() / total);
            }
        }
    }
    if weights.len() != cohort.len() {
        return Err(Error::Aggregation("duplicate client ids in cohort".into()));
    }
    Ok(AggregationWeights { weights })
}

/// Sample-count weighted average of trained models:
/// sum(N_j * w_j) / sum(N_j).
pub fn fedavg_combine(models: &[(ParameterVector, u64)]) -> Result<ParameterVector> {
    if models.is_empty() {
        return Err(Error::Aggregation("nothing to average".into()));
    }
    let total: u64 = models.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Aggregation("zero total samples".into()));
    }
    let mut acc = models[0].0.zeros_like();
    for (params, n) in models {
        acc.axpy(*n as f64, params)?;
    }
    Ok(acc.scale(1.0 / total as f64))
}

/// Weighted sum of pseudo-gradient deltas, reduced in ascending client id
/// order so the result is independent of arrival order.
pub fn combine_pseudo_gradients(
    cohort: &[PseudoGradient],
    weights: &AggregationWeights,
) -> Result<ParameterVector> {
    if cohort.is_empty() {
        return Err(Error::Aggregation("empty cohort".into()));
    }
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.sort_by_key(|&i| cohort[i].client_id);
    let mut acc = cohort[0].delta.zeros_like();
    for &i in &order {
        let pg = &cohort[i];
        let w = weights.get(pg.client_id).ok_or_else(|| {
            Error::Config(format!("no weight for client {}", pg.client_id))
        })?;
        acc.axpy(w, &pg.delta)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerOptKind {
    Sgd,
    Adam,
    Yogi,
    Lamb,
    Lars,
}

/// Server optimizer state threaded through rounds.
///
/// Adam-family defaults: beta1 0.9, beta2 0.999 (0.99 for yogi), eps 1e-8,
/// bias correction on. Layerwise trust ratios (lamb, lars) are clipped to
/// [0, 10] and use no weight decay.
#[derive(Debug, Clone)]
pub struct ServerOptimizerState {
    pub kind: ServerOptKind,
    pub lr: f64,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub trust_min: f64,
    pub trust_max: f64,
    first_moment: Option<ParameterVector>,
    second_moment: Option<ParameterVector>,
}

impl ServerOptimizerState {
    pub fn new(kind: ServerOptKind, lr: f64) -> Result<Self> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!("server lr {lr} must be positive")));
        }
        let beta2 = match kind {
            ServerOptKind::Yogi => 0.99,
            _ => 0.999,
        };
        Ok(Self {
            kind,
            lr,
            step_count: 0,
            beta1: 0.9,
            beta2,
            eps: 1e-8,
            trust_min: 0.0,
            trust_max: 10.0,
            first_moment: None,
            second_moment: None,
        })
    }

    pub fn first_moment(&self) -> Option<&ParameterVector> {
        self.first_moment.as_ref()
    }

    pub fn second_moment(&self) -> Option<&ParameterVector> {
        self.second_moment.as_ref()
    }
}

/// One server update: returns the new global parameters and the advanced
/// optimizer state. The input state is untouched, so a round can be replayed.
pub fn server_step(
    state: &ServerOptimizerState,
    global: &ParameterVector,
    aggregate: &ParameterVector,
) -> Result<(ParameterVector, ServerOptimizerState)> {
    global.check_congruent(aggregate)?;
    if !aggregate.all_finite() {
        return Err(Error::Divergence {
            step: state.step_count,
            msg: "non-finite aggregate".into(),
        });
    }
    let mut next = state.clone();
    next.step_count = state.step_count + 1;
    let t = next.step_count;
    let new_global = match state.kind {
        ServerOptKind::Sgd => {
            let mut w = global.clone();
            w.axpy(-state.lr, aggregate)?;
            w
        }
        ServerOptKind::Adam | ServerOptKind::Yogi => {
            let mut m = state
                .first_moment
                .clone()
                .unwrap_or_else(|| global.zeros_like());
            let mut v = state
                .second_moment
                .clone()
                .unwrap_or_else(|| global.zeros_like());
            m = m
                .scale(state.beta1)
                .add(&aggregate.scale(1.0 - state.beta1))?;
            let g2 = aggregate.map(|g| g * g);
            v = match state.kind {
                ServerOptKind::Adam => v.scale(state.beta2).add(&g2.scale(1.0 - state.beta2))?,
                // yogi: v <- v - (1 - beta2) * sign(v - g^2) * g^2, an
                // additive update that reacts slower than adam's decay.
                _ => v.zip_map(&g2, |vv, gg| {
                    vv - (1.0 - state.beta2) * (vv - gg).signum() * gg
                })?,
            };
            let bc1 = 1.0 - state.beta1.powi(t as i32);
            let bc2 = 1.0 - state.beta2.powi(t as i32);
            let m_hat = m.scale(1.0 / bc1);
            let v_hat = v.scale(1.0 / bc2);
            let update = m_hat.zip_map(&v_hat, |mm, vv| mm / (vv.sqrt() + state.eps))?;
            next.first_moment = Some(m);
            next.second_moment = Some(v);
            let mut w = global.clone();
            w.axpy(-state.lr, &update)?;
            w
        }
        ServerOptKind::Lamb => {
            let mut m = state
                .first_moment
                .clone()
                .unwrap_or_else(|| global.zeros_like());
            let mut v = state
                .second_moment
                .clone()
                .unwrap_or_else(|| global.zeros_like());
            m = m
                .scale(state.beta1)
                .add(&aggregate.scale(1.0 - state.beta1))?;
            v = v
                .scale(state.beta2)
                .add(&aggregate.map(|g| g * g).scale(1.0 - state.beta2))?;
            let bc1 = 1.0 - state.beta1.powi(t as i32);
            let bc2 = 1.0 - state.beta2.powi(t as i32);
            let update = m
                .scale(1.0 / bc1)
                .zip_map(&v.scale(1.0 / bc2), |mm, vv| mm / (vv.sqrt() + state.eps))?;
            next.first_moment = Some(m);
            next.second_moment = Some(v);
            apply_layerwise_trust(state, global, &update)?
        }
        ServerOptKind::Lars => {
            // Trust-scaled momentum: m <- beta1 * m + trust(w, g) * g per
            // layer, then w <- w - lr * m.
            let mut m = state
                .first_moment
                .clone()
                .unwrap_or_else(|| global.zeros_like());
            let mut scaled_layers = Vec::with_capacity(global.layers().len());
            for (wl, gl) in global.layers().iter().zip(aggregate.layers()) {
                let r = trust_ratio(
                    l2(wl.values()),
                    l2(gl.values()),
                    state.trust_min,
                    state.trust_max,
                );
                scaled_layers.push(
                    crate::params::vector::Layer::new(
                        gl.name().to_string(),
                        gl.shape().to_vec(),
                        gl.values().iter().map(|&g| r * g).collect(),
                    )?,
                );
            }
            let scaled = ParameterVector::new(scaled_layers)?;
            m = m.scale(state.beta1).add(&scaled)?;
            next.first_moment = Some(m.clone());
            let mut w = global.clone();
            w.axpy(-state.lr, &m)?;
            w
        }
    };
    if !new_global.all_finite() {
        return Err(Error::Divergence {
            step: next.step_count,
            msg: "non-finite parameters after server step".into(),
        });
    }
    Ok((new_global, next))
}

/// w_l <- w_l - lr * trust(w_l, u_l) * u_l, layer by layer.
fn apply_layerwise_trust(
    state: &ServerOptimizerState,
    global: &ParameterVector,
    update: &ParameterVector,
) -> Result<ParameterVector> {
    let mut layers = Vec::with_capacity(global.layers().len());
    for (wl, ul) in global.layers().iter().zip(update.layers()) {
        let r = trust_ratio(
            l2(wl.values()),
            l2(ul.values()),
            state.trust_min,
            state.trust_max,
        );
        layers.push(crate::params::vector::Layer::new(
            wl.name().to_string(),
            wl.shape().to_vec(),
            wl.values()
                .iter()
                .zip(ul.values())
                .map(|(&w, &u)| w - state.lr * r * u)
                .collect(),
        )?);
    }
    ParameterVector::new(layers)
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ||w|| / ||u|| clipped to [lo, hi]; degenerate norms fall back to 1.
fn trust_ratio(w_norm: f64, u_norm: f64, lo: f64, hi: f64) -> f64 {
    if w_norm == 0.0 || u_norm == 0.0 {
        1.0
    } else {
        (w_norm / u_norm).clamp(lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::vector::Layer;
    use crate::rng;
    use rand::Rng;

    fn pv(values: &[f64]) -> ParameterVector {
        ParameterVector::new(vec![
            Layer::new("w", vec![values.len()], values.to_vec()).unwrap()
        ])
        .unwrap()
    }

    fn pg(id: u32, n: u64, delta: &[f64]) -> PseudoGradient {
        PseudoGradient {
            delta: pv(delta),
            client_id: id,
            sample_count: n,
            born_round: 1,
        }
    }

    #[test]
    fn fedavg_weighted_mean_hand_case() {
        // (10 * [1, 2] + 30 * [3, 4]) / 40 = [2.5, 3.5]
        let out = fedavg_combine(&[(pv(&[1.0, 2.0]), 10), (pv(&[3.0, 4.0]), 30)]).unwrap();
        assert_eq!(out.layer("w").unwrap().values(), &[2.5, 3.5]);
    }

    #[test]
    fn fedavg_identical_models_is_identity() {
        let w = pv(&[0.25, -1.5, 3.0]);
        let out = fedavg_combine(&[(w.clone(), 7), (w.clone(), 13), (w.clone(), 1)]).unwrap();
        for (a, b) in out.values().zip(w.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fedavg_empty_fails() {
        assert!(matches!(fedavg_combine(&[]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn data_size_weights_normalize() {
        let cohort = [pg(1, 10, &[0.0]), pg(2, 30, &[0.0])];
        let w = make_weights(&WeightScheme::DataSize, &cohort).unwrap();
        assert_eq!(w.get(1), Some(0.25));
        assert_eq!(w.get(2), Some(0.75));
        assert!((w.sum() - 1.0).abs() < 1e-12);
        let u = make_weights(&WeightScheme::Uniform, &cohort).unwrap();
        assert_eq!(u.get(1), Some(0.5));
    }

    #[test]
    fn custom_weights_must_cover_cohort() {
        let cohort = [pg(1, 10, &[0.0]), pg(2, 30, &[0.0])];
        let mut table = BTreeMap::new();
        table.insert(1, 0.9);
        assert!(matches!(
            make_weights(&WeightScheme::Custom(table.clone()), &cohort),
            Err(Error::Config(_))
        ));
        table.insert(2, -0.1);
        assert!(matches!(
            make_weights(&WeightScheme::Custom(table), &cohort),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grad_norm_softmax_weights_sum_to_one_and_rank() {
        let cohort = [pg(1, 10, &[3.0, 4.0]), pg(2, 10, &[0.1, 0.0])];
        let w = make_weights(&WeightScheme::GradNormSoftmax, &cohort).unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(w.get(1).unwrap() > w.get(2).unwrap());
    }

    #[test]
    fn combine_is_order_independent() {
        let a = pg(5, 10, &[1.0, 0.0]);
        let b = pg(2, 20, &[0.0, 1.0]);
        let c = pg(9, 30, &[1.0, 1.0]);
        let forward = [a.clone(), b.clone(), c.clone()];
        let backward = [c, b, a];
        let w = make_weights(&WeightScheme::DataSize, &forward).unwrap();
        let x = combine_pseudo_gradients(&forward, &w).unwrap();
        let y = combine_pseudo_gradients(&backward, &w).unwrap();
        for (p, q) in x.values().zip(y.values()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn sgd_step_is_w_minus_lr_agg() {
        let st = ServerOptimizerState::new(ServerOptKind::Sgd, 0.5).unwrap();
        let (w, st2) = server_step(&st, &pv(&[1.0, 2.0]), &pv(&[0.2, -0.4])).unwrap();
        assert_eq!(w.layer("w").unwrap().values(), &[0.9, 2.2]);
        assert_eq!(st2.step_count, 1);
    }

    #[test]
    fn single_client_sgd_lr_one_reproduces_trained_model() {
        // agg = seed - trained with weight 1, so w - agg = trained.
        let seed = pv(&[1.0, -2.0, 0.5]);
        let trained = pv(&[0.7, -1.5, 0.9]);
        let cohort = [PseudoGradient {
            delta: seed.sub(&trained).unwrap(),
            client_id: 0,
            sample_count: 5,
            born_round: 1,
        }];
        let w = make_weights(&WeightScheme::DataSize, &cohort).unwrap();
        let agg = combine_pseudo_gradients(&cohort, &w).unwrap();
        let st = ServerOptimizerState::new(ServerOptKind::Sgd, 1.0).unwrap();
        let (out, _) = server_step(&st, &seed, &agg).unwrap();
        for (a, b) in out.values().zip(trained.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_hand_case() {
        // From zero moments: m = 0.1g, v = 0.001g^2, bias-corrected back to
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let st = ServerOptimizerState::new(ServerOptKind::Adam, 0.1).unwrap();
        let g = 0.3;
        let (w, st2) = server_step(&st, &pv(&[1.0]), &pv(&[g])).unwrap();
        let want = 1.0 - 0.1 * g / (g + 1e-8);
        assert!((w.layer("w").unwrap().values()[0] - want).abs() < 1e-12);
        assert_eq!(st2.step_count, 1);
        let m = st2.first_moment().unwrap().layer("w").unwrap().values()[0];
        assert!((m - 0.1 * g).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let st = ServerOptimizerState::new(ServerOptKind::Adam, 1.0).unwrap();
        let mut r = rng::stream(4, &[rng::tag("adam-scale")]);
        let g: Vec<f64> = (0..10).map(|_| r.gen_range(0.1..1.0)).collect();
        let g10: Vec<f64> = g.iter().map(|x| 10.0 * x).collect();
        let w0 = pv(&vec![0.0; 10]);
        let (a, _) = server_step(&st, &w0, &pv(&g)).unwrap();
        let (b, _) = server_step(&st, &w0, &pv(&g10)).unwrap();
        for (x, y) in a.values().zip(b.values()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn yogi_matches_adam_on_first_step_with_same_beta2() {
        let mut ya = ServerOptimizerState::new(ServerOptKind::Yogi, 0.2).unwrap();
        ya.beta2 = 0.999;
        let ad = ServerOptimizerState::new(ServerOptKind::Adam, 0.2).unwrap();
        let w0 = pv(&[0.5, -0.25, 1.0]);
        let g = pv(&[0.2, 0.1, -0.3]);
        let (wy, _) = server_step(&ya, &w0, &g).unwrap();
        let (wa, _) = server_step(&ad, &w0, &g).unwrap();
        // From v = 0: sign(v - g^2) = -1, so v = (1 - beta2) g^2 either way.
        for (x, y) in wy.values().zip(wa.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn yogi_second_moment_moves_additively() {
        let st = ServerOptimizerState::new(ServerOptKind::Yogi, 0.2).unwrap();
        let w0 = pv(&[0.5]);
        let big = pv(&[2.0]);
        let small = pv(&[0.01]);
        let (_, st1) = server_step(&st, &w0, &big).unwrap();
        let v1 = st1.second_moment().unwrap().layer("w").unwrap().values()[0];
        let (_, st2) = server_step(&st1, &w0, &small).unwrap();
        let v2 = st2.second_moment().unwrap().layer("w").unwrap().values()[0];
        // Small gradient after a big one: v decreases by (1-beta2)*g^2, not
        // by a multiplicative decay toward g^2.
        assert!((v1 - (1.0 - 0.99) * 4.0).abs() < 1e-15);
        assert!((v1 - v2 - (1.0 - 0.99) * 0.0001).abs() < 1e-12);
    }

    #[test]
    fn lamb_trust_ratio_bounds_update() {
        let st = ServerOptimizerState::new(ServerOptKind::Lamb, 0.1).unwrap();
        // Zero global norm: trust falls back to 1 and the step is plain
        // bias-corrected adam.
        let w0 = pv(&[0.0, 0.0]);
        let g = pv(&[0.5, 0.5]);
        let (w1, _) = server_step(&st, &w0, &g).unwrap();
        assert!(w1.values().all(|x| x < 0.0));
        // Huge weights vs small update: ratio clips at 10.
        let wbig = pv(&[1e6, 1e6]);
        let (w2, _) = server_step(&st, &wbig, &g).unwrap();
        let step = 1e6 - w2.layer("w").unwrap().values()[0];
        let adam_dir = 0.5 / (0.5 + 1e-8);
        assert!((step - 0.1 * 10.0 * adam_dir).abs() < 1e-9);
    }

    #[test]
    fn lars_layerwise_scaling_differs_from_global() {
        let st = ServerOptimizerState::new(ServerOptKind::Lars, 0.1).unwrap();
        let global = ParameterVector::new(vec![
            Layer::new("a", vec![1], vec![10.0]).unwrap(),
            Layer::new("b", vec![1], vec![0.1]).unwrap(),
        ])
        .unwrap();
        let agg = ParameterVector::new(vec![
            Layer::new("a", vec![1], vec![1.0]).unwrap(),
            Layer::new("b", vec![1], vec![1.0]).unwrap(),
        ])
        .unwrap();
        let (w, _) = server_step(&st, &global, &agg).unwrap();
        let da = 10.0 - w.layer("a").unwrap().values()[0];
        let db = 0.1 - w.layer("b").unwrap().values()[0];
        // Layer a: trust 10/1 = 10; layer b: trust 0.1/1 = 0.1.
        assert!((da - 0.1 * 10.0).abs() < 1e-12);
        assert!((db - 0.1 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_aggregate_is_divergence() {
        let st = ServerOptimizerState::new(ServerOptKind::Sgd, 1.0).unwrap();
        let res = server_step(&st, &pv(&[1.0]), &pv(&[f64::NAN]));
        assert!(matches!(res, Err(Error::Divergence { .. })));
    }

    #[test]
    fn optimizer_state_is_not_mutated_in_place() {
        let st = ServerOptimizerState::new(ServerOptKind::Adam, 0.1).unwrap();
        let w0 = pv(&[1.0]);
        let g = pv(&[0.5]);
        let (w1, _) = server_step(&st, &w0, &g).unwrap();
        let (w2, _) = server_step(&st, &w0, &g).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(st.step_count, 0);
        assert!(st.first_moment().is_none());
    }
}
