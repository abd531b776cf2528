//! Small models with hand-derived analytic gradients.
//!
//! Three families: linear regression (squared error), multinomial logistic
//! regression (softmax cross-entropy), and an MLP with one or two hidden
//! layers (tanh or relu, softmax output). Everything is f64 and single
//! threaded; gradients are exact, not autodiff.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::shard::Batch;
use crate::params::vector::{Layer, ParameterVector};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp { hidden: Vec<usize>, activation: Activation },
}

/// A model: architecture plus current parameters.
#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    input_dim: usize,
    output_dim: usize,
    bias: bool,
    params: ParameterVector,
}

impl Model {
    /// Fresh model with weights uniform in +/- 1/sqrt(fan_in) and zero biases.
    pub fn init(kind: ModelKind, input_dim: usize, output_dim: usize, bias: bool, seed: u64) -> Result<Self> {
        validate_arch(&kind, input_dim, output_dim)?;
        let mut layers = Vec::new();
        for (idx, (fan_in, fan_out)) in affine_dims(&kind, input_dim, output_dim).iter().enumerate() {
            let bound = 1.0 / (*fan_in as f64).sqrt();
            let mut r = rng::stream(seed, &[rng::tag("init"), idx as u64]);
            let values: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| r.gen_range(-bound..=bound))
                .collect();
            layers.push(Layer::new(weight_name(&kind, idx), vec![*fan_out, *fan_in], values)?);
            if bias {
                layers.push(Layer::new(bias_name(&kind, idx), vec![*fan_out], vec![0.0; *fan_out])?);
            }
        }
        let params = ParameterVector::new(layers)?;
        Ok(Self { kind, input_dim, output_dim, bias, params })
    }

    /// Wraps existing parameters, checking them against the architecture.
    pub fn with_params(
        kind: ModelKind,
        input_dim: usize,
        output_dim: usize,
        bias: bool,
        params: ParameterVector,
    ) -> Result<Self> {
        validate_arch(&kind, input_dim, output_dim)?;
        let reference = Self::init(kind.clone(), input_dim, output_dim, bias, 0)?;
        reference.params.check_congruent(&params)?;
        Ok(Self { kind, input_dim, output_dim, bias, params })
    }

    /// Same architecture, different parameters.
    pub fn replace_params(&self, params: ParameterVector) -> Result<Self> {
        self.params.check_congruent(&params)?;
        let mut m = self.clone();
        m.params = params;
        Ok(m)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn into_params(self) -> ParameterVector {
        self.params
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ModelKind::LinearRegression)
    }

    /// Mean loss over the batch plus per-sample predictions (softmax
    /// probabilities for classifiers, raw outputs for regression).
    pub fn forward_loss(&self, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(batch.len());
        for (x, y) in batch.iter() {
            let (sample_loss, pred) = self.forward_sample(x, y)?;
            loss += sample_loss / n;
            preds.push(pred);
        }
        Ok((loss, preds))
    }

    /// Mean loss and its exact gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(f64, ParameterVector)> {
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let mut grad = self.params.zeros_like();
        let mut loss = 0.0;
        for (x, y) in batch.iter() {
            loss += self.accumulate_sample(x, y, 1.0 / n, &mut grad)? / n;
        }
        Ok((loss, grad))
    }

    pub fn gradient(&self, batch: &Batch) -> Result<ParameterVector> {
        Ok(self.loss_and_gradient(batch)?.1)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if batch.dim() != self.input_dim {
            return Err(Error::Shape(format!(
                "batch dim {} != model input dim {}",
                batch.dim(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn class_index(&self, y: f64) -> Result<usize> {
        let k = y as usize;
        if y.fract() != 0.0 || y < 0.0 || k >= self.output_dim {
            return Err(Error::Shape(format!(
                "label {y} outside class range 0..{}",
                self.output_dim
            )));
        }
        Ok(k)
    }

    fn forward_sample(&self, x: &[f64], y: f64) -> Result<(f64, Vec<f64>)> {
        match &self.kind {
            ModelKind::LinearRegression => {
                let out = self.affine(0, x);
                let r = out[0] - y;
                Ok((r * r, out))
            }
            ModelKind::LogisticRegression => {
                let z = self.affine(0, x);
                let k = self.class_index(y)?;
                let (loss, p) = softmax_loss(&z, k);
                Ok((loss, p))
            }
            ModelKind::Mlp { hidden, activation } => {
                let mut a = x.to_vec();
                for l in 0..hidden.len() {
                    a = self.affine(l, &a).iter().map(|&z| activation.apply(z)).collect();
                }
                let z = self.affine(hidden.len(), &a);
                let k = self.class_index(y)?;
                let (loss, p) = softmax_loss(&z, k);
                Ok((loss, p))
            }
        }
    }

    /// Adds `weight` times this sample's loss gradient into `grad`;
    /// returns the sample loss.
    fn accumulate_sample(&self, x: &[f64], y: f64, weight: f64, grad: &mut ParameterVector) -> Result<f64> {
        match &self.kind {
            ModelKind::LinearRegression => {
                let out = self.affine(0, x);
                let r = out[0] - y;
                self.accumulate_affine(0, x, &[2.0 * r * weight], grad);
                Ok(r * r)
            }
            ModelKind::LogisticRegression => {
                let z = self.affine(0, x);
                let k = self.class_index(y)?;
                let (loss, p) = softmax_loss(&z, k);
                let mut delta = p;
                delta[k] -= 1.0;
                for d in &mut delta {
                    *d *= weight;
                }
                self.accumulate_affine(0, x, &delta, grad);
                Ok(loss)
            }
            ModelKind::Mlp { hidden, activation } => {
                let n_affine = hidden.len() + 1;
                let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
                let mut pre: Vec<Vec<f64>> = Vec::with_capacity(hidden.len());
                for l in 0..hidden.len() {
                    let z = self.affine(l, &acts[l]);
                    acts.push(z.iter().map(|&v| activation.apply(v)).collect());
                    pre.push(z);
                }
                let z_out = self.affine(n_affine - 1, &acts[hidden.len()]);
                let k = self.class_index(y)?;
                let (loss, p) = softmax_loss(&z_out, k);

                let mut delta = p;
                delta[k] -= 1.0;
                for d in &mut delta {
                    *d *= weight;
                }
                for l in (0..n_affine).rev() {
                    self.accumulate_affine(l, &acts[l], &delta, grad);
                    if l > 0 {
                        let w = self.weight(l);
                        let cols = acts[l].len();
                        let mut prev = vec![0.0; cols];
                        for (r, d) in delta.iter().enumerate() {
                            let row = &w[r * cols..(r + 1) * cols];
                            for (c, pc) in prev.iter_mut().enumerate() {
                                *pc += row[c] * d;
                            }
                        }
                        for (c, pc) in prev.iter_mut().enumerate() {
                            *pc *= activation.derivative(pre[l - 1][c]);
                        }
                        delta = prev;
                    }
                }
                Ok(loss)
            }
        }
    }

    fn weight(&self, idx: usize) -> &[f64] {
        self.params
            .layer(&weight_name(&self.kind, idx))
            .expect("weight layer exists by construction")
            .values()
    }

    /// z = W a (+ b) for affine layer `idx`.
    fn affine(&self, idx: usize, a: &[f64]) -> Vec<f64> {
        let w = self.weight(idx);
        let cols = a.len();
        let rows = w.len() / cols;
        let mut z = if self.bias {
            self.params
                .layer(&bias_name(&self.kind, idx))
                .expect("bias layer exists by construction")
                .values()
                .to_vec()
        } else {
            vec![0.0; rows]
        };
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (wv, av) in row.iter().zip(a) {
                acc += wv * av;
            }
            *zr += acc;
        }
        z
    }

    /// dL/dW[r][c] += delta[r] * a[c]; dL/db[r] += delta[r].
    fn accumulate_affine(&self, idx: usize, a: &[f64], delta: &[f64], grad: &mut ParameterVector) {
        let gw = grad
            .layer_mut(&weight_name(&self.kind, idx))
            .expect("gradient congruent with params")
            .values_mut();
        let cols = a.len();
        for (r, d) in delta.iter().enumerate() {
            let row = &mut gw[r * cols..(r + 1) * cols];
            for (c, g) in row.iter_mut().enumerate() {
                *g += d * a[c];
            }
        }
        if self.bias {
            let gb = grad
                .layer_mut(&bias_name(&self.kind, idx))
                .expect("gradient congruent with params")
                .values_mut();
            for (g, d) in gb.iter_mut().zip(delta) {
                *g += d;
            }
        }
    }
}

fn validate_arch(kind: &ModelKind, input_dim: usize, output_dim: usize) -> Result<()> {
    if input_dim == 0 {
        return Err(Error::Config("input_dim must be positive".into()));
    }
    match kind {
        ModelKind::LinearRegression => {
            if output_dim != 1 {
                return Err(Error::Config(format!(
                    "linear regression predicts one target per sample, got output_dim {output_dim}"
                )));
            }
        }
        ModelKind::LogisticRegression => {
            if output_dim < 2 {
                return Err(Error::Config(format!(
                    "logistic regression needs at least 2 classes, got {output_dim}"
                )));
            }
        }
        ModelKind::Mlp { hidden, .. } => {
            if output_dim < 2 {
                return Err(Error::Config(format!(
                    "mlp classifier needs at least 2 classes, got {output_dim}"
                )));
            }
            if hidden.is_empty() || hidden.len() > 2 {
                return Err(Error::Config(format!(
                    "mlp supports 1 or 2 hidden layers, got {}",
                    hidden.len()
                )));
            }
            if hidden.iter().any(|&h| h == 0) {
                return Err(Error::Config("mlp hidden widths must be positive".into()));
            }
        }
    }
    Ok(())
}

/// (fan_in, fan_out) per affine layer.
fn affine_dims(kind: &ModelKind, input_dim: usize, output_dim: usize) -> Vec<(usize, usize)> {
    match kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => {
            vec![(input_dim, output_dim)]
        }
        ModelKind::Mlp { hidden, .. } => {
            let mut dims = Vec::with_capacity(hidden.len() + 1);
            let mut prev = input_dim;
            for &h in hidden {
                dims.push((prev, h));
                prev = h;
            }
            dims.push((prev, output_dim));
            dims
        }
    }
}

fn weight_name(kind: &ModelKind, idx: usize) -> String {
    match kind {
        ModelKind::Mlp { .. } => format!("w{idx}"),
        _ => "weight".to_string(),
    }
}

fn bias_name(kind: &ModelKind, idx: usize) -> String {
    match kind {
        ModelKind::Mlp { .. } => format!("b{idx}"),
        _ => "bias".to_string(),
    }
}

/// Numerically stable softmax cross-entropy: loss and probabilities.
fn softmax_loss(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let p = z.iter().map(|&v| (v - lse).exp()).collect();
    (lse - z[label], p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::shard::ClientShard;

    fn single_batch(dim: usize, x: &[f64], y: f64) -> ClientShard {
        ClientShard::new(0, dim, x.to_vec(), vec![y]).unwrap()
    }

    #[test]
    fn linear_gradient_hand_case() {
        // w = [2, -1], b = 0.5, x = [1, 3], y = 2:
        // pred = -0.5, r = -2.5, loss = 6.25, dW = 2r*x = [-5, -15], db = -5.
        let params = ParameterVector::new(vec![
            Layer::new("weight", vec![1, 2], vec![2.0, -1.0]).unwrap(),
            Layer::new("bias", vec![1], vec![0.5]).unwrap(),
        ])
        .unwrap();
        let m = Model::with_params(ModelKind::LinearRegression, 2, 1, true, params).unwrap();
        let shard = single_batch(2, &[1.0, 3.0], 2.0);
        let batch = Batch::from_shard(&shard);
        let (loss, grad) = m.loss_and_gradient(&batch).unwrap();
        assert_eq!(loss, 6.25);
        assert_eq!(grad.layer("weight").unwrap().values(), &[-5.0, -15.0]);
        assert_eq!(grad.layer("bias").unwrap().values(), &[-5.0]);
    }

    #[test]
    fn logistic_gradient_hand_case() {
        // W = [[1], [-1]], b = 0, x = [2], y = 1: z = [2, -2],
        // p0 = sigma(4) = 0.9820137900379085, loss = ln(e^2 + e^-2) + 2.
        let params = ParameterVector::new(vec![
            Layer::new("weight", vec![2, 1], vec![1.0, -1.0]).unwrap(),
            Layer::new("bias", vec![2], vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let m = Model::with_params(ModelKind::LogisticRegression, 1, 2, true, params).unwrap();
        let shard = single_batch(1, &[2.0], 1.0);
        let batch = Batch::from_shard(&shard);
        let (loss, grad) = m.loss_and_gradient(&batch).unwrap();
        let p0 = 0.9820137900379085f64;
        assert!((loss - (2.0f64.exp() + (-2.0f64).exp()).ln() - 2.0).abs() < 1e-15);
        let gw = grad.layer("weight").unwrap().values();
        assert!((gw[0] - 2.0 * p0).abs() < 1e-15);
        assert!((gw[1] + 2.0 * p0).abs() < 1e-15);
        let gb = grad.layer("bias").unwrap().values();
        assert!((gb[0] - p0).abs() < 1e-15);
        assert!((gb[1] + p0).abs() < 1e-15);
    }

    #[test]
    fn classifier_probabilities_sum_to_one() {
        let m = Model::init(ModelKind::LogisticRegression, 4, 3, true, 11).unwrap();
        let shard = single_batch(4, &[0.2, -0.4, 1.0, 0.7], 2.0);
        let (_, preds) = m.forward_loss(&Batch::from_shard(&shard)).unwrap();
        let s: f64 = preds[0].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(preds[0].iter().all(|&p| p > 0.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Model::init(ModelKind::LogisticRegression, 10, 3, true, 5).unwrap();
        let b = Model::init(ModelKind::LogisticRegression, 10, 3, true, 5).unwrap();
        let c = Model::init(ModelKind::LogisticRegression, 10, 3, true, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let bound = 1.0 / 10f64.sqrt();
        for v in a.params().layer("weight").unwrap().values() {
            assert!(v.abs() <= bound);
        }
        assert!(a.params().layer("bias").unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_outside_range_rejected() {
        let m = Model::init(ModelKind::LogisticRegression, 2, 3, true, 1).unwrap();
        let shard = single_batch(2, &[0.0, 0.0], 3.0);
        assert!(m.forward_loss(&Batch::from_shard(&shard)).is_err());
        let shard = single_batch(2, &[0.0, 0.0], 1.5);
        assert!(m.forward_loss(&Batch::from_shard(&shard)).is_err());
    }

    #[test]
    fn batch_dim_mismatch_rejected() {
        let m = Model::init(ModelKind::LinearRegression, 3, 1, true, 1).unwrap();
        let shard = single_batch(2, &[0.0, 0.0], 1.0);
        assert!(matches!(
            m.forward_loss(&Batch::from_shard(&shard)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn wrong_param_shapes_rejected() {
        let params = ParameterVector::new(vec![
            Layer::new("weight", vec![1, 3], vec![0.0; 3]).unwrap(),
            Layer::new("bias", vec![1], vec![0.0]).unwrap(),
        ])
        .unwrap();
        assert!(Model::with_params(ModelKind::LinearRegression, 2, 1, true, params).is_err());
    }

    // Central finite differences, the independent check on every analytic
    // gradient. h = 1e-5, relative error against max(|analytic|, |numeric|, 1).
    fn finite_diff_check(model: &Model, batch: &Batch, tol: f64) {
        let h = 1e-5;
        let (_, grad) = model.loss_and_gradient(batch).unwrap();
        let flat_grad: Vec<f64> = grad.values().collect();
        let base: Vec<f64> = model.params().values().collect();
        for i in 0..base.len() {
            let mut plus = model.params().clone();
            let mut minus = model.params().clone();
            *plus.values_mut().nth(i).unwrap() += h;
            *minus.values_mut().nth(i).unwrap() -= h;
            let lp = model.replace_params(plus).unwrap().forward_loss(batch).unwrap().0;
            let lm = model.replace_params(minus).unwrap().forward_loss(batch).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = flat_grad[i].abs().max(fd.abs()).max(1.0);
            assert!(
                ((flat_grad[i] - fd) / denom).abs() < tol,
                "component {i}: analytic {} vs numeric {fd}",
                flat_grad[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mk_shard = |dim: usize, n: usize, classes: usize, seed: u64| {
            let mut r = rng::stream(seed, &[rng::tag("fd-data")]);
            let features: Vec<f64> = (0..n * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
            let labels: Vec<f64> = (0..n).map(|_| r.gen_range(0..classes) as f64).collect();
            ClientShard::new(0, dim, features, labels).unwrap()
        };
        let cases: Vec<Model> = vec![
            Model::init(ModelKind::LinearRegression, 4, 1, true, 21).unwrap(),
            Model::init(ModelKind::LinearRegression, 4, 1, false, 22).unwrap(),
            Model::init(ModelKind::LogisticRegression, 4, 3, true, 23).unwrap(),
            Model::init(
                ModelKind::Mlp { hidden: vec![5], activation: Activation::Tanh },
                4,
                3,
                true,
                24,
            )
            .unwrap(),
            Model::init(
                ModelKind::Mlp { hidden: vec![5, 4], activation: Activation::Relu },
                4,
                3,
                true,
                25,
            )
            .unwrap(),
        ];
        for (i, m) in cases.iter().enumerate() {
            // Zero biases put relu pre-activations exactly on the kink where
            // finite differences are invalid; jitter every parameter away.
            let mut jittered = m.params().clone();
            let mut jr = rng::stream(200 + i as u64, &[rng::tag("fd-jitter")]);
            for v in jittered.values_mut() {
                *v += jr.gen_range(0.05..0.2) * if jr.gen::<bool>() { 1.0 } else { -1.0 };
            }
            let m = m.replace_params(jittered).unwrap();
            let classes = if m.is_classifier() { m.output_dim() } else { 2 };
            let shard = mk_shard(4, 6, classes, 100 + i as u64);
            let labels: Vec<f64> = if m.is_classifier() {
                shard.labels().to_vec()
            } else {
                shard.labels().iter().map(|&y| y - 0.5).collect()
            };
            let shard = ClientShard::new(0, 4, shard.features().to_vec(), labels).unwrap();
            finite_diff_check(&m, &Batch::from_shard(&shard), 1e-6);
        }
    }
}
