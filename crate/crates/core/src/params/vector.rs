//! Flat model parameters grouped into named, shaped layers.

use crate::error::{Error, Result};

/// One named tensor: row-major values plus a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Layer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "layer {name}: shape {shape:?} must be non-empty with positive dims"
            )));
        }
        let want: usize = shape.iter().product();
        if want != values.len() {
            return Err(Error::Shape(format!(
                "layer {name}: shape {shape:?} wants {want} values, got {}",
                values.len()
            )));
        }
        Ok(Self { name, shape, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Model parameters as an ordered list of layers with unique names.
///
/// All arithmetic is component-wise over congruent vectors (same layer names,
/// order, and shapes). Operations that combine two vectors check congruence
/// and fail with a shape error rather than silently mixing architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layers: Vec<Layer>,
}

impl ParameterVector {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, a) in layers.iter().enumerate() {
            if layers[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Shape(format!("duplicate layer name {:?}", a.name)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Total number of scalar components.
    pub fn component_count(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn is_congruent(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "incongruent parameter vectors: {:?} vs {:?}",
                self.describe(),
                other.describe()
            )))
        }
    }

    fn describe(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.shape.clone()))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.values.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.values.iter_mut())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                values: l.values.iter().map(|&x| f(x)).collect(),
            })
            .collect();
        Self { layers }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_congruent(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Layer {
                name: a.name.clone(),
                shape: a.shape.clone(),
                values: a
                    .values
                    .iter()
                    .zip(&b.values)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        self.check_congruent(x)?;
        for (l, lx) in self.layers.iter_mut().zip(&x.layers) {
            for (v, &vx) in l.values.iter_mut().zip(&lx.values) {
                *v += a * vx;
            }
        }
        Ok(())
    }

    /// l2 norm of the flattened vector.
    pub fn l2_norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}
