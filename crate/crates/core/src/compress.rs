//! Uplink gradient compression: per-layer linear quantization, magnitude
//! sparsification, and the combined pipeline with bandwidth accounting.
//!
//! Quantization bins each layer onto 2^B equally spaced levels between the
//! layer's min and max (both levels included), B in 1..=16. Sparsification
//! keeps the ceil((1 - s) * n) largest magnitudes of the flattened vector
//! (at least one) and zeroes the rest. The pipeline picks the keep set from
//! the original values, then quantizes the survivors against the original
//! per-layer range.

use crate::error::{Error, Result};
use crate::params::vector::{Layer, ParameterVector};

pub const MAX_BITS: u8 = 16;

/// Fraction of components to drop, in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySpec {
    sparsity: f64,
}

impl SparsitySpec {
    pub fn new(sparsity: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::Config(format!(
                "sparsity {sparsity} must be in [0, 1)"
            )));
        }
        Ok(Self { sparsity })
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    /// Components kept from n: ceil((1 - s) * n), never below 1. The tiny
    /// relative backoff keeps ceil from overshooting when (1 - s) * n is an
    /// integer that floating point lands immediately above.
    pub fn keep_count(&self, n: usize) -> usize {
        let raw = (1.0 - self.sparsity) * n as f64;
        let kept = (raw - raw * 1e-12).ceil() as usize;
        kept.clamp(1, n)
    }
}

/// One quantized layer: the shared range plus a level index per kept value.
/// With a keep mask, indices cover only surviving positions in flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub bits: u8,
    pub indices: Vec<u16>,
    pub keep_mask: Option<Vec<bool>>,
}

/// A parameter vector after quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub layers: Vec<QuantizedLayer>,
}

/// What actually leaves the client, with honest byte accounting.
#[derive(Debug, Clone, PartialEq)]
pub enum UplinkPayload {
    /// No compression: full f64 values.
    Dense(ParameterVector),
    /// Sparsified but unquantized: surviving values plus a keep mask.
    SparseDense(ParameterVector),
    /// Quantized (optionally sparsified first).
    Quantized(QuantizedVector),
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Config(format!(
            "bits {bits} outside 1..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// Nearest-level index for t in [0, levels-1], ties toward the lower level.
fn nearest_level(t: f64, levels: u32) -> u16 {
    let idx = (t - 0.5).ceil();
    let clamped = idx.clamp(0.0, f64::from(levels - 1));
    clamped as u16
}

/// Per-layer linear quantization onto 2^bits levels spanning [min, max].
pub fn quantize(v: &ParameterVector, bits: u8) -> Result<QuantizedVector> {
    quantize_masked(v, bits, None)
}

fn quantize_masked(
    v: &ParameterVector,
    bits: u8,
    masks: Option<&[Vec<bool>]>,
) -> Result<QuantizedVector> {
    check_bits(bits)?;
    if !v.all_finite() {
        return Err(Error::Domain("cannot quantize non-finite values".into()));
    }
    let levels = 1u32 << bits;
    let mut layers = Vec::with_capacity(v.layers().len());
    for (li, layer) in v.layers().iter().enumerate() {
        let mask = masks.map(|m| m[li].as_slice());
        let values = layer.values();
        // Range always comes from the full original layer.
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &x in values {
            min = min.min(x);
            max = max.max(x);
        }
        let span = max - min;
        let mut indices = Vec::new();
        for (i, &x) in values.iter().enumerate() {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            let idx = if span == 0.0 {
                0
            } else {
                let t = (x - min) / span * f64::from(levels - 1);
                nearest_level(t, levels)
            };
            indices.push(idx);
        }
        layers.push(QuantizedLayer {
            name: layer.name().to_string(),
            shape: layer.shape().to_vec(),
            min,
            max,
            bits,
            indices,
            keep_mask: mask.map(|m| m.to_vec()),
        });
    }
    Ok(QuantizedVector { layers })
}

/// Reconstructs values from level indices: min + idx * span / (2^bits - 1).
/// Masked-out positions come back as zero.
pub fn dequantize(q: &QuantizedVector) -> Result<ParameterVector> {
    let mut layers = Vec::with_capacity(q.layers.len());
    for ql in &q.layers {
        check_bits(ql.bits)?;
        let levels = 1u32 << ql.bits;
        let n: usize = ql.shape.iter().product();
        let span = ql.max - ql.min;
        let step = if span == 0.0 {
            0.0
        } else {
            span / f64::from(levels - 1)
        };
        let mut values = vec![0.0; n];
        match &ql.keep_mask {
            None => {
                if ql.indices.len() != n {
                    return Err(Error::Shape(format!(
                        "layer {}: {} indices for {n} values",
                        ql.name,
                        ql.indices.len()
                    )));
                }
                for (v, &idx) in values.iter_mut().zip(&ql.indices) {
                    *v = ql.min + f64::from(idx) * step;
                }
            }
            Some(mask) => {
                if mask.len() != n {
                    return Err(Error::Shape(format!(
                        "layer {}: mask length {} for {n} values",
                        ql.name,
                        mask.len()
                    )));
                }
                let mut it = ql.indices.iter();
                for (v, &keep) in values.iter_mut().zip(mask) {
                    if keep {
                        let &idx = it.next().ok_or_else(|| {
                            Error::Shape(format!("layer {}: mask wants more indices", ql.name))
                        })?;
                        *v = ql.min + f64::from(idx) * step;
                    }
                }
                if it.next().is_some() {
                    return Err(Error::Shape(format!(
                        "layer {}: more indices than mask keeps",
                        ql.name
                    )));
                }
            }
        }
        layers.push(Layer::new(ql.name.clone(), ql.shape.clone(), values)?);
    }
    ParameterVector::new(layers)
}

/// Keep mask over the flattened vector: the keep_count largest |values|,
/// ties resolved toward the lower flat index.
fn magnitude_mask(v: &ParameterVector, spec: &SparsitySpec) -> Vec<Vec<bool>> {
    let flat: Vec<f64> = v.values().collect();
    let keep = spec.keep_count(flat.len());
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut keep_flat = vec![false; flat.len()];
    for &i in order.iter().take(keep) {
        keep_flat[i] = true;
    }
    let mut masks = Vec::with_capacity(v.layers().len());
    let mut cursor = 0;
    for layer in v.layers() {
        masks.push(keep_flat[cursor..cursor + layer.len()].to_vec());
        cursor += layer.len();
    }
    masks
}

/// Magnitude sparsification: zero everything outside the keep set.
pub fn sparsify(v: &ParameterVector, spec: &SparsitySpec) -> Result<ParameterVector> {
    if !v.all_finite() {
        return Err(Error::Domain("cannot sparsify non-finite values".into()));
    }
    let masks = magnitude_mask(v, spec);
    let mut layers = Vec::with_capacity(v.layers().len());
    for (layer, mask) in v.layers().iter().zip(&masks) {
        layers.push(Layer::new(
            layer.name().to_string(),
            layer.shape().to_vec(),
            layer
                .values()
                .iter()
                .zip(mask)
                .map(|(&x, &k)| if k { x } else { 0.0 })
                .collect(),
        )?);
    }
    ParameterVector::new(layers)
}

/// Applies sparsification then quantization as configured and returns the
/// payload plus the server-side reconstruction. The keep set and quantizer
/// ranges both come from the original values.
pub fn compress_pipeline(
    v: &ParameterVector,
    bits: Option<u8>,
    sparsity: Option<&SparsitySpec>,
) -> Result<(UplinkPayload, ParameterVector)> {
    match (bits, sparsity) {
        (None, None) => Ok((UplinkPayload::Dense(v.clone()), v.clone())),
        (None, Some(spec)) => {
            let sparse = sparsify(v, spec)?;
            Ok((UplinkPayload::SparseDense(sparse.clone()), sparse))
        }
        (Some(b), None) => {
            let q = quantize(v, b)?;
            let rec = dequantize(&q)?;
            Ok((UplinkPayload::Quantized(q), rec))
        }
        (Some(b), Some(spec)) => {
            if !v.all_finite() {
                return Err(Error::Domain("cannot compress non-finite values".into()));
            }
            let masks = magnitude_mask(v, spec);
            let q = quantize_masked(v, b, Some(&masks))?;
            let rec = dequantize(&q)?;
            Ok((UplinkPayload::Quantized(q), rec))
        }
    }
}

/// Idealized uplink reduction factor versus 32-bit floats:
/// (32 / bits) / (1 - sparsity), with bits = 32 when unquantized.
pub fn bandwidth_gain(bits: Option<u8>, sparsity: f64) -> Result<f64> {
    if let Some(b) = bits {
        check_bits(b)?;
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} must be in [0, 1)")));
    }
    let b_eff = f64::from(bits.unwrap_or(32));
    Ok((32.0 / b_eff) / (1.0 - sparsity))
}

/// Bytes this payload actually needs: per-layer range (16 bytes) plus packed
/// level indices, plus one bit per component of keep mask where present.
/// Dense values count 4 bytes each, matching the 32-bit float baseline.
pub fn payload_bytes(payload: &UplinkPayload) -> u64 {
    match payload {
        UplinkPayload::Dense(v) => 4 * v.component_count() as u64,
        UplinkPayload::SparseDense(v) => {
            let n = v.component_count() as u64;
            let kept = v.values().filter(|&x| x != 0.0).count() as u64;
            4 * kept + n.div_ceil(8)
        }
        UplinkPayload::Quantized(q) => {
            let mut total = 0u64;
            for l in &q.layers {
                total += 16;
                total += (l.indices.len() as u64 * u64::from(l.bits)).div_ceil(8);
                if l.keep_mask.is_some() {
                    let n: usize = l.shape.iter().product();
                    total += (n as u64).div_ceil(8);
                }
            }
            total
        }
    }
}

/// Idealized bytes: the 32-bit float baseline divided by the bandwidth gain.
pub fn idealized_bytes(component_count: usize, bits: Option<u8>, sparsity: f64) -> Result<f64> {
    Ok(4.0 * component_count as f64 / bandwidth_gain(bits, sparsity)?)
}
