//! Per-client feature transforms for simulating client-specific input
//! distributions (personalization experiments).
//!
//! A shard's `transform_id` selects a family by `id % 3` and a parameter by
//! `id / 3`: 0 inverts intensities (x -> 1 - x), 1 shifts pixels circularly,
//! 2 rotates square images by quarter turns. Transforms are pure, so applying
//! one twice to the same shard gives identical bytes.

use crate::error::{Error, Result};
use crate::params::shard::ClientShard;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// x -> 1 - x, for intensity features in [0, 1].
    Invert,
    /// Circular shift of the flattened feature row by k positions.
    Shift(usize),
    /// Clockwise rotation of a square image by q quarter turns (1..=3).
    Rotate(u32),
}

/// Decodes a transform id against a feature dimension.
pub fn decode_transform(id: u32, dim: usize) -> Result<TransformKind> {
    if dim == 0 {
        return Err(Error::Config("transform on zero-dim features".into()));
    }
    let param = id / 3;
    match id % 3 {
        0 => Ok(TransformKind::Invert),
        1 => Ok(TransformKind::Shift(param as usize % dim)),
        2 => {
            let side = (dim as f64).sqrt().round() as usize;
            if side * side != dim {
                return Err(Error::Config(format!(
                    "rotation transform needs square images, dim {dim} is not a perfect square"
                )));
            }
            Ok(TransformKind::Rotate(1 + param % 3))
        }
        _ => unreachable!(),
    }
}

fn apply_row(kind: TransformKind, row: &[f64], out: &mut Vec<f64>) {
    match kind {
        TransformKind::Invert => out.extend(row.iter().map(|&x| 1.0 - x)),
        TransformKind::Shift(k) => {
            let n = row.len();
            out.extend((0..n).map(|i| row[(i + n - k % n) % n]));
        }
        TransformKind::Rotate(q) => {
            let side = (row.len() as f64).sqrt().round() as usize;
            let mut cur = row.to_vec();
            for _ in 0..q {
                let mut next = vec![0.0; cur.len()];
                for r in 0..side {
                    for c in 0..side {
                        next[r * side + c] = cur[(side - 1 - c) * side + r];
                    }
                }
                cur = next;
            }
            out.extend_from_slice(&cur);
        }
    }
}

/// Applies the shard's transform to every feature row. A shard without a
/// transform id passes through unchanged.
pub fn apply_feature_transform(shard: &ClientShard) -> Result<ClientShard> {
    let Some(id) = shard.transform_id() else {
        return Ok(shard.clone());
    };
    let kind = decode_transform(id, shard.dim())?;
    let mut features = Vec::with_capacity(shard.features().len());
    for i in 0..shard.n_samples() {
        apply_row(kind, shard.feature_row(i), &mut features);
    }
    ClientShard::with_provenance(
        shard.client_id(),
        shard.dim(),
        features,
        shard.labels().to_vec(),
        Some(id),
        shard.source_indices().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard(dim: usize, features: Vec<f64>, transform: Option<u32>) -> ClientShard {
        let n = features.len() / dim;
        ClientShard::new(1, dim, features, vec![0.0; n])
            .unwrap()
            .with_transform_id(transform)
    }

    #[test]
    fn none_is_identity() {
        let s = shard(2, vec![0.1, 0.9, 0.4, 0.6], None);
        let t = apply_feature_transform(&s).unwrap();
        assert_eq!(t.features(), s.features());
    }

    #[test]
    fn inversion_flips_intensities() {
        let s = shard(2, vec![0.0, 1.0, 0.25, 0.5], Some(0));
        let t = apply_feature_transform(&s).unwrap();
        assert_eq!(t.features(), &[1.0, 0.0, 0.75, 0.5]);
    }

    #[test]
    fn shift_rolls_features() {
        // id 4: family 1, k = 1.
        let s = shard(3, vec![1.0, 2.0, 3.0], Some(4));
        let t = apply_feature_transform(&s).unwrap();
        assert_eq!(t.features(), &[3.0, 1.0, 2.0]);
    }

    #[test]
    fn rotation_quarter_turn() {
        // 2x2 image [a b; c d], one clockwise turn -> [c a; d b]. id 2: q = 1.
        let s = shard(4, vec![1.0, 2.0, 3.0, 4.0], Some(2));
        let t = apply_feature_transform(&s).unwrap();
        assert_eq!(t.features(), &[3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let features: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let s = shard(9, features.clone(), None);
        let once = apply_feature_transform(&s.clone().with_transform_id(Some(2))).unwrap();
        let mut cur = once;
        for _ in 0..3 {
            let again = ClientShard::new(1, 9, cur.features().to_vec(), cur.labels().to_vec())
                .unwrap()
                .with_transform_id(Some(2));
            cur = apply_feature_transform(&again).unwrap();
        }
        assert_eq!(cur.features(), &features[..]);
    }

    #[test]
    fn rotation_requires_square() {
        let s = shard(3, vec![1.0, 2.0, 3.0], Some(2));
        assert!(matches!(apply_feature_transform(&s), Err(Error::Config(_))));
    }

    #[test]
    fn transform_is_deterministic() {
        let s = shard(4, vec![0.1, 0.2, 0.3, 0.4], Some(5));
        let a = apply_feature_transform(&s).unwrap();
        let b = apply_feature_transform(&s).unwrap();
        assert_eq!(a.features(), b.features());
    }
}
