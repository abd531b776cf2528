//! Seed derivation for independent, reproducible random streams.
//!
//! Every random decision in the simulator draws from a ChaCha20 stream keyed
//! by the master seed plus a list of tags (purpose, round, client id, ...).
//! Streams with different tag lists are statistically independent, and the
//! derivation is pure integer arithmetic, so results are identical across
//! platforms and thread schedules.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a purpose label, used as a stream tag.
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent RNG from a master seed and a tag list.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha20Rng {
    let mut state = mix(seed);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

/// First draw of the derived stream, for callers that just need a sub-seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    use rand::RngCore;
    stream(seed, tags).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_tags_same_stream() {
        let mut a = stream(7, &[tag("x"), 3]);
        let mut b = stream(7, &[tag("x"), 3]);
        for _ in 0..32 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn different_tags_diverge() {
        let mut a = stream(7, &[tag("x"), 3]);
        let mut b = stream(7, &[tag("x"), 4]);
        let mut c = stream(7, &[tag("y"), 3]);
        let va: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        let vc: Vec<u64> = (0..8).map(|_| c.gen()).collect();
        assert_ne!(va, vb);
        assert_ne!(va, vc);
        assert_ne!(vb, vc);
    }

    #[test]
    fn tag_order_matters() {
        let mut a = stream(7, &[1, 2]);
        let mut b = stream(7, &[2, 1]);
        assert_ne!(a.gen::<u64>(), b.gen::<u64>());
    }

    // Frozen values: derivation must never change across releases, or every
    // recorded experiment becomes irreproducible.
    #[test]
    fn derivation_is_frozen() {
        assert_eq!(mix(0), 0xe220a8397b1dcdaf);
        assert_eq!(tag(""), 0xcbf29ce484222325);
        assert_eq!(tag("init"), 0xf5d2afc57ab57213);
        let mut r = stream(42, &[tag("init"), 0]);
        assert_eq!(r.gen::<u64>(), 0x5f59baf8d0a7da52);
    }
}
