//! Seeded, split-able randomness.
//!
//! A [`RngTree`] never produces random numbers itself. It hands out
//! independent ChaCha8 streams addressed by a key path such as
//! `(epoch, minibatch, case)`, so the stream a training case sees does not
//! depend on the order in which cases are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Key tags for the top-level streams used by the training harness.
pub mod tags {
    pub const INIT: u64 = 0x1417;
    pub const SHUFFLE: u64 = 0x5ca1;
    pub const TRAIN: u64 = 0x7a1e;
    pub const EVAL: u64 = 0xe7a1;
    pub const SLEEP: u64 = 0x51ee;
    pub const BINARIZE: u64 = 0xb1a5;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngTree {
    seed: u64,
}

impl RngTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A subtree whose streams are disjoint from every other key path.
    pub fn child(&self, keys: &[u64]) -> Self {
        Self {
            seed: self.mix(keys),
        }
    }

    /// The generator addressed by `keys`.
    pub fn stream(&self, keys: &[u64]) -> Rng {
        let mut state = self.mix(keys);
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }

    fn mix(&self, keys: &[u64]) -> u64 {
        let mut h = splitmix64(self.seed ^ 0x243f_6a88_85a3_08d3);
        // Length is folded in so that (a) and (a, 0) address different streams.
        h = splitmix64(h ^ keys.len() as u64);
        for &k in keys {
            h = splitmix64(h ^ splitmix64(k.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        h
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn draw(mut r: Rng) -> Vec<u64> {
        (0..8).map(|_| r.gen()).collect()
    }

    #[test]
    fn same_keys_same_stream() {
        let t = RngTree::new(42);
        assert_eq!(draw(t.stream(&[3, 1, 4])), draw(t.stream(&[3, 1, 4])));
        assert_eq!(
            draw(RngTree::new(42).stream(&[3, 1, 4])),
            draw(t.stream(&[3, 1, 4]))
        );
    }

    #[test]
    fn different_keys_differ() {
        let t = RngTree::new(42);
        let base = draw(t.stream(&[3, 1, 4]));
        assert_ne!(base, draw(t.stream(&[3, 1, 5])));
        assert_ne!(base, draw(t.stream(&[1, 3, 4])));
        assert_ne!(draw(t.stream(&[3])), draw(t.stream(&[3, 0])));
        assert_ne!(base, draw(RngTree::new(43).stream(&[3, 1, 4])));
    }

    #[test]
    fn child_is_a_prefix() {
        let t = RngTree::new(7);
        let c = t.child(&[tags::TRAIN]);
        assert_eq!(draw(c.stream(&[1])), draw(t.child(&[tags::TRAIN]).stream(&[1])));
        assert_ne!(draw(c.stream(&[1])), draw(t.stream(&[1])));
    }
}
