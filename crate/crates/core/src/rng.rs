//! Seeded random streams. Every stochastic component draws from a
//! ChaCha stream derived from an explicit seed, so runs reproduce
//! bit-for-bit on any platform.

use rand::SeedableRng;

pub type Prng = rand_chacha::ChaCha12Rng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Independent stream seed for a named purpose under a master seed.
/// FNV-1a over the tag, mixed with the seed; stable across runs and
/// platforms, unlike the std hasher.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= master;
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    // final avalanche so nearby seeds do not produce nearby streams
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Stream for utterance `index` within a named substream.
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    derive_seed(derive_seed(master, tag) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15), "idx")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "protos"), derive_seed(7, "protos"));
        assert_ne!(derive_seed(7, "protos"), derive_seed(7, "noise"));
        assert_ne!(derive_seed(7, "protos"), derive_seed(8, "protos"));
        assert_ne!(
            derive_seed_indexed(7, "utt", 0),
            derive_seed_indexed(7, "utt", 1)
        );
    }

    #[test]
    fn streams_reproduce() {
        let mut a = seeded(derive_seed(42, "x"));
        let mut b = seeded(derive_seed(42, "x"));
        for _ in 0..8 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
