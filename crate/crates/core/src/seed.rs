//! Hierarchical, counter-based seed derivation.
//!
//! Every random stream in a run is keyed by a [`SeedKey`] tuple rather than
//! drawn from a shared generator, so the stream a particle sees does not
//! depend on which worker holds it or in which order messages arrive.
//!
//! The mixing function folds each tuple field into a 64-bit state with the
//! SplitMix64 finalizer:
//!
//! ```text
//! h = DOMAIN
//! for f in (chain, sample, observation, lineage, replica):
//!     h = splitmix64_finalize(h + GOLDEN + f)      (wrapping arithmetic)
//! ```
//!
//! Each fold is a bijection of the running state for a fixed prefix, so two
//! keys that differ only in their last field never collide.

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const DOMAIN: u64 = 0x5052_4d43_4d43_2d31;

/// SplitMix64 output finalizer (Steele, Lea & Flood 2014).
#[inline]
pub fn splitmix64_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Position of a random stream in the chain / sample / observation / particle hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SeedKey {
    pub chain: u64,
    pub sample: u64,
    pub observation: u64,
    pub lineage: u64,
    pub replica: u64,
}

impl SeedKey {
    pub fn new(chain: u64, sample: u64, observation: u64, lineage: u64, replica: u64) -> Self {
        Self {
            chain,
            sample,
            observation,
            lineage,
            replica,
        }
    }

    pub fn seed(&self) -> u64 {
        derive_seed(*self)
    }
}

pub fn derive_seed(key: SeedKey) -> u64 {
    [key.chain, key.sample, key.observation, key.lineage, key.replica]
        .into_iter()
        .fold(DOMAIN, |h, field| {
            splitmix64_finalize(h.wrapping_add(GOLDEN_GAMMA).wrapping_add(field))
        })
}

/// Replica slots used by the engine. Particle streams use [`replica::PARTICLE`].
pub mod replica {
    pub const PARTICLE: u64 = 0;
    pub const RESAMPLE: u64 = 1;
    pub const PROPOSAL: u64 = 2;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    #[test]
    fn deterministic() {
        let k = SeedKey::default();
        assert_eq!(derive_seed(k), derive_seed(k));
    }

    #[test]
    fn frozen_values() {
        // Pinned so any change to the mixing function is caught; these are
        // the values every platform must produce.
        assert_eq!(derive_seed(SeedKey::new(0, 0, 0, 0, 0)), 0x0978_a13e_6525_2b46);
        assert_eq!(derive_seed(SeedKey::new(1, 2, 3, 4, 5)), 0x66af_063d_ab90_0814);
    }

    #[test]
    fn last_field_changes_seed() {
        assert_ne!(
            derive_seed(SeedKey::new(0, 0, 0, 0, 0)),
            derive_seed(SeedKey::new(0, 0, 0, 0, 1))
        );
    }

    #[test]
    fn splitmix_reference_vector() {
        // First output of SplitMix64 seeded with 0 is finalize(GOLDEN_GAMMA).
        assert_eq!(splitmix64_finalize(GOLDEN_GAMMA), 0xe220_a839_7b1d_cdaf);
    }

    #[test]
    fn no_collisions_over_a_million_random_tuples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let mut keys = HashSet::with_capacity(1_000_000);
        while keys.len() < 1_000_000 {
            // Small ranges so that structured, near-neighbour tuples dominate.
            keys.insert(SeedKey::new(
                rng.random_range(0..16),
                rng.random_range(0..256),
                rng.random_range(0..32),
                rng.random_range(0..4096),
                rng.random_range(0..4),
            ));
        }
        let seeds: HashSet<u64> = keys.iter().map(|k| derive_seed(*k)).collect();
        assert_eq!(seeds.len(), keys.len());
    }
}
