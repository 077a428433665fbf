//! Stateless seed derivation.
//!
//! `derive_seed(master, &[i, j, k])` hashes the master seed and an index tuple
//! through the SplitMix64 finaliser. The output depends only on its inputs, so
//! grid cells and repeats can be scheduled in any order. The mixing constants
//! and the tuple encoding are part of the on-disk reproducibility contract and
//! must not change.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags for the independent random streams a single run consumes.
pub mod purpose {
    pub const INSTANCE: u64 = 0x494E_5354;
    pub const CHAIN: u64 = 0x4348_4149;
    pub const NOISE: u64 = 0x4E4F_4953;
    pub const SIGMA_STAR: u64 = 0x5349_474D;
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and an index tuple.
pub fn derive_seed(master: u64, indices: &[u64]) -> u64 {
    let mut state = mix64(master.wrapping_add(GOLDEN_GAMMA));
    for (pos, &idx) in indices.iter().enumerate() {
        let salt = GOLDEN_GAMMA.wrapping_mul(pos as u64 + 2);
        state = mix64(state ^ mix64(idx.wrapping_add(salt)));
    }
    mix64(state ^ (indices.len() as u64).wrapping_mul(GOLDEN_GAMMA))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_inputs_same_output() {
        assert_eq!(derive_seed(7, &[1, 2, 3]), derive_seed(7, &[1, 2, 3]));
    }

    #[test]
    fn order_and_length_matter() {
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[0]), derive_seed(7, &[0, 0]));
        assert_ne!(derive_seed(7, &[]), derive_seed(7, &[0]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn no_collisions_over_a_million_tuples() {
        let mut seen = HashSet::with_capacity(1 << 20);
        for i in 0..100u64 {
            for j in 0..100u64 {
                for k in 0..100u64 {
                    assert!(seen.insert(derive_seed(42, &[i, j, k])), "collision at {i},{j},{k}");
                }
            }
        }
        assert_eq!(seen.len(), 1_000_000);
    }

    #[test]
    fn pinned_values() {
        // Stability across releases: changing these breaks every saved sweep.
        // Values come from a separate big-integer implementation of the mixer.
        assert_eq!(derive_seed(0, &[]), 0x4821_8226_ff3c_d4bf);
        assert_eq!(derive_seed(1, &[2, 3]), 0xa56a_ebae_b3f4_a7b8);
        assert_eq!(derive_seed(2024, &[purpose::INSTANCE]), 0xdba8_ad8f_9ddb_d5eb);
        assert_eq!(derive_seed(2024, &[0.9f64.to_bits(), 0.1f64.to_bits(), 13]), 0xbacf_2604_5034_4780);
    }
}

/// Serde adapter that writes a `u64` as a TOML-safe integer when it fits in
/// `i64` and as a decimal string otherwise. Both forms are accepted on read.
pub mod serde_u64 {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(value: &u64, ser: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*value) {
            Ok(v) => ser.serialize_i64(v),
            Err(_) => ser.serialize_str(&value.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<u64, D::Error> {
        struct U64Visitor;

        impl Visitor<'_> for U64Visitor {
            type Value = u64;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative integer or a decimal string")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
                u64::try_from(v).map_err(|_| E::custom("seed must be non-negative"))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
                Ok(v)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
                v.trim().parse().map_err(E::custom)
            }
        }

        de.deserialize_any(U64Visitor)
    }
}
