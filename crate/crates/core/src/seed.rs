//! Deterministic seed derivation for per-(epoch, node, ...) random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matters() {
        assert_ne!(derive(&[1, 2]), derive(&[2, 1]));
        assert_eq!(derive(&[3, 4, 5]), derive(&[3, 4, 5]));
    }
}
