//! Polynomial channel interleaving over GF(2).
//!
//! The block index is treated as a polynomial with one coefficient per bit and
//! reduced modulo an irreducible polynomial whose degree is log2(channels). The
//! remainder is the channel. Because reduction is linear and the low `k` bits pass
//! through unchanged (xored with the reduced high part), every aligned window of
//! 2^k blocks is a permutation of the channels, while power-of-two strides that
//! would pile onto one channel under modulo interleaving get spread out.

/// Irreducible polynomials by degree (bit i = coefficient of x^i).
const POLYS: [u64; 9] = [
    0b1,          // degree 0: a single channel
    0b11,         // x + 1
    0b111,        // x^2 + x + 1
    0b1011,       // x^3 + x + 1
    0b10011,      // x^4 + x + 1
    0b100101,     // x^5 + x^2 + 1
    0b1000011,    // x^6 + x + 1
    0b10000011,   // x^7 + x + 1
    0x11B,        // x^8 + x^4 + x^3 + x + 1
];

pub fn polynomial_for(channels: u64) -> Option<u64> {
    if !channels.is_power_of_two() {
        return None;
    }
    POLYS.get(channels.trailing_zeros() as usize).copied()
}

/// Remainder of `value` modulo `poly` in GF(2)[x].
pub fn gf2_mod(mut value: u64, poly: u64) -> u64 {
    let deg = 63 - poly.leading_zeros();
    while value != 0 {
        let top = 63 - value.leading_zeros();
        if top < deg {
            break;
        }
        value ^= poly << (top - deg);
    }
    value
}

/// Channel of a block index. Panics if `channels` has no tabulated polynomial,
/// which config validation rules out.
pub fn channel_of_block(block: u64, channels: u64) -> usize {
    if channels == 1 {
        return 0;
    }
    let poly = polynomial_for(channels).expect("validated channel count");
    gf2_mod(block, poly) as usize
}

pub fn ipoly_hash(addr: u64, access_bytes: u64, channels: u64) -> usize {
    channel_of_block(addr / access_bytes, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_irreducible(poly: u64) -> bool {
        let deg = 63 - poly.leading_zeros();
        (2..(1u64 << deg)).all(|d| d.leading_zeros() >= poly.leading_zeros() || gf2_mod(poly, d) != 0)
    }

    #[test]
    fn table_entries_are_irreducible() {
        for p in &POLYS[1..] {
            assert!(is_irreducible(*p), "{p:#b}");
        }
    }

    #[test]
    fn single_channel_is_zero() {
        for a in (0..10_000).step_by(64) {
            assert_eq!(ipoly_hash(a, 64, 1), 0);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert_eq!(polynomial_for(3), None);
        assert_eq!(polynomial_for(512), None);
        assert_eq!(polynomial_for(16), Some(0b10011));
    }
}
