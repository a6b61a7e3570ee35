//! Helpers for big-endian field values.
//!
//! Every value carried by the runtime (match keys, action parameters,
//! packet fields) is a big-endian byte string whose canonical length is
//! derived from the schema bit width by ceiling division. Widths are
//! capped at 128 bits, so canonical values always fit in a `u128`.

use alloc::vec::Vec;

/// Largest representable field width, in bits.
pub const MAX_BIT_WIDTH: u16 = 128;

/// Canonical byte length of a `bits`-wide value.
pub fn width_bytes(bits: u16) -> usize {
    usize::from(bits).div_ceil(8)
}

/// Interprets a big-endian byte string as a `u128`.
///
/// Returns `None` when more than 16 significant (non-leading-zero) bytes
/// are present.
pub fn be_to_u128(bytes: &[u8]) -> Option<u128> {
    let stripped = match bytes.iter().position(|&b| b != 0) {
        Some(i) => &bytes[i..],
        None => return Some(0),
    };
    if stripped.len() > 16 {
        return None;
    }
    let mut out = 0u128;
    for &b in stripped {
        out = (out << 8) | u128::from(b);
    }
    Some(out)
}

/// Writes `v` as a big-endian byte string of exactly `len` bytes.
///
/// Bits that do not fit are the caller's responsibility; values are
/// checked against their schema width before this is called.
pub fn u128_to_be(v: u128, len: usize) -> Vec<u8> {
    let full = v.to_be_bytes();
    if len >= 16 {
        let mut out = alloc::vec![0u8; len];
        out[len - 16..].copy_from_slice(&full);
        out
    } else {
        full[16 - len..].to_vec()
    }
}

/// True when `v` is representable in `bits` bits.
pub fn fits(v: u128, bits: u16) -> bool {
    if bits >= 128 {
        true
    } else {
        v >> bits == 0
    }
}

/// Bit mask selecting the `prefix_len` most significant bits of a
/// `bits`-wide value.
pub fn prefix_mask(bits: u16, prefix_len: u16) -> u128 {
    debug_assert!(prefix_len <= bits && bits <= MAX_BIT_WIDTH);
    if prefix_len == 0 {
        0
    } else {
        let all = if bits >= 128 { u128::MAX } else { (1u128 << bits) - 1 };
        all & !(all >> prefix_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths() {
        assert_eq!(width_bytes(1), 1);
        assert_eq!(width_bytes(8), 1);
        assert_eq!(width_bytes(9), 2);
        assert_eq!(width_bytes(32), 4);
        assert_eq!(width_bytes(128), 16);
    }

    #[test]
    fn u128_round_trip() {
        assert_eq!(be_to_u128(&[0x0A, 0, 0, 1]), Some(0x0A000001));
        assert_eq!(u128_to_be(0x0A000001, 4), alloc::vec![0x0A, 0, 0, 1]);
        assert_eq!(be_to_u128(&[]), Some(0));
        // Leading zeros never overflow the 16-byte cap.
        let mut long = alloc::vec![0u8; 20];
        long[19] = 7;
        assert_eq!(be_to_u128(&long), Some(7));
        long[3] = 1;
        assert_eq!(be_to_u128(&long), None);
    }

    #[test]
    fn masks() {
        assert_eq!(prefix_mask(32, 24), 0xFFFF_FF00);
        assert_eq!(prefix_mask(32, 0), 0);
        assert_eq!(prefix_mask(32, 32), 0xFFFF_FFFF);
        assert_eq!(prefix_mask(128, 1), 1u128 << 127);
        assert!(fits(0xFF, 8));
        assert!(!fits(0x100, 8));
        assert!(fits(u128::MAX, 128));
    }
}
