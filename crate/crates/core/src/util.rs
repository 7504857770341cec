//! Small shared utilities: CRC32, deterministic seed derivation, stable
//! float formatting for text outputs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    const fn table() -> [u32; 256] {
        let mut t = [0u32; 256];
        let mut i = 0;
        while i < 256 {
            let mut c = i as u32;
            let mut k = 0;
            while k < 8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
                k += 1;
            }
            t[i] = c;
            i += 1;
        }
        t
    }
    const TABLE: [u32; 256] = table();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = TABLE[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// SplitMix64 finalizer; used to mix seed material.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a root seed, a purpose tag and an
/// index. Identical (seed, tag, index) always yields the same child.
pub fn child_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix64(seed ^ 0xA076_1D64_78BD_642F);
    for &b in tag.as_bytes() {
        h = mix64(h ^ b as u64);
    }
    mix64(h ^ index)
}

/// The RNG used everywhere; seeded ChaCha8 keeps streams reproducible
/// across platforms and versions.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Formats an f64 with enough digits to round-trip, without scientific
/// notation surprises in CSV consumers.
pub fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{:.1}", v)
    } else {
        let s = format!("{:.9}", v);
        let s = s.trim_end_matches('0');
        let s = s.strip_suffix('.').unwrap_or(s);
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_check_value() {
        // Standard check value for the IEEE polynomial.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn child_seeds_are_stable_and_distinct() {
        let a = child_seed(7, "scene", 0);
        assert_eq!(a, child_seed(7, "scene", 0));
        assert_ne!(a, child_seed(7, "scene", 1));
        assert_ne!(a, child_seed(7, "shuffle", 0));
        assert_ne!(a, child_seed(8, "scene", 0));
    }

    #[test]
    fn fmt_is_stable() {
        assert_eq!(fmt_f64(1.0), "1.0");
        assert_eq!(fmt_f64(0.25), "0.25");
        assert_eq!(fmt_f64(0.001), "0.001");
    }
}
