use sha2::{Digest, Sha256};

/// 64-bit digest of a sequence of `f64` slices (little-endian bit patterns).
/// Slice boundaries are folded in so `[a, b] | [c]` differs from `[a] | [b, c]`.
pub fn checksum_f64s<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        for v in part {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}
