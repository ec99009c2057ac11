use sha2::{Digest, Sha256};

/// Hex SHA-256 of the given parts, each length-prefixed so that part
/// boundaries are unambiguous.
pub(crate) fn sha256_parts(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derive a 64-bit seed from a root seed and a list of labels.
pub(crate) fn derive_seed(root: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let out = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_are_boundary_sensitive() {
        assert_ne!(sha256_parts(&[b"ab", b"c"]), sha256_parts(&[b"a", b"bc"]));
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_eq!(derive_seed(7, &["a"]), derive_seed(7, &["a"]));
        assert_ne!(derive_seed(7, &["a"]), derive_seed(7, &["b"]));
        assert_ne!(derive_seed(7, &["a"]), derive_seed(8, &["a"]));
    }
}
