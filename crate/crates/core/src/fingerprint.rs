//! Stable 64-bit content hashes used to stamp artifacts.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// First 8 bytes of the SHA-256 digest, big-endian.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

/// Fingerprint of the compact JSON serialization of `value`.
///
/// Struct fields serialize in declaration order, so this is stable for a
/// given type definition.
pub fn fingerprint_json<T: Serialize + ?Sized>(value: &T) -> u64 {
    let bytes = serde_json::to_vec(value).expect("in-memory serialization cannot fail");
    fingerprint(&bytes)
}

pub fn to_hex(hash: u64) -> String {
    format!("{hash:016x}")
}
