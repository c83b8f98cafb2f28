//! FNV-1a (64-bit) content hashing for layout ids and corpus checksums.

use std::hash::Hasher;

use fnv::FnvHasher;

/// One-shot 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}
