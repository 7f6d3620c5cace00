//! Stable content digests for reproducibility checks.
//!
//! Every artifact the pipeline writes (archives, matrices, models, tables)
//! carries a digest so that "same config, same output" is machine-checkable.
//! FNV-1a is used because it is tiny, dependency-free, and stable across
//! platforms and releases; it is an integrity fingerprint, not a
//! cryptographic hash.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Digest rendered as 16 lowercase hex characters.
pub fn hex_digest(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Incremental FNV-1a hasher for streaming larger artifacts.
#[derive(Debug, Clone)]
pub struct Hasher {
    state: u64,
}

impl Hasher {
    pub fn new() -> Self {
        Self { state: FNV_OFFSET }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }

    pub fn finish_hex(&self) -> String {
        format!("{:016x}", self.state)
    }
}

impl Default for Hasher {
    fn default() -> Self {
        Self::new()
    }
}
