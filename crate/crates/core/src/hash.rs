//! Fixed, run-to-run deterministic hashing.
//!
//! Integer keys go through the splitmix64 finalizer, which is a bijection on
//! `u64`: two integers collide on the full 64-bit hash only if they are equal.
//! Byte strings use a word-at-a-time streaming hash built on the same mixer.

use std::hash::{BuildHasherDefault, Hasher};

#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const BYTES_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = BYTES_SEED ^ (bytes.len() as u64);
    let mut chunks = bytes.chunks_exact(8);
    for c in &mut chunks {
        let w = u64::from_le_bytes(c.try_into().unwrap());
        h = mix64(h.rotate_left(23) ^ w);
    }
    let rest = chunks.remainder();
    if !rest.is_empty() {
        let mut buf = [0u8; 8];
        buf[..rest.len()].copy_from_slice(rest);
        h = mix64(h.rotate_left(23) ^ u64::from_le_bytes(buf));
    }
    mix64(h)
}

/// `Hasher` for std collections keyed by integers, byte slices or tuples of them.
#[derive(Default, Clone, Copy)]
pub struct MixHasher(u64);

impl Hasher for MixHasher {
    #[inline]
    fn finish(&self) -> u64 {
        mix64(self.0)
    }

    fn write(&mut self, bytes: &[u8]) {
        self.0 = hash_bytes(bytes) ^ self.0.rotate_left(29);
    }

    #[inline]
    fn write_u64(&mut self, i: u64) {
        self.0 = mix64(self.0 ^ i).wrapping_add(0x632b_e59b_d9b4_e019);
    }

    #[inline]
    fn write_u32(&mut self, i: u32) {
        self.write_u64(i as u64)
    }

    #[inline]
    fn write_usize(&mut self, i: usize) {
        self.write_u64(i as u64)
    }
}

pub type MixBuild = BuildHasherDefault<MixHasher>;
pub type FastMap<K, V> = std::collections::HashMap<K, V, MixBuild>;
pub type FastSet<K> = std::collections::HashSet<K, MixBuild>;
