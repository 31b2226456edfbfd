//! Stable per-item seeds, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Hash of `(global_seed, item_id)`: FNV-1a over the little-endian seed and
/// the UTF-8 id, followed by a splitmix64 finalizer. Stable across platforms
/// and releases.
pub fn derive_seed(global_seed: u64, item_id: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in global_seed.to_le_bytes().iter().chain(item_id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn item_rng(global_seed: u64, item_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global_seed, item_id))
}
