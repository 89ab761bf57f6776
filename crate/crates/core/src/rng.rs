use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic random stream keyed by `(seed, example id, purpose)`.
///
/// The draws depend only on the triple, never on which thread asks or in
/// what order, so corruption and dropout are reproducible under any schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub example: u64,
    pub purpose: u64,
}

/// FNV-1a; stable across platforms and releases.
fn purpose_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngStream {
    pub fn new(seed: u64, example: u64, purpose: &str) -> Self {
        RngStream {
            seed,
            example,
            purpose: purpose_hash(purpose),
        }
    }

    /// Example key for draw number `index` of training iteration `iteration`.
    pub fn example_key(iteration: u64, index: u64) -> u64 {
        (iteration << 32) ^ index
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.example.to_le_bytes());
        key[16..24].copy_from_slice(&self.purpose.to_le_bytes());
        key[24..].copy_from_slice(b"xgptrng1");
        ChaCha8Rng::from_seed(key)
    }
}
