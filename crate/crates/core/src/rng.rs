use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream per (seed, purpose).
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

// Stream identifiers. Each pipeline component draws from its own stream so
// changing one stage's consumption never perturbs another's.
pub const CATALOG: u64 = 1;
pub const TITLES: u64 = 2;
pub const KERNEL: u64 = 3;
pub const INTERACTIONS: u64 = 4;
pub const KMEANS: u64 = 5;
pub const RQVAE: u64 = 6;
pub const POLICY_INIT: u64 = 7;
pub const CORPUS: u64 = 8;
pub const SFT_ORDER: u64 = 9;
pub const CF: u64 = 10;
pub const RL: u64 = 11;
pub const SAMPLING: u64 = 12;
