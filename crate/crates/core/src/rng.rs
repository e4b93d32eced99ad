use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers, one per consumer, so adding draws in one place never
/// shifts another's sequence.
pub mod streams {
    pub const SPAWN: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const ACTIONS: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DISTILL: u64 = 5;
    pub const TEST_SET: u64 = 6;
    pub const PLANNING_SINGLE: u64 = 7;
    pub const PLANNING_DOUBLE: u64 = 8;
    pub const TEST_NOISE: u64 = 9;
    pub const PLAN_NOISE: u64 = 10;
}
