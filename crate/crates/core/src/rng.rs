use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const SYNTH: u64 = 1;
    pub const IDMM_INIT: u64 = 2;
    pub const MIPDM_INIT: u64 = 3;
    pub const TOWER_INIT: u64 = 4;
    pub const NEGATIVES: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const BASELINE_INIT: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const CACHE_SAMPLING: u64 = 9;
}
