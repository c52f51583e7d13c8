//! Seeded random streams.
//!
//! Every source of randomness in an episode is drawn from its own ChaCha
//! stream keyed by `(seed, purpose)`, so adding a consumer of one stream never
//! perturbs the draws of another. ChaCha output is platform-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// Purpose tags for per-episode streams. The discriminants are part of the
/// on-disk reproducibility contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ObsNoise = 1,
    Planner = 2,
    InitState = 3,
    Gating = 4,
    Explore = 5,
    Training = 6,
    Detector = 7,
    Constants = 8,
}

pub fn stream(seed: u64, purpose: Purpose) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// The set of streams one episode consumes.
#[derive(Debug, Clone)]
pub struct EpisodeRngs {
    pub obs_noise: RngStream,
    pub planner: RngStream,
    pub init_state: RngStream,
    pub gating: RngStream,
    pub explore: RngStream,
}

impl EpisodeRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            obs_noise: stream(seed, Purpose::ObsNoise),
            planner: stream(seed, Purpose::Planner),
            init_state: stream(seed, Purpose::InitState),
            gating: stream(seed, Purpose::Gating),
            explore: stream(seed, Purpose::Explore),
        }
    }
}
