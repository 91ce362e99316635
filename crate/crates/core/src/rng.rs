//! Seed fan-out.
//!
//! Every subsystem draws from its own ChaCha8 stream so that, for example,
//! changing the replay sampler never shifts the weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream owners inside one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Component {
    Init = 1,
    Dropout = 2,
    Exploration = 3,
    Replay = 4,
}

/// Generator for `component` under `seed`: the seed selects the ChaCha key,
/// the component selects the stream.
pub fn component_rng(seed: u64, component: Component) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component as u64);
    rng
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for run `index` of an experiment. Depends only on the master seed
/// and the index, so adding runs leaves earlier seeds unchanged.
pub fn run_seed(master: u64, index: u32) -> u64 {
    splitmix64(master ^ splitmix64(u64::from(index) + 1))
}

/// Human-readable statement of [`run_seed`], echoed into run manifests.
pub const RUN_SEED_RULE: &str = "run_seed(i) = splitmix64(master ^ splitmix64(i + 1))";
