//! Seed derivation.
//!
//! Every random stream in a run is derived from the master seed plus a path of
//! tags, so a stream never depends on how many draws another stream consumed.
//! This is what keeps runs bit-identical across worker counts and lets a
//! wrapped FedEx arm share its training randomness with the plain arm it is
//! compared against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named purposes for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Federation = 1,
    ArmConfig = 2,
    Perturb = 3,
    ModelInit = 4,
    ClientSelect = 5,
    LocalTrain = 6,
    ThetaSample = 7,
    Evaluate = 8,
    OcoTasks = 9,
    OcoSample = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a path of tags into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn stream(master: u64, purpose: Stream, path: &[u64]) -> SimRng {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(purpose as u64);
    full.extend_from_slice(path);
    SimRng::seed_from_u64(derive_seed(master, &full))
}
