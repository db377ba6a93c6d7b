//! Deterministic stream derivation: every random draw in a run is keyed by the
//! run seed plus a small tuple of stream coordinates (stage, step, sample, ...),
//! so resuming at step k reproduces exactly what an unbroken run would draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH_ORDER: u64 = 2;
    pub const MASK: u64 = 3;
    pub const NEGATIVES: u64 = 4;
    pub const CRD: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const BANK: u64 = 8;
    pub const TEACHER_STAGE: u64 = 9;
    pub const STUDENT_STAGE: u64 = 10;
    pub const GRADCHECK: u64 = 11;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A generator keyed by `seed` and the given stream coordinates.
pub fn derive(seed: u64, coords: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &c in coords {
        h = splitmix(h ^ splitmix(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// A seed for an independent sub-run (for example one training stage).
pub fn sub_seed(seed: u64, coords: &[u64]) -> u64 {
    use rand::Rng as _;
    derive(seed, coords).random()
}
