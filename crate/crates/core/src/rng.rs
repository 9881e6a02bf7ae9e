//! Deterministic seed fan-out.
//!
//! One global seed is split into independent per-module streams keyed by a
//! numeric path, so reproducibility does not depend on the order in which
//! parallel work happens to run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the first path element. Keeping these in one place avoids
/// accidental collisions between modules.
pub mod stream {
    pub const ENV_LAYOUT: u64 = 1;
    pub const ENV_EPISODE: u64 = 2;
    pub const POLICY_INIT: u64 = 3;
    pub const ENCODER_INIT: u64 = 4;
    pub const SCAFFOLD_FIT: u64 = 5;
    pub const TASK_SAMPLE: u64 = 6;
    pub const ACTION_SAMPLE: u64 = 7;
    pub const RESERVOIR: u64 = 8;
    pub const SEED_ROLLOUTS: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const TEST_TASKS: u64 = 11;
    pub const VARIANT: u64 = 12;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Splittable counter-based seed derivation rooted at one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeder {
    global: u64,
}

impl Seeder {
    pub fn new(global: u64) -> Self {
        Seeder { global }
    }

    pub fn global(&self) -> u64 {
        self.global
    }

    /// Derives a 64-bit sub-seed from a path of counters. Permuting distinct
    /// paths never aliases because each element is mixed before folding.
    pub fn derive(&self, path: &[u64]) -> u64 {
        let mut h = splitmix64(self.global ^ 0xA076_1D64_78BD_642F);
        for (i, p) in path.iter().enumerate() {
            h = splitmix64(h ^ splitmix64(p.wrapping_add(i as u64).wrapping_mul(0x9E6D)));
        }
        h
    }

    /// A fresh generator for the given path.
    pub fn rng(&self, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(path))
    }
}
