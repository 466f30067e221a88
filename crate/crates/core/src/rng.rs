//! Seeded random streams.
//!
//! Every random draw in the crate goes through a [`LabRng`] obtained from
//! [`stream`], so a run is fully determined by one 64-bit seed plus the
//! names of the sub-streams it opens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Opens the sub-stream `(name, index)` of the master `seed`.
///
/// Distinct names or indices select distinct ChaCha streams, so trials can
/// run in any order (or concurrently) and still see the same numbers.
pub fn stream(seed: u64, name: &str, index: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng
}

pub fn normal(rng: &mut LabRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut LabRng, count: usize, scale: f64) -> Vec<f64> {
    (0..count).map(|_| scale * normal(rng)).collect()
}
