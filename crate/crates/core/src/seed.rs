//! Stable seed derivation.
//!
//! Child seeds are produced by folding each component into a SplitMix64
//! state: `state = mix(state ^ component)` with `mix` the SplitMix64
//! finalizer. String roles are first reduced with 64-bit FNV-1a. The
//! construction only depends on the component values, so adding a sample
//! size to a sweep never changes the seeds of the cells already present.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives the seed of a sweep cell from the root seed, sample size,
/// replication index and a role tag (`"data"`, `"fit"`, `"mc"`, ...).
pub fn child_seed(root: u64, n: u64, rep: u64, role: &str) -> u64 {
    [n, rep, fnv1a(role)]
        .into_iter()
        .fold(splitmix(root), |state, c| splitmix(state ^ c))
}

/// Derives a seed from a root and a role only.
pub fn role_seed(root: u64, role: &str) -> u64 {
    splitmix(splitmix(root) ^ fnv1a(role))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}
