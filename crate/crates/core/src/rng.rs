//! Seeded, platform-independent random streams.
//!
//! Every stochastic draw is addressed by `(seed, domain, index)`: a ChaCha8
//! generator keyed by the seed and domain, positioned on stream `index`.
//! Results therefore do not depend on evaluation order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) mod domain {
    pub const ITEM: u64 = 1;
    pub const JUDGMENTS: u64 = 2;
    pub const READINGS: u64 = 3;
    pub const SUBSETS: u64 = 4;
    pub const MLP_INIT: u64 = 5;
    pub const MLP_SHUFFLE: u64 = 6;
    pub const MLP_DROPOUT: u64 = 7;
    /// Offset by the virtual-annotator index.
    pub const VECTORS: u64 = 1 << 32;
}

pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let key = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Standard normal draw by the Box–Muller transform (cosine branch).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform draw from `[lo, hi]`; returns `lo` when the range is empty.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Seed derived from the wall clock, for runs without `--seed`.
pub fn fresh_seed() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    ChaCha8Rng::seed_from_u64(nanos ^ u64::from(std::process::id())).random()
}
