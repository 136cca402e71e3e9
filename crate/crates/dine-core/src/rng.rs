//! Seeded random number streams.
//!
//! Every source of randomness is a ChaCha stream keyed by (seed, stream id),
//! so concurrent rollouts draw from independent, reproducible streams.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

pub fn fill_standard_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn fill_uniform(rng: &mut Rng, lo: f64, hi: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = lo + (hi - lo) * rng.random::<f64>();
    }
}

/// Uniform on the open interval (0, 1); rejects exact endpoints so inverse
/// CDF transforms stay finite.
pub fn open_unit(rng: &mut Rng) -> f64 {
    loop {
        let u = rng.random::<f64>();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}
