//! Per-particle Gaussian streams.
//!
//! Every particle owns a ChaCha8 stream keyed by the run seed and selected by
//! the particle's global index; the `k`-th draw of a stream is always the same
//! number, so results do not depend on how particles are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

#[derive(Debug, Clone)]
pub struct ParticleStream {
    rng: ChaCha8Rng,
}

impl ParticleStream {
    pub fn new(seed: u64, particle_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(particle_index);
        ParticleStream { rng }
    }

    /// A distinct family of streams for auxiliary draws (initial positions,
    /// reference samples) that must not overlap the dynamics.
    pub fn auxiliary(seed: u64, lane: u64, particle_index: u64) -> Self {
        let mixed = seed ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
        ParticleStream::new(mixed, particle_index)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = Uniform::new(0.0, 1.0).sample(&mut self.rng);
            if u > 0.0 {
                return u;
            }
        }
    }
}
