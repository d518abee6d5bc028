//! Counter-keyed Gaussian noise.
//!
//! Each particle owns a ChaCha8 stream selected by `(seed, particle)`; within
//! the stream, step `k` always occupies the same fixed block of words. A given
//! `(seed, particle, step, channel)` therefore maps to one fixed normal
//! variate regardless of thread count or evaluation order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Backend;

/// Two Box–Muller pairs per step cover up to four channels.
const U64_PER_STEP: usize = 4;
pub const MAX_CHANNELS: usize = 4;

fn noise_stream(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * particle as u64);
    rng
}

/// Stream used for initial-state draws, disjoint from the noise streams.
pub(crate) fn init_stream(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * particle as u64 + 1);
    rng
}

fn unit_open(bits: u64) -> f64 {
    // (0, 1]: never zero, so ln is finite.
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

fn standard_normals(rng: &mut ChaCha8Rng) -> [f64; MAX_CHANNELS] {
    let mut out = [0.0; MAX_CHANNELS];
    for pair in 0..2 {
        let u1 = unit_open(rng.next_u64());
        let u2 = unit_open(rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        out[2 * pair] = r * theta.cos();
        out[2 * pair + 1] = r * theta.sin();
    }
    out
}

/// Brownian increments `ΔW` for every particle, step and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseField {
    n_particles: usize,
    n_steps: usize,
    channels: usize,
    /// Layout `[step][particle][channel]`.
    increments: Vec<f64>,
}

impl NoiseField {
    pub fn zeros(n_particles: usize, n_steps: usize, channels: usize) -> Self {
        assert!(channels <= MAX_CHANNELS);
        Self {
            n_particles,
            n_steps,
            channels,
            increments: vec![0.0; n_particles * n_steps * channels],
        }
    }

    pub fn generate(
        seed: u64,
        n_particles: usize,
        n_steps: usize,
        channels: usize,
        dt: f64,
        backend: Backend,
    ) -> Self {
        assert!(channels <= MAX_CHANNELS);
        let scale = dt.sqrt();
        let per_particle: Vec<Vec<f64>> = backend.map(n_particles, |i| {
            let mut rng = noise_stream(seed, i);
            let mut out = Vec::with_capacity(n_steps * channels);
            for _ in 0..n_steps {
                let z = standard_normals(&mut rng);
                out.extend(z[..channels].iter().map(|z| z * scale));
            }
            out
        });
        let mut increments = vec![0.0; n_particles * n_steps * channels];
        for (i, path) in per_particle.iter().enumerate() {
            for k in 0..n_steps {
                let dst = (k * n_particles + i) * channels;
                increments[dst..dst + channels]
                    .copy_from_slice(&path[k * channels..(k + 1) * channels]);
            }
        }
        Self {
            n_particles,
            n_steps,
            channels,
            increments,
        }
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Increments of one particle over `[t_step, t_step+1]`.
    pub fn increment(&self, step: usize, particle: usize) -> &[f64] {
        let start = (step * self.n_particles + particle) * self.channels;
        &self.increments[start..start + self.channels]
    }

    /// All increments of one step, particle-major.
    pub fn step_slice(&self, step: usize) -> &[f64] {
        let len = self.n_particles * self.channels;
        &self.increments[step * len..(step + 1) * len]
    }

    pub fn scale(&mut self, factor: f64) {
        self.increments.iter_mut().for_each(|x| *x *= factor);
    }
}

/// Standalone keyed normal draw; equal to the corresponding entry of
/// [`NoiseField::generate`] divided by `sqrt(dt)`.
pub fn keyed_normal(seed: u64, particle: usize, step: usize, channel: usize) -> f64 {
    assert!(channel < MAX_CHANNELS);
    let mut rng = noise_stream(seed, particle);
    rng.set_word_pos((step * U64_PER_STEP * 2) as u128);
    standard_normals(&mut rng)[channel]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_matches_keyed_draws() {
        let f = NoiseField::generate(42, 5, 7, 3, 0.25, Backend::Sequential);
        for i in 0..5 {
            for k in 0..7 {
                for ch in 0..3 {
                    let expected = keyed_normal(42, i, k, ch) * 0.5;
                    assert!((f.increment(k, i)[ch] - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn backends_bitwise_identical() {
        let a = NoiseField::generate(9, 64, 30, 1, 0.1, Backend::Sequential);
        let b = NoiseField::generate(9, 64, 30, 1, 0.1, Backend::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn moments_are_standard() {
        let f = NoiseField::generate(1, 2000, 50, 1, 1.0, Backend::default());
        let n = f.increments.len() as f64;
        let mean = f.increments.iter().sum::<f64>() / n;
        let var = f.increments.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn seeds_and_particles_decorrelate() {
        let a = NoiseField::generate(1, 2, 1000, 1, 1.0, Backend::Sequential);
        let b = NoiseField::generate(2, 2, 1000, 1, 1.0, Backend::Sequential);
        let dot = |f: &NoiseField, i, g: &NoiseField, j| {
            (0..1000).map(|k| f.increment(k, i)[0] * g.increment(k, j)[0]).sum::<f64>() / 1000.0
        };
        assert!(dot(&a, 0, &a, 1).abs() < 0.15);
        assert!(dot(&a, 0, &b, 0).abs() < 0.15);
    }
}
