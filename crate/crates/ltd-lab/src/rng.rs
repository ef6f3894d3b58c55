//! Counter-based seeded random number generation.
//!
//! The generator hashes a (key, counter) pair through the SplitMix64
//! finalizer, so every draw is a pure function of the seed, the stream
//! index, and the position in the stream. That makes streams splittable
//! (data generation, noise, and parameter init never interleave) and lets
//! Gaussian sampling fill large tensors in parallel without changing a
//! single bit of the output.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: full-avalanche mix of a 64-bit value.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_pair(key: u64, counter: u64) -> u64 {
    mix(counter.wrapping_mul(GOLDEN).wrapping_add(key))
}

/// Deterministic counter-based generator.
///
/// Identical seed and call sequence give an identical output stream.
/// Not shareable across concurrent callers; split off independent
/// streams with [`Rng::stream`] instead.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Derive an independent stream from this generator's key.
    ///
    /// Splitting depends only on the key and `index`, never on how many
    /// values have already been drawn.
    pub fn stream(&self, index: u64) -> Rng {
        Rng {
            key: mix(self.key ^ index.wrapping_mul(GOLDEN).wrapping_add(1)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = hash_pair(self.key, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift keeps this branch-free and deterministic; the
        // modulo bias at 64 bits is far below anything observable here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// One standard normal draw (Box-Muller, cosine branch).
    pub fn next_gaussian(&mut self) -> f64 {
        let base = self.counter;
        self.counter += 2;
        gaussian_at(self.key, base, 0)
    }
}

/// Standard normal for output slot `lane` (0 = cos, 1 = sin) of the
/// Box-Muller pair whose two uniforms sit at counters `base` and `base+1`.
fn gaussian_at(key: u64, base: u64, lane: u64) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1 = ((hash_pair(key, base) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (hash_pair(key, base + 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    if lane == 0 {
        r * theta.cos()
    } else {
        r * theta.sin()
    }
}

/// Tensor of i.i.d. standard normals drawn from `rng`'s stream.
///
/// Element `2k` and `2k+1` share one Box-Muller pair, so each element is a
/// pure function of (key, counter) and the fill parallelizes without
/// affecting the values. The generator advances past the consumed pairs.
pub fn sample_gaussian(rng: &mut Rng, dims: &[usize]) -> Result<Tensor> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "gaussian sample dims must be positive, got {dims:?}"
        )));
    }
    let n: usize = dims.iter().product();
    let key = rng.key;
    let base = rng.counter;
    rng.counter += 2 * n.div_ceil(2) as u64;

    let data = parallel::map_indexed(n, |i| {
        let pair = (i / 2) as u64;
        gaussian_at(key, base + 2 * pair, (i % 2) as u64)
    });
    Tensor::from_vec(dims.to_vec(), data)
}
