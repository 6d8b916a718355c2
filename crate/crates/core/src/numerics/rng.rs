use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Independent random streams derived from one experiment seed.
///
/// Each purpose gets its own stream so that, for example, changing how many
/// draws the sampler makes never shifts the reference-corruption masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Generation = 1,
    ReferenceCorruption = 2,
    Training = 3,
    Corpus = 4,
    References = 5,
    Init = 6,
    Eval = 7,
}

/// Seedable counter-based generator (ChaCha8), splittable by stream id.
///
/// The same `(seed, stream)` pair yields the same draw sequence on every
/// platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            seed,
            stream,
        }
    }

    /// Stream `index` of the given purpose under `seed`.
    pub fn for_stream(seed: u64, purpose: Stream, index: u64) -> Self {
        debug_assert!(index < 1 << 56);
        Rng::new(seed, ((purpose as u64) << 56) | index)
    }

    /// A child generator independent of `self` and of other forks.
    pub fn fork(&self, child: u64) -> Self {
        Rng::new(mix(self.seed ^ mix(child.wrapping_add(1))), self.stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn uniform(&mut self) -> f32 {
        (self.inner.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // Lemire's nearly-divisionless rejection method.
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f32 {
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    /// Draw an index with probability proportional to `probs`.
    ///
    /// `probs` must be nonnegative and sum to 1 within 1e-4.
    pub fn categorical(&mut self, probs: &[f32]) -> Result<usize> {
        let total: f64 = probs.iter().map(|&p| p as f64).sum();
        if probs.is_empty()
            || probs.iter().any(|p| p.is_nan() || *p < 0.0)
            || (total - 1.0).abs() > 1e-4
        {
            return Err(Error::Contract(format!(
                "categorical probabilities must be nonnegative and sum to 1 (sum {total})"
            )));
        }
        let u = self.uniform_f64() * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p as f64;
                last = i;
                if u < acc {
                    return Ok(i);
                }
            }
        }
        Ok(last)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
