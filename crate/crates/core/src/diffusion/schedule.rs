use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tokens::{TokenId, TokenSeq};

/// Mask probability as a function of `t / T`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskCurve {
    /// `t / T`.
    #[default]
    Linear,
    /// `1 - cos(π/2 · t/T)`.
    Cosine,
}

/// Forward-corruption level per timestep and the reverse unmasking plan.
///
/// Timesteps run `T, T-1, ..., 1` during sampling; the step taken at
/// timestep `t` is execution step `T - t + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    curve: MaskCurve,
}

impl NoiseSchedule {
    pub fn new(steps: usize, curve: MaskCurve) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        Ok(NoiseSchedule { steps, curve })
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(steps, MaskCurve::Linear)
    }

    /// Total step count T.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn curve(&self) -> MaskCurve {
        self.curve
    }

    /// Probability that a response token is masked at timestep `t ∈ [0, T]`.
    pub fn mask_prob(&self, t: usize) -> f64 {
        let r = (t.min(self.steps)) as f64 / self.steps as f64;
        match self.curve {
            MaskCurve::Linear => r,
            MaskCurve::Cosine => {
                if t >= self.steps {
                    1.0
                } else {
                    1.0 - (std::f64::consts::FRAC_PI_2 * r).cos()
                }
            }
        }
    }

    /// Execution index of the reverse step taken at timestep `t`.
    pub fn step_index(&self, t: usize) -> usize {
        self.steps + 1 - t
    }

    /// Timestep at which execution step `step` runs.
    pub fn timestep(&self, step: usize) -> usize {
        self.steps + 1 - step
    }

    /// Tokens committed by execution step `step` (1-based) for a response of
    /// `gen_len` tokens: an even split with the remainder going to the
    /// earliest steps.
    pub fn commits_at(&self, step: usize, gen_len: usize) -> usize {
        let base = gen_len / self.steps;
        let extra = gen_len % self.steps;
        base + usize::from(step <= extra)
    }

    /// Response tokens still masked once the step at timestep `t` is done.
    pub fn masked_after(&self, t: usize, gen_len: usize) -> usize {
        let done = self.step_index(t);
        let base = gen_len / self.steps;
        let extra = gen_len % self.steps;
        let committed = base * done + extra.min(done);
        gen_len - committed
    }
}

/// Forward corruption: each response token is independently replaced by
/// `mask` with probability `mask_prob(t)`.
pub fn corrupt(
    x0: &TokenSeq,
    t: usize,
    schedule: &NoiseSchedule,
    mask: TokenId,
    rng: &mut Rng,
) -> Result<TokenSeq> {
    if t > schedule.steps() {
        return Err(Error::Contract(format!(
            "corruption level {t} exceeds step count {}",
            schedule.steps()
        )));
    }
    let p = schedule.mask_prob(t);
    let mut out = x0.clone();
    let start = out.prompt_len();
    for tok in &mut out.ids_mut()[start..] {
        if rng.bernoulli(p) {
            *tok = mask;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq() -> TokenSeq {
        TokenSeq::new((2..22).collect(), 4).unwrap()
    }

    #[test]
    fn endpoints() {
        for curve in [MaskCurve::Linear, MaskCurve::Cosine] {
            let s = NoiseSchedule::new(16, curve).unwrap();
            assert_eq!(s.mask_prob(0), 0.0);
            assert_eq!(s.mask_prob(16), 1.0);
            for t in 1..=16 {
                assert!(s.mask_prob(t) >= s.mask_prob(t - 1));
            }
        }
        assert!(NoiseSchedule::linear(0).is_err());
    }

    #[test]
    fn corrupt_endpoints() {
        let s = NoiseSchedule::linear(10).unwrap();
        let mut rng = Rng::new(1, 0);
        assert_eq!(corrupt(&seq(), 0, &s, 0, &mut rng).unwrap(), seq());
        let full = corrupt(&seq(), 10, &s, 0, &mut rng).unwrap();
        assert_eq!(full.prompt(), seq().prompt());
        assert!(full.response().iter().all(|&t| t == 0));
        assert!(corrupt(&seq(), 11, &s, 0, &mut rng).is_err());
    }

    #[test]
    fn corrupt_half_rate() {
        let s = NoiseSchedule::linear(10).unwrap();
        let mut rng = Rng::new(2, 0);
        let x = seq();
        let trials = 10_000;
        let mut masked = 0;
        for _ in 0..trials {
            let y = corrupt(&x, 5, &s, 0, &mut rng).unwrap();
            for (a, b) in x.response().iter().zip(y.response()) {
                assert!(b == a || *b == 0);
            }
            masked += y.count_masked(0);
        }
        let frac = masked as f64 / (trials * x.response_len()) as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn plan_spreads_remainder_early() {
        let s = NoiseSchedule::linear(4).unwrap();
        let commits: Vec<usize> = (1..=4).map(|k| s.commits_at(k, 10)).collect();
        assert_eq!(commits, vec![3, 3, 2, 2]);
        let after: Vec<usize> = (1..=4).rev().map(|t| s.masked_after(t, 10)).collect();
        assert_eq!(after, vec![7, 4, 2, 0]);
        let s = NoiseSchedule::linear(50).unwrap();
        assert!((1..=50).all(|k| s.commits_at(k, 50) == 1));
    }

    #[test]
    fn plan_completes_for_any_shape() {
        for steps in 1..20 {
            let s = NoiseSchedule::linear(steps).unwrap();
            for gen_len in 0..40 {
                assert_eq!(s.masked_after(1, gen_len), 0);
                assert_eq!(s.masked_after(steps + 1, gen_len), gen_len);
                let total: usize = (1..=steps).map(|k| s.commits_at(k, gen_len)).sum();
                assert_eq!(total, gen_len);
                for t in 1..=steps {
                    assert!(s.masked_after(t, gen_len) <= s.masked_after(t + 1, gen_len));
                }
            }
        }
    }

    #[test]
    fn step_index_round_trip() {
        let s = NoiseSchedule::linear(7).unwrap();
        assert_eq!(s.step_index(7), 1);
        assert_eq!(s.step_index(1), 7);
        for t in 1..=7 {
            assert_eq!(s.timestep(s.step_index(t)), t);
        }
    }
}
