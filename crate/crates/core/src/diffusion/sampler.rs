use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, paired_forward, Weights};
use crate::numerics::{softmax_in_place, Rng, Stream};
use crate::par::{try_map_range, Dispatch};
use crate::steering::Steering;
use crate::tokens::{TokenId, TokenSeq};

use super::schedule::{corrupt, NoiseSchedule};

/// Count of denoiser forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounter {
    count: usize,
}

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, passes: usize) {
        self.count += passes;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn merge(&mut self, other: NfeCounter) {
        self.count += other.count;
    }
}

/// How a committed position's token is drawn from the model's posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TokenSampler {
    /// Most probable token, lowest id on ties.
    #[default]
    Greedy,
    /// Draw from `softmax(logits / τ)`.
    Temperature(f32),
    /// Draw from the `k` most probable tokens at temperature `τ`.
    TopK { k: usize, temperature: f32 },
}

impl TokenSampler {
    pub fn validate(&self) -> Result<()> {
        let tau_ok = |t: f32| t > 0.0 && t.is_finite();
        match *self {
            TokenSampler::Greedy => Ok(()),
            TokenSampler::Temperature(t) if !tau_ok(t) => Err(Error::Config(format!(
                "temperature must be positive, got {t}"
            ))),
            TokenSampler::TopK { temperature, .. } if !tau_ok(temperature) => Err(Error::Config(
                format!("temperature must be positive, got {temperature}"),
            )),
            TokenSampler::TopK { k: 0, .. } => Err(Error::Config("top-k needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Draws a token from `logits`; entries at `-inf` are never chosen.
    pub fn draw(&self, logits: &[f32], rng: &mut Rng) -> Result<TokenId> {
        match *self {
            TokenSampler::Greedy => Ok(argmax(logits) as TokenId),
            TokenSampler::Temperature(tau) => {
                let mut p: Vec<f32> = logits.iter().map(|&l| l / tau).collect();
                softmax_in_place(&mut p);
                Ok(rng.categorical(&p)? as TokenId)
            }
            TokenSampler::TopK { k, temperature } => {
                let mut order: Vec<usize> = (0..logits.len()).collect();
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                let mut p = vec![f32::NEG_INFINITY; logits.len()];
                for &i in order.iter().take(k) {
                    p[i] = logits[i] / temperature;
                }
                softmax_in_place(&mut p);
                Ok(rng.categorical(&p)? as TokenId)
            }
        }
    }
}

impl FromStr for TokenSampler {
    type Err = Error;

    /// `greedy`, `temperature:<τ>` or `topk:<k>[:<τ>]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown token sampler {s:?} (greedy | temperature:T | topk:K[:T])"
            ))
        };
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default();
        let num = |p: Option<&str>| -> Result<f32> {
            p.ok_or_else(bad)?.parse::<f32>().map_err(|_| bad())
        };
        let sampler = match kind {
            "greedy" => TokenSampler::Greedy,
            "temperature" | "temp" => TokenSampler::Temperature(num(parts.next())?),
            "topk" => {
                let k = parts
                    .next()
                    .ok_or_else(bad)?
                    .parse::<usize>()
                    .map_err(|_| bad())?;
                let temperature = match parts.next() {
                    Some(t) => num(Some(t))?,
                    None => 1.0,
                };
                TokenSampler::TopK { k, temperature }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        sampler.validate()?;
        Ok(sampler)
    }
}

impl fmt::Display for TokenSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenSampler::Greedy => f.write_str("greedy"),
            TokenSampler::Temperature(t) => write!(f, "temperature:{t}"),
            TokenSampler::TopK { k, temperature } => write!(f, "topk:{k}:{temperature}"),
        }
    }
}

impl TryFrom<String> for TokenSampler {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TokenSampler> for String {
    fn from(s: TokenSampler) -> String {
        s.to_string()
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The two random streams one sampling run consumes.
#[derive(Clone, Debug)]
pub struct SamplerRngs {
    /// Token draws.
    pub generation: Rng,
    /// Reference re-corruption at steered steps.
    pub reference: Rng,
}

impl SamplerRngs {
    /// Streams for run `index` under `seed`.
    pub fn new(seed: u64, index: u64) -> Self {
        SamplerRngs {
            generation: Rng::for_stream(seed, Stream::Generation, index),
            reference: Rng::for_stream(seed, Stream::ReferenceCorruption, index),
        }
    }

    pub fn fork(&self, child: u64) -> Self {
        SamplerRngs {
            generation: self.generation.fork(child),
            reference: self.reference.fork(child),
        }
    }
}

/// Reverse-process driver: a model, a schedule, a token draw rule and an
/// optional steering setup with its clean reference.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub weights: &'a Weights,
    pub schedule: NoiseSchedule,
    pub tokens: TokenSampler,
    pub steering: Option<&'a Steering>,
    pub reference: Option<&'a TokenSeq>,
}

impl<'a> Sampler<'a> {
    pub fn new(weights: &'a Weights, schedule: NoiseSchedule) -> Self {
        Sampler {
            weights,
            schedule,
            tokens: TokenSampler::Greedy,
            steering: None,
            reference: None,
        }
    }

    pub fn with_tokens(mut self, tokens: TokenSampler) -> Self {
        self.tokens = tokens;
        self
    }

    pub fn with_steering(mut self, steering: &'a Steering, reference: &'a TokenSeq) -> Self {
        self.steering = Some(steering);
        self.reference = Some(reference);
        self
    }

    /// Same model and schedule, no steering.
    pub fn unsteered(self) -> Self {
        Sampler {
            steering: None,
            reference: None,
            ..self
        }
    }

    fn mask(&self) -> TokenId {
        self.weights.config.mask_token_id
    }

    fn check_steering(
        &self,
        prompt_len: usize,
        gen_len: usize,
    ) -> Result<Option<(&'a Steering, &'a TokenSeq)>> {
        match (self.steering, self.reference) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::Contract(
                "steering is configured but no reference was given".into(),
            )),
            (Some(s), Some(r)) => {
                s.check_reference(prompt_len, gen_len, r.prompt_len(), r.response_len())?;
                Ok(Some((s, r)))
            }
        }
    }

    /// One reverse step from timestep `t` to `t - 1`.
    ///
    /// Already-committed tokens are kept. Masked response positions are
    /// ranked by the model's top probability (mask token excluded, ties to
    /// the lower position) and the leading ones are committed so that the
    /// linear plan's masked count is reached; at `t = 1` every position is
    /// committed.
    pub fn reverse_step(
        &self,
        x_t: &TokenSeq,
        t: usize,
        rngs: &mut SamplerRngs,
        nfe: &mut NfeCounter,
    ) -> Result<TokenSeq> {
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.schedule.steps()
            )));
        }
        let guide = self.check_steering(x_t.prompt_len(), x_t.response_len())?;
        let mask = self.mask();
        let masked = x_t.masked_positions(mask);
        if masked.is_empty() {
            return Ok(x_t.clone());
        }
        let step = self.schedule.step_index(t);
        let trace = match guide {
            Some((steering, reference)) => {
                let y_t = if steering.is_active(step) {
                    corrupt(reference, t, &self.schedule, mask, &mut rngs.reference)?
                } else {
                    reference.clone()
                };
                paired_forward(self.weights, x_t, &y_t, steering, step, nfe)?.0
            }
            None => {
                nfe.record(1);
                forward(self.weights, x_t)?
            }
        };

        let keep_masked = if t == 1 {
            0
        } else {
            self.schedule.masked_after(t, x_t.response_len())
        };
        let n_commit = masked.len().saturating_sub(keep_masked);
        let mut rows: Vec<(usize, f32, Vec<f32>)> = masked
            .iter()
            .map(|&pos| {
                let mut logits = trace.logits.row(pos).to_vec();
                logits[mask as usize] = f32::NEG_INFINITY;
                let mut p = logits.clone();
                softmax_in_place(&mut p);
                let conf = p.iter().fold(0.0f32, |m, &v| m.max(v));
                (pos, conf, logits)
            })
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut out = x_t.clone();
        for (pos, _, logits) in rows.iter().take(n_commit) {
            out.ids_mut()[*pos] = self.tokens.draw(logits, &mut rngs.generation)?;
        }
        Ok(out)
    }

    /// Full reverse process from a fully masked response.
    pub fn sample(
        &self,
        prompt: &[TokenId],
        gen_len: usize,
        rngs: &mut SamplerRngs,
    ) -> Result<(TokenSeq, NfeCounter)> {
        self.tokens.validate()?;
        let cfg = &self.weights.config;
        if prompt.len() + gen_len > cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "prompt {} + generation {gen_len} exceeds the model's {} positions",
                prompt.len(),
                cfg.max_seq_len
            )));
        }
        if prompt.contains(&self.mask()) {
            return Err(Error::Contract("prompt contains the mask token".into()));
        }
        self.check_steering(prompt.len(), gen_len)?;
        let mut x = TokenSeq::masked(prompt, gen_len, self.mask());
        let mut nfe = NfeCounter::new();
        for t in (1..=self.schedule.steps()).rev() {
            x = self.reverse_step(&x, t, rngs, &mut nfe)?;
        }
        debug_assert_eq!(x.count_masked(self.mask()), 0);
        Ok((x, nfe))
    }
}

/// Outcome of [`best_of_n`].
#[derive(Clone, Debug)]
pub struct BestOfN {
    pub best: TokenSeq,
    pub index: usize,
    pub scores: Vec<f64>,
    pub nfe: NfeCounter,
}

/// Draws `n` unsteered samples and keeps the highest-scoring one (lowest
/// index on ties). Candidate 0 uses `rngs` as given, candidate j > 0 a fork.
pub fn best_of_n(
    sampler: &Sampler<'_>,
    prompt: &[TokenId],
    gen_len: usize,
    n: usize,
    scorer: &(dyn Fn(&TokenSeq) -> f64 + Sync),
    rngs: &SamplerRngs,
    dispatch: Dispatch,
) -> Result<BestOfN> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    let plain = sampler.unsteered();
    let samples = try_map_range(n, dispatch, |j| {
        let mut r = if j == 0 {
            rngs.clone()
        } else {
            rngs.fork(j as u64)
        };
        plain.sample(prompt, gen_len, &mut r)
    })?;
    let scores: Vec<f64> = samples.iter().map(|(s, _)| scorer(s)).collect();
    let mut index = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = j;
        }
    }
    let mut nfe = NfeCounter::new();
    samples.iter().for_each(|(_, c)| nfe.merge(*c));
    Ok(BestOfN {
        best: samples[index].0.clone(),
        index,
        scores,
        nfe,
    })
}
