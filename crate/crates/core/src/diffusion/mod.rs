//! Masked discrete diffusion: forward corruption, the confidence-ordered
//! reverse sampler, and forward-pass accounting.

mod sampler;
mod schedule;

pub use sampler::{best_of_n, BestOfN, NfeCounter, Sampler, SamplerRngs, TokenSampler};
pub use schedule::{corrupt, MaskCurve, NoiseSchedule};
