use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ops::{PoolNorm, Waveform};

/// Which update the hooks apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerMode {
    /// Reference and generation have equal response length.
    #[default]
    Standard,
    /// Reference may be shorter; the difference is resampled and weighted.
    Spatial,
}

impl FromStr for SteerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SteerMode::Standard),
            "spatial" | "spatially-modulated" => Ok(SteerMode::Spatial),
            _ => Err(Error::Config(format!(
                "unknown steering mode {s:?} (standard | spatial)"
            ))),
        }
    }
}

/// Sequence positions eligible for updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteeringSpan {
    /// Response positions only; the prompt prefix passes through.
    #[default]
    Response,
    /// Every position, prompt included.
    Full,
}

/// Named portions of the denoising trajectory.
///
/// Thirds split steps `1..=T` at `⌊T/3⌋` and `⌊2T/3⌋`; halves at `⌊T/2⌋`.
/// Step 1 is the first reverse step, taken from the fully masked sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    EarlyThird,
    MidThird,
    LateThird,
    FirstHalf,
    SecondHalf,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::EarlyThird,
        Stage::MidThird,
        Stage::LateThird,
        Stage::FirstHalf,
        Stage::SecondHalf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::EarlyThird => "early-third",
            Stage::MidThird => "mid-third",
            Stage::LateThird => "late-third",
            Stage::FirstHalf => "first-half",
            Stage::SecondHalf => "second-half",
        }
    }

    pub fn range(self, total: usize) -> std::ops::RangeInclusive<usize> {
        let (a, b) = (total / 3, 2 * total / 3);
        match self {
            Stage::EarlyThird => 1..=a,
            Stage::MidThird => a + 1..=b,
            Stage::LateThird => b + 1..=total,
            Stage::FirstHalf => 1..=total / 2,
            Stage::SecondHalf => total / 2 + 1..=total,
        }
    }
}

/// Steps at which steering is active, before the step count is known.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StepSpecRepr", into = "StepSpecRepr")]
pub enum StepSpec {
    #[default]
    All,
    /// Inclusive range.
    Range(usize, usize),
    Stage(Stage),
    List(BTreeSet<usize>),
}

impl StepSpec {
    /// Concrete step set for a `total`-step run. Steps outside `1..=total`
    /// are a configuration error.
    pub fn resolve(&self, total: usize) -> Result<BTreeSet<usize>> {
        let set: BTreeSet<usize> = match self {
            StepSpec::All => (1..=total).collect(),
            StepSpec::Range(a, b) => (*a..=*b).collect(),
            StepSpec::Stage(s) => s.range(total).collect(),
            StepSpec::List(l) => l.clone(),
        };
        if let Some(&bad) = set.iter().find(|&&s| s == 0 || s > total) {
            return Err(Error::Config(format!(
                "steering step {bad} lies outside 1..={total}"
            )));
        }
        Ok(set)
    }
}

impl FromStr for StepSpec {
    type Err = Error;

    /// Accepts `all`, a stage name, `a..b` (inclusive), or a comma list
    /// whose items are single steps or ranges.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(StepSpec::All);
        }
        if let Some(stage) = Stage::ALL.iter().find(|st| st.name() == s) {
            return Ok(StepSpec::Stage(*stage));
        }
        let parse_num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad step {t:?} in step spec {s:?}")))
        };
        let parse_range = |t: &str| -> Result<Option<(usize, usize)>> {
            match t.split_once("..") {
                Some((a, b)) => {
                    let b = b.strip_prefix('=').unwrap_or(b);
                    let (a, b) = (parse_num(a)?, parse_num(b)?);
                    if a > b {
                        return Err(Error::Config(format!("empty step range {t:?}")));
                    }
                    Ok(Some((a, b)))
                }
                None => Ok(None),
            }
        };
        if !s.contains(',') {
            if let Some((a, b)) = parse_range(s)? {
                return Ok(StepSpec::Range(a, b));
            }
        }
        let mut set = BTreeSet::new();
        for item in s.split(',').filter(|t| !t.trim().is_empty()) {
            match parse_range(item)? {
                Some((a, b)) => set.extend(a..=b),
                None => {
                    set.insert(parse_num(item)?);
                }
            }
        }
        Ok(StepSpec::List(set))
    }
}

impl fmt::Display for StepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSpec::All => f.write_str("all"),
            StepSpec::Range(a, b) => write!(f, "{a}..{b}"),
            StepSpec::Stage(s) => f.write_str(s.name()),
            StepSpec::List(l) => {
                let items: Vec<String> = l.iter().map(usize::to_string).collect();
                f.write_str(&items.join(","))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepSpecRepr {
    Text(String),
    List(Vec<usize>),
}

impl TryFrom<StepSpecRepr> for StepSpec {
    type Error = Error;

    fn try_from(r: StepSpecRepr) -> Result<Self> {
        match r {
            StepSpecRepr::Text(s) => s.parse(),
            StepSpecRepr::List(v) => Ok(StepSpec::List(v.into_iter().collect())),
        }
    }
}

impl From<StepSpec> for StepSpecRepr {
    fn from(s: StepSpec) -> Self {
        match s {
            StepSpec::List(l) => StepSpecRepr::List(l.into_iter().collect()),
            other => StepSpecRepr::Text(other.to_string()),
        }
    }
}

pub const DEFAULT_KERNEL: usize = 6;
pub const DEFAULT_WAVE_FREQ: f64 = 7.0;

fn default_kernel() -> usize {
    DEFAULT_KERNEL
}

fn default_freq() -> f64 {
    DEFAULT_WAVE_FREQ
}

/// Where, when and how strongly to steer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerConfig {
    /// 1-based layer index to scale α.
    pub layers: BTreeMap<usize, f32>,
    #[serde(default)]
    pub steps: StepSpec,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub mode: SteerMode,
    /// Modulation frequency (spatial mode).
    #[serde(default = "default_freq")]
    pub wave_freq: f64,
    #[serde(default)]
    pub waveform: Waveform,
    #[serde(default)]
    pub pool_norm: PoolNorm,
    #[serde(default)]
    pub span: SteeringSpan,
}

impl SteerConfig {
    /// Standard-mode config with default kernel, active at every step.
    pub fn standard(layers: impl IntoIterator<Item = (usize, f32)>) -> Self {
        SteerConfig {
            layers: layers.into_iter().collect(),
            steps: StepSpec::All,
            kernel: DEFAULT_KERNEL,
            mode: SteerMode::Standard,
            wave_freq: DEFAULT_WAVE_FREQ,
            waveform: Waveform::Cosine,
            pool_norm: PoolNorm::Count,
            span: SteeringSpan::Response,
        }
    }

    /// Spatially modulated config with default kernel and frequency.
    pub fn spatial(layers: impl IntoIterator<Item = (usize, f32)>) -> Self {
        SteerConfig {
            mode: SteerMode::Spatial,
            ..SteerConfig::standard(layers)
        }
    }

    pub fn with_steps(mut self, steps: StepSpec) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    /// Checks everything that does not depend on the step count.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.kernel < 1 {
            return Err(Error::Config("pooling kernel must be at least 1".into()));
        }
        for (&layer, &alpha) in &self.layers {
            if layer == 0 || layer > num_layers {
                return Err(Error::Config(format!(
                    "steering layer {layer} outside 1..={num_layers}"
                )));
            }
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::Config(format!(
                    "steering scale for layer {layer} must be finite and >= 0, got {alpha}"
                )));
            }
        }
        if self.mode == SteerMode::Spatial && !(self.wave_freq > 0.0 && self.wave_freq.is_finite())
        {
            return Err(Error::Config(format!(
                "modulation frequency must be positive, got {}",
                self.wave_freq
            )));
        }
        Ok(())
    }
}

/// Parses `"4:1.0,5:0.8"` into a layer → α map.
pub fn parse_layer_map(s: &str) -> Result<BTreeMap<usize, f32>> {
    let mut map = BTreeMap::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (l, a) = item
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("layer entry {item:?} is not LAYER:ALPHA")))?;
        let layer = l
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad layer index {l:?}")))?;
        let alpha = a
            .trim()
            .parse::<f32>()
            .map_err(|_| Error::Config(format!("bad scale {a:?}")))?;
        if map.insert(layer, alpha).is_some() {
            return Err(Error::Config(format!("layer {layer} listed twice")));
        }
    }
    Ok(map)
}
