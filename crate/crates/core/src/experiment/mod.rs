//! Reproducible experiment runs: generation protocol, ablation sweeps and
//! report re-validation.
//!
//! A run directory holds `manifest.json` (the fully resolved config),
//! `records.csv`, `summary.csv` and `samples.txt`. A sweep directory holds
//! one run directory per value plus `sweep.json` and a `summary.csv` with one
//! row per value.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{best_of_n, MaskCurve, NoiseSchedule, Sampler, SamplerRngs, TokenSampler};
use crate::error::{Error, Result};
use crate::metrics::{
    ngram_overlap, pseudo_perplexity, read_summaries, write_summaries, Record, RunReport, Summary,
};
use crate::model::{load_checkpoint, Checkpoint};
use crate::numerics::{Rng, Stream};
use crate::par::{try_map_range, Dispatch};
use crate::steering::{SteerConfig, Steering, StepSpec};
use crate::tokens::{TokenSeq, Vocab};
use crate::toylab::{make_references, Attribute, Grammar, Oracle};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "ILRR_OUT_DIR";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SAMPLES_FILE: &str = "samples.txt";
pub const SWEEP_FILE: &str = "sweep.json";

/// `$ILRR_OUT_DIR`, or `runs` in the working directory.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Prompts given inline or as a file with one prompt per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptSource {
    Inline(Vec<String>),
    File { file: PathBuf },
}

impl PromptSource {
    pub fn resolve(&self) -> Result<Vec<String>> {
        match self {
            PromptSource::Inline(p) => Ok(p.clone()),
            PromptSource::File { file } => Ok(fs::read_to_string(file)
                .map_err(|e| Error::io(file, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()),
        }
    }
}

/// Steering references drawn from the grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub attribute: Attribute,
    pub count: usize,
    /// Response length of each reference; defaults to the generation length.
    #[serde(default)]
    pub length: Option<usize>,
    /// Seed of the reference draw, shared by all sampling seeds.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            attribute: Attribute::Pos,
            count: 5,
            length: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub gen_len: usize,
    #[serde(default)]
    pub curve: MaskCurve,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 16,
            gen_len: 16,
            curve: MaskCurve::Linear,
        }
    }
}

/// Everything needed to reproduce a generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub checkpoint: PathBuf,
    /// Grammar file; the built-in grammar when absent.
    pub grammar: Option<PathBuf>,
    /// All grammar prompts when absent.
    pub prompts: Option<PromptSource>,
    /// Required for steering. Unsteered runs without references use one
    /// reference slot per prompt and score against POS.
    pub references: Option<ReferenceSpec>,
    /// Unsteered sampling when absent.
    pub steering: Option<SteerConfig>,
    pub schedule: ScheduleSpec,
    pub seeds: Vec<u64>,
    /// Generations per (prompt, reference, seed).
    pub repeats: usize,
    pub sampler: TokenSampler,
    /// Unsteered best-of-n reranking by the oracle; 1 disables it.
    pub best_of: usize,
    pub pseudo_ppl: bool,
    /// Run directory; `$ILRR_OUT_DIR/<command>` when absent.
    pub out: Option<PathBuf>,
    pub dispatch: Dispatch,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            checkpoint: PathBuf::from("model.ckpt"),
            grammar: None,
            prompts: None,
            references: None,
            steering: None,
            schedule: ScheduleSpec::default(),
            seeds: vec![0, 1, 2],
            repeats: 4,
            sampler: TokenSampler::Temperature(1.0),
            best_of: 1,
            pseudo_ppl: true,
            out: None,
            dispatch: Dispatch::Parallel,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Target attribute of the run (the references' attribute).
    pub fn target(&self) -> Attribute {
        self.references
            .as_ref()
            .map_or(Attribute::Pos, |r| r.attribute)
    }

    /// Reference slots per prompt in the protocol grid.
    pub fn reference_slots(&self) -> usize {
        self.references.as_ref().map_or(1, |r| r.count)
    }

    pub fn reference_len(&self) -> usize {
        self.references
            .as_ref()
            .and_then(|r| r.length)
            .unwrap_or(self.schedule.gen_len)
    }

    pub fn out_dir(&self, command: &str) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| default_out_root().join(command))
    }

    fn validate_static(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.repeats == 0 || self.reference_slots() == 0 {
            return Err(Error::Config(
                "repeats and reference count must be positive".into(),
            ));
        }
        if self.best_of == 0 {
            return Err(Error::Config("best-of-n needs n >= 1".into()));
        }
        if self.best_of > 1 && self.steering.is_some() {
            return Err(Error::Config(
                "best-of-n reranking applies to unsteered runs only".into(),
            ));
        }
        if self.schedule.gen_len == 0 {
            return Err(Error::Config("generation length must be positive".into()));
        }
        if self.target() == Attribute::Neutral {
            return Err(Error::Config("references must carry POS or NEG".into()));
        }
        if self.steering.is_some() && self.references.is_none() {
            return Err(Error::Config(
                "steering needs references (set --reference-attr)".into(),
            ));
        }
        self.sampler.validate()?;
        if !self.checkpoint.is_file() {
            return Err(Error::Config(format!(
                "checkpoint {} does not exist",
                self.checkpoint.display()
            )));
        }
        if let Some(g) = &self.grammar {
            if !g.is_file() {
                return Err(Error::Config(format!(
                    "grammar {} does not exist",
                    g.display()
                )));
            }
        }
        if let Some(PromptSource::File { file }) = &self.prompts {
            if !file.is_file() {
                return Err(Error::Config(format!(
                    "prompt file {} does not exist",
                    file.display()
                )));
            }
        }
        Ok(())
    }
}

/// The loaded inputs of a run, shared by every record.
pub struct Context {
    pub checkpoint: Checkpoint,
    pub grammar: Grammar,
    pub oracle: Oracle,
    pub prompts: Vec<String>,
    pub prompt_ids: Vec<Vec<u32>>,
    pub references: Vec<TokenSeq>,
    pub schedule: NoiseSchedule,
    pub steering: Option<Steering>,
}

impl Context {
    /// Loads and cross-checks every input; fails before any sampling.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate_static()?;
        let checkpoint = load_checkpoint(&cfg.checkpoint)?;
        let grammar = match &cfg.grammar {
            Some(p) => Grammar::load(p)?,
            None => Grammar::default(),
        };
        Self::build(cfg, checkpoint, grammar)
    }

    /// As [`Context::load`] with the checkpoint and grammar already in memory.
    pub fn build(cfg: &ExperimentConfig, checkpoint: Checkpoint, grammar: Grammar) -> Result<Self> {
        let vocab: &Vocab = &checkpoint.vocab;
        if grammar.vocab() != *vocab {
            return Err(Error::Config(
                "grammar vocabulary differs from the checkpoint's".into(),
            ));
        }
        let prompts = match &cfg.prompts {
            Some(p) => p.resolve()?,
            None => grammar.prompts.clone(),
        };
        if prompts.is_empty() {
            return Err(Error::Config("no prompts".into()));
        }
        let prompt_ids = prompts
            .iter()
            .map(|p| vocab.encode(p))
            .collect::<Result<Vec<_>>>()?;
        let schedule = NoiseSchedule::new(cfg.schedule.steps, cfg.schedule.curve)?;
        let max_seq = checkpoint.config().max_seq_len;
        let steering = match &cfg.steering {
            Some(s) => Some(Steering::new(
                s,
                checkpoint.config().num_layers,
                schedule.steps(),
            )?),
            None => None,
        };
        let references = match &cfg.references {
            Some(r) => {
                let mut rng = Rng::for_stream(r.seed, Stream::References, 0);
                make_references(
                    &grammar,
                    vocab,
                    r.attribute,
                    r.count,
                    cfg.reference_len(),
                    &mut rng,
                )?
            }
            None => Vec::new(),
        };
        for p in &prompt_ids {
            if p.len() + cfg.schedule.gen_len > max_seq {
                return Err(Error::Config(format!(
                    "prompt of {} tokens plus {} generated exceeds the model's {max_seq} positions",
                    p.len(),
                    cfg.schedule.gen_len
                )));
            }
            if let Some(st) = &steering {
                st.check_reference(p.len(), cfg.schedule.gen_len, p.len(), cfg.reference_len())
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        let oracle = Oracle::new(&grammar, vocab);
        Ok(Context {
            checkpoint,
            grammar,
            oracle,
            prompts,
            prompt_ids,
            references,
            schedule,
            steering,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.checkpoint.vocab
    }
}

/// Position of one record in the protocol grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub seed: u64,
    pub prompt: usize,
    pub reference: usize,
    pub repeat: usize,
}

/// The (seed, prompt, reference, repeat) grid in record order.
pub fn protocol_slots(cfg: &ExperimentConfig, prompts: usize) -> Vec<Slot> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for prompt in 0..prompts {
            for reference in 0..cfg.reference_slots() {
                for repeat in 0..cfg.repeats {
                    out.push(Slot {
                        seed,
                        prompt,
                        reference,
                        repeat,
                    });
                }
            }
        }
    }
    out
}

/// Generates and scores one record.
pub fn run_slot(cfg: &ExperimentConfig, ctx: &Context, slot: Slot) -> Result<(Record, TokenSeq)> {
    let w = &ctx.checkpoint.weights;
    let prompt = &ctx.prompt_ids[slot.prompt];
    let index =
        ((slot.prompt * cfg.reference_slots() + slot.reference) * cfg.repeats + slot.repeat) as u64;
    let mut rngs = SamplerRngs::new(slot.seed, index);
    let sampler = Sampler::new(w, ctx.schedule).with_tokens(cfg.sampler);
    let target = cfg.target();
    let (out, nfe, reference) = match &ctx.steering {
        Some(st) => {
            let reference = ctx.references[slot.reference].with_prompt(prompt);
            let (x, nfe) = sampler.with_steering(st, &reference).sample(
                prompt,
                cfg.schedule.gen_len,
                &mut rngs,
            )?;
            (x, nfe, Some(reference))
        }
        None if cfg.best_of > 1 => {
            let scorer = |s: &TokenSeq| {
                let v = ctx.oracle.classify(s);
                let (hit, miss) = match target {
                    Attribute::Neg => (v.neg_hits, v.pos_hits),
                    _ => (v.pos_hits, v.neg_hits),
                };
                hit as f64 - miss as f64
            };
            let b = best_of_n(
                &sampler,
                prompt,
                cfg.schedule.gen_len,
                cfg.best_of,
                &scorer,
                &rngs,
                Dispatch::Sequential,
            )?;
            (b.best, b.nfe, None)
        }
        None => {
            let (x, nfe) = sampler.sample(prompt, cfg.schedule.gen_len, &mut rngs)?;
            (x, nfe, None)
        }
    };
    let verdict = ctx.oracle.classify(&out);
    let overlap4 = reference
        .as_ref()
        .map_or(0.0, |r| ngram_overlap(&out, r, 4).percent);
    let pseudo_ppl = if cfg.pseudo_ppl {
        Some(pseudo_perplexity(w, &out)?)
    } else {
        None
    };
    let record = Record {
        prompt_id: slot.prompt,
        reference_id: reference.map(|_| slot.reference),
        seed: slot.seed,
        repeat: slot.repeat,
        label: verdict.label,
        confidence: verdict.confidence,
        overlap4,
        pseudo_ppl,
        nfe: nfe.count(),
        output: ctx.vocab().decode(out.response()),
    };
    Ok((record, out))
}

/// Resolved config as written to a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
}

/// Result of one run, as written to its directory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub report: RunReport,
    pub summary: Summary,
}

/// Runs the full protocol grid and writes the run directory.
pub fn generate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let ctx = Context::load(cfg)?;
    generate_with(cfg, &ctx, "generate")
}

/// [`generate`] with inputs already loaded.
pub fn generate_with(cfg: &ExperimentConfig, ctx: &Context, command: &str) -> Result<RunOutput> {
    let dir = cfg.out_dir(command);
    let slots = protocol_slots(cfg, ctx.prompts.len());
    let rows = try_map_range(slots.len(), cfg.dispatch, |i| run_slot(cfg, ctx, slots[i]))?;
    let report = RunReport {
        records: rows.iter().map(|(r, _)| r.clone()).collect(),
    };
    let summary = report.summary(cfg.target())?;
    let mut resolved = cfg.clone();
    resolved.prompts = Some(PromptSource::Inline(ctx.prompts.clone()));
    resolved.out = Some(dir.clone());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config: resolved,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&mpath, e))?;
    report.write_csv(dir.join(RECORDS_FILE))?;
    write_summaries(
        dir.join(SUMMARY_FILE),
        &[(command.to_string(), summary.clone())],
    )?;
    let mut samples = Vec::new();
    for (r, _) in &rows {
        let reference = r
            .reference_id
            .map_or_else(|| "-".to_string(), |i| i.to_string());
        let _ = writeln!(
            samples,
            "seed={} prompt={} ref={} repeat={} {}\t{}\t{}",
            r.seed, r.prompt_id, reference, r.repeat, r.label, ctx.prompts[r.prompt_id], r.output
        );
    }
    let spath = dir.join(SAMPLES_FILE);
    fs::write(&spath, samples).map_err(|e| Error::io(&spath, e))?;
    Ok(RunOutput {
        dir,
        manifest,
        report,
        summary,
    })
}

/// Re-runs the config stored in a manifest, writing to `out` (or the
/// manifest's own directory when `None`).
pub fn rerun(manifest: impl AsRef<Path>, out: Option<PathBuf>) -> Result<RunOutput> {
    let m = read_manifest(manifest)?;
    let mut cfg = m.config;
    if out.is_some() {
        cfg.out = out;
    }
    let ctx = Context::load(&cfg)?;
    generate_with(&cfg, &ctx, &m.command)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Hyperparameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Alpha,
    Layers,
    Steps,
    Kernel,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Layers => "layers",
            SweepAxis::Steps => "steps",
            SweepAxis::Kernel => "kernel",
        }
    }

    /// Returns `base` with this axis set to `value`.
    ///
    /// `alpha` scales every steered layer; `layers` takes a `,` or `+`
    /// separated list of layers that all get the base config's first α; `steps` takes a step
    /// spec; `kernel` a positive integer.
    pub fn apply(self, base: &SteerConfig, value: &str) -> Result<SteerConfig> {
        let bad = |what: &str| Error::Config(format!("bad {what} sweep value {value:?}"));
        let mut cfg = base.clone();
        match self {
            SweepAxis::Alpha => {
                let a: f32 = value.trim().parse().map_err(|_| bad("alpha"))?;
                cfg.layers.values_mut().for_each(|x| *x = a);
            }
            SweepAxis::Layers => {
                let alpha = base.layers.values().next().copied().unwrap_or(1.0);
                cfg.layers = value
                    .split([',', '+'])
                    .map(|l| {
                        l.trim()
                            .parse::<usize>()
                            .map(|l| (l, alpha))
                            .map_err(|_| bad("layers"))
                    })
                    .collect::<Result<_>>()?;
            }
            SweepAxis::Steps => cfg.steps = value.parse::<StepSpec>()?,
            SweepAxis::Kernel => cfg.kernel = value.trim().parse().map_err(|_| bad("kernel"))?,
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "layers" => Ok(SweepAxis::Layers),
            "steps" => Ok(SweepAxis::Steps),
            "kernel" => Ok(SweepAxis::Kernel),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?} (alpha | layers | steps | kernel)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub version: String,
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub points: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub points: Vec<(String, RunOutput)>,
}

/// Directory-safe name of a sweep point.
pub fn point_name(axis: SweepAxis, value: &str) -> String {
    let v: String = value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{axis}-{v}")
}

/// Runs [`generate`] once per value with everything else held fixed.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = cfg.steering.as_ref().ok_or_else(|| {
        Error::Config("sweeps vary a steering setting; the config has none".into())
    })?;
    let dir = cfg.out_dir(&format!("sweep-{axis}"));
    let points: Vec<(String, ExperimentConfig)> = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.steering = Some(axis.apply(base, v)?);
            let name = point_name(axis, v);
            c.out = Some(dir.join(&name));
            Ok((name, c))
        })
        .collect::<Result<_>>()?;
    let mut names: Vec<&String> = points.iter().map(|(n, _)| n).collect();
    names.sort();
    names.dedup();
    if names.len() != points.len() {
        return Err(Error::Config("sweep values must be distinct".into()));
    }
    // Fail on any bad point before sampling the first.
    let contexts = points
        .iter()
        .map(|(_, c)| Context::load(c))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(points.len());
    for ((name, c), ctx) in points.iter().zip(&contexts) {
        out.push((name.clone(), generate_with(c, ctx, "generate")?));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rows: Vec<(String, Summary)> = out
        .iter()
        .map(|(n, r)| (n.clone(), r.summary.clone()))
        .collect();
    write_summaries(dir.join(SUMMARY_FILE), &rows)?;
    let sm = SweepManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        axis,
        values: values.to_vec(),
        points: out.iter().map(|(n, _)| n.clone()).collect(),
    };
    let spath = dir.join(SWEEP_FILE);
    fs::write(&spath, serde_json::to_string_pretty(&sm)? + "\n")
        .map_err(|e| Error::io(&spath, e))?;
    Ok(SweepOutput { dir, points: out })
}

/// Aggregates recomputed from raw records.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub runs: Vec<(PathBuf, Summary)>,
    pub joint: Summary,
}

/// Tolerance for comparing stored and recomputed aggregates.
const SUMMARY_TOL: f64 = 1e-9;

/// Re-validates run (or sweep) directories and aggregates their records.
///
/// Every record's label and confidence are re-derived from its output text
/// with the run's grammar, and every stored summary row is recomputed from
/// the records; any disagreement is an integrity error.
pub fn eval(paths: &[PathBuf]) -> Result<EvalOutput> {
    if paths.is_empty() {
        return Err(Error::Config(
            "eval needs at least one run directory".into(),
        ));
    }
    let mut runs = Vec::new();
    let mut all = Vec::new();
    let mut target = None;
    for p in paths {
        let dir = if p.is_file() {
            p.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            p.clone()
        };
        let run_dirs = if dir.join(SWEEP_FILE).is_file() {
            check_sweep(&dir)?
        } else {
            vec![dir]
        };
        for d in run_dirs {
            let (summary, records) = check_run(&d)?;
            if *target.get_or_insert(summary.target) != summary.target {
                return Err(Error::Config(
                    "runs with different target attributes".into(),
                ));
            }
            all.extend(records);
            runs.push((d, summary));
        }
    }
    let joint = Summary::compute(&all, target.unwrap_or(Attribute::Pos))?;
    Ok(EvalOutput { runs, joint })
}

fn check_sweep(dir: &Path) -> Result<Vec<PathBuf>> {
    let spath = dir.join(SWEEP_FILE);
    let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let sm: SweepManifest = serde_json::from_str(&text)?;
    let stored = read_summaries(dir.join(SUMMARY_FILE))?;
    if stored.len() != sm.points.len() {
        return Err(Error::Integrity(format!(
            "{}: {} summary rows for {} sweep points",
            dir.display(),
            stored.len(),
            sm.points.len()
        )));
    }
    let mut out = Vec::new();
    for ((name, row), point) in stored.iter().zip(&sm.points) {
        if name != point {
            return Err(Error::Integrity(format!(
                "{}: summary row {name} out of order",
                dir.display()
            )));
        }
        let d = dir.join(point);
        let (summary, _) = check_run(&d)?;
        if !summary.approx_eq(row, SUMMARY_TOL) {
            return Err(Error::Integrity(format!(
                "{}: sweep summary row {name} disagrees with its records",
                dir.display()
            )));
        }
        out.push(d);
    }
    Ok(out)
}

fn check_run(dir: &Path) -> Result<(Summary, Vec<Record>)> {
    let report = RunReport::read_csv(dir.join(RECORDS_FILE))?;
    let stored = read_summaries(dir.join(SUMMARY_FILE))?;
    let [(_, stored)] = <[_; 1]>::try_from(stored).map_err(|rows: Vec<_>| {
        Error::Integrity(format!(
            "{}: expected one summary row, found {}",
            dir.display(),
            rows.len()
        ))
    })?;
    let mpath = dir.join(MANIFEST_FILE);
    if mpath.is_file() {
        let m = read_manifest(&mpath)?;
        let grammar = match &m.config.grammar {
            Some(g) => Grammar::load(g)?,
            None => Grammar::default(),
        };
        let vocab = grammar.vocab();
        let oracle = Oracle::new(&grammar, &vocab);
        for (i, r) in report.records.iter().enumerate() {
            let seq = TokenSeq::from_parts(&[], &vocab.encode(&r.output)?);
            let v = oracle.classify(&seq);
            if v.label != r.label || (v.confidence - r.confidence).abs() > SUMMARY_TOL {
                return Err(Error::Integrity(format!(
                    "{}: record {} label {} disagrees with its output ({})",
                    dir.display(),
                    i + 1,
                    r.label,
                    v.label
                )));
            }
        }
    }
    let summary = Summary::compute(&report.records, stored.target)?;
    if !summary.approx_eq(&stored, SUMMARY_TOL) {
        return Err(Error::Integrity(format!(
            "{}: stored summary disagrees with the records",
            dir.display()
        )));
    }
    Ok((summary, report.records))
}
