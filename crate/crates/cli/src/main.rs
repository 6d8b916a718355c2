//! `ilrr`: train the toy denoiser, generate with or without steering, run
//! ablation sweeps and re-validate reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ilrr::diffusion::{MaskCurve, TokenSampler};
use ilrr::experiment::{
    self, ExperimentConfig, PromptSource, ScheduleSpec, SweepAxis, OUT_DIR_ENV,
};
use ilrr::metrics::Summary;
use ilrr::model::{save_checkpoint, DenoiserConfig};
use ilrr::par::Dispatch;
use ilrr::steering::{parse_layer_map, PoolNorm, SteerConfig, SteerMode, SteeringSpan, StepSpec};
use ilrr::toylab::{
    gen_corpus, train_on_grammar, write_corpus, Attribute, Grammar, TrainConfig,
    DEFAULT_CORPUS_SIZE,
};
use ilrr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ilrr",
    version,
    about = "Steer a toy masked diffusion model with reference activations"
)]
struct Cli {
    /// Run jobs on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy denoiser on a grammar corpus.
    Train(TrainArgs),
    /// Run the generation protocol and write a report.
    Generate(GenArgs),
    /// Repeat `generate` over values of one steering setting.
    Sweep(SweepArgs),
    /// Recompute aggregates from run directories and check stored ones.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Checkpoint path; the loss log goes next to it as `<stem>.loss.csv`.
    #[arg(long, env = OUT_DIR_ENV, value_parser = out_checkpoint)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_CORPUS_SIZE)]
    corpus_size: usize,
    /// Also write the training corpus here.
    #[arg(long)]
    corpus_out: Option<PathBuf>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    tied_head: bool,
}

fn out_checkpoint(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    Ok(if p.extension().is_some() {
        p
    } else {
        p.join("model.ckpt")
    })
}

#[derive(Args, Clone)]
struct GenArgs {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Prompt text; repeat for several.
    #[arg(long)]
    prompt: Vec<String>,
    /// File with one prompt per line.
    #[arg(long, conflicts_with = "prompt")]
    prompts_file: Option<PathBuf>,
    /// Attribute of the steering references.
    #[arg(long)]
    reference_attr: Option<Attribute>,
    #[arg(long)]
    ref_count: Option<usize>,
    /// Response length of each reference (defaults to --gen-len).
    #[arg(long)]
    ref_len: Option<usize>,
    #[arg(long)]
    ref_seed: Option<u64>,
    /// Steering scale for every steered layer.
    #[arg(long)]
    alpha: Option<f32>,
    /// Steered layers: `4,5` (scale from --alpha) or `4:1.0,5:0.8`.
    #[arg(long)]
    layers: Option<String>,
    /// Steered steps: `all`, a stage name, `a..b`, `a..=b` or `1,2,3`.
    #[arg(long)]
    steps_set: Option<StepSpec>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    mode: Option<SteerMode>,
    #[arg(long)]
    wave_freq: Option<f64>,
    /// Divide pooled sums by `k` instead of the window's size.
    #[arg(long)]
    pool_by_k: bool,
    /// Steer prompt positions as well as the response.
    #[arg(long)]
    steer_prompt: bool,
    /// Disable steering even if the config file sets it.
    #[arg(long, conflicts_with_all = ["alpha", "layers"])]
    no_steering: bool,
    #[arg(long)]
    gen_len: Option<usize>,
    /// Denoising steps.
    #[arg(long = "T")]
    total_steps: Option<usize>,
    #[arg(long)]
    curve: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// `greedy`, `temperature:T` or `topk:K[:T]`.
    #[arg(long)]
    sampler: Option<TokenSampler>,
    /// Unsteered best-of-n reranking by the oracle.
    #[arg(long)]
    best_of: Option<usize>,
    /// Skip pseudo-perplexity scoring.
    #[arg(long)]
    no_ppl: bool,
    /// Run directory (default `$ILRR_OUT_DIR/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    gen: GenArgs,
    #[arg(long)]
    axis: SweepAxis,
    /// Values separated by `;`, or by `,` when no `;` appears. Layer sets
    /// join layers with `+`.
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Run or sweep directories (or their records.csv files).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

impl GenArgs {
    fn resolve(&self, dispatch: Dispatch) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = p.clone();
        }
        if let Some(g) = &self.grammar {
            cfg.grammar = Some(g.clone());
        }
        if !self.prompt.is_empty() {
            cfg.prompts = Some(PromptSource::Inline(self.prompt.clone()));
        }
        if let Some(f) = &self.prompts_file {
            cfg.prompts = Some(PromptSource::File { file: f.clone() });
        }
        if self.reference_attr.is_some()
            || self.ref_count.is_some()
            || self.ref_len.is_some()
            || self.ref_seed.is_some()
        {
            if self.reference_attr.is_none() && cfg.references.is_none() {
                return Err(Error::Config(
                    "reference options need --reference-attr".into(),
                ));
            }
            let mut r = cfg.references.take().unwrap_or_default();
            r.attribute = self.reference_attr.unwrap_or(r.attribute);
            r.count = self.ref_count.unwrap_or(r.count);
            r.length = self.ref_len.or(r.length);
            r.seed = self.ref_seed.unwrap_or(r.seed);
            cfg.references = Some(r);
        }
        self.apply_steering(&mut cfg)?;
        let mut sched: ScheduleSpec = cfg.schedule;
        if let Some(n) = self.gen_len {
            sched.gen_len = n;
            if self.total_steps.is_none() && self.config.is_none() {
                sched.steps = n;
            }
        }
        if let Some(t) = self.total_steps {
            sched.steps = t;
        }
        if let Some(c) = &self.curve {
            sched.curve = serde_json::from_value::<MaskCurve>(serde_json::Value::String(c.clone()))
                .map_err(|_| {
                    Error::Config(format!("unknown mask curve {c:?} (linear | cosine)"))
                })?;
        }
        cfg.schedule = sched;
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(s) = self.sampler {
            cfg.sampler = s;
        }
        if let Some(n) = self.best_of {
            cfg.best_of = n;
        }
        if self.no_ppl {
            cfg.pseudo_ppl = false;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.dispatch = dispatch;
        Ok(cfg)
    }

    fn apply_steering(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if self.no_steering {
            cfg.steering = None;
            return Ok(());
        }
        let touched = self.alpha.is_some()
            || self.layers.is_some()
            || self.steps_set.is_some()
            || self.kernel.is_some()
            || self.mode.is_some()
            || self.wave_freq.is_some()
            || self.pool_by_k
            || self.steer_prompt;
        if !touched {
            return Ok(());
        }
        let mut s = match cfg.steering.take() {
            Some(s) => s,
            None => {
                if self.layers.is_none() {
                    return Err(Error::Config("steering options need --layers".into()));
                }
                SteerConfig::standard([])
            }
        };
        if let Some(l) = &self.layers {
            s.layers = if l.contains(':') {
                parse_layer_map(l)?
            } else {
                let alpha = self.alpha.unwrap_or(1.0);
                l.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .map(|k| (k, alpha))
                            .map_err(|_| Error::Config(format!("bad layer list {l:?}")))
                    })
                    .collect::<Result<_>>()?
            };
        }
        if let Some(a) = self.alpha {
            s.layers.values_mut().for_each(|x| *x = a);
        }
        if let Some(t) = &self.steps_set {
            s.steps = t.clone();
        }
        if let Some(k) = self.kernel {
            s.kernel = k;
        }
        if let Some(m) = self.mode {
            s.mode = m;
        }
        if let Some(f) = self.wave_freq {
            s.wave_freq = f;
        }
        if self.pool_by_k {
            s.pool_norm = PoolNorm::Kernel;
        }
        if self.steer_prompt {
            s.span = SteeringSpan::Full;
        }
        cfg.steering = Some(s);
        Ok(())
    }
}

fn split_values(s: &str) -> Vec<String> {
    let sep = if s.contains(';') { ';' } else { ',' };
    s.split(sep)
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. }
        | Error::Parse(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Checkpoint(_) => 3,
        Error::Integrity(_) => 4,
        Error::Diverged { .. } => 5,
        _ => 1,
    }
}

fn print_summary(label: &str, s: &Summary) {
    let ppl = s
        .pseudo_ppl_mean
        .map_or_else(|| "-".to_string(), |p| format!("{p:.3}"));
    println!(
        "{label}: {} accuracy {:.2} ± {:.2} over {} seeds ({} records), overlap4 {:.2}, pseudo-ppl {ppl}, nfe {:.1}",
        s.target, s.accuracy_mean, s.accuracy_std, s.seeds, s.records, s.overlap4_mean, s.nfe_mean
    );
}

fn loss_log_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    ckpt.with_file_name(format!("{stem}.loss.csv"))
}

fn create_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn cmd_train(a: &TrainArgs, dispatch: Dispatch) -> Result<()> {
    let mut tc = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text)?
        }
        None => TrainConfig::default(),
    };
    tc.steps = a.steps.unwrap_or(tc.steps);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.warmup = a.warmup.unwrap_or(tc.warmup);
    tc.seed = a.seed.unwrap_or(tc.seed);
    let grammar = match &a.grammar {
        Some(p) => Grammar::load(p)?,
        None => Grammar::default(),
    };
    let vocab = grammar.vocab();
    let mut mc = DenoiserConfig::desk(vocab.len(), vocab.mask_id());
    mc.hidden_dim = a.hidden_dim.unwrap_or(mc.hidden_dim);
    mc.num_layers = a.num_layers.unwrap_or(mc.num_layers);
    mc.num_heads = a.heads.unwrap_or(mc.num_heads);
    mc.ffn_dim = a.ffn_dim.unwrap_or(mc.ffn_dim);
    mc.tied_head |= a.tied_head;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| experiment::default_out_root().join("model.ckpt"));
    if let Some(p) = &a.corpus_out {
        let mut rng = ilrr::numerics::Rng::for_stream(tc.seed, ilrr::numerics::Stream::Corpus, 0);
        create_parent(p)?;
        write_corpus(
            p,
            &gen_corpus(&grammar, &vocab, a.corpus_size, &mut rng)?,
            &vocab,
        )?;
    }
    let every = (tc.steps / 20).max(1);
    let trained = train_on_grammar(&grammar, mc, a.corpus_size, &tc, dispatch, |s, l| {
        if s % every == 0 {
            info!("step {s}: loss {l:.4}");
        }
    });
    let trained = match trained {
        Err(Error::Diverged {
            step,
            loss,
            last_good,
        }) => {
            let salvage = out.with_extension("last-good.ckpt");
            create_parent(&salvage)?;
            save_checkpoint(&last_good, &salvage)?;
            eprintln!("last finite weights written to {}", salvage.display());
            return Err(Error::Diverged {
                step,
                loss,
                last_good,
            });
        }
        r => r?,
    };
    create_parent(&out)?;
    save_checkpoint(&trained.checkpoint, &out)?;
    let log = loss_log_path(&out);
    let mut w = csv::Writer::from_path(&log)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in trained.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: log.clone(),
        source: e,
    })?;
    println!(
        "checkpoint {} (final loss {:.4}), loss log {}",
        out.display(),
        trained.losses.last().copied().unwrap_or(f32::NAN),
        log.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let dispatch = if cli.sequential {
        Dispatch::Sequential
    } else {
        Dispatch::Parallel
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a, dispatch),
        Command::Generate(a) => {
            let cfg = a.resolve(dispatch)?;
            let out = experiment::generate(&cfg)?;
            print_summary("generate", &out.summary);
            println!("run written to {}", out.dir.display());
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = a.gen.resolve(dispatch)?;
            let values = split_values(&a.values);
            let out = experiment::sweep(&cfg, a.axis, &values)?;
            for (name, run) in &out.points {
                print_summary(name, &run.summary);
            }
            println!("sweep written to {}", out.dir.display());
            Ok(())
        }
        Command::Eval(a) => {
            let out = experiment::eval(&a.runs)?;
            for (dir, s) in &out.runs {
                print_summary(&dir.display().to_string(), s);
            }
            print_summary("joint", &out.joint);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
