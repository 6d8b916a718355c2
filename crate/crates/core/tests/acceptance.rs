//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The trained default model is cached under the cargo target tmpdir, keyed
//! by grammar, model shape and training settings.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ilrr::diffusion::{NfeCounter, NoiseSchedule, Sampler, SamplerRngs, TokenSampler};
use ilrr::experiment::{
    self, ExperimentConfig, ReferenceSpec, RunOutput, ScheduleSpec, SweepAxis, RECORDS_FILE,
};
use ilrr::metrics::attribute_accuracy;
use ilrr::model::{
    forward, load_checkpoint, paired_forward, save_checkpoint, Checkpoint, DenoiserConfig, Weights,
};
use ilrr::numerics::{Matrix, Rng};
use ilrr::par::Dispatch;
use ilrr::steering::{
    adaptive_downsample, avg_pool_1d, linear_upsample, modulation_wave, PoolNorm, SteerConfig,
    Steering, StepSpec, Waveform,
};
use ilrr::tokens::TokenSeq;
use ilrr::toylab::{
    gradient_check, train_on_grammar, Attribute, Grammar, MaskedExample, TrainConfig,
    DEFAULT_CORPUS_SIZE, DEFAULT_GRAMMAR,
};

/// Steered layers of the 8-block default model.
const MID_LAYERS: [usize; 2] = [6, 7];
const KERNEL: usize = 6;
const STEPS: usize = 16;
const GEN_LEN: usize = 16;
/// Prompts × references × repeats per seed.
const REPEATS: usize = 10;
const SEEDS: [u64; 3] = [0, 1, 2];
const MARGIN_PP: f64 = 30.0;
const MONOTONE_SLACK_PP: f64 = 5.0;
const SPATIAL_GEN_LEN: usize = 32;
const SPATIAL_REF_LEN: usize = 8;

type Check = Result<(bool, String), String>;
type Criterion = (&'static str, &'static str, fn(&Lab) -> Check);

struct Lab {
    root: PathBuf,
    checkpoint: OnceLock<PathBuf>,
    runs: OnceLock<Runs>,
}

struct Runs {
    baseline: RunOutput,
    alpha: Vec<(f64, RunOutput)>,
    kernel: Vec<(usize, RunOutput)>,
    stages: Vec<(String, RunOutput)>,
    spatial: RunOutput,
    spatial_baseline: RunOutput,
    spatial_best_of: RunOutput,
}

impl Lab {
    fn new() -> Self {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = fs::remove_dir_all(root.join("runs"));
        fs::create_dir_all(root.join("runs")).expect("acceptance dir");
        Lab {
            root,
            checkpoint: OnceLock::new(),
            runs: OnceLock::new(),
        }
    }

    fn checkpoint_path(&self) -> &Path {
        self.checkpoint.get_or_init(|| {
            let grammar = Grammar::default();
            let vocab = grammar.vocab();
            let model = DenoiserConfig::desk(vocab.len(), vocab.mask_id());
            let train = TrainConfig::default();
            let mut h = DefaultHasher::new();
            DEFAULT_GRAMMAR.hash(&mut h);
            format!("{model:?}{train:?}{DEFAULT_CORPUS_SIZE}").hash(&mut h);
            let path = self.root.join(format!("default-{:016x}.ckpt", h.finish()));
            if load_checkpoint(&path).is_ok() {
                eprintln!("using cached model {}", path.display());
                return path;
            }
            eprintln!("training the default model ({} steps)", train.steps);
            let t0 = Instant::now();
            let out = train_on_grammar(
                &grammar,
                model,
                DEFAULT_CORPUS_SIZE,
                &train,
                Dispatch::Parallel,
                |s, l| {
                    if s % 500 == 0 {
                        eprintln!(
                            "  step {s:>5} loss {l:.4} ({:.0}s)",
                            t0.elapsed().as_secs_f64()
                        );
                    }
                },
            )
            .expect("training succeeds");
            save_checkpoint(&out.checkpoint, &path).expect("save checkpoint");
            path
        })
    }

    fn model(&self) -> Checkpoint {
        load_checkpoint(self.checkpoint_path()).expect("load checkpoint")
    }

    fn base_config(&self, name: &str) -> ExperimentConfig {
        ExperimentConfig {
            checkpoint: self.checkpoint_path().to_path_buf(),
            references: Some(ReferenceSpec {
                attribute: Attribute::Pos,
                count: 5,
                length: None,
                seed: 0,
            }),
            schedule: ScheduleSpec {
                steps: STEPS,
                gen_len: GEN_LEN,
                ..ScheduleSpec::default()
            },
            seeds: SEEDS.to_vec(),
            repeats: REPEATS,
            pseudo_ppl: false,
            out: Some(self.root.join("runs").join(name)),
            ..ExperimentConfig::default()
        }
    }

    fn steer(&self) -> SteerConfig {
        SteerConfig::standard(MID_LAYERS.iter().map(|&l| (l, 1.0))).with_kernel(KERNEL)
    }

    fn runs(&self) -> &Runs {
        self.runs.get_or_init(|| {
            let t0 = Instant::now();
            let baseline =
                experiment::generate(&self.base_config("baseline")).expect("baseline run");

            let mut cfg = self.base_config("alpha");
            cfg.steering = Some(self.steer());
            let alphas = ["0", "0.4", "0.8", "1.0"].map(String::from);
            let alpha = experiment::sweep(&cfg, SweepAxis::Alpha, &alphas)
                .expect("alpha sweep")
                .points
                .into_iter()
                .zip(&alphas)
                .map(|((_, r), a)| (a.parse().unwrap(), r))
                .collect();

            let mut cfg = self.base_config("kernel");
            cfg.steering = Some(self.steer());
            let kernels = ["1", "4", "6", "8"].map(String::from);
            let kernel = experiment::sweep(&cfg, SweepAxis::Kernel, &kernels)
                .expect("kernel sweep")
                .points
                .into_iter()
                .zip(&kernels)
                .map(|((_, r), k)| (k.parse().unwrap(), r))
                .collect();

            let mut cfg = self.base_config("stages");
            cfg.steering = Some(self.steer());
            let stage_names = ["early-third", "mid-third", "late-third"].map(String::from);
            let stages = experiment::sweep(&cfg, SweepAxis::Steps, &stage_names)
                .expect("stage sweep")
                .points
                .into_iter()
                .zip(&stage_names)
                .map(|((_, r), s)| (s.clone(), r))
                .collect();

            let spatial_cfg = |name: &str| {
                let mut c = self.base_config(name);
                c.schedule.steps = SPATIAL_GEN_LEN;
                c.schedule.gen_len = SPATIAL_GEN_LEN;
                c.references.as_mut().unwrap().length = Some(SPATIAL_REF_LEN);
                c
            };
            let mut cfg = spatial_cfg("spatial");
            cfg.steering = Some(
                SteerConfig::spatial(MID_LAYERS.iter().map(|&l| (l, 1.0))).with_kernel(KERNEL),
            );
            let spatial = experiment::generate(&cfg).expect("spatial run");
            let spatial_baseline =
                experiment::generate(&spatial_cfg("spatial-baseline")).expect("spatial baseline");
            let mut cfg = spatial_cfg("spatial-best-of-2");
            cfg.best_of = 2;
            let spatial_best_of = experiment::generate(&cfg).expect("best-of-2 run");
            eprintln!("generation runs took {:.0}s", t0.elapsed().as_secs_f64());
            Runs {
                baseline,
                alpha,
                kernel,
                stages,
                spatial,
                spatial_baseline,
                spatial_best_of,
            }
        })
    }
}

fn per_seed(run: &RunOutput) -> String {
    let acc = attribute_accuracy(&run.report.records, Attribute::Pos).expect("accuracy");
    acc.per_seed
        .values()
        .map(|a| format!("{a:.1}"))
        .collect::<Vec<_>>()
        .join("/")
}

fn c1_nfe(lab: &Lab) -> Check {
    let ckpt = lab.model();
    let w = &ckpt.weights;
    let sched = NoiseSchedule::linear(50).map_err(|e| e.to_string())?;
    let prompt = ckpt.vocab.encode("my review").map_err(|e| e.to_string())?;
    let reference = TokenSeq::from_parts(&prompt, &[1; 50]);
    let mut counts = Vec::new();
    for spec in [StepSpec::All, "first-half".parse().unwrap()] {
        let steering = Steering::new(&lab.steer().with_steps(spec), w.config.num_layers, 50)
            .map_err(|e| e.to_string())?;
        let s = Sampler::new(w, sched).with_steering(&steering, &reference);
        let (_, nfe) = s
            .sample(&prompt, 50, &mut SamplerRngs::new(0, 0))
            .map_err(|e| e.to_string())?;
        counts.push(nfe.count());
    }
    Ok((
        counts == [100, 75],
        format!("full T_s {} passes, first half {}", counts[0], counts[1]),
    ))
}

fn c2_zero_identity(lab: &Lab) -> Check {
    let ckpt = lab.model();
    let w = &ckpt.weights;
    let mut rng = Rng::new(2, 0);
    let mut kinds = BTreeMap::new();
    for i in 0..20u64 {
        let gen_len = 4 + rng.below(21);
        let steps = 1 + rng.below(gen_len);
        let sched = NoiseSchedule::linear(steps).map_err(|e| e.to_string())?;
        let layers: Vec<usize> = (1..=8).filter(|_| rng.bernoulli(0.4)).collect();
        let layers = if layers.is_empty() {
            vec![1 + rng.below(8)]
        } else {
            layers
        };
        let kind = ["alpha=0", "empty L_s", "empty T_s"][i as usize % 3];
        let mut cfg =
            SteerConfig::standard(layers.iter().map(|&l| (l, 1.0))).with_kernel(1 + rng.below(9));
        match kind {
            "alpha=0" => cfg.layers.values_mut().for_each(|a| *a = 0.0),
            "empty L_s" => cfg.layers.clear(),
            _ => cfg.steps = StepSpec::List(Default::default()),
        }
        let steering = Steering::new(&cfg, 8, steps).map_err(|e| e.to_string())?;
        let prompt = ckpt.vocab.encode("our visit").map_err(|e| e.to_string())?;
        let reference = TokenSeq::from_parts(
            &prompt,
            &(0..gen_len)
                .map(|_| 1 + rng.below(30) as u32)
                .collect::<Vec<_>>(),
        );
        let plain = Sampler::new(w, sched).with_tokens(TokenSampler::Temperature(1.0));
        let steered = plain.with_steering(&steering, &reference);
        let a = plain
            .sample(&prompt, gen_len, &mut SamplerRngs::new(i, 7))
            .map_err(|e| e.to_string())?
            .0;
        let b = steered
            .sample(&prompt, gen_len, &mut SamplerRngs::new(i, 7))
            .map_err(|e| e.to_string())?
            .0;
        if a != b {
            return Ok((false, format!("config {i} ({kind}) diverged")));
        }
        *kinds.entry(kind).or_insert(0) += 1;
    }
    Ok((true, format!("20/20 identical {kinds:?}")))
}

fn c3_self_reference(lab: &Lab) -> Check {
    let ckpt = lab.model();
    let w = &ckpt.weights;
    let steering = Steering::new(
        &SteerConfig::standard((1..=w.config.num_layers).map(|l| (l, 1.0))).with_kernel(KERNEL),
        w.config.num_layers,
        STEPS,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = Rng::new(3, 0);
    let mask = w.config.mask_token_id;
    let mut worst = 0.0f32;
    for _ in 0..10 {
        let prompt = ckpt
            .vocab
            .encode("the verdict")
            .map_err(|e| e.to_string())?;
        let response: Vec<u32> = (0..GEN_LEN)
            .map(|_| {
                if rng.bernoulli(0.5) {
                    mask
                } else {
                    1 + rng.below(w.config.vocab_size - 1) as u32
                }
            })
            .collect();
        let seq = TokenSeq::from_parts(&prompt, &response);
        let plain = forward(w, &seq).map_err(|e| e.to_string())?;
        let (steered, _) = paired_forward(w, &seq, &seq, &steering, 1, &mut NfeCounter::new())
            .map_err(|e| e.to_string())?;
        for k in 1..=w.config.num_layers {
            worst = worst.max(steered.layer(k).max_abs_diff(plain.layer(k)));
        }
    }
    Ok((
        worst < 1e-6,
        format!("max |delta| {worst:.2e} over 10 inputs, all layers hooked"),
    ))
}

fn random_matrix(rng: &mut Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
}

fn c4_pooling(_: &Lab) -> Check {
    let mut rng = Rng::new(4, 0);
    let mut worst = 0.0f32;
    for t in 0..1000 {
        let (n, k, d) = (1 + rng.below(16), 1 + rng.below(9), 1 + rng.below(4));
        let norm = if t % 2 == 0 {
            PoolNorm::Count
        } else {
            PoolNorm::Kernel
        };
        let h = random_matrix(&mut rng, n, d);
        let got = avg_pool_1d(&h, k, norm).map_err(|e| e.to_string())?;
        for i in 0..n {
            let window: Vec<usize> = (0..n).filter(|&j| i.abs_diff(j) <= k / 2).collect();
            let div = match norm {
                PoolNorm::Count => window.len() as f32,
                PoolNorm::Kernel => k as f32,
            };
            for c in 0..d {
                let want = window.iter().map(|&j| h.get(j, c)).sum::<f32>() / div;
                worst = worst.max((got.get(i, c) - want).abs());
            }
        }
    }
    let mut resample = 0.0f64;
    for n in 1..=16 {
        let h = random_matrix(&mut rng, n, 3);
        for m in 1..=n {
            let got = adaptive_downsample(&h, m).map_err(|e| e.to_string())?;
            for i in 0..m {
                let (a, b) = (i * n / m, (i + 1) * n / m);
                for c in 0..3 {
                    let want = (a..b).map(|j| h.get(j, c) as f64).sum::<f64>() / (b - a) as f64;
                    resample = resample.max((got.get(i, c) as f64 - want).abs());
                }
            }
        }
        for m in n..=16 {
            let got = linear_upsample(&h, m).map_err(|e| e.to_string())?;
            for j in 0..m {
                let x = if m == 1 || n == 1 {
                    0.0
                } else {
                    j as f64 * (n - 1) as f64 / (m - 1) as f64
                };
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                for c in 0..3 {
                    let want = h.get(i0, c) as f64
                        + (x - i0 as f64) * (h.get(i1, c) as f64 - h.get(i0, c) as f64);
                    resample = resample.max((got.get(j, c) as f64 - want).abs());
                }
            }
        }
    }
    Ok((
        worst <= 1e-6 && resample <= 1e-5,
        format!("pooling max err {worst:.1e} over 1000 tensors, resampling max err {resample:.1e}"),
    ))
}

fn c5_wave(_: &Lab) -> Check {
    let mut rng = Rng::new(5, 0);
    for _ in 0..100 {
        let alpha = rng.uniform() * 2.0;
        let f = 0.5 + rng.uniform_f64() * 15.0;
        let n = 1 + rng.below(1024);
        let w = modulation_wave(alpha, f, n, Waveform::Cosine);
        if w[0] != alpha || w.iter().any(|&v| !(0.0..=alpha).contains(&v)) {
            return Ok((
                false,
                format!("bounds violated for alpha={alpha} f={f} N={n}"),
            ));
        }
    }
    let w = modulation_wave(1.0, 7.0, 512, Waveform::Cosine);
    let n = w.len();
    let maxima = (0..n)
        .filter(|&i| w[i] > w[(i + n - 1) % n] && w[i] >= w[(i + 1) % n])
        .count();
    Ok((
        maxima == 7,
        format!("100 random waves in [0, alpha] with w_0 = alpha; f=7 N=512 has {maxima} maxima"),
    ))
}

fn c6_gradients(_: &Lab) -> Check {
    let mut worst = (String::new(), 0.0f64);
    for tied in [false, true] {
        let cfg = DenoiserConfig {
            vocab_size: 11,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 10,
            mask_token_id: 0,
            ffn_dim: 16,
            tied_head: tied,
        };
        let mut rng = Rng::new(6, tied as u64);
        let mut w = Weights::init(cfg, &mut rng).map_err(|e| e.to_string())?;
        for (_, s) in w.sections_mut() {
            s.iter_mut().for_each(|v| *v += 0.3 * rng.normal());
        }
        let examples: Vec<MaskedExample> = (0..4)
            .map(|i| {
                let ids: Vec<u32> = (0..6 + i).map(|_| 1 + rng.below(10) as u32).collect();
                MaskedExample::corrupt(&TokenSeq::new(ids, 2).unwrap(), 0.5, 0, &mut rng)
            })
            .collect();
        for (name, err) in gradient_check(&w.cast(), &examples, 1e-5).map_err(|e| e.to_string())? {
            if err > worst.1 {
                worst = (format!("{name}{}", if tied { " (tied)" } else { "" }), err);
            }
        }
    }
    Ok((
        worst.1 < 1e-3,
        format!("worst relative error {:.1e} at {}", worst.1, worst.0),
    ))
}

fn c7_efficacy(lab: &Lab) -> Check {
    let runs = lab.runs();
    let base = runs.baseline.summary.accuracy_mean;
    let accs: Vec<f64> = runs
        .alpha
        .iter()
        .map(|(_, r)| r.summary.accuracy_mean)
        .collect();
    let top = *accs.last().unwrap();
    let monotone = accs.windows(2).all(|p| p[1] >= p[0] - MONOTONE_SLACK_PP);
    let n = runs.alpha.last().unwrap().1.summary.records;
    let curve: Vec<String> = runs
        .alpha
        .iter()
        .map(|(a, r)| format!("{a}:{:.1}", r.summary.accuracy_mean))
        .collect();
    Ok((
        top - base >= MARGIN_PP && monotone,
        format!(
            "baseline {base:.1}% [{}], alpha=1 {top:.1}% [{}] (+{:.1}pp, {n} gens); curve {}",
            per_seed(&runs.baseline),
            per_seed(&runs.alpha.last().unwrap().1),
            top - base,
            curve.join(" ")
        ),
    ))
}

fn c8_copying(lab: &Lab) -> Check {
    let runs = lab.runs();
    let ov: Vec<(usize, f64)> = runs
        .kernel
        .iter()
        .map(|(k, r)| (*k, r.summary.overlap4_mean))
        .collect();
    let k1 = ov.iter().find(|(k, _)| *k == 1).map(|p| p.1).unwrap();
    let ok = k1 > 0.0
        && ov
            .iter()
            .filter(|(k, _)| *k >= 4)
            .all(|&(_, o)| 2.0 * o <= k1);
    let text: Vec<String> = ov.iter().map(|(k, o)| format!("k={k}:{o:.2}%")).collect();
    Ok((ok, format!("mean 4-gram overlap {}", text.join(" "))))
}

fn c9_stages(lab: &Lab) -> Check {
    let runs = lab.runs();
    let get = |name: &str| {
        runs.stages
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .unwrap()
    };
    let (early, mid, late) = (get("early-third"), get("mid-third"), get("late-third"));
    Ok((
        early.summary.accuracy_mean >= late.summary.accuracy_mean,
        format!(
            "early {:.1}% [{}], mid {:.1}% [{}], late {:.1}% [{}]",
            early.summary.accuracy_mean,
            per_seed(early),
            mid.summary.accuracy_mean,
            per_seed(mid),
            late.summary.accuracy_mean,
            per_seed(late)
        ),
    ))
}

fn c10_spatial(lab: &Lab) -> Check {
    let runs = lab.runs();
    let s = &runs.spatial.summary;
    let b = &runs.spatial_baseline.summary;
    let bo = &runs.spatial_best_of.summary;
    Ok((
        s.accuracy_mean > b.accuracy_mean && s.accuracy_mean > bo.accuracy_mean,
        format!(
            "refs {SPATIAL_REF_LEN} vs gen {SPATIAL_GEN_LEN}: spatial {:.1}% (NFE {}), baseline {:.1}% (NFE {}), best-of-2 {:.1}% (NFE {})",
            s.accuracy_mean, s.nfe_mean, b.accuracy_mean, b.nfe_mean, bo.accuracy_mean, bo.nfe_mean
        ),
    ))
}

fn c11_reproducible(lab: &Lab) -> Check {
    let runs = lab.runs();
    let mut checked = Vec::new();
    for (name, run) in [
        ("alpha-1.0", &runs.alpha.last().unwrap().1),
        ("spatial", &runs.spatial),
    ] {
        let out = lab.root.join("runs").join(format!("rerun-{name}"));
        let again = experiment::rerun(run.dir.join("manifest.json"), Some(out))
            .map_err(|e| e.to_string())?;
        let a = fs::read(run.dir.join(RECORDS_FILE)).map_err(|e| e.to_string())?;
        let b = fs::read(again.dir.join(RECORDS_FILE)).map_err(|e| e.to_string())?;
        if a != b {
            return Ok((false, format!("{name}: rerun records differ")));
        }
        checked.push(format!("{name} ({} bytes)", a.len()));
    }
    Ok((
        true,
        format!("byte-identical reruns: {}", checked.join(", ")),
    ))
}

fn baseline_near_corpus_rate(lab: &Lab) -> Check {
    let acc = lab.runs().baseline.summary.accuracy_mean;
    Ok((
        (acc - 50.0).abs() <= 10.0,
        format!("unsteered POS rate {acc:.1}% vs corpus 50.0%"),
    ))
}

fn main() {
    let lab = Lab::new();
    let criteria: [Criterion; 11] = [
        ("1", "NFE accounting", c1_nfe),
        ("2", "zero-steering identity", c2_zero_identity),
        ("3", "self-reference fixed point", c3_self_reference),
        ("4", "pooling and resampling oracles", c4_pooling),
        ("5", "modulation bounds", c5_wave),
        ("6", "gradient check", c6_gradients),
        ("7", "steering efficacy", c7_efficacy),
        ("8", "copying control", c8_copying),
        ("9", "stage analysis", c9_stages),
        ("10", "spatial mode efficacy", c10_spatial),
        ("11", "reproducibility", c11_reproducible),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        let (pass, detail) = match check(&lab) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {id:>2} {} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(id);
        }
    }
    let (pass, detail) = baseline_near_corpus_rate(&lab).unwrap_or_else(|e| (false, e));
    println!(
        "note         {} unsteered baseline: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
