use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use ilrr::diffusion::{best_of_n, NfeCounter, NoiseSchedule, Sampler, SamplerRngs, TokenSampler};
use ilrr::model::{forward, DenoiserConfig, FnHook, InterventionHook, Weights};
use ilrr::numerics::{softmax_in_place, Rng};
use ilrr::par::Dispatch;
use ilrr::steering::{SteerConfig, SteerMode, Steering, StepSpec};
use ilrr::tokens::TokenSeq;
use ilrr::Error;

const V: usize = 12;
const MASK: u32 = 0;

fn model(seed: u64) -> Weights {
    let cfg = DenoiserConfig {
        vocab_size: V,
        hidden_dim: 16,
        num_layers: 3,
        num_heads: 2,
        max_seq_len: 64,
        mask_token_id: MASK,
        ffn_dim: 32,
        tied_head: false,
    };
    Weights::init(cfg, &mut Rng::new(seed, 0)).unwrap()
}

fn reference(len: usize) -> TokenSeq {
    TokenSeq::from_parts(
        &[3, 4],
        &(0..len)
            .map(|i| 1 + (i % (V - 1)) as u32)
            .collect::<Vec<_>>(),
    )
}

#[test]
fn nfe_is_t_plus_steered_steps() {
    let w = model(1);
    let sched = NoiseSchedule::linear(50).unwrap();
    let r = reference(50);
    let plain = Sampler::new(&w, sched);
    let (_, nfe) = plain
        .sample(&[3, 4], 50, &mut SamplerRngs::new(0, 0))
        .unwrap();
    assert_eq!(nfe.count(), 50);
    for (spec, expected) in [
        (StepSpec::All, 100),
        ("first-half".parse().unwrap(), 75),
        (StepSpec::List(BTreeSet::new()), 50),
    ] {
        let st = Steering::new(&SteerConfig::standard([(2, 1.0)]).with_steps(spec), 3, 50).unwrap();
        let (_, nfe) = plain
            .with_steering(&st, &r)
            .sample(&[3, 4], 50, &mut SamplerRngs::new(0, 0))
            .unwrap();
        assert_eq!(nfe.count(), expected);
    }
}

#[test]
fn same_seed_same_output_and_different_seeds_differ() {
    let w = model(2);
    let s = Sampler::new(&w, NoiseSchedule::linear(8).unwrap())
        .with_tokens(TokenSampler::Temperature(1.0));
    let a = s.sample(&[5], 16, &mut SamplerRngs::new(7, 3)).unwrap().0;
    let b = s.sample(&[5], 16, &mut SamplerRngs::new(7, 3)).unwrap().0;
    assert_eq!(a, b);
    let outs: BTreeSet<_> = (0..8)
        .map(|i| {
            s.sample(&[5], 16, &mut SamplerRngs::new(7, i))
                .unwrap()
                .0
                .ids()
                .to_vec()
        })
        .collect();
    assert!(outs.len() > 1);
}

#[test]
fn single_step_commits_everything() {
    let w = model(3);
    let s = Sampler::new(&w, NoiseSchedule::linear(1).unwrap());
    let (x, nfe) = s.sample(&[1, 2], 10, &mut SamplerRngs::new(0, 0)).unwrap();
    assert_eq!(x.count_masked(MASK), 0);
    assert_eq!(x.prompt(), &[1, 2]);
    assert_eq!(nfe.count(), 1);
}

#[test]
fn unmasking_is_monotone_and_follows_the_plan() {
    let w = model(4);
    let sched = NoiseSchedule::linear(6).unwrap();
    let s = Sampler::new(&w, sched).with_tokens(TokenSampler::Temperature(0.7));
    let gen_len = 14;
    let mut x = TokenSeq::masked(&[7, 8, 9], gen_len, MASK);
    let mut rngs = SamplerRngs::new(1, 1);
    let mut nfe = NfeCounter::new();
    for t in (1..=6).rev() {
        let step = sched.step_index(t);
        let next = s.reverse_step(&x, t, &mut rngs, &mut nfe).unwrap();
        assert_eq!(next.prompt(), x.prompt());
        for (a, b) in x.ids().iter().zip(next.ids()) {
            if *a != MASK {
                assert_eq!(a, b, "committed tokens never change");
            }
        }
        let committed = x.count_masked(MASK) - next.count_masked(MASK);
        assert_eq!(committed, sched.commits_at(step, gen_len));
        x = next;
    }
    assert_eq!(x.count_masked(MASK), 0);
    // 14 over 6 steps: 3, 3, 2, 2, 2, 2.
    assert_eq!(
        (1..=6).map(|s| sched.commits_at(s, 14)).collect::<Vec<_>>(),
        [3, 3, 2, 2, 2, 2]
    );
}

#[test]
fn fully_unmasked_input_costs_no_forward_pass() {
    let w = model(5);
    let s = Sampler::new(&w, NoiseSchedule::linear(4).unwrap());
    let x = TokenSeq::from_parts(&[1], &[2, 3, 4]);
    let mut nfe = NfeCounter::new();
    let y = s
        .reverse_step(&x, 2, &mut SamplerRngs::new(0, 0), &mut nfe)
        .unwrap();
    assert_eq!((y, nfe.count()), (x, 0));
}

#[test]
fn confidence_order_commits_most_confident_position() {
    let w = model(6);
    let sched = NoiseSchedule::linear(4).unwrap();
    let s = Sampler::new(&w, sched);
    let x = TokenSeq::masked(&[1, 2], 4, MASK);
    let logits = forward(&w, &x).unwrap().logits;
    let conf = |pos: usize| {
        let mut r = logits.row(pos).to_vec();
        r[MASK as usize] = f32::NEG_INFINITY;
        softmax_in_place(&mut r);
        r.iter().fold(0.0f32, |m, &v| m.max(v))
    };
    let best = (2..6).fold(2, |b, p| if conf(p) > conf(b) { p } else { b });
    let mut nfe = NfeCounter::new();
    let y = s
        .reverse_step(&x, 4, &mut SamplerRngs::new(0, 0), &mut nfe)
        .unwrap();
    let committed: Vec<usize> = (2..6).filter(|&p| y.ids()[p] != MASK).collect();
    assert_eq!(committed, [best]);
}

#[test]
fn temperature_one_matches_the_softmax() {
    let w = model(7);
    let s = Sampler::new(&w, NoiseSchedule::linear(1).unwrap())
        .with_tokens(TokenSampler::Temperature(1.0));
    let x = TokenSeq::masked(&[1, 2], 1, MASK);
    let mut p = forward(&w, &x).unwrap().logits.row(2).to_vec();
    p[MASK as usize] = f32::NEG_INFINITY;
    softmax_in_place(&mut p);
    let n = 20_000;
    let mut counts = [0usize; V];
    for i in 0..n {
        let (y, _) = s.sample(&[1, 2], 1, &mut SamplerRngs::new(11, i)).unwrap();
        counts[y.ids()[2] as usize] += 1;
    }
    assert_eq!(counts[MASK as usize], 0);
    for (c, q) in counts.iter().zip(&p) {
        let f = *c as f64 / n as f64;
        let sd = (*q as f64 * (1.0 - *q as f64) / n as f64).sqrt();
        assert!(
            (f - *q as f64).abs() < 5.0 * sd + 1e-3,
            "freq {f} vs prob {q}"
        );
    }
}

#[test]
fn zero_alpha_and_inactive_steering_are_identities() {
    let w = model(8);
    let sched = NoiseSchedule::linear(10).unwrap();
    let r = reference(10);
    let base = Sampler::new(&w, sched).with_tokens(TokenSampler::Temperature(1.0));
    let plain = base
        .sample(&[3, 4], 10, &mut SamplerRngs::new(2, 2))
        .unwrap()
        .0;
    let configs = [
        SteerConfig::standard([(1, 0.0), (3, 0.0)]),
        SteerConfig::standard([]),
        SteerConfig::standard([(2, 1.0)]).with_steps(StepSpec::List(BTreeSet::new())),
        SteerConfig::spatial([(2, 0.0)]),
    ];
    for c in configs {
        let st = Steering::new(&c, 3, 10).unwrap();
        let out = base
            .with_steering(&st, &r)
            .sample(&[3, 4], 10, &mut SamplerRngs::new(2, 2))
            .unwrap()
            .0;
        assert_eq!(out, plain, "{c:?}");
    }
}

#[test]
fn steering_errors_surface_before_sampling() {
    let w = model(9);
    let s = Sampler::new(&w, NoiseSchedule::linear(4).unwrap());
    let st = Steering::new(&SteerConfig::standard([(1, 1.0)]), 3, 4).unwrap();
    let short = reference(3);
    let err = s
        .with_steering(&st, &short)
        .sample(&[3, 4], 8, &mut SamplerRngs::new(0, 0));
    assert!(matches!(err, Err(Error::Contract(_))));
    let no_ref = Sampler {
        steering: Some(&st),
        ..Sampler::new(&w, NoiseSchedule::linear(4).unwrap())
    };
    assert!(no_ref
        .sample(&[3, 4], 8, &mut SamplerRngs::new(0, 0))
        .is_err());
    assert!(s.sample(&[MASK], 4, &mut SamplerRngs::new(0, 0)).is_err());
    assert!(s.sample(&[1], 64, &mut SamplerRngs::new(0, 0)).is_err());
}

#[test]
fn hooks_fire_only_at_configured_layers_and_steps() {
    let w = model(10);
    let sched = NoiseSchedule::linear(6).unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let hooks: Vec<Box<dyn InterventionHook>> = [1usize, 3]
        .into_iter()
        .map(|layer| {
            let log = Arc::clone(&log);
            Box::new(FnHook::new(
                layer,
                move |ctx: &ilrr::model::HookContext<'_>, _: &mut ilrr::numerics::Matrix| {
                    assert!(ctx.companion.is_some());
                    log.lock().unwrap().push((ctx.step, ctx.layer));
                    Ok(())
                },
            )) as Box<dyn InterventionHook>
        })
        .collect();
    let steps: BTreeSet<usize> = [2, 5].into();
    let st = Steering::custom(SteerMode::Standard, steps, hooks);
    let r = reference(6);
    let (_, nfe) = Sampler::new(&w, sched)
        .with_steering(&st, &r)
        .sample(&[3, 4], 6, &mut SamplerRngs::new(0, 0))
        .unwrap();
    assert_eq!(nfe.count(), 8);
    let mut fired = log.lock().unwrap().clone();
    fired.sort();
    assert_eq!(fired, [(2, 1), (2, 3), (5, 1), (5, 3)]);
}

#[test]
fn reference_is_corrupted_on_its_own_stream() {
    // Steering with α = 0 must leave the generation stream untouched even
    // though the reference stream is consumed.
    let w = model(11);
    let sched = NoiseSchedule::linear(5).unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let c2 = Arc::clone(&calls);
    let hook = FnHook::new(
        2,
        move |ctx: &ilrr::model::HookContext<'_>, _: &mut ilrr::numerics::Matrix| {
            let comp = ctx.companion.unwrap();
            assert_eq!(comp.prompt_len, 2);
            c2.fetch_add(1, Ordering::Relaxed);
            Ok(())
        },
    );
    let st = Steering::custom(SteerMode::Standard, (1..=5).collect(), vec![Box::new(hook)]);
    let r = reference(5);
    let s = Sampler::new(&w, sched).with_tokens(TokenSampler::Temperature(1.0));
    let a = s
        .with_steering(&st, &r)
        .sample(&[3, 4], 5, &mut SamplerRngs::new(4, 0))
        .unwrap()
        .0;
    let b = s.sample(&[3, 4], 5, &mut SamplerRngs::new(4, 0)).unwrap().0;
    assert_eq!(a, b);
    assert_eq!(calls.load(Ordering::Relaxed), 5);
}

#[test]
fn best_of_n_picks_highest_score_with_n_fold_nfe() {
    let w = model(12);
    let sched = NoiseSchedule::linear(4).unwrap();
    let s = Sampler::new(&w, sched).with_tokens(TokenSampler::Temperature(1.0));
    let rngs = SamplerRngs::new(5, 5);
    let scorer = |x: &TokenSeq| x.response().iter().filter(|&&t| t == 3).count() as f64;
    let one = best_of_n(&s, &[1], 8, 1, &scorer, &rngs, Dispatch::Sequential).unwrap();
    assert_eq!(one.best, s.sample(&[1], 8, &mut rngs.clone()).unwrap().0);
    let four = best_of_n(&s, &[1], 8, 4, &scorer, &rngs, Dispatch::Parallel).unwrap();
    assert_eq!(four.nfe.count(), 16);
    let max = four.scores.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(four.scores[four.index], max);
    assert_eq!(
        four.index,
        four.scores.iter().position(|&v| v == max).unwrap()
    );
    assert_eq!(scorer(&four.best), max);
    let seq = best_of_n(&s, &[1], 8, 4, &scorer, &rngs, Dispatch::Sequential).unwrap();
    assert_eq!(seq.best, four.best);
    assert!(best_of_n(&s, &[1], 8, 0, &scorer, &rngs, Dispatch::Sequential).is_err());
}

#[test]
fn token_sampler_parsing() {
    assert_eq!(
        "greedy".parse::<TokenSampler>().unwrap(),
        TokenSampler::Greedy
    );
    assert_eq!(
        "temperature:0.5".parse::<TokenSampler>().unwrap(),
        TokenSampler::Temperature(0.5)
    );
    let t: TokenSampler = "topk:3:0.8".parse().unwrap();
    assert_eq!(t.to_string().parse::<TokenSampler>().unwrap(), t);
    assert!("temperature:-1"
        .parse::<TokenSampler>()
        .map(|t| t.validate())
        .map_or(true, |r| r.is_err()));
}
