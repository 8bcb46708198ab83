//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every line is printed whether or not
//! it passes. Exits nonzero if any gated check fails; the cost-ordering
//! benchmark is reported but never gated.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{s, Array1};
use oscar::composition::{Activation, Composer, Method};
use oscar::config::Config;
use oscar::encoder::{Encoder, EncoderConfig};
use oscar::energy::{regularizer, Energy, EnergyKind, Projection, DEFAULT_EPSILON};
use oscar::gradcheck::{self, GradcheckConfig};
use oscar::head::EntityHead;
use oscar::optim::{AdamW, AdamWConfig};
use oscar::params::Parameters;
use oscar::pretrainer::{bench, train, StepReport};
use oscar::{EntityMatch, MatchAutomaton, MatchOptions, TokenId, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const VOCAB: u32 = 50;
const FIRST_ORDINARY: u32 = 5;

struct Trial {
    lexicon: oscar::EntityLexicon,
    sentence: TokenSequence,
}

/// Random lexicon of 200 patterns and a sentence that splices some of them
/// between random tokens so that overlaps and containments occur.
fn trial(rng: &mut ChaCha8Rng) -> Trial {
    let patterns: Vec<Vec<TokenId>> = (0..200)
        .map(|_| {
            let len = rng.random_range(1..=4);
            (0..len).map(|_| rng.random_range(FIRST_ORDINARY..VOCAB)).collect()
        })
        .collect();
    let lexicon = common::pattern_lexicon(&patterns, VOCAB as usize);
    let target = rng.random_range(0..=64);
    let mut ids = Vec::with_capacity(target);
    while ids.len() < target {
        if rng.random_bool(0.5) {
            let p = &patterns[rng.random_range(0..patterns.len())];
            ids.extend(p.iter().take(target - ids.len()));
        } else {
            ids.push(rng.random_range(FIRST_ORDINARY..VOCAB));
        }
    }
    let masks: Vec<usize> = (1..=ids.len()).filter(|_| rng.random_bool(0.1)).collect();
    let sentence = TokenSequence::new(ids).with_masks(masks, 4).unwrap();
    Trial { lexicon, sentence }
}

fn trials() -> Vec<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..1000).map(|_| trial(&mut rng)).collect()
}

fn triples(ms: &[EntityMatch]) -> Vec<(usize, usize, usize)> {
    ms.iter().map(|m| (m.start, m.len, m.entity)).collect()
}

const BOTH: MatchOptions = MatchOptions {
    include_subsumed: true,
    include_masked: true,
};

fn matcher_oracle(trials: &[Trial]) -> Outcome {
    let started = Instant::now();
    let mut mismatches = 0;
    let mut total = 0;
    for t in trials {
        let automaton = MatchAutomaton::compile(&t.lexicon);
        let found = automaton.find_matches(&t.sentence, BOTH).unwrap();
        let expected = common::brute_force(&t.lexicon, &t.sentence.demasked_ids());
        total += expected.len();
        mismatches += (triples(&found) != expected) as usize;
    }
    let elapsed = started.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "{} trials, {total} oracle matches, {mismatches} mismatching trials, {:.2} s",
            trials.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn filters(trials: &[Trial]) -> Outcome {
    let mut containment = 0;
    let mut mask = 0;
    let mut checked = 0;
    for t in trials {
        let automaton = MatchAutomaton::compile(&t.lexicon);
        let seq = &t.sentence;
        for (include_subsumed, include_masked) in [(false, false), (false, true), (true, false)] {
            let opts = MatchOptions {
                include_subsumed,
                include_masked,
            };
            let kept = automaton.find_matches(seq, opts).unwrap();
            checked += kept.len();
            if !include_subsumed {
                for a in &kept {
                    containment += kept
                        .iter()
                        .filter(|b| (b.start, b.len) != (a.start, a.len) && b.start <= a.start && a.end() <= b.end())
                        .count();
                }
                // Nothing contained was dropped unless something contains it.
                let all = common::brute_force(&t.lexicon, &seq.demasked_ids());
                let expected: Vec<_> = common::drop_contained(&all)
                    .into_iter()
                    .filter(|&(s, l, _)| include_masked || (s..s + l).all(|p| !seq.is_masked(p)))
                    .collect();
                containment += (triples(&kept) != expected) as usize;
            }
            if !include_masked {
                mask += kept
                    .iter()
                    .filter(|m| m.demasked || (m.start..=m.end()).any(|p| seq.is_masked(p)))
                    .count();
            }
        }
    }
    outcome(
        containment == 0 && mask == 0,
        format!("{checked} filtered matches, {containment} containment and {mask} mask violations"),
    )
}

fn gradients() -> Outcome {
    let cfg = GradcheckConfig::default();
    let reports = gradcheck::run(&cfg, None);
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}/{}", r.method, r.energy))
        .collect();
    outcome(
        reports.len() == 9 && failing.is_empty() && cfg.configs >= 20,
        format!(
            "{} cells x {} configs, worst relative error {worst:.2e}, failing: {failing:?}",
            reports.len(),
            cfg.configs
        ),
    )
}

fn energy(kind: EnergyKind) -> Energy {
    Energy::new(kind, DEFAULT_EPSILON).unwrap()
}

fn energy_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = Vec::new();
    let mut worst_scale = 0.0f64;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=8);
        let a = Array1::from_shape_simple_fn(d, || rng.random_range(-5.0..5.0));
        let b = Array1::from_shape_simple_fn(d, || rng.random_range(-5.0..5.0));
        for kind in EnergyKind::STANDARD {
            let e = energy(kind);
            if e.value(a.view(), b.view()).unwrap().to_bits() != e.value(b.view(), a.view()).unwrap().to_bits() {
                violations.push(format!("{kind} asymmetric"));
            }
        }
        for kind in [EnergyKind::Euclidean, EnergyKind::Absolute] {
            let e = energy(kind);
            if e.value(a.view(), a.view()).unwrap() != 0.0 || (e.value(a.view(), b.view()).unwrap() == 0.0) != (a == b) {
                violations.push(format!("{kind} identity"));
            }
        }
        let (alpha, beta) = (rng.random_range(1e-3..=10.0), rng.random_range(1e-3..=10.0));
        let e = energy(EnergyKind::Angular);
        let diff = (e.value((&a * alpha).view(), (&b * beta).view()).unwrap() - e.value(a.view(), b.view()).unwrap()).abs();
        worst_scale = worst_scale.max(diff);
    }
    let right = energy(EnergyKind::Angular)
        .value(ndarray::array![1.0, 0.0].view(), ndarray::array![0.0, 1.0].view())
        .unwrap();
    let five = energy(EnergyKind::Euclidean)
        .value(ndarray::array![0.0, 0.0].view(), ndarray::array![3.0, 4.0].view())
        .unwrap();
    let closed = (right - std::f64::consts::FRAC_PI_2).abs() <= 1e-5 && (five - 5.0).abs() <= 1e-12;
    outcome(
        violations.is_empty() && worst_scale <= 1e-9 && closed,
        format!(
            "10000 pairs, {} violations, worst angular scale drift {worst_scale:.1e}, angular(e1,e2) = {right:.9}, euclidean = {five}",
            violations.len()
        ),
    )
}

fn mean_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0i64;
    let mut batches = 0;
    for _ in 0..2000 {
        let m = rng.random_range(1..=16);
        let (d_c, d_e) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let proj = Projection::init(d_e, d_c, &mut rng);
        let composed: Vec<Array1<f64>> = (0..m)
            .map(|_| Array1::from_shape_simple_fn(d_c, || rng.random_range(-3.0..3.0)))
            .collect();
        let targets: Vec<Array1<f64>> = (0..m)
            .map(|_| Array1::from_shape_simple_fn(d_e, || rng.random_range(-3.0..3.0)))
            .collect();
        let cv: Vec<_> = composed.iter().map(|c| c.view()).collect();
        let tv: Vec<_> = targets.iter().map(|t| t.view()).collect();
        for kind in EnergyKind::STANDARD {
            let r = regularizer(&proj, &cv, &tv, &energy(kind)).unwrap();
            let sum: f64 = r.energies.iter().sum();
            let product = r.value * m as f64;
            worst = worst.max((product.to_bits() as i64 - sum.to_bits() as i64).abs());
            batches += 1;
        }
    }
    let empty = regularizer(&Projection::zeros(3, 3), &[], &[], &Energy::default()).unwrap();
    let zero = empty.value.to_bits() == 0.0f64.to_bits();
    outcome(
        worst <= 4 && zero,
        format!("{batches} batches, worst {worst} ulps, M = 0 gives {}", empty.value),
    )
}

fn parameter_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rows = Vec::new();
    let mut ok = true;
    for d in [4, 16, 64] {
        let count = |m: Method| Composer::init(m, d, d, Activation::Tanh, &mut rng.clone()).unwrap().param_count();
        let (linear, linear_ran, ran) = (count(Method::Linear), count(Method::LinearRan), count(Method::Ran));
        ok &= linear == d * d + d && linear_ran == 4 * d * d + 2 * d && ran == 5 * d * d + 2 * d;
        ok &= linear < linear_ran && linear_ran < ran;
        for m in Method::ALL {
            ok &= m.param_count(d) == count(m);
        }
        rows.push(format!("d={d}: {linear} < {linear_ran} < {ran}"));
        rng.random::<u64>();
    }
    outcome(ok, rows.join(", "))
}

fn trainability() -> Outcome {
    let started = Instant::now();
    let world = common::world(77);
    let lexicon = &world.compiled.lexicon;
    let sentence = common::entity_words(&world.words).concat().join(" ");
    let seq = world.vocab.tokenize(&sentence);
    let matches = world
        .compiled
        .automaton
        .find_matches(&seq, MatchOptions::default())
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let encoder = Encoder::init(
        EncoderConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            ff: 64,
            max_seq_len: 64,
            vocab_size: world.vocab.len(),
        },
        &mut rng,
    )
    .unwrap();
    let reserved = world.vocab.reserved();
    let input: Vec<TokenId> = std::iter::once(reserved.cls)
        .chain(seq.ids.iter().copied())
        .chain(std::iter::once(reserved.sep))
        .collect();
    let reps = encoder.forward(&input).unwrap().final_hidden().clone();
    let targets = lexicon.embedding_matrix();
    let e = energy(EnergyKind::Euclidean);

    let mut ok = matches.len() == common::ENTITIES;
    let mut rows = Vec::new();
    for method in Method::ALL {
        let mut head = EntityHead::init(method, 32, 32, common::ENTITY_DIM, Activation::Tanh, &mut rng).unwrap();
        let mut opt = AdamW::new(&head, AdamWConfig::default());
        let mut values = Vec::with_capacity(500);
        for _ in 0..500 {
            let mut grads = head.zeros_like();
            let term = head.sentence(reps.view(), &matches, lexicon, &e, 1.0, &mut grads).unwrap();
            values.push(term.value);
            opt.update(&mut head, &grads, 1e-2);
        }
        let mut grads = head.zeros_like();
        let last = head.sentence(reps.view(), &matches, lexicon, &e, 1.0, &mut grads).unwrap().value;
        let correct = matches
            .iter()
            .filter(|m| {
                let (c, _) = head.composer.compose(reps.slice(s![m.start..m.start + m.len, ..])).unwrap();
                let p = head.projection.apply(c.view());
                let nearest = (0..targets.nrows())
                    .min_by(|&a, &b| {
                        let da = e.value(targets.row(a), p.view()).unwrap();
                        let db = e.value(targets.row(b), p.view()).unwrap();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest == m.entity
            })
            .count();
        ok &= last <= 0.1 * values[0] && correct * 100 >= 95 * matches.len();
        rows.push(format!(
            "{method}: {:.3} -> {last:.4} ({:.1}%), {correct}/{} recovered",
            values[0],
            100.0 * last / values[0],
            matches.len()
        ));
    }
    let elapsed = started.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    outcome(ok, format!("{}; {:.1} s", rows.join("; "), elapsed.as_secs_f64()))
}

fn run(config: &Config, world: &common::World) -> Vec<StepReport> {
    let mut reports = Vec::new();
    train(config, &world.vocab, world.compiled.clone(), &world.corpus, |r| reports.push(r.clone())).unwrap();
    reports
}

fn lambda_ablation() -> Outcome {
    let world = common::world(8);
    let mut zero = common::small_config();
    zero.train.steps = 20;
    zero.train.lambda = 0.0;
    let mut off = zero.clone();
    off.train.oscar = false;
    let a = run(&zero, &world);
    let b = run(&off, &world);
    let same = a.len() == 20
        && a.iter().zip(&b).all(|(x, y)| {
            x.mlm_loss.to_bits() == y.mlm_loss.to_bits() && x.total_loss.to_bits() == y.total_loss.to_bits()
        });
    let matched: usize = a.iter().map(|r| r.entities_matched).sum();
    outcome(
        same && matched > 0,
        format!("20 steps, mlm and total loss bitwise equal: {same}, {matched} entity mentions scored at lambda = 0"),
    )
}

fn determinism() -> Outcome {
    let world = common::world(9);
    let mut config = common::small_config();
    config.train.steps = 20;
    let lines = |r: Vec<StepReport>| -> Vec<String> { r.iter().map(|r| r.to_json_line(false)).collect() };
    let a = lines(run(&config, &world));
    let b = lines(run(&config, &world));
    outcome(a == b && a.len() == 20, format!("20 steps, logs identical: {}", a == b))
}

fn cost_ordering() -> Outcome {
    let world = common::world(10);
    let mut config = common::small_config();
    config
        .apply_text("encoder.layers = 1\nencoder.heads = 4\nencoder.ff = 512\nbench.hidden = 256\nbench.steps = 100\ntrain.batch_size = 4\n")
        .unwrap();
    let rows = bench(&config, &world.vocab, &world.compiled, &world.corpus).unwrap();
    let step = |m: &str| rows.iter().find(|r| r.method == m).unwrap().mean_step_ms;
    let branch = |m: &str| rows.iter().find(|r| r.method == m).unwrap().mean_entity_ms;
    let ordered_step = step("linear") < step("linear_ran") && step("linear_ran") < step("ran");
    let ordered_branch = branch("linear") < branch("linear_ran") && branch("linear_ran") < branch("ran");
    let detail = rows
        .iter()
        .map(|r| format!("{} {:.3} ms/step ({:.4} ms entity branch)", r.method, r.mean_step_ms, r.mean_entity_ms))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        ordered_step,
        format!(
            "{detail}; step ordering holds: {ordered_step}, entity-branch ordering holds: {ordered_branch}, linear/ran step ratio {:.3}",
            step("linear") / step("ran")
        ),
    )
}

fn main() -> ExitCode {
    let trials = trials();
    let criteria: Vec<(&str, bool, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("matcher oracle equivalence", true, Box::new(|| matcher_oracle(&trials))),
        ("subsumption and mask filters", true, Box::new(|| filters(&trials))),
        ("gradient checks", true, Box::new(gradients)),
        ("energy algebra", true, Box::new(energy_algebra)),
        ("mean property", true, Box::new(mean_property)),
        ("parameter-count ordering", true, Box::new(parameter_counts)),
        ("regularizer trainability", true, Box::new(trainability)),
        ("lambda ablation", true, Box::new(lambda_ablation)),
        ("determinism", true, Box::new(determinism)),
        ("cost ordering (reported only)", false, Box::new(cost_ordering)),
    ];
    let mut failed = 0;
    for (i, (name, gated, check)) in criteria.iter().enumerate() {
        let result = check();
        let status = match (result.pass, gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "NOT MET (not gated)",
        };
        println!("criterion {:>2} {status}: {name}: {}", i + 1, result.detail);
        failed += (!result.pass && *gated) as usize;
    }
    println!("acceptance: {} gated failures", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
