mod common;

use ndarray::Array1;
use oscar::composition::{Activation, Method};
use oscar::config::Config;
use oscar::encoder::{Encoder, EncoderConfig};
use oscar::energy::{Energy, EnergyKind, DEFAULT_EPSILON};
use oscar::head::EntityHead;
use oscar::optim::{AdamW, AdamWConfig};
use oscar::params::Parameters;
use oscar::pretrainer::{train, StepReport};
use oscar::MatchOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(config: &Config, world: &common::World) -> (Vec<StepReport>, oscar::pretrainer::Trainer) {
    let mut reports = Vec::new();
    let trainer = train(config, &world.vocab, world.compiled.clone(), &world.corpus, |r| {
        reports.push(r.clone())
    })
    .unwrap();
    (reports, trainer)
}

#[test]
fn mlm_loss_falls_over_fifty_steps() {
    let world = common::world(1);
    let (reports, _) = run(&common::small_config(), &world);
    assert_eq!(reports.len(), 50);
    let first = reports[0].mlm_loss;
    let last = reports[49].mlm_loss;
    assert!(last < first, "mlm loss {first} -> {last}");
    assert!(reports.iter().any(|r| r.entities_matched > 0));
    for r in &reports {
        assert_eq!(r.total_loss, r.mlm_loss + r.reg_value);
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let world = common::world(2);
    let mut config = common::small_config();
    config.train.steps = 10;
    let lines = |reports: &[StepReport]| -> Vec<String> {
        reports.iter().map(|r| r.to_json_line(false)).collect()
    };
    let (a, ta) = run(&config, &world);
    let (b, tb) = run(&config, &world);
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(ta.checkpoint().to_bytes(), tb.checkpoint().to_bytes());

    config.train.seed += 1;
    let (c, _) = run(&config, &world);
    assert_ne!(lines(&a), lines(&c));
}

#[test]
fn zero_lambda_matches_disabled_branch() {
    let world = common::world(3);
    let mut zero = common::small_config();
    zero.train.steps = 20;
    zero.train.lambda = 0.0;
    let mut off = zero.clone();
    off.train.oscar = false;
    let (a, ta) = run(&zero, &world);
    let (b, tb) = run(&off, &world);
    assert!(a.iter().any(|r| r.entities_matched > 0));
    assert!(b.iter().all(|r| r.entities_matched == 0 && r.reg_value == 0.0));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mlm_loss.to_bits(), y.mlm_loss.to_bits());
        assert_eq!(x.total_loss.to_bits(), y.total_loss.to_bits());
    }
    let bits = |t: &oscar::pretrainer::Trainer| -> Vec<u64> {
        t.model()
            .encoder
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&ta), bits(&tb));
}

#[test]
fn regularizer_alone_is_trainable() {
    let world = common::world(4);
    let lexicon = &world.compiled.lexicon;
    let sentence: Vec<String> = common::entity_words(&world.words).concat();
    let seq = world.vocab.tokenize(&sentence.join(" "));
    let matches = world
        .compiled
        .automaton
        .find_matches(&seq, MatchOptions::default())
        .unwrap();
    assert_eq!(matches.len(), common::ENTITIES);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
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
    let mut input = vec![reserved.cls];
    input.extend(&seq.ids);
    input.push(reserved.sep);
    let reps = encoder.forward(&input).unwrap().final_hidden().clone();

    let energy = Energy::new(EnergyKind::Euclidean, DEFAULT_EPSILON).unwrap();
    let mut head = EntityHead::init(Method::Ran, 32, 32, common::ENTITY_DIM, Activation::Tanh, &mut rng).unwrap();
    let mut opt = AdamW::new(&head, AdamWConfig::default());
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..500 {
        let mut grads = head.zeros_like();
        let term = head
            .sentence(reps.view(), &matches, lexicon, &energy, 1.0, &mut grads)
            .unwrap();
        first.get_or_insert(term.value);
        last = term.value;
        opt.update(&mut head, &grads, 1e-2);
    }
    let first = first.unwrap();
    assert!(last <= 0.1 * first, "regularizer {first} -> {last}");

    let targets = lexicon.embedding_matrix();
    let mut correct = 0;
    for m in &matches {
        let span = reps.slice(ndarray::s![m.start..m.start + m.len, ..]);
        let (c, _) = head.composer.compose(span).unwrap();
        let p: Array1<f64> = head.projection.apply(c.view());
        let nearest = (0..targets.nrows())
            .min_by(|&a, &b| {
                let da = (&targets.row(a) - &p).mapv(|v| v * v).sum();
                let db = (&targets.row(b) - &p).mapv(|v| v * v).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        correct += (nearest == m.entity) as usize;
    }
    assert!(correct >= 19, "recovered {correct} of 20");
}
