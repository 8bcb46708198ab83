mod common;

use ndarray::{Array1, Array2};
use oscar::composition::{Activation, Composer, Method};
use oscar::energy::{regularizer, Energy, EnergyKind, Projection, DEFAULT_EPSILON};
use oscar::{EntityLexicon, MatchAutomaton, MatchOptions, TokenId, TokenSequence, Vocab};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL: MatchOptions = MatchOptions {
    include_subsumed: true,
    include_masked: true,
};

fn patterns() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    prop::collection::vec(prop::collection::vec(5u32..15, 1..=4), 1..60)
}

fn sentence() -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(5u32..15, 0..=64)
}

fn masked(ids: Vec<TokenId>, mask_bits: u64) -> TokenSequence {
    let positions: Vec<usize> = (1..=ids.len()).filter(|p| mask_bits >> (p % 64) & 1 == 1).collect();
    TokenSequence::new(ids).with_masks(positions, 4).unwrap()
}

fn triples(ms: &[oscar::EntityMatch]) -> Vec<(usize, usize, usize)> {
    ms.iter().map(|m| (m.start, m.len, m.entity)).collect()
}

proptest! {
    #[test]
    fn matcher_equals_brute_force(pats in patterns(), ids in sentence(), bits in any::<u64>()) {
        let lexicon = common::pattern_lexicon(&pats, 20);
        let automaton = MatchAutomaton::compile(&lexicon);
        let seq = masked(ids.clone(), bits);
        let found = automaton.find_matches(&seq, ALL).unwrap();
        prop_assert_eq!(triples(&found), common::brute_force(&lexicon, &ids));
    }

    #[test]
    fn filters_respect_containment_and_masks(pats in patterns(), ids in sentence(), bits in any::<u64>()) {
        let lexicon = common::pattern_lexicon(&pats, 20);
        let automaton = MatchAutomaton::compile(&lexicon);
        let seq = masked(ids.clone(), bits);
        let all = common::brute_force(&lexicon, &ids);

        let kept = automaton.find_matches(&seq, MatchOptions::default()).unwrap();
        let expected: Vec<_> = common::drop_contained(&all)
            .into_iter()
            .filter(|&(s, l, _)| (s..s + l).all(|p| !seq.is_masked(p)))
            .collect();
        prop_assert_eq!(triples(&kept), expected);
        for m in &kept {
            prop_assert!(!m.demasked);
            for other in &kept {
                let same = (other.start, other.len) == (m.start, m.len);
                prop_assert!(same || !(other.start <= m.start && m.end() <= other.end()));
            }
        }

        let unmasked = automaton
            .find_matches(&seq, MatchOptions { include_subsumed: true, include_masked: false })
            .unwrap();
        for m in &unmasked {
            prop_assert!((m.start..=m.end()).all(|p| !seq.is_masked(p)));
        }
        let with_masked = automaton
            .find_matches(&seq, MatchOptions { include_subsumed: true, include_masked: true })
            .unwrap();
        for m in &with_masked {
            prop_assert_eq!(m.demasked, (m.start..=m.end()).any(|p| seq.is_masked(p)));
        }
    }

    #[test]
    fn single_pass_cost_is_linear(pats in patterns(), ids in sentence()) {
        let lexicon = common::pattern_lexicon(&pats, 20);
        let automaton = MatchAutomaton::compile(&lexicon);
        let (_, stats) = automaton.scan(&ids).unwrap();
        prop_assert!(stats.transitions() <= 2 * ids.len() + stats.outputs);
    }

    #[test]
    fn matching_is_idempotent(pats in patterns(), ids in sentence(), bits in any::<u64>()) {
        let lexicon = common::pattern_lexicon(&pats, 20);
        let automaton = MatchAutomaton::compile(&lexicon);
        let seq = masked(ids, bits);
        for opts in [ALL, MatchOptions::default()] {
            prop_assert_eq!(automaton.find_matches(&seq, opts).unwrap(), automaton.find_matches(&seq, opts).unwrap());
        }
    }

    #[test]
    fn every_entity_matches_its_own_surface(pats in patterns()) {
        let lexicon = common::pattern_lexicon(&pats, 20);
        let automaton = MatchAutomaton::compile(&lexicon);
        for (i, entity) in lexicon.entries().iter().enumerate() {
            let seq = TokenSequence::new(entity.surface.clone());
            let found = automaton.find_matches(&seq, MatchOptions::default()).unwrap();
            let full = oscar::EntityMatch { start: 1, len: entity.surface.len(), entity: i, demasked: false };
            prop_assert!(found.contains(&full));
        }
    }
}

fn piece_vocab(extra: &[String]) -> Vocab {
    let mut tokens: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"].map(String::from).to_vec();
    for c in 'a'..='e' {
        tokens.push(c.to_string());
        tokens.push(format!("##{c}"));
    }
    for piece in extra {
        if !tokens.contains(piece) {
            tokens.push(piece.clone());
        }
    }
    Vocab::from_tokens(tokens).unwrap()
}

fn pieces() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(("(##)?", "[a-e]{2,5}").prop_map(|(p, s)| format!("{p}{s}")), 0..30)
}

proptest! {
    #[test]
    fn tokenizer_round_trips(extra in pieces(), words in prop::collection::vec("[a-eA-E]{1,12}", 0..8)) {
        let vocab = piece_vocab(&extra);
        let text = words.join(" ");
        let seq = vocab.tokenize(&text);
        prop_assert!(!seq.ids.contains(&vocab.reserved().unk));
        prop_assert_eq!(vocab.detokenize(&seq.ids), text.to_lowercase());
        prop_assert_eq!(vocab.tokenize(&text), seq);
    }

    #[test]
    fn tokenizer_is_greedy(extra in pieces(), word in "[a-e]{1,12}") {
        let vocab = piece_vocab(&extra);
        let mut ids = Vec::new();
        vocab.tokenize_word_into(&word, &mut ids);
        let mut start = 0;
        for &id in &ids {
            let token = vocab.token(id).unwrap();
            let body = token.strip_prefix("##").unwrap_or(token);
            prop_assert_eq!(token.starts_with("##"), start > 0);
            let end = start + body.len();
            prop_assert_eq!(&word[start..end], body);
            // No longer vocabulary piece starts here.
            for longer in end + 1..=word.len() {
                let prefix = if start > 0 { "##" } else { "" };
                let candidate = format!("{prefix}{}", &word[start..longer]);
                prop_assert!(vocab.id_of(&candidate).is_none(), "{} was available", candidate);
            }
            start = end;
        }
        prop_assert_eq!(start, word.len());
    }
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, d)
}

fn energy(kind: EnergyKind) -> Energy {
    Energy::new(kind, DEFAULT_EPSILON).unwrap()
}

proptest! {
    #[test]
    fn energies_are_symmetric((a, b) in (1usize..9).prop_flat_map(|d| (vector(d), vector(d)))) {
        let (a, b) = (Array1::from(a), Array1::from(b));
        for kind in EnergyKind::STANDARD {
            let e = energy(kind);
            match (e.value(a.view(), b.view()), e.value(b.view(), a.view())) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x.to_bits(), y.to_bits()),
                (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
            }
        }
    }

    #[test]
    fn identity_of_indiscernibles(a in vector(5), b in vector(5), scale in 1e-3f64..1e3) {
        let (a, b) = (Array1::from(a), Array1::from(b));
        for kind in [EnergyKind::Euclidean, EnergyKind::Absolute] {
            let e = energy(kind);
            prop_assert_eq!(e.value(a.view(), a.view()).unwrap(), 0.0);
            prop_assert_eq!(e.value(a.view(), b.view()).unwrap() == 0.0, a == b);
        }
        if a.iter().any(|&v| v != 0.0) {
            let scaled = &a * scale;
            prop_assert!(energy(EnergyKind::Angular).value(a.view(), scaled.view()).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn angular_is_scale_invariant(a in vector(6), b in vector(6), alpha in 1e-3f64..=10.0, beta in 1e-3f64..=10.0) {
        prop_assume!(a.iter().any(|&v| v.abs() > 1e-3) && b.iter().any(|&v| v.abs() > 1e-3));
        let (a, b) = (Array1::from(a), Array1::from(b));
        let e = energy(EnergyKind::Angular);
        let base = e.value(a.view(), b.view()).unwrap();
        let scaled = e.value((&a * alpha).view(), (&b * beta).view()).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9, "{} vs {}", base, scaled);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&base));
    }

    #[test]
    fn triangle_inequality(a in vector(4), b in vector(4), c in vector(4)) {
        let (a, b, c) = (Array1::from(a), Array1::from(b), Array1::from(c));
        for kind in [EnergyKind::Euclidean, EnergyKind::Absolute] {
            let e = energy(kind);
            let ab = e.value(a.view(), b.view()).unwrap();
            let bc = e.value(b.view(), c.view()).unwrap();
            let ac = e.value(a.view(), c.view()).unwrap();
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn mean_times_count_is_the_sum(seed in any::<u64>(), m in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Projection::init(4, 3, &mut rng);
        let uniform = |rng: &mut ChaCha8Rng, n| Array1::from_shape_simple_fn(n, || rand::Rng::random_range(rng, -2.0..2.0));
        let composed: Vec<Array1<f64>> = (0..m).map(|_| uniform(&mut rng, 3)).collect();
        let targets: Vec<Array1<f64>> = (0..m).map(|_| uniform(&mut rng, 4)).collect();
        let cv: Vec<_> = composed.iter().map(|c| c.view()).collect();
        let tv: Vec<_> = targets.iter().map(|t| t.view()).collect();
        for kind in EnergyKind::STANDARD {
            let r = regularizer(&proj, &cv, &tv, &energy(kind)).unwrap();
            let sum: f64 = r.energies.iter().sum();
            if m == 0 {
                prop_assert_eq!(r.value.to_bits(), 0.0f64.to_bits());
            } else {
                let product = r.value * m as f64;
                let ulps = (product.to_bits() as i64 - sum.to_bits() as i64).abs();
                prop_assert!(ulps <= 4, "{} vs {} ({} ulps)", product, sum, ulps);
            }
        }
    }

    #[test]
    fn linear_composition_ignores_order(seed in any::<u64>(), len in 1usize..7, perm_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let composer = Composer::init(Method::Linear, 5, 5, Activation::Tanh, &mut rng).unwrap();
        let span = Array2::from_shape_simple_fn((len, 5), || rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mut order: Vec<usize> = (0..len).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let shuffled = span.select(ndarray::Axis(0), &order);
        let (a, _) = composer.compose(span.view()).unwrap();
        let (b, _) = composer.compose(shuffled.view()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn lexicon_report_accounts_for_every_line(
        lines in prop::collection::vec(("(ab|cd|zz|ab_cd|cd_ab|ab_zz|\\[mask\\])", prop::option::of(prop::collection::vec(-5i32..5, 2))), 1..20)
    ) {
        let vocab = Vocab::from_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nab\ncd\n").unwrap();
        let text: String = lines
            .iter()
            .map(|(name, values)| match values {
                Some(v) => format!("{name} {} {}\n", v[0], v[1]),
                None => format!("{name}\n"),
            })
            .collect();
        let (lexicon, report) = EntityLexicon::from_text(&text, &vocab).unwrap();
        prop_assert_eq!(report.records, lines.len());
        prop_assert_eq!(
            report.ingested + report.dropped_unk + report.collisions + report.malformed_skipped,
            report.records
        );
        prop_assert_eq!(report.ingested, lexicon.len());
        let automaton = MatchAutomaton::compile(&lexicon);
        for (i, entity) in lexicon.entries().iter().enumerate() {
            let found = automaton
                .find_matches(&TokenSequence::new(entity.surface.clone()), MatchOptions::default())
                .unwrap();
            prop_assert!(found.iter().any(|m| m.entity == i && m.start == 1 && m.len == entity.surface.len()));
        }
    }
}

#[test]
fn repeated_spans_separate_absolute_from_angular() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut composer = Composer::init(Method::Linear, 3, 3, Activation::Tanh, &mut rng).unwrap();
    if let Composer::Linear(p) = &mut composer {
        p.b_e.fill(0.5);
    }
    let span = Array2::from_shape_vec((2, 3), vec![0.4, -0.2, 0.9, 0.1, 0.3, -0.5]).unwrap();
    let target = Array1::from(vec![1.0, -1.0, 0.5]);
    let proj = Projection::identity(3);
    let mut previous = f64::NEG_INFINITY;
    for k in 1..=8 {
        let repeated = ndarray::concatenate(ndarray::Axis(0), &vec![span.view(); k]).unwrap();
        let (c, _) = composer.compose(repeated.view()).unwrap();
        let p = proj.apply(c.view());
        let abs = energy(EnergyKind::Absolute).value(p.view(), target.view()).unwrap();
        let ang = energy(EnergyKind::Angular).value(p.view(), target.view()).unwrap();
        assert!(abs > previous, "absolute energy not increasing at k = {k}");
        assert!((0.0..=std::f64::consts::PI).contains(&ang));
        previous = abs;
    }
}
