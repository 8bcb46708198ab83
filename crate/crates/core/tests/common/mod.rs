#![allow(dead_code)]

use oscar::cache::CompiledLexicon;
use oscar::config::Config;
use oscar::pretrainer::tokenize_corpus;
use oscar::{EntityLexicon, TokenId, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ENTITY_DIM: usize = 16;
pub const ENTITIES: usize = 20;
const SYLLABLES: [&str; 10] = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze"];

/// A small made-up language: 60 two-syllable words, 20 entities (10 single
/// words and 10 two-word phrases) and a 100-sentence corpus.
pub struct World {
    pub words: Vec<String>,
    pub vocab_text: String,
    pub lexicon_text: String,
    pub corpus_text: String,
    pub vocab: Vocab,
    pub compiled: CompiledLexicon,
    pub corpus: Vec<Vec<TokenId>>,
}

pub fn words() -> Vec<String> {
    let mut out = Vec::new();
    for a in SYLLABLES {
        for b in SYLLABLES {
            out.push(format!("{a}{b}"));
        }
    }
    out.truncate(60);
    out
}

/// Entity surfaces as word lists: words 0..10 alone, then pairs from 10..30.
pub fn entity_words(words: &[String]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = words[..10].iter().map(|w| vec![w.clone()]).collect();
    for pair in words[10..30].chunks(2) {
        out.push(pair.to_vec());
    }
    out
}

pub fn world(seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = words();
    let mut vocab_text = String::from("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n");
    for w in &words {
        vocab_text.push_str(w);
        vocab_text.push('\n');
    }
    let vocab = Vocab::from_text(&vocab_text).unwrap();

    let entities = entity_words(&words);
    let mut lexicon_text = format!("{} {}\n", entities.len(), ENTITY_DIM);
    for surface in &entities {
        lexicon_text.push_str(&surface.join("_"));
        for _ in 0..ENTITY_DIM {
            lexicon_text.push_str(&format!(" {:.6}", rng.random_range(-1.0..1.0)));
        }
        lexicon_text.push('\n');
    }
    let (lexicon, report) = EntityLexicon::from_text(&lexicon_text, &vocab).unwrap();
    assert_eq!(report.ingested, ENTITIES);

    let mut corpus_text = String::new();
    for _ in 0..100 {
        let len = rng.random_range(5..=10);
        let mut sentence: Vec<&str> = Vec::new();
        while sentence.len() < len {
            if rng.random_bool(0.25) {
                let e = &entities[rng.random_range(0..entities.len())];
                sentence.extend(e.iter().map(String::as_str));
            } else {
                // Skewed toward the low end so there is something to learn.
                let r: f64 = rng.random();
                sentence.push(&words[30 + (r * r * 30.0) as usize]);
            }
        }
        corpus_text.push_str(&sentence.join(" "));
        corpus_text.push('\n');
    }
    let corpus = tokenize_corpus(&vocab, &corpus_text);
    World {
        words,
        vocab_text,
        lexicon_text,
        corpus_text,
        compiled: CompiledLexicon::new(lexicon, report),
        vocab,
        corpus,
    }
}

/// Desk-sized model with a fast learning rate.
pub fn small_config() -> Config {
    let mut c = Config::default();
    c.apply_text(
        "encoder.layers = 2\n\
         encoder.hidden = 32\n\
         encoder.heads = 2\n\
         encoder.ff = 64\n\
         encoder.max_seq_len = 64\n\
         train.batch_size = 8\n\
         train.lr = 0.001\n\
         train.warmup_steps = 5\n\
         train.steps = 50\n\
         train.seed = 7\n",
    )
    .unwrap();
    c
}

/// Lexicon over a bare ID alphabet; duplicate surfaces keep the first.
pub fn pattern_lexicon(patterns: &[Vec<TokenId>], vocab_size: usize) -> EntityLexicon {
    let entries = patterns.iter().enumerate().map(|(i, p)| oscar::Entity {
        name: format!("e{i}"),
        surface: p.clone(),
        embedding: vec![i as f64],
    });
    EntityLexicon::from_entries(entries, 1, vocab_size)
}

/// Every `(start, len, entity)` occurrence by direct comparison at every
/// offset, sorted. Positions are 1-based.
pub fn brute_force(lexicon: &EntityLexicon, ids: &[TokenId]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (e, entity) in lexicon.entries().iter().enumerate() {
        let p = &entity.surface;
        if p.len() > ids.len() {
            continue;
        }
        for s in 0..=ids.len() - p.len() {
            if &ids[s..s + p.len()] == p.as_slice() {
                out.push((s + 1, p.len(), e));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Drops spans strictly inside some other distinct span.
pub fn drop_contained(spans: &[(usize, usize, usize)]) -> Vec<(usize, usize, usize)> {
    spans
        .iter()
        .copied()
        .filter(|&(s, l, _)| {
            !spans.iter().any(|&(s2, l2, _)| {
                (s2, l2) != (s, l) && s2 <= s && s + l <= s2 + l2
            })
        })
        .collect()
}
