//! Masked-language-model pretraining with the entity regularizer added to
//! the loss.
//!
//! Each step masks a batch, runs the encoder per sentence, scores the MLM
//! targets, matches lexicon entities on the original IDs, composes the
//! tapped representations over each match and adds `lambda` times the
//! batch-mean regularizer. One AdamW update follows.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cache::CompiledLexicon;
use crate::checkpoint::Checkpoint;
use crate::composition::{CompositionError, Method};
use crate::config::{Config, ConfigError};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::energy::{Energy, EnergyError};
use crate::head::{EntityHead, HeadError};
use crate::matcher::MatchError;
use crate::optim::{warmup_lr, AdamW, AdamWConfig};
use crate::params::{Parameters, TensorView};
use crate::vocab::{ReservedIds, TokenId, TokenSequence, Vocab};

const ENCODER_STREAM: u64 = 0;
const HEAD_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus contains no non-empty sentences")]
    EmptyCorpus,
    #[error("sentence {sentence} has {len} subwords; at most {max} fit with [CLS] and [SEP]")]
    SequenceTooLong { sentence: usize, len: usize, max: usize },
    #[error("lexicon was built for a vocabulary of {lexicon} tokens, not {vocab}")]
    VocabMismatch { lexicon: usize, vocab: usize },
    #[error("lexicon embeddings have dimension 0")]
    EmptyEmbeddings,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("non-finite loss at step {step}: mlm {mlm}, regularizer {reg}")]
    NonFinite { step: usize, mlm: f64, reg: f64 },
}

/// One corrupted sentence ready for a training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSentence {
    /// `[CLS]`, the corrupted subwords, `[SEP]`.
    pub input: Vec<TokenId>,
    /// 1-based sentence position and original ID of every MLM target.
    pub targets: Vec<(usize, TokenId)>,
    /// Original IDs, with positions replaced by `[MASK]` recorded as masked.
    /// Positions given a random token keep their original ID here.
    pub sequence: TokenSequence,
}

/// Number of MLM targets for a sentence of `len` subwords.
pub fn target_count(len: usize, fraction: f64) -> usize {
    // The small offset keeps exact products such as 0.15 * 20 from rounding up.
    let k = (fraction * len as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(len)
}

/// Picks `target_count` positions without replacement; each becomes
/// `[MASK]` with probability 0.8, a random non-reserved token with 0.1, or
/// stays unchanged.
pub fn mask_sentence<R: Rng + ?Sized>(
    ids: &[TokenId],
    fraction: f64,
    reserved: ReservedIds,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedSentence {
    let n = ids.len();
    let mut chosen: Vec<usize> = if n == 0 {
        Vec::new()
    } else {
        index::sample(rng, n, target_count(n, fraction)).into_vec()
    };
    chosen.sort_unstable();
    let ordinary = (0..vocab_size as TokenId).filter(|&id| !reserved.contains(id)).count();

    let mut corrupted = ids.to_vec();
    let mut masked = Vec::new();
    let mut targets = Vec::with_capacity(chosen.len());
    for i in chosen {
        let position = i + 1;
        targets.push((position, ids[i]));
        let roll: f64 = rng.random();
        if roll < 0.8 {
            corrupted[i] = reserved.mask;
            masked.push(position);
        } else if roll < 0.9 && ordinary > 0 {
            let nth = rng.random_range(0..ordinary);
            corrupted[i] = (0..vocab_size as TokenId)
                .filter(|&id| !reserved.contains(id))
                .nth(nth)
                .expect("index below count");
        }
    }
    let sequence = TokenSequence::new(ids.to_vec())
        .with_masks(masked, reserved.mask)
        .expect("positions come from the sentence");
    let mut input = Vec::with_capacity(n + 2);
    input.push(reserved.cls);
    input.extend_from_slice(&corrupted);
    input.push(reserved.sep);
    MaskedSentence {
        input,
        targets,
        sequence,
    }
}

/// Tokenizes one sentence per line, skipping lines that yield no subwords.
pub fn tokenize_corpus(vocab: &Vocab, text: &str) -> Vec<Vec<TokenId>> {
    text.lines()
        .map(|line| vocab.tokenize(line).ids)
        .filter(|ids| !ids.is_empty())
        .collect()
}

/// Encoder plus entity head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub head: EntityHead,
}

impl Model {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based.
    pub step: usize,
    pub mlm_loss: f64,
    pub reg_value: f64,
    pub total_loss: f64,
    /// Entity mentions summed over the batch.
    pub entities_matched: usize,
    pub wall_time: Duration,
    /// Time spent matching, composing and scoring entities.
    pub entity_time: Duration,
}

impl StepReport {
    /// One JSON object; wall time is included only when asked for so that
    /// logs of identical runs compare equal.
    pub fn to_json_line(&self, timing: bool) -> String {
        #[derive(serde::Serialize)]
        struct Line {
            step: usize,
            mlm_loss: f64,
            reg_value: f64,
            total_loss: f64,
            entities_matched: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            wall_time_ms: Option<f64>,
        }
        serde_json::to_string(&Line {
            step: self.step,
            mlm_loss: self.mlm_loss,
            reg_value: self.reg_value,
            total_loss: self.total_loss,
            entities_matched: self.entities_matched,
            wall_time_ms: timing.then(|| self.wall_time.as_secs_f64() * 1e3),
        })
        .expect("plain struct serializes")
    }
}

pub struct Trainer {
    config: Config,
    compiled: CompiledLexicon,
    reserved: ReservedIds,
    vocab_size: usize,
    energy: Energy,
    tap: usize,
    model: Model,
    encoder_opt: AdamW,
    head_opt: AdamW,
    mask_rng: ChaCha8Rng,
    step: usize,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(config: Config, vocab: &Vocab, compiled: CompiledLexicon) -> Result<Self, TrainError> {
        config.validate()?;
        if compiled.lexicon.vocab_size() != vocab.len() {
            return Err(TrainError::VocabMismatch {
                lexicon: compiled.lexicon.vocab_size(),
                vocab: vocab.len(),
            });
        }
        if compiled.lexicon.dim() == 0 {
            return Err(TrainError::EmptyEmbeddings);
        }
        let e = &config.encoder;
        let encoder_config = EncoderConfig {
            layers: e.layers,
            hidden: e.hidden,
            heads: e.heads,
            ff: e.ff,
            max_seq_len: e.max_seq_len,
            vocab_size: vocab.len(),
        };
        let encoder = Encoder::init(encoder_config, &mut rng(config.train.seed, ENCODER_STREAM))?;
        let c = &config.composition;
        let head = EntityHead::init(
            c.method,
            c.dim.unwrap_or(e.hidden),
            e.hidden,
            compiled.lexicon.dim(),
            c.g,
            &mut rng(c.seed, HEAD_STREAM),
        )?;
        let model = Model { encoder, head };
        let adam = AdamWConfig {
            weight_decay: config.train.weight_decay,
            ..AdamWConfig::default()
        };
        Ok(Self {
            encoder_opt: AdamW::new(&model.encoder, adam),
            head_opt: AdamW::new(&model.head, adam),
            energy: Energy::new(config.energy.kind, config.energy.epsilon)?,
            tap: config.train.tap.level(e.layers)?,
            mask_rng: rng(config.train.seed, MASK_STREAM),
            reserved: vocab.reserved(),
            vocab_size: vocab.len(),
            compiled,
            model,
            config,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Masks a batch using the trainer's own random stream.
    pub fn mask_batch(&mut self, batch: &[Vec<TokenId>]) -> Vec<MaskedSentence> {
        batch
            .iter()
            .map(|ids| {
                mask_sentence(
                    ids,
                    self.config.train.mask_fraction,
                    self.reserved,
                    self.vocab_size,
                    &mut self.mask_rng,
                )
            })
            .collect()
    }

    /// Loss terms and gradients of `mlm + lambda * reg` for an already
    /// masked batch, without updating anything. The report's `step` is the
    /// step this batch would be.
    pub fn gradients(&self, batch: &[MaskedSentence]) -> Result<(StepReport, Model), TrainError> {
        let started = Instant::now();
        let lambda = self.config.train.lambda;
        let enabled = self.config.train.oscar;
        let targets: usize = batch.iter().map(|s| s.targets.len()).sum();
        let mlm_scale = 1.0 / targets.max(1) as f64;
        let reg_scale = lambda / batch.len().max(1) as f64;
        let max_len = self.config.encoder.max_seq_len;

        let mut grads = self.model.zeros_like();
        let mut mlm_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut entities = 0;
        let mut entity_time = Duration::ZERO;
        for (i, sentence) in batch.iter().enumerate() {
            if sentence.input.len() > max_len {
                return Err(TrainError::SequenceTooLong {
                    sentence: i,
                    len: sentence.sequence.len(),
                    max: max_len - 2,
                });
            }
            let cache = self.model.encoder.forward(&sentence.input)?;
            let (loss, d_top) = self.model.encoder.mlm_loss(
                &cache,
                &sentence.targets,
                mlm_scale,
                &mut grads.encoder,
            );
            mlm_sum += loss;
            let mut injected: Option<Array2<f64>> = None;
            if enabled {
                let t0 = Instant::now();
                let matches = self
                    .compiled
                    .automaton
                    .find_matches(&sentence.sequence, self.config.matching)?;
                let term = self.model.head.sentence(
                    cache.hidden[self.tap].view(),
                    &matches,
                    &self.compiled.lexicon,
                    &self.energy,
                    reg_scale,
                    &mut grads.head,
                )?;
                reg_sum += term.value;
                entities += term.entities;
                injected = Some(term.d_reps);
                entity_time += t0.elapsed();
            }
            self.model.encoder.backward(
                &cache,
                d_top,
                injected.as_ref().map(|g| (self.tap, g)),
                &mut grads.encoder,
            );
        }
        let mlm_loss = mlm_sum / targets.max(1) as f64;
        let reg_value = reg_sum / batch.len().max(1) as f64;
        let total_loss = mlm_loss + lambda * reg_value;
        let step = self.step + 1;
        if !total_loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                mlm: mlm_loss,
                reg: reg_value,
            });
        }
        Ok((
            StepReport {
                step,
                mlm_loss,
                reg_value,
                total_loss,
                entities_matched: entities,
                wall_time: started.elapsed(),
                entity_time,
            },
            grads,
        ))
    }

    /// Masks the batch, computes gradients and applies one update.
    pub fn step(&mut self, batch: &[Vec<TokenId>]) -> Result<StepReport, TrainError> {
        let started = Instant::now();
        let masked = self.mask_batch(batch);
        let (mut report, grads) = self.gradients(&masked)?;
        let t = &self.config.train;
        let lr = warmup_lr(t.lr, t.warmup_steps, report.step);
        self.encoder_opt.update(&mut self.model.encoder, &grads.encoder, lr);
        if t.oscar {
            self.head_opt.update(&mut self.model.head, &grads.head, lr);
        }
        self.step = report.step;
        report.wall_time = started.elapsed();
        Ok(report)
    }

    /// All parameters with the config echo and training seed.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_views(self.config.to_text(), self.config.train.seed, &self.model.tensors())
    }
}

/// Rejects an empty corpus and sentences that cannot fit the encoder.
pub fn check_corpus(corpus: &[Vec<TokenId>], max_seq_len: usize) -> Result<(), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let max = max_seq_len.saturating_sub(2);
    match corpus.iter().position(|s| s.len() > max) {
        Some(i) => Err(TrainError::SequenceTooLong {
            sentence: i,
            len: corpus[i].len(),
            max,
        }),
        None => Ok(()),
    }
}

/// Batch `step` (0-based), cycling through the corpus in order.
pub fn batch_at(corpus: &[Vec<TokenId>], batch_size: usize, step: usize) -> Vec<Vec<TokenId>> {
    (0..batch_size)
        .map(|j| corpus[(step * batch_size + j) % corpus.len()].clone())
        .collect()
}

/// Runs `train.steps` steps, handing each report to `on_step`.
pub fn train(
    config: &Config,
    vocab: &Vocab,
    compiled: CompiledLexicon,
    corpus: &[Vec<TokenId>],
    mut on_step: impl FnMut(&StepReport),
) -> Result<Trainer, TrainError> {
    config.validate()?;
    check_corpus(corpus, config.encoder.max_seq_len)?;
    let mut trainer = Trainer::new(config.clone(), vocab, compiled)?;
    for s in 0..config.train.steps {
        let batch = batch_at(corpus, config.train.batch_size, s);
        let report = trainer.step(&batch)?;
        on_step(&report);
    }
    Ok(trainer)
}

/// Mean timings for one composition method.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub method: String,
    pub steps: usize,
    pub mean_step_ms: f64,
    pub mean_entity_ms: f64,
    pub entities_per_step: f64,
    pub composition_params: usize,
}

/// Trains each composition method for `bench.steps` steps at hidden size
/// `bench.hidden` and reports mean per-step times.
pub fn bench(
    config: &Config,
    vocab: &Vocab,
    compiled: &CompiledLexicon,
    corpus: &[Vec<TokenId>],
) -> Result<Vec<BenchRow>, TrainError> {
    let mut rows = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let mut cfg = config.clone();
        cfg.composition.method = method;
        cfg.composition.dim = None;
        cfg.encoder.hidden = config.bench.hidden;
        cfg.train.steps = config.bench.steps;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(cfg.train.steps);
        cfg.validate()?;
        check_corpus(corpus, cfg.encoder.max_seq_len)?;
        let mut trainer = Trainer::new(cfg.clone(), vocab, compiled.clone())?;
        let mut step_time = Duration::ZERO;
        let mut entity_time = Duration::ZERO;
        let mut entities = 0;
        for s in 0..cfg.train.steps {
            let report = trainer.step(&batch_at(corpus, cfg.train.batch_size, s))?;
            step_time += report.wall_time;
            entity_time += report.entity_time;
            entities += report.entities_matched;
        }
        let n = cfg.train.steps.max(1) as f64;
        rows.push(BenchRow {
            method: method.to_string(),
            steps: cfg.train.steps,
            mean_step_ms: step_time.as_secs_f64() * 1e3 / n,
            mean_entity_ms: entity_time.as_secs_f64() * 1e3 / n,
            entities_per_step: entities as f64 / n,
            composition_params: trainer.model.head.composer.param_count(),
        });
    }
    Ok(rows)
}
