//! `oscar` command-line entry points.
//!
//! Exit codes: 0 success, 1 input error, 2 version or format error,
//! 3 verification failure. Data goes to standard output as JSON lines or
//! key:value text; diagnostics go to standard error.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use oscar::cache::{is_cache, CacheError, CompiledLexicon};
use oscar::config::Config;
use oscar::gradcheck::{self, GradcheckConfig};
use oscar::pretrainer::{batch_at, bench, check_corpus, tokenize_corpus, Trainer};
use oscar::{EntityLexicon, MatchOptions, Vocab};
use serde_json::json;

#[derive(Parser)]
#[command(name = "oscar", version, about = "Ontology-regularized masked-language-model tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize an embedding file against a vocabulary and write a compiled cache.
    CompileLexicon {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Print the entity matches of every corpus line as JSON.
    Annotate {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        include_subsumed: bool,
        #[arg(long)]
        include_masked: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Finite-difference check of every composition and energy gradient.
    Gradcheck {
        #[command(flatten)]
        settings: Settings,
    },
    /// Pretrain and write metrics.jsonl and checkpoint.bin.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Mean per-step time for each composition method.
    Bench {
        #[command(flatten)]
        settings: Settings,
    },
}

#[derive(Args)]
struct Settings {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides such as `--train.steps 20` or `--energy.kind=angular`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: 1,
            error: e.into(),
        }
    }
}

fn failure(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

type Result<T> = std::result::Result<T, Failure>;

/// Parses `--key value` and `--key=value` pairs.
fn parse_overrides(args: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("unexpected argument {arg:?}; overrides look like --key value"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = iter.next().ok_or_else(|| anyhow!("missing value for --{key}"))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

impl Settings {
    /// File values first, then flag overrides.
    fn resolve(&self, extra: &[(&str, String)]) -> anyhow::Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for (key, value) in parse_overrides(&self.overrides)? {
            config.set(&key, &value)?;
        }
        for (key, value) in extra {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn load_vocab(path: &Path, config: &Config) -> anyhow::Result<Vocab> {
    let vocab = Vocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))?;
    Ok(vocab.with_lowercase(config.lowercase))
}

fn cache_failure(e: CacheError, path: &Path) -> Failure {
    let code = if e.is_format_error() { 2 } else { 1 };
    failure(code, anyhow!(e).context(format!("reading cache {}", path.display())))
}

/// Accepts either a compiled cache or an embedding text file.
fn load_lexicon(path: &Path, vocab: &Vocab) -> Result<CompiledLexicon> {
    let bytes = fs::read(path).with_context(|| format!("reading lexicon {}", path.display()))?;
    if is_cache(&bytes) {
        return CompiledLexicon::from_bytes(&bytes, vocab).map_err(|e| cache_failure(e, path));
    }
    let text = String::from_utf8(bytes).map_err(|_| anyhow!("{} is neither a cache nor UTF-8 text", path.display()))?;
    let (lexicon, report) = EntityLexicon::from_text(&text, vocab)
        .with_context(|| format!("ingesting lexicon {}", path.display()))?;
    Ok(CompiledLexicon::new(lexicon, report))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| anyhow!("{key} is not set (config file or --{key})"))
}

struct TrainingInputs {
    vocab: Vocab,
    compiled: CompiledLexicon,
    corpus: Vec<Vec<oscar::TokenId>>,
}

fn training_inputs(config: &Config) -> Result<TrainingInputs> {
    let vocab = load_vocab(required(&config.data.vocab, "data.vocab")?, config)?;
    let compiled = load_lexicon(required(&config.data.lexicon, "data.lexicon")?, &vocab)?;
    let corpus_path = required(&config.data.corpus, "data.corpus")?;
    let text = fs::read_to_string(corpus_path)
        .with_context(|| format!("reading corpus {}", corpus_path.display()))?;
    let corpus = tokenize_corpus(&vocab, &text);
    check_corpus(&corpus, config.encoder.max_seq_len)?;
    Ok(TrainingInputs {
        vocab,
        compiled,
        corpus,
    })
}

fn compile_lexicon(embeddings: &Path, vocab: &Path, out: &Path, settings: &Settings) -> Result<()> {
    let config = settings.resolve(&[])?;
    let vocab = load_vocab(vocab, &config)?;
    let (lexicon, report) = EntityLexicon::load(embeddings, &vocab)
        .with_context(|| format!("ingesting {}", embeddings.display()))?;
    let compiled = CompiledLexicon::new(lexicon, report);
    compiled
        .save(out, &vocab)
        .with_context(|| format!("writing {}", out.display()))?;
    print!("{}", compiled.report);
    Ok(())
}

fn annotate(cache: &Path, vocab: &Path, corpus: &Path, options: MatchOptions, settings: &Settings) -> Result<()> {
    let config = settings.resolve(&[])?;
    let vocab = load_vocab(vocab, &config)?;
    let compiled = CompiledLexicon::load(cache, &vocab).map_err(|e| cache_failure(e, cache))?;
    let text = fs::read_to_string(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for (i, line) in text.lines().enumerate() {
        let seq = vocab.tokenize(line);
        let matches = compiled.automaton.find_matches(&seq, options)?;
        let matches: Vec<_> = matches
            .iter()
            .map(|m| {
                json!({
                    "start": m.start,
                    "len": m.len,
                    "entity": compiled.lexicon.entity(m.entity).name,
                    "index": m.entity,
                    "demasked": m.demasked,
                })
            })
            .collect();
        writeln!(out, "{}", json!({ "line": i + 1, "matches": matches }))?;
    }
    out.flush()?;
    Ok(())
}

fn run_gradcheck(settings: &Settings) -> Result<()> {
    let config = settings.resolve(&[])?;
    let g = &config.gradcheck;
    let cfg = GradcheckConfig {
        configs: g.configs,
        seed: g.seed,
        step: g.step,
        tolerance: g.tolerance,
        activation: config.composition.g,
        ..GradcheckConfig::default()
    };
    let reports = gradcheck::run(&cfg, None);
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(failure(3, anyhow!("{failed} of {} gradient cells failed", reports.len())));
    }
    eprintln!("all {} gradient cells pass", reports.len());
    Ok(())
}

fn run_train(out: &Path, seed: Option<u64>, settings: &Settings) -> Result<()> {
    let extra: Vec<(&str, String)> = seed.map(|s| ("train.seed", s.to_string())).into_iter().collect();
    let config = settings.resolve(&extra)?;
    let inputs = training_inputs(&config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(
        fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let mut trainer = Trainer::new(config.clone(), &inputs.vocab, inputs.compiled)?;
    let t = &config.train;
    for s in 0..t.steps {
        let report = trainer.step(&batch_at(&inputs.corpus, t.batch_size, s))?;
        writeln!(metrics, "{}", report.to_json_line(t.log_timing))?;
        if report.step % 50 == 0 || report.step == t.steps {
            eprintln!(
                "step {}: mlm {:.4} reg {:.4} total {:.4}",
                report.step, report.mlm_loss, report.reg_value, report.total_loss
            );
        }
    }
    metrics.flush()?;
    let checkpoint_path = out.join("checkpoint.bin");
    trainer
        .checkpoint()
        .save(&checkpoint_path)
        .with_context(|| format!("writing {}", checkpoint_path.display()))?;
    eprintln!("wrote {} and {}", metrics_path.display(), checkpoint_path.display());
    Ok(())
}

fn run_bench(settings: &Settings) -> Result<()> {
    let config = settings.resolve(&[])?;
    let inputs = training_inputs(&config)?;
    let rows = bench(&config, &inputs.vocab, &inputs.compiled, &inputs.corpus)?;
    for row in &rows {
        println!("{}", serde_json::to_string(row)?);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CompileLexicon {
            embeddings,
            vocab,
            out,
            settings,
        } => compile_lexicon(&embeddings, &vocab, &out, &settings),
        Command::Annotate {
            cache,
            vocab,
            corpus,
            include_subsumed,
            include_masked,
            settings,
        } => {
            let options = MatchOptions {
                include_subsumed,
                include_masked,
            };
            annotate(&cache, &vocab, &corpus, options, &settings)
        }
        Command::Gradcheck { settings } => run_gradcheck(&settings),
        Command::Train { out, seed, settings } => run_train(&out, seed, &settings),
        Command::Bench { settings } => run_bench(&settings),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
