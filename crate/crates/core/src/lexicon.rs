//! Ontology entity lexicon: pretrained entity embeddings keyed by the
//! subword-ID surface form of each entity name.
//!
//! The input is the plain-text word-vector format used by NumberBatch and
//! GloVe: one `name v1 v2 ... vd` record per line, optionally preceded by a
//! `K d` header. Multi-word names use `_` between words, and ConceptNet
//! URIs (`/c/en/police_officer/n`) are reduced to their term.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read embeddings {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file contains no entity records")]
    Empty,
    #[error("line {line}: expected {expected} vector components, found {found}")]
    InconsistentDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: component {value:?} is not a finite number")]
    NonNumeric { line: usize, value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub name: String,
    pub surface: Vec<TokenId>,
    pub embedding: Vec<f64>,
}

/// Counts describing how an embedding file was ingested.
///
/// `ingested + dropped_unk + collisions + malformed_skipped == records`,
/// where `records` counts every non-blank, non-comment, non-header line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub records: usize,
    pub ingested: usize,
    pub dropped_unk: usize,
    pub collisions: usize,
    pub malformed_skipped: usize,
    pub dim: usize,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ingested:{}", self.ingested)?;
        writeln!(f, "dropped_unk:{}", self.dropped_unk)?;
        writeln!(f, "collisions:{}", self.collisions)?;
        writeln!(f, "malformed_skipped:{}", self.malformed_skipped)?;
        writeln!(f, "d_e:{}", self.dim)?;
        writeln!(f, "K:{}", self.ingested)
    }
}

/// K ontology entities with their pretrained embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityLexicon {
    entries: Vec<Entity>,
    dim: usize,
    vocab_size: usize,
    index: HashMap<Vec<TokenId>, usize>,
}

impl EntityLexicon {
    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<(Self, IngestReport), LexiconError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text, vocab)
    }

    pub fn from_text(text: &str, vocab: &Vocab) -> Result<(Self, IngestReport), LexiconError> {
        let reserved = vocab.reserved();
        let mut report = IngestReport::default();
        let mut dim: Option<usize> = None;
        let mut entries: Vec<Entity> = Vec::new();
        let mut index: HashMap<Vec<TokenId>, usize> = HashMap::new();
        let mut seen_first = false;

        for (line_idx, line) in text.lines().enumerate() {
            let line_no = line_idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split_whitespace();
            let name_field = fields.next().unwrap_or_default();
            let components: Vec<&str> = fields.collect();

            if !seen_first {
                seen_first = true;
                if let Some(header_dim) = parse_header(name_field, &components) {
                    dim = Some(header_dim);
                    continue;
                }
            }

            report.records += 1;
            if components.is_empty() {
                report.malformed_skipped += 1;
                continue;
            }
            match dim {
                Some(expected) if expected != components.len() => {
                    return Err(LexiconError::InconsistentDim {
                        line: line_no,
                        expected,
                        found: components.len(),
                    })
                }
                _ => dim = Some(components.len()),
            }
            let embedding = components
                .iter()
                .map(|c| match c.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(LexiconError::NonNumeric {
                        line: line_no,
                        value: (*c).to_string(),
                    }),
                })
                .collect::<Result<Vec<f64>, _>>()?;

            let name = entity_term(name_field);
            let surface = vocab.tokenize(&name.replace('_', " ")).ids;
            if surface.is_empty() {
                report.malformed_skipped += 1;
                continue;
            }
            if surface.contains(&reserved.unk) {
                report.dropped_unk += 1;
                continue;
            }
            if surface.iter().any(|&id| reserved.contains(id)) {
                report.malformed_skipped += 1;
                continue;
            }
            if index.contains_key(&surface) {
                report.collisions += 1;
                continue;
            }
            index.insert(surface.clone(), entries.len());
            entries.push(Entity {
                name: name.to_string(),
                surface,
                embedding,
            });
            report.ingested += 1;
        }

        if report.records == 0 {
            return Err(LexiconError::Empty);
        }
        let dim = dim.unwrap_or(0);
        report.dim = dim;
        Ok((
            Self {
                entries,
                dim,
                vocab_size: vocab.len(),
                index,
            },
            report,
        ))
    }

    /// Builds a lexicon from already-tokenized entries. Later entries whose
    /// surface repeats an earlier one are discarded.
    pub fn from_entries(
        entries: impl IntoIterator<Item = Entity>,
        dim: usize,
        vocab_size: usize,
    ) -> Self {
        let mut kept = Vec::new();
        let mut index = HashMap::new();
        for entry in entries {
            assert_eq!(entry.embedding.len(), dim, "embedding dimension mismatch");
            assert!(!entry.surface.is_empty(), "empty entity surface");
            if index.contains_key(&entry.surface) {
                continue;
            }
            index.insert(entry.surface.clone(), kept.len());
            kept.push(entry);
        }
        Self {
            entries: kept,
            dim,
            vocab_size,
            index,
        }
    }

    pub fn entries(&self) -> &[Entity] {
        &self.entries
    }

    pub fn entity(&self, index: usize) -> &Entity {
        &self.entries[index]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Embedding dimension d_e.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Size of the vocabulary the surfaces were tokenized with.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn lookup(&self, surface: &[TokenId]) -> Option<usize> {
        self.index.get(surface).copied()
    }

    /// K x d_e matrix whose row i is entry i's embedding.
    pub fn embedding_matrix(&self) -> Array2<f64> {
        let mut matrix = Array2::zeros((self.entries.len(), self.dim));
        for (mut row, entry) in matrix.rows_mut().into_iter().zip(&self.entries) {
            row.iter_mut()
                .zip(&entry.embedding)
                .for_each(|(dst, &src)| *dst = src);
        }
        matrix
    }
}

fn parse_header(first: &str, rest: &[&str]) -> Option<usize> {
    if rest.len() != 1 {
        return None;
    }
    let _count: usize = first.parse().ok()?;
    rest[0].parse().ok()
}

/// Strips a ConceptNet `/c/<lang>/` prefix and any trailing `/pos/...` sense.
fn entity_term(name: &str) -> &str {
    match name.strip_prefix("/c/") {
        Some(rest) => {
            let after_lang = rest.split_once('/').map_or(rest, |(_, term)| term);
            after_lang.split('/').next().unwrap_or(after_lang)
        }
        None => name,
    }
}
