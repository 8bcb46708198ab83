//! Binary cache of a compiled lexicon and its automaton.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OSC1" version:u8
//! vocab_fingerprint:[u8; 32] vocab_size:u32 lowercase:u8
//! records ingested dropped_unk collisions malformed_skipped : u64 each
//! dim:u32 entries:u32
//!   per entry: name_len:u32 name:utf8 surface_len:u32 ids:u32* embedding:f64*dim
//! alphabet:u32 states:u32
//!   per state: fail:u32 dict:u32 next_len:u32 (token:u32 target:u32)*
//!              outputs_len:u32 (len:u32 entity:u32)*
//! ```
//!
//! Writing the same lexicon twice yields identical bytes.

use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::lexicon::{Entity, EntityLexicon, IngestReport};
use crate::matcher::{MatchAutomaton, State};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"OSC1";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a lexicon cache (bad magic bytes)")]
    BadMagic,
    #[error("unsupported cache version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("corrupt cache: {0}")]
    Corrupt(String),
    #[error("cache was compiled against a different vocabulary")]
    VocabMismatch,
}

impl CacheError {
    /// True for errors about the file's format rather than its inputs.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            CacheError::BadMagic | CacheError::Version { .. } | CacheError::Corrupt(_)
        )
    }
}

/// A lexicon together with its compiled automaton and ingest report.
#[derive(Debug, Clone)]
pub struct CompiledLexicon {
    pub lexicon: EntityLexicon,
    pub automaton: MatchAutomaton,
    pub report: IngestReport,
}

impl CompiledLexicon {
    pub fn new(lexicon: EntityLexicon, report: IngestReport) -> Self {
        let automaton = MatchAutomaton::compile(&lexicon);
        Self {
            lexicon,
            automaton,
            report,
        }
    }

    pub fn to_bytes(&self, vocab: &Vocab) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_into(&mut out, vocab).expect("writing to memory");
        out
    }

    fn write_into(&self, w: &mut Vec<u8>, vocab: &Vocab) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u8(VERSION)?;
        w.write_all(&vocab.fingerprint())?;
        write_len(w, vocab.len())?;
        w.write_u8(vocab.lowercase() as u8)?;
        let r = &self.report;
        for count in [r.records, r.ingested, r.dropped_unk, r.collisions, r.malformed_skipped] {
            w.write_u64::<LittleEndian>(count as u64)?;
        }
        write_len(w, self.lexicon.dim())?;
        write_len(w, self.lexicon.len())?;
        for entity in self.lexicon.entries() {
            write_len(w, entity.name.len())?;
            w.write_all(entity.name.as_bytes())?;
            write_len(w, entity.surface.len())?;
            for &id in &entity.surface {
                w.write_u32::<LittleEndian>(id)?;
            }
            for &v in &entity.embedding {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        write_len(w, self.automaton.alphabet)?;
        write_len(w, self.automaton.states.len())?;
        for state in &self.automaton.states {
            w.write_u32::<LittleEndian>(state.fail)?;
            w.write_u32::<LittleEndian>(state.dict)?;
            write_len(w, state.next.len())?;
            for &(token, target) in &state.next {
                w.write_u32::<LittleEndian>(token)?;
                w.write_u32::<LittleEndian>(target)?;
            }
            write_len(w, state.outputs.len())?;
            for &(len, entity) in &state.outputs {
                w.write_u32::<LittleEndian>(len)?;
                w.write_u32::<LittleEndian>(entity)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocab) -> Result<(), CacheError> {
        fs::write(path, self.to_bytes(vocab))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self, CacheError> {
        Self::from_bytes(&fs::read(path)?, vocab)
    }

    /// Parses a cache, checking that it was built from `vocab`.
    pub fn from_bytes(bytes: &[u8], vocab: &Vocab) -> Result<Self, CacheError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CacheError::BadMagic);
        }
        let mut r = Cursor::new(&bytes[4..]);
        let version = r.read_u8().map_err(truncated)?;
        if version != VERSION {
            return Err(CacheError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let parsed = read_body(&mut r, vocab).map_err(|e| match e {
            CacheError::Io(e) => truncated(e),
            other => other,
        })?;
        if (r.position() as usize) != bytes.len() - 4 {
            return Err(CacheError::Corrupt("trailing bytes".into()));
        }
        Ok(parsed)
    }
}

/// True when `bytes` start with the cache magic.
pub fn is_cache(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}

fn truncated(e: io::Error) -> CacheError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CacheError::Corrupt("truncated file".into())
    } else {
        CacheError::Io(e)
    }
}

fn write_len(w: &mut Vec<u8>, n: usize) -> io::Result<()> {
    let n = u32::try_from(n).map_err(|_| io::Error::other("length exceeds u32"))?;
    w.write_u32::<LittleEndian>(n)
}

fn read_len(r: &mut Cursor<&[u8]>) -> Result<usize, CacheError> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    // Every counted item takes at least one byte.
    if n > remaining {
        return Err(CacheError::Corrupt(format!("length {n} exceeds remaining {remaining} bytes")));
    }
    Ok(n)
}

fn read_body(r: &mut Cursor<&[u8]>, vocab: &Vocab) -> Result<CompiledLexicon, CacheError> {
    let mut fingerprint = [0u8; 32];
    r.read_exact(&mut fingerprint)?;
    let vocab_size = r.read_u32::<LittleEndian>()? as usize;
    let lowercase = r.read_u8()? != 0;
    if fingerprint != vocab.fingerprint() || vocab_size != vocab.len() || lowercase != vocab.lowercase() {
        return Err(CacheError::VocabMismatch);
    }
    let mut counts = [0usize; 5];
    for c in &mut counts {
        *c = r.read_u64::<LittleEndian>()? as usize;
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = read_len(r)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_len(r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CacheError::Corrupt("entity name is not UTF-8".into()))?;
        let surface_len = read_len(r)?;
        if surface_len == 0 {
            return Err(CacheError::Corrupt(format!("entity {name:?} has an empty surface")));
        }
        let surface = (0..surface_len)
            .map(|_| r.read_u32::<LittleEndian>())
            .collect::<io::Result<Vec<_>>>()?;
        if surface.iter().any(|&id| id as usize >= vocab_size) {
            return Err(CacheError::Corrupt(format!("entity {name:?} has an out-of-range id")));
        }
        let embedding = (0..dim)
            .map(|_| r.read_f64::<LittleEndian>())
            .collect::<io::Result<Vec<_>>>()?;
        entries.push(Entity {
            name,
            surface,
            embedding,
        });
    }
    let lexicon = EntityLexicon::from_entries(entries, dim, vocab_size);
    if lexicon.len() != count {
        return Err(CacheError::Corrupt("duplicate entity surfaces".into()));
    }

    let alphabet = r.read_u32::<LittleEndian>()? as usize;
    let state_count = read_len(r)?;
    if state_count == 0 {
        return Err(CacheError::Corrupt("automaton has no root state".into()));
    }
    let bad_state = |s: u32| s != crate::matcher::NONE && s as usize >= state_count;
    let mut states = Vec::with_capacity(state_count);
    for _ in 0..state_count {
        let fail = r.read_u32::<LittleEndian>()?;
        let dict = r.read_u32::<LittleEndian>()?;
        let next_len = read_len(r)?;
        let mut next = Vec::with_capacity(next_len);
        for _ in 0..next_len {
            let token = r.read_u32::<LittleEndian>()?;
            let target = r.read_u32::<LittleEndian>()?;
            if target as usize >= state_count {
                return Err(CacheError::Corrupt("transition to a missing state".into()));
            }
            next.push((token, target));
        }
        if next.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(CacheError::Corrupt("unsorted transitions".into()));
        }
        let outputs_len = read_len(r)?;
        let mut outputs = Vec::with_capacity(outputs_len);
        for _ in 0..outputs_len {
            let len = r.read_u32::<LittleEndian>()?;
            let entity = r.read_u32::<LittleEndian>()?;
            if entity as usize >= count || len == 0 {
                return Err(CacheError::Corrupt("invalid automaton output".into()));
            }
            outputs.push((len, entity));
        }
        if bad_state(fail) || bad_state(dict) {
            return Err(CacheError::Corrupt("link to a missing state".into()));
        }
        states.push(State {
            next,
            fail,
            dict,
            outputs,
        });
    }
    let [records, ingested, dropped_unk, collisions, malformed_skipped] = counts;
    Ok(CompiledLexicon {
        lexicon,
        automaton: MatchAutomaton { states, alphabet },
        report: IngestReport {
            records,
            ingested,
            dropped_unk,
            collisions,
            malformed_skipped,
            dim,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatchOptions;

    fn fixture() -> (Vocab, CompiledLexicon) {
        let vocab = Vocab::from_text("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nheart\nattack\nblood\n##y\n").unwrap();
        let text = "heart_attack 0.5 1.5\nheart 1 2\nbloody -1 0.25\nzebra 0 0\n";
        let (lexicon, report) = EntityLexicon::from_text(text, &vocab).unwrap();
        (vocab, CompiledLexicon::new(lexicon, report))
    }

    #[test]
    fn round_trip_is_behaviorally_identical() {
        let (vocab, compiled) = fixture();
        let bytes = compiled.to_bytes(&vocab);
        assert_eq!(bytes, compiled.to_bytes(&vocab));
        let loaded = CompiledLexicon::from_bytes(&bytes, &vocab).unwrap();
        assert_eq!(loaded.automaton, compiled.automaton);
        assert_eq!(loaded.lexicon.entries(), compiled.lexicon.entries());
        assert_eq!(loaded.report, compiled.report);
        let seq = vocab.tokenize("bloody heart attack");
        let opts = MatchOptions {
            include_subsumed: true,
            include_masked: true,
        };
        assert_eq!(
            loaded.automaton.find_matches(&seq, opts).unwrap(),
            compiled.automaton.find_matches(&seq, opts).unwrap()
        );
        assert_eq!(loaded.to_bytes(&vocab), bytes);
    }

    #[test]
    fn rejects_bad_headers() {
        let (vocab, compiled) = fixture();
        let mut bytes = compiled.to_bytes(&vocab);
        bytes[4] = 9;
        assert!(matches!(
            CompiledLexicon::from_bytes(&bytes, &vocab),
            Err(CacheError::Version { found: 9, expected: 1 })
        ));
        assert!(matches!(
            CompiledLexicon::from_bytes(b"OSC0\x01", &vocab),
            Err(CacheError::BadMagic)
        ));
        let bytes = compiled.to_bytes(&vocab);
        for cut in [5, 40, bytes.len() - 1] {
            let err = CompiledLexicon::from_bytes(&bytes[..cut], &vocab).unwrap_err();
            assert!(err.is_format_error(), "{cut}: {err}");
        }
        let other = vocab.clone().with_lowercase(false);
        assert!(matches!(
            CompiledLexicon::from_bytes(&bytes, &other),
            Err(CacheError::VocabMismatch)
        ));
    }
}
