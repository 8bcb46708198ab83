//! Subword vocabulary and greedy longest-match-first WordPiece tokenization.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Continuation prefix for non-initial pieces of a word.
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate token {token:?} on lines {first} and {second}")]
    Duplicate {
        token: String,
        first: usize,
        second: usize,
    },
    #[error("reserved token {0} is missing from the vocabulary")]
    MissingReserved(&'static str),
    #[error("empty token on line {0}")]
    EmptyLine(usize),
    #[error("masked position {position} outside sentence of length {len}")]
    MaskOutOfRange { position: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReservedIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl ReservedIds {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

/// An immutable subword vocabulary. IDs are 0-based line indices of the
/// vocabulary file.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    reserved: ReservedIds,
    lowercase: bool,
}

impl Vocab {
    /// Reads a vocabulary file with one token per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        // A single trailing LF terminates the last line rather than adding an empty one.
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Self::from_tokens(Vec::<String>::new());
        }
        let mut tokens = Vec::new();
        for (line_no, line) in body.split('\n').enumerate() {
            let token = line.strip_suffix('\r').unwrap_or(line);
            if token.is_empty() {
                return Err(VocabError::EmptyLine(line_no + 1));
            }
            tokens.push(token.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens<S: Into<String>>(
        tokens: impl IntoIterator<Item = S>,
    ) -> Result<Self, VocabError> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(VocabError::EmptyLine(id + 1));
            }
            if let Some(first) = id_of.insert(token.clone(), id as TokenId) {
                return Err(VocabError::Duplicate {
                    token: token.clone(),
                    first: first as usize + 1,
                    second: id + 1,
                });
            }
        }
        let lookup = |name: &'static str| {
            id_of
                .get(name)
                .copied()
                .ok_or(VocabError::MissingReserved(name))
        };
        let reserved = ReservedIds {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
        };
        Ok(Self {
            tokens,
            id_of,
            reserved,
            lowercase: true,
        })
    }

    /// Enables or disables Unicode lowercasing before tokenization (on by default).
    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn reserved(&self) -> ReservedIds {
        self.reserved
    }

    /// SHA-256 over the token list and the lowercasing flag. Used to tie
    /// compiled lexicon caches to the vocabulary they were built against.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update([b'\n']);
        }
        hasher.update([self.lowercase as u8]);
        hasher.finalize().into()
    }

    /// Tokenizes whitespace-separated text into subword IDs.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        let normalized;
        let text = if self.lowercase {
            normalized = text.to_lowercase();
            normalized.as_str()
        } else {
            text
        };
        for word in text.split_whitespace() {
            self.tokenize_word_into(word, &mut ids);
        }
        TokenSequence::new(ids)
    }

    /// Greedy longest-match-first decomposition of a single word. The word
    /// is used as given (no lowercasing).
    pub fn tokenize_word_into(&self, word: &str, out: &mut Vec<TokenId>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.reserved.unk);
            return;
        }
        let boundaries: Vec<usize> = chars
            .iter()
            .map(|&(offset, _)| offset)
            .chain(std::iter::once(word.len()))
            .collect();

        let mark = out.len();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.push_str(&word[boundaries[start]..boundaries[end]]);
                if let Some(id) = self.id_of(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.reserved.unk);
                    return;
                }
            }
        }
    }

    /// Joins pieces back into words, stripping continuation prefixes.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut text = String::new();
        for &id in ids {
            let token = self.token(id).unwrap_or(UNK);
            match token.strip_prefix(CONTINUATION) {
                Some(rest) if !text.is_empty() => text.push_str(rest),
                _ => {
                    if !text.is_empty() {
                        text.push(' ');
                    }
                    text.push_str(token);
                }
            }
        }
        text
    }
}

/// A sentence as subword IDs, with optional mask annotations.
///
/// Positions are 1-based. Every masked position holds the `[MASK]` ID in
/// `ids` and keeps its pre-masking ID in `original_ids`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    original_ids: BTreeMap<usize, TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self {
            ids,
            original_ids: BTreeMap::new(),
        }
    }

    /// Replaces each listed 1-based position with `mask_id`, remembering the
    /// ID that was there.
    pub fn with_masks(
        mut self,
        positions: impl IntoIterator<Item = usize>,
        mask_id: TokenId,
    ) -> Result<Self, VocabError> {
        for position in positions {
            if position == 0 || position > self.ids.len() {
                return Err(VocabError::MaskOutOfRange {
                    position,
                    len: self.ids.len(),
                });
            }
            let slot = &mut self.ids[position - 1];
            if let std::collections::btree_map::Entry::Vacant(entry) =
                self.original_ids.entry(position)
            {
                entry.insert(*slot);
                *slot = mask_id;
            }
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.original_ids.keys().copied()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.original_ids.contains_key(&position)
    }

    pub fn original_id(&self, position: usize) -> Option<TokenId> {
        self.original_ids.get(&position).copied()
    }

    /// The sentence with every masked position restored to its original ID.
    pub fn demasked_ids(&self) -> Vec<TokenId> {
        let mut ids = self.ids.clone();
        for (&position, &id) in &self.original_ids {
            ids[position - 1] = id;
        }
        ids
    }
}
