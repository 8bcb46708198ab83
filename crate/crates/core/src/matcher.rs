//! Entity detection over subword-ID streams.
//!
//! The lexicon's surface sequences are compiled into an Aho-Corasick
//! automaton over the subword-ID alphabet. Each state that completes a
//! surface carries `(length, entity)` outputs, so a single left-to-right
//! pass transduces a sentence into every entity mention it contains.

use std::collections::VecDeque;

use thiserror::Error;

use crate::lexicon::EntityLexicon;
use crate::vocab::{TokenId, TokenSequence};

pub(crate) const ROOT: u32 = 0;
pub(crate) const NONE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatchError {
    #[error("token id {id} at position {position} is outside the vocabulary (size {alphabet})")]
    IdOutOfRange {
        position: usize,
        id: TokenId,
        alphabet: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct State {
    /// Goto transitions sorted by token ID.
    pub(crate) next: Vec<(TokenId, u32)>,
    pub(crate) fail: u32,
    /// Nearest proper suffix state (via failure links) that has outputs.
    pub(crate) dict: u32,
    /// `(pattern length, entity index)` pairs ending at this state.
    pub(crate) outputs: Vec<(u32, u32)>,
}

impl State {
    fn goto(&self, id: TokenId) -> Option<u32> {
        self.next
            .binary_search_by_key(&id, |&(t, _)| t)
            .ok()
            .map(|i| self.next[i].1)
    }
}

/// Multi-pattern automaton recognizing exactly the lexicon's surface set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAutomaton {
    pub(crate) states: Vec<State>,
    pub(crate) alphabet: usize,
}

/// Whether subsumed and masked-overlap mentions survive filtering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchOptions {
    pub include_subsumed: bool,
    pub include_masked: bool,
}

/// One entity mention: 1-based `start`, length `len` in subwords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityMatch {
    pub start: usize,
    pub len: usize,
    pub entity: usize,
    pub demasked: bool,
}

impl EntityMatch {
    /// Last covered position (inclusive).
    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }
}

/// Transition counters from one scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub goto: usize,
    pub failure: usize,
    pub output_links: usize,
    pub outputs: usize,
}

impl ScanStats {
    pub fn transitions(&self) -> usize {
        self.goto + self.failure + self.output_links
    }
}

impl MatchAutomaton {
    pub fn compile(lexicon: &EntityLexicon) -> Self {
        let mut states = vec![State {
            fail: ROOT,
            dict: NONE,
            ..State::default()
        }];
        for (entity, entry) in lexicon.entries().iter().enumerate() {
            let mut current = ROOT as usize;
            for &id in &entry.surface {
                current = match states[current].goto(id) {
                    Some(next) => next as usize,
                    None => {
                        let fresh = states.len() as u32;
                        states.push(State {
                            fail: ROOT,
                            dict: NONE,
                            ..State::default()
                        });
                        let edges = &mut states[current].next;
                        let at = edges.partition_point(|&(t, _)| t < id);
                        edges.insert(at, (id, fresh));
                        fresh as usize
                    }
                };
            }
            states[current]
                .outputs
                .push((entry.surface.len() as u32, entity as u32));
        }

        // Breadth-first failure and dictionary links.
        let mut queue: VecDeque<u32> = states[ROOT as usize]
            .next
            .iter()
            .map(|&(_, child)| child)
            .collect();
        while let Some(parent) = queue.pop_front() {
            let edges = states[parent as usize].next.clone();
            for (id, child) in edges {
                let mut probe = states[parent as usize].fail;
                let fail = loop {
                    if let Some(target) = states[probe as usize].goto(id) {
                        break target;
                    }
                    if probe == ROOT {
                        break ROOT;
                    }
                    probe = states[probe as usize].fail;
                };
                let dict = if states[fail as usize].outputs.is_empty() {
                    states[fail as usize].dict
                } else {
                    fail
                };
                let state = &mut states[child as usize];
                state.fail = fail;
                state.dict = dict;
                queue.push_back(child);
            }
        }

        Self {
            states,
            alphabet: lexicon.vocab_size(),
        }
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet
    }

    /// Every span of `ids` equal to a lexicon surface, in scan order.
    pub fn scan(&self, ids: &[TokenId]) -> Result<(Vec<EntityMatch>, ScanStats), MatchError> {
        let mut stats = ScanStats::default();
        let mut found = Vec::new();
        let mut state = ROOT;
        for (offset, &id) in ids.iter().enumerate() {
            if id as usize >= self.alphabet {
                return Err(MatchError::IdOutOfRange {
                    position: offset + 1,
                    id,
                    alphabet: self.alphabet,
                });
            }
            state = loop {
                if let Some(next) = self.states[state as usize].goto(id) {
                    stats.goto += 1;
                    break next;
                }
                if state == ROOT {
                    break ROOT;
                }
                stats.failure += 1;
                state = self.states[state as usize].fail;
            };

            let end = offset + 1;
            let emit = |s: u32, found: &mut Vec<EntityMatch>| {
                for &(len, entity) in &self.states[s as usize].outputs {
                    let len = len as usize;
                    found.push(EntityMatch {
                        start: end + 1 - len,
                        len,
                        entity: entity as usize,
                        demasked: false,
                    });
                }
            };
            emit(state, &mut found);
            let mut link = self.states[state as usize].dict;
            while link != NONE {
                stats.output_links += 1;
                emit(link, &mut found);
                link = self.states[link as usize].dict;
            }
        }
        stats.outputs = found.len();
        Ok((found, stats))
    }

    /// Detects entity mentions, de-masking against original IDs, then
    /// applies the subsumption and mask filters.
    pub fn find_matches(
        &self,
        sentence: &TokenSequence,
        options: MatchOptions,
    ) -> Result<Vec<EntityMatch>, MatchError> {
        self.find_matches_with_stats(sentence, options)
            .map(|(matches, _)| matches)
    }

    pub fn find_matches_with_stats(
        &self,
        sentence: &TokenSequence,
        options: MatchOptions,
    ) -> Result<(Vec<EntityMatch>, ScanStats), MatchError> {
        let (mut raw, stats) = self.scan(&sentence.demasked_ids())?;
        raw.sort_unstable_by_key(|m| (m.start, m.len, m.entity));

        let subsumed = if options.include_subsumed {
            vec![false; raw.len()]
        } else {
            subsumed_flags(&raw)
        };

        let mut kept = Vec::with_capacity(raw.len());
        for (mut m, is_subsumed) in raw.into_iter().zip(subsumed) {
            if is_subsumed {
                continue;
            }
            m.demasked = (m.start..=m.end()).any(|p| sentence.is_masked(p));
            if m.demasked && !options.include_masked {
                continue;
            }
            kept.push(m);
        }
        Ok((kept, stats))
    }
}

/// Flags spans strictly contained in some other distinct span. `sorted`
/// must be ordered by `(start, len)`.
fn subsumed_flags(sorted: &[EntityMatch]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    // Start ascending, end descending: any distinct span seen earlier with
    // end >= this end contains this one.
    order.sort_by_key(|&i| (sorted[i].start, std::cmp::Reverse(sorted[i].end())));
    let mut flags = vec![false; sorted.len()];
    // Largest end among strictly earlier distinct spans.
    let mut max_end: Option<usize> = None;
    let mut group = 0;
    while group < order.len() {
        let span = (sorted[order[group]].start, sorted[order[group]].end());
        let mut stop = group;
        while stop < order.len()
            && (sorted[order[stop]].start, sorted[order[stop]].end()) == span
        {
            stop += 1;
        }
        // Identical spans share a verdict; they do not subsume each other.
        let contained = max_end.is_some_and(|e| e >= span.1);
        for &i in &order[group..stop] {
            flags[i] = contained;
        }
        max_end = Some(max_end.map_or(span.1, |e| e.max(span.1)));
        group = stop;
    }
    flags
}
