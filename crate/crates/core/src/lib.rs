//! Ontology-based semantic-composition regularization for masked-language
//! model pretraining.
//!
//! Entities from a pretrained ontology embedding table are located in
//! subword-ID streams by a multi-pattern automaton ([`matcher`]), the
//! encoder's representations over each mention are composed into a single
//! vector ([`composition`]), and the mean energy between the projected
//! composition and the ontology embedding ([`energy`]) is added to the MLM
//! loss ([`pretrainer`]).

pub mod vocab;
pub mod lexicon;
pub mod matcher;
pub mod params;
pub mod composition;
pub mod energy;
pub mod gradcheck;
pub mod encoder;
pub mod head;
pub mod optim;
pub mod pretrainer;
pub mod checkpoint;
pub mod cache;
pub mod config;

pub use lexicon::{Entity, EntityLexicon, IngestReport, LexiconError};
pub use matcher::{EntityMatch, MatchAutomaton, MatchError, MatchOptions};
pub use vocab::{TokenId, TokenSequence, Vocab, VocabError};
