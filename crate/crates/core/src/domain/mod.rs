//! Shared dialogue, action, entity and schema types.

pub mod corpus;
pub mod dialogue;
pub mod schema;
pub mod tokenize;

pub use corpus::{load_corpus, read_corpus, save_corpus, write_corpus, CorpusError, CorpusStats};
pub use dialogue::*;
pub use schema::*;
pub use tokenize::{normalize, tokenize};
