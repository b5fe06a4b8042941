//! Zero-shot retrieval by answer-augmented BM25.
//!
//! A query is first run through BM25; its top candidates are shown to a
//! language model, which writes several answer passages; the query is then
//! interleaved with those answers and run through BM25 again.

pub mod bm25;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod index;
pub mod llm;
pub mod pipeline;
pub mod prompting;

pub use bm25::{retrieve, Bm25Params, IdfVariant, RankedList, ScoredDoc};
pub use corpus::{tokenize, truncate, Collection, Document, Query, TokenSequence};
pub use index::{build_index, load_index, save_index, AnalysisOptions, InvertedIndex};
