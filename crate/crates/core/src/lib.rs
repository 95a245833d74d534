//! Semantic relational set abstraction toolkit.
//!
//! Builds a relational graph over event categories, propagates language
//! embeddings through it, trains a set abstraction module over every subset
//! of an input set, and evaluates abstraction recognition, set completion and
//! odd-one-out detection.

pub mod corpus;
pub mod embed;
pub mod evalsuite;
pub mod relgraph;
pub mod sam;
pub mod sampler;
pub mod synth;

pub use corpus::{Corpus, Split, VideoRecord};
pub use embed::{EmbeddingTable, WordVectorTable};
pub use relgraph::{build_graph, NodeId, NodeSpec, RelationalGraph};
