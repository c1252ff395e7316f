//! Multi-modal knowledge graph data: graphs, alignments, feature stores and
//! synthetic generators.

mod alignment;
mod bow;
mod features;
mod kg;
pub mod synthetic;

pub use alignment::{load_pairs, write_pairs, AlignmentSet};
pub use bow::{build_bow_features, BowEncoding, BowWeight};
pub use features::{FeatureStats, ModalityFeatureStore};
pub use kg::{
    load_attribute_triples, load_triples, write_attribute_triples, write_triples, KnowledgeGraph, NamePolicy,
    Split, Triple, Vocab,
};
