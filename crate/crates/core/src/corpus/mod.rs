//! Synthetic corpora with planted next-item rules, Amazon-style log
//! ingestion, splitting and candidate pools.

mod amazon;
mod catalog;
mod dataset;
mod pools;
mod sequences;

pub use amazon::{ingest_amazon, ingest_reader, IngestConfig, Ingested};
pub use catalog::{argmax, cosine, generate_catalog, Catalog, CatalogConfig, Item};
pub use dataset::{generate_dataset, CorpusConfig, Dataset, Manifest, Split, SplitSpec};
pub use pools::{sample_candidate_pool, CandidatePool};
pub use sequences::{generate_sequences, Example, InteractionSequence, Rule, SequenceConfig};
