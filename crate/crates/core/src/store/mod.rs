//! Embedding banks, class vocabularies and exemplar sourcing.

mod bank;
mod exemplars;
mod vocab;

pub use bank::{BankRecord, EmbeddingBank, SourceTag, BANK_MAGIC, BANK_VERSION};
pub use exemplars::{
    resolve_exemplars, Candidate, CandidatePool, CatalogEntry, ExemplarCatalog, ExemplarRef, PoolFile, PoolKind,
    ResolveConfig, ShortfallEntry, Tier,
};
pub use vocab::{Bucket, ClassEntry, Vocabulary};
