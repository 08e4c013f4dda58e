//! Ontology-partitioned parallel training of knowledge graph embeddings.
//!
//! Triples are grouped by the most specific class of their head entity, the
//! groups are trained concurrently with lock-free sparse SGD, and the
//! resulting embeddings are scored on filtered link prediction and on entity
//! typing.

pub mod error;
pub mod eval;
pub mod exec;
pub mod ingest;
pub mod models;
pub mod ontology;
pub mod partition;
pub mod rng;
pub mod store;
pub mod subgraph;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use models::{Dtype, EmbeddingTable, ModelKind, Norm};
pub use ontology::{ClassHierarchy, ClassId};
pub use partition::{PartitionPlan, Strategy};
pub use store::{Triple, TripleStore};
pub use trainer::{TrainConfig, TrainLog, Trainer};
