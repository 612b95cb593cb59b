//! Few-shot deep hashing over precomputed backbone tokens: knowledge-anchored
//! low-rank adapters, discrete code optimization and Hamming retrieval.

pub mod dataio;
pub mod encoder;
pub mod error;
pub mod hashing;
pub mod kiddo;
pub mod knowledge;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;

pub use dataio::{CodesFile, FeatureStore, Manifest};
pub use error::{Error, Result};
pub use kiddo::{CodeMatrix, DccProblem, DccRule};
pub use knowledge::{KnowledgePool, Selection};
pub use model::{HashModel, TrainConfig, TrainState};
pub use retrieval::{MetricReport, PackedCodes, RetrievalIndex};
pub use tensor::{Graph, Mat, Rng, Var};
