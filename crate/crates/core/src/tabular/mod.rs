//! Tabular datasets: schema, CSV ingestion, preprocessing, source statistics
//! and deterministic batch streams.
//!
//! Labels are `1..=C` in files and `0..C` in memory.

mod dataset;
mod preprocess;
mod schema;
mod stats;
mod stream;

pub use dataset::{load_dataset, Dataset, Role, UNKNOWN_CATEGORY};
pub use preprocess::{ColumnEncoder, Encoded, EncodedGroup, Preprocessor, STD_FLOOR};
pub use schema::{ColumnKind, ColumnSchema, LabelSpec, Schema};
pub use stats::SourceStats;
pub use stream::{batch_indices, stream_batches, BatchOrder, BatchStream};
