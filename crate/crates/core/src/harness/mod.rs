//! Datasets, train/evaluate drivers, reports and snapshots.

mod dataset;
mod report;
mod run;
mod snapshot;

pub use dataset::{load_dataset, Dataset, DatasetError, Split};
pub use report::{
    accuracy_by_dataset, CostReport, DatasetAccuracy, ItemRecord, MemoryStats, RunKind, RunReport,
};
pub use run::{evaluate, train, training_order, Clock, FixedClock, ItemStep, StreamItem, SystemClock, Trainer};
pub use snapshot::{
    load_memory, save_memory, MemorySnapshot, PatternRecord, SnapshotError, TemplateRecord,
    FORMAT_VERSION, SNAPSHOT_EXTENSION,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("no items to run")]
    EmptyDataset,
    #[error("snapshot was built with embedding model `{snapshot}` but the config uses `{config}`")]
    EmbeddingModelMismatch { snapshot: String, config: String },
}
