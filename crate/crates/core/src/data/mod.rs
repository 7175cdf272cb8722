//! Dataset ingestion, minibatching, checkpoint persistence and metrics records.

mod checkpoint;
mod dataset;
mod idx;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{batches, Batch, LabeledDataset, Provenance};
pub use idx::{load_idx, parse_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use metrics::{read_metrics, write_metrics, MetricsRecord};
