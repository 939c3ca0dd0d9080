//! Desk-scale pre-training: data ingestion, optimizer, online probes,
//! checkpoints and metrics.

mod checkpoint;
mod data;
mod metrics;
mod optim;
mod probe;
mod train;

pub use checkpoint::{Checkpoint, Entry, EntryData, EntryReader};
pub use data::{
    class_motifs, load_cifar_dir, load_cifar_file, load_image_folder, parse_cifar_records, parse_ppm, read_image,
    synthetic_dataset, write_cifar_binary, write_ppm, Dataset, DatasetFormat, DatasetSpec, Split,
};
pub use metrics::{read_metrics_csv, to_csv_string, MetricsRecord, MetricsWriter, RunSummary, CSV_HEADER};
pub use optim::{LrSchedule, Optimizer, OptimizerKind, TauSchedule, LARS_ETA};
pub use probe::{accuracy_of, eval_view, extract_features, probe_accuracy, stack, EvalLayer, ProbeHead};
pub use train::{
    checkpoint_path, fit, fit_state, load_splits, resume, FitOptions, FitOutcome, TrainConfig, TrainState,
};
