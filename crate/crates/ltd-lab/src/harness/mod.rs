//! Experiment orchestration: configuration, corpus building, paired
//! baseline/LTD training runs, and report generation.

pub mod config;
pub mod corpus;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, Mode};
pub use corpus::{build_corpus, Corpus};
pub use report::{compare_peaks, frame_profile, paired_peak_experiment, report_heatmaps};
pub use train::{run_training, run_training_in_memory, LossMode, RunLog};
