//! Synthetic data, pixmap I/O, experiment configuration and end-to-end runs.

pub mod config;
pub mod dataset;
pub mod ppm;
pub mod run;

pub use config::{keys_help, AblateTarget, ExperimentConfig, Settings, KEYS};
pub use dataset::{make_dataset, DatasetSpec, ToyDataset, NEGATIVE_CLASS, SHAPES};
pub use ppm::{decode_image, encode_image, read_image, write_image};
pub use run::{execute, run_dir, validate, Command, RunReport};
