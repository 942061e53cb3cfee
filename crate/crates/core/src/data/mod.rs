//! Datasets: synthetic generation, CSV input/output, and windowing.

pub mod csv_io;
pub mod dataset;
pub mod synthetic;
pub mod windows;

pub use csv_io::{load_csv, load_dir, write_dataset, write_predictions, PredictionRow};
pub use dataset::{DemandDataset, DemandRow, RegionSeries, FEATURE_NAMES, NUM_FEATURES};
pub use synthetic::{generate_synthetic, generate_with_events, GeneratorConfig, SyntheticData, TextMode};
pub use windows::{PreparedData, Scaler, SeriesWindow, Split};
