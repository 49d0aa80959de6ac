//! Datasets, random streams and step-size schedules shared by every study.

mod dataset;
pub mod rng;
mod schedule;

pub use dataset::{load_csv_dataset, CsvOptions, Dataset};
pub use rng::{generate_gaussian_batch, RngStream};
pub use schedule::{LearningRateSchedule, ScheduleKind};
