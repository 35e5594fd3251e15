//! CSV ingestion, target cleaning and feature engineering.

mod cache;
mod clean;
mod csv_io;
mod features;

use thiserror::Error;

use crate::codec::DecodeError;
use crate::geomodel::GeoError;

pub use cache::{decode_table, encode_table, TABLE_MAGIC};
pub use clean::{clean_targets, log_transform, CleanMode, CleaningReport, DEFAULT_PERCENTILE};
pub use csv_io::{
    read_drivers, read_drivers_csv, read_observations, read_observations_csv, write_drivers,
    write_observations,
};
pub use features::{
    build_features, feature_row, filter_by_region, global_features, spatial_features,
    split_by_holdout, FeatureKind, FeatureSchema, FeatureTable, Normalization, TimeRange,
    DEFAULT_AVERAGES_MIN, DEFAULT_LAGS_MIN,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("missing required column '{0}'")]
    MissingColumn(String),
    #[error("line {line}: non-monotonic time")]
    NonMonotonicTime { line: u64 },
    #[error("line {line}: gap of {gap} s exceeds one missing sample at cadence {cadence} s")]
    Gap { line: u64, gap: i64, cadence: i64 },
    #[error("column '{column}': missing value at row {row} cannot be interpolated")]
    MissingValue { column: String, row: usize },
    #[error("line {line}: {message}")]
    OutOfDomain { line: u64, message: String },
    #[error("empty input")]
    EmptyInput,
    #[error("non-positive flux {0} cannot be log-transformed")]
    NonPositive(f64),
    #[error("invalid feature schema: {0}")]
    Schema(String),
    #[error("selection is empty: {0}")]
    EmptySelection(String),
    #[error("region labels are absent")]
    LabelsAbsent,
    #[error("invalid percentile {0}")]
    InvalidPercentile(f64),
    #[error("feature cache: {0}")]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}
