//! Factorization tables, CDF sample dumps, metrics files and model snapshots.

mod cdf;
mod io;
mod table;

pub use cdf::{cdf_file_name, cdf_sample_dump, CdfSampleDump};
pub use io::{
    atomic_write, metrics_csv, write_metrics_csv, ModelSnapshot, NamedArray, METRICS_HEADER, SNAPSHOT_FORMAT,
    SNAPSHOT_VERSION,
};
pub use table::{factorization_table, FactorizationTable, JointCell, StateFactorization, MIN_TABLE_SAMPLES};
