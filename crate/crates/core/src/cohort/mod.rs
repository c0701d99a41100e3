//! Synthetic cohort generation, cohort files and partitioning.

pub mod generate;
pub mod io;
pub mod split;

pub use generate::{generate_cohort, generate_with_table, ClassCounts, CohortConfig};
pub use io::{import_indicator_csv, load_cohort, read_cohort, save_cohort, write_cohort};
pub use split::{split_clinical_aibench, Partition, SplitMode, SplitSpec};
