//! File formats, run directories and reports for `brcsgan-core`.

pub mod files;
pub mod report;
pub mod run;
