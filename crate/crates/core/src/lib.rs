//! Nested attention multiple-instance learning for slide-level grading.
//!
//! The pipeline turns tile coordinates into regions ([`regiongrid`]), fuses
//! per-magnification tile embeddings into nested bags ([`embedstore`]),
//! aggregates them with attention models ([`diffcore`], [`milmodels`]),
//! trains with the Focal Tversky loss ([`trainer`]) and reports slide and
//! region level results ([`evalreport`]).

pub mod cli;
pub mod diffcore;
pub mod embedstore;
pub mod evalreport;
pub mod milmodels;
pub mod regiongrid;
pub mod trainer;
