//! Command-line plumbing: synthetic corpora, experiment grids and report
//! merging. The binary in `main.rs` is a thin wrapper over these.

pub mod app;
pub mod grid;
pub mod report;
pub mod synth;

pub use grid::{read_comparison, run_grid, write_comparison, ComparisonRow, CorpusSource, ExperimentGrid, GridCell, GridOutcome};
pub use report::{merge_reports, read_long_csv, write_long_csv, LongRow, MergeOutcome, REPORT_METRICS};
pub use synth::{synth_corpus, SynthTask, SyntheticCorpusSpec};
