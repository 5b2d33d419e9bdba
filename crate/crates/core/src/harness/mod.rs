//! Configuration-driven experiment matrix with tables and plots.

mod matrix;
mod plot;
mod spec;
mod table;

pub use matrix::{
    cell_dir, collect_records, emit_report, obtain_teacher, records_csv, resolve_data, run_cell, run_matrix, Artifacts,
    CellFailure, Domains, MatrixOutcome, RunRecord, RECORDS_HEADER,
};
pub use plot::{emit_plots, PlotFiles, PLOT_NAMES};
pub use spec::{apply_override, ArchitectureConfig, DataSpec, ExperimentSpec, TeacherConfig};
pub use table::{emit_table, method_order, sort_records, Spread, TableRow, Tables};
