//! Dataset I/O, experiment orchestration and reports.

mod experiment;
mod io;
mod report;

pub use experiment::{
    evaluate_demixer, evaluate_network, load_subjects, network_pulse, run_experiment, score_windows, scored_span,
    shared_ids, write_run, ExperimentSpec, Mode, RunOutput, Workbench, BLAND_ALTMAN_CSV, INCOMPLETE_MARKER,
    METRICS_JSON, RUN_MANIFEST, SKIN_TYPES_CSV, WINDOWS_CSV,
};
pub use io::{
    load_dataset, read_frame_header, read_frames, read_gold_csv, write_frames, write_gold_csv,
    Dataset, DatasetManifest, FrameHeader, Subject, SubjectEntry, FRAME_MAGIC, MANIFEST_FILE,
};
pub use report::{compare, find_runs, render_summary, report, write_summary_csv, RunSummary, SUMMARY_CSV};
