mod config;
mod report;
mod run;

pub use config::{
    robot_failure_boxes, BoxBounds, DatasetSpec, FailureEvent, ExperimentConfig, FlowSpec, MethodSpec, ReferenceSource, ReferenceSpec,
    RegionSpec, SCHEMA_VERSION,
};
pub use report::{load_run, render_table, write_scatter, RunView};
pub use run::{
    dataset_seed, run_experiment, train_flow, trial_file_stem, trial_seed, write_aggregate, write_training_curve, AggregateRow,
    ReferenceSummary, RunSummary, TrialRecord, AGGREGATE_COLUMNS, AGGREGATE_FILE, CHECKPOINT_FILE, CURVE_FILE,
    FAILURE_POINTS_FILE, REAL_FAILURES_FILE, REFERENCE_FILE, SAMPLES_DIR, TRIALS_DIR,
};
