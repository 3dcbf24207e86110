//! Experiment orchestration: configuration, the per-round loop,
//! repetitions, summaries and result files.
//!
//! Each round draws contexts, retrains the model on its schedule, scores
//! every arm, selects per the policy, samples feedback, stores it (self-duels
//! are dropped), updates the confidence set and records both regrets.

mod checks;
mod config;
mod output;
mod run;
mod summary;

pub use checks::{
    backend_check, coverage_config, coverage_rate, gradient_check, init_null_check, random_params,
    run_checks, sherman_morrison_check, CheckOutcome,
};
pub use config::{ExperimentConfig, FeatureAnchor, FeatureScale, FunctionName, OUTPUT_DIR_ENV};
pub use output::{
    curves_svg, parse_trace_csv, read_summary, read_trace, trace_csv, write_outputs, DiagnosticsSummary,
    OutputFiles, SummaryFile, TRACE_HEADER,
};
pub use run::{
    replay_contexts, run_experiment, run_repetition, ExperimentResult, RegretTrace, Repetition,
    RepetitionDiagnostics, RepetitionResult, RoundDiagnostics, RoundRecord,
};
pub use summary::{aggregate, Band, Summary, Z_95};
