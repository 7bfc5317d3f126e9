//! Synthetic aligned data, corpus latency, gradient suite and the
//! experiment pipeline behind the CLI.

mod dynamics;
mod experiment;
mod gradsuite;
mod latency;
mod plot;
mod task;

pub use dynamics::{dead_head_scenario, DeadHeadReport, PolicyHalt};
pub use experiment::{
    decode_corpus, run_experiment, summarize, train_model, write_empty_metrics_csv, write_metrics_csv,
    write_policy_artifacts, write_trace_csv, DataConfig, EpochLog, ExperimentConfig, PolicySummary, RunSummary,
    StreamConfig,
};
pub use gradsuite::{check_ca_train_step, check_decode_train, gradient_suite, GradCase};
pub use latency::{
    aligned_matches, corpus_latency, edit_distance, emission_boundary, emission_frame, token_accuracy,
    LatencyReport, TokenLatency, UtteranceResult,
};
pub use plot::halting_svg;
pub use task::{gen_copy_task, load_dataset, save_dataset, AlignedSample, TaskConfig, TOKEN_OFFSET};
