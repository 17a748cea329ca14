//! Experiment configuration, training loops, pipeline orchestration and the
//! command-line front end.

mod commands;
mod config;
mod pipeline;
mod plot;
mod train;

pub use commands::{execute, plot_run, resolve_config, Cli, Command, SegModality};
pub use config::{
    Ablation, ExperimentConfig, OptimizerConfig, PathsConfig, SchedulerConfig, SynthConfig, TrainingConfig,
};
pub use pipeline::{check_floors, load_models, run_pipeline_on, PipelineReport, SubjectPipeline, CURVE_FLOOR};
pub use plot::{line_chart, Series};
pub use train::{train_detector_on, train_segmenter_on, DetectorRun};
