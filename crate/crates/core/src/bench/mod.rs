//! Synthetic quality benchmark, experiment runner, ablations and their
//! file outputs.

pub mod benchmark;
pub mod config;
pub mod experiment;
pub mod output;

use thiserror::Error;

pub use benchmark::{generate_benchmark, true_quality, BenchItem, Benchmark, BenchmarkSpec, Family, FamilySpec, Split, SplitPlan};
pub use config::{RunConfig, ScoreSection};
pub use experiment::{
    ablate_layers, ablate_steps, ablate_time_range, ablate_zeta2, default_buckets, evaluate, evaluate_view,
    extract_features, run_ablation, run_experiment, Ablation, AblationRow, AblationTable, EvalSummary,
    ExperimentOutput, ExperimentReport, FeatureRecipe, FeatureSet, Pipeline, STEP_VALUES, ZETA2_VALUES,
};
pub use output::{
    correlate_items_csv, write_ablation_csv, write_benchmark_csv, write_items_csv, write_report, CorrelationFile,
};

use crate::quality::QualityError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) | BenchError::Io(_) => 2,
            BenchError::Numerical(_) => 3,
        }
    }
}

impl From<QualityError> for BenchError {
    fn from(e: QualityError) -> Self {
        match e {
            QualityError::InvalidLambda(_) => BenchError::Config(e.to_string()),
            QualityError::Io(io) => BenchError::Io(io),
            other => BenchError::Numerical(other.to_string()),
        }
    }
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Io(std::io::Error::other(e))
    }
}
