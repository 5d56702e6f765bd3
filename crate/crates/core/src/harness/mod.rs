//! Synthetic task streams, training, evaluation and the five-method experiment.

mod experiment;
mod metrics;
mod model;
mod stream;
mod train;

pub use experiment::{
    run_experiment, run_method, run_seed, ExperimentOutput, ExperimentReport, MethodReport,
    MethodRun, MethodSummary, SeedReport, TimingReport, TimingRow,
};
pub use metrics::{compute_metrics, EvalMatrix, Metrics};
pub use model::{Method, Model};
pub use stream::{generate_stream, Sample, StreamSpec, SyntheticTask, TaskStream};
pub use train::{
    evaluate, evaluate_detailed, train_multitask, train_task, EvalOutcome, Selection,
    TaskTrainReport, TrainSpec,
};

/// Stacks samples into an input matrix and label vector.
pub fn stack_samples(samples: &[&Sample]) -> (crate::tensor::Matrix, Vec<usize>) {
    train::stack(samples)
}

/// One optimizer step on a batch; returns `(loss, updated scalars)`.
pub fn train_step_public(
    model: &mut Model,
    opt: &mut crate::tensor::OptimizerState,
    x: crate::tensor::Matrix,
    labels: &[usize],
    task: Option<usize>,
) -> crate::error::Result<(f64, usize)> {
    train::train_step(model, opt, x, labels, task)
}
