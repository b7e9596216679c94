//! Initialization, training, evaluation, ablation drivers and the sweep
//! benchmark.

mod ablation;
mod bench;
mod init;
mod metrics;
mod train;

pub use ablation::{
    ablation_variants, model_from_kv, run_ablation, run_ablation_cached, run_experiment, AblationKind, AblationTable,
    ExperimentConfig, ExperimentResult, RunCache, CROP_FRACTIONS,
};
pub use bench::{bench_csv, bench_sweeps, BenchRow, BENCH_CHANNELS, BENCH_REPS};
pub use init::{init_params, init_params_with, CONV_STD, RENET_RANGE};
pub use metrics::{evaluate, ConfusionMatrix, EvalReport};
pub use train::{stack_batch, train, with_threads, SgdConfig, TrainReport};
