//! Training, λ sweep and significance evaluation.

pub mod stats;
pub mod train;

pub use stats::{
    bh_adjust, evaluate_predictions, pearson_p_value, per_gene_pearson, save_eval_report, significant_genes,
    EvalReport, GeneCorrelation, DEFAULT_ALPHA,
};
pub use train::{
    init_model, lambda_sweep, mean_pearson, mse, random_baseline, save_history, select_lambda, train_and_evaluate,
    train_model, EncoderSpec, EpochRecord, FoldData, Model, Optimizer, SampleInputs, SelectOn, SplitData,
    SweepConfig, SweepEntry, SweepResult, TrainConfig, TrainOutcome,
};
