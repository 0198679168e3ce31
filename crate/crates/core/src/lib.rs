//! Number token losses and the machinery to exercise them: a digit-level
//! vocabulary, the loss family with analytic gradients, a small decoder-only
//! transformer, arithmetic task generators, training and evaluation.

pub mod check;
pub mod datagen;
pub mod evalx;
pub mod landscape;
pub mod losses;
pub mod numvocab;
pub mod real;
pub mod seqmodel;
pub mod train;

pub use losses::{
    build_cost, combine, combine_owned, cross_entropy, gaussian_smooth_labels, gce, ntl_lp, ntl_was, ntl_was_cdf,
    number_softmax, wasserstein_oracle, CostKind, CostSpec, LogitBatch, LossError, LossResult,
    LpVariant, NumberLoss, SoftmaxDomain, TargetDistribution,
};
pub use numvocab::{number_mask, LabelBatch, NumberVocabulary, TokenSequence, VocabError};
pub use real::Real;
pub use datagen::{Dataset, DigitRange, GenSpec, Split, Task, TaskSample};
pub use evalx::{compare_runs, evaluate, EvalOptions, MetricsReport, SampleEfficiency};
pub use seqmodel::{adam_step, AdamConfig, AdamState, Checkpoint, ModelConfig, Parameters, TokenBatch};
pub use train::{run_training, LossPlan, LossSpec, NtlKind, TrainConfig, TrainLog, Trainer};
