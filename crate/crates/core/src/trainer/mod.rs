//! Training: the combined loss, the optimizer, and the iterative
//! pretrain/fine-tune procedure with index refresh.

mod losses;
mod optim;
mod run;

pub use losses::{compute_losses, LossInputs, LossValues, Losses};
pub use optim::{Adam, CLIP_NORM};
pub use run::{
    ablate_reader_loss, example_decoder_scores, finetune, forward_example,
    forward_example_frozen_targets, forward_example_retrieval_only,
    holdout_split, pretrain, write_ablation_csv, write_metrics_csv, AblationReport, AblationRow,
    ExampleInput, IterationMetrics, LossVariant, TrainDriver, TrainRun, METRICS_HEADER,
    MAX_ANSWER_LEN,
};
