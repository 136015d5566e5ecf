//! Training of the beacon weights with the compression-based next-token
//! objective, plus a plain causal-LM phase for fitting a base model.

mod data;
mod loss;
mod optim;
mod run;

pub use data::{load_documents, prepare_corpus, ByteTokenizer, TrainExample};
pub use loss::{
    ar_loss_on_tape, build_labels, causal_lm_loss, compression_ar_loss, training_plan, ArLoss,
    IGNORE_LABEL,
};
pub use optim::{AdamWConfig, OptState, RatioMode, RatioSchedule};
pub use run::{
    base_train_step, crop_windows, train_step, Phase, StepMetrics, StepOutcome, TrainConfig,
    TrainReport, Trainer,
};

#[cfg(test)]
mod tests;
