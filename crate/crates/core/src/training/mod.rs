//! Two-stage pipeline: stage A fits the autoencoder, codebook, `G` and `D`
//! on audio-visual pairs; stage B fits a classifier on the frozen `G`.

mod checkpoint;
mod history;
mod model;
mod optim;
mod pipeline;
mod stats;
pub mod synthetic;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use history::{head_tail_means, write_loss_csv, LossRecord, LOSS_CSV_HEADER};
pub use model::{Model, ModelConfig, Networks, Optimizers};
pub use optim::{preset, Adam, AdamConfig, Preset, PRESETS};
pub use pipeline::{
    evaluate, ivf_features, predict, score_predictions, train_stage_a, train_stage_b, ClassifierRecord,
    Evaluation, StageAOutput, StageBOutput, TrainConfig,
};
pub use stats::{reconstruction_loss, DatasetStatistics, DELTA_FLOOR};
pub use synthetic::{featurize, gen_synthetic, read_dataset, shuffle_labels, write_dataset, DatasetHeader, AvPair, BayesOracle, SceneClip, Split, SyntheticSceneSpec};
