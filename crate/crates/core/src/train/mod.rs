//! Siamese contrastive training of the Fisher-vector layer and backbone.

pub mod backbone;
pub mod loss;
pub mod mining;
pub mod pipeline;
pub mod sgd;
pub mod trainer;

pub use backbone::{BackboneGradients, BackboneModel};
pub use loss::{contrastive_loss, loss_and_upstream, loss_backward, LossGradients, PairLabel};
pub use mining::{expand_tuples, mine_tuples, LabeledPair, MiningTuple};
pub use pipeline::{encode_item, pair_gradients, pair_loss};
pub use sgd::{sgd_step, ModelGradients, SgdConfig, SiameseModel, StepOutcome, Trainable};
pub use trainer::{train, EpochMetrics, TrainConfig, TrainOutcome, TrainingItem};
