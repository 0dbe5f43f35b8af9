//! The training loop: mining rounds, single-pair SGD iterations and
//! per-epoch metrics.

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::gmm::PosteriorMode;
use crate::retrieval::class_map;
use crate::train::mining::{expand_tuples, mine_tuples, shuffle_pairs, CorpusEntry, LabeledPair};
use crate::train::pipeline::{encode_item, pair_gradients};
use crate::train::sgd::{sgd_step, ModelGradients, SgdConfig, SiameseModel, StepOutcome, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub pairs_per_mine: usize,
    pub negatives_per_pair: usize,
    pub remine_every: usize,
    pub iterations_per_epoch: usize,
    pub seed: u64,
    pub mode: PosteriorMode,
    /// Items are raw patches passed through the backbone; otherwise they are
    /// fixed descriptors and the backbone is bypassed.
    pub use_backbone: bool,
    pub train_gmm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.8,
            learning_rate: 0.001,
            momentum: 0.5,
            weight_decay: 0.0005,
            epochs: 30,
            pairs_per_mine: 2000,
            negatives_per_pair: 5,
            remine_every: 2000,
            iterations_per_epoch: 6000,
            seed: 0,
            mode: PosteriorMode::Unweighted,
            use_backbone: true,
            train_gmm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.epochs == 0 || self.iterations_per_epoch == 0 || self.remine_every == 0 {
            return bad("epochs, iterations per epoch and re-mining interval must be positive");
        }
        if self.pairs_per_mine == 0 {
            return bad("pairs per mining round must be positive");
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Pairs produced by one mining round.
    pub fn pairs_per_round(&self) -> usize {
        self.pairs_per_mine * (1 + self.negatives_per_pair)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub id: String,
    pub class_label: String,
    pub input: LocalDescriptorSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_eval: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SiameseModel,
    pub log: Vec<EpochMetrics>,
    pub skipped_iterations: usize,
}

/// Normalized embeddings of every item under `model`.
pub fn encode_items(
    model: &SiameseModel,
    items: &[TrainingItem],
    mode: PosteriorMode,
    use_backbone: bool,
) -> Result<Vec<Vec<f64>>> {
    items
        .par_iter()
        .map(|item| encode_item(model, &item.input, mode, use_backbone).map(|fv| fv.normalized))
        .collect()
}

/// Leave-one-out mAP over `items`, relevance by class label.
pub fn evaluate_map(
    model: &SiameseModel,
    items: &[TrainingItem],
    mode: PosteriorMode,
    use_backbone: bool,
) -> Result<f64> {
    let vectors = encode_items(model, items, mode, use_backbone)?;
    let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let labels: Vec<&str> = items.iter().map(|i| i.class_label.as_str()).collect();
    class_map(&ids, &labels, &vectors)
}

fn mine_round(
    model: &SiameseModel,
    items: &[TrainingItem],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledPair>> {
    let vectors = encode_items(model, items, cfg.mode, cfg.use_backbone)?;
    let corpus: Vec<CorpusEntry<'_>> = items
        .iter()
        .zip(&vectors)
        .map(|(item, v)| CorpusEntry {
            id: &item.id,
            class_label: &item.class_label,
            vector: v,
        })
        .collect();
    let tuples = mine_tuples(&corpus, cfg.pairs_per_mine, cfg.negatives_per_pair, rng)?;
    let mut pairs = expand_tuples(&tuples);
    shuffle_pairs(&mut pairs, rng);
    Ok(pairs)
}

fn check_items(items: &[TrainingItem], model: &SiameseModel, cfg: &TrainConfig) -> Result<()> {
    let expected = if cfg.use_backbone {
        model.backbone.in_dim
    } else {
        model.gmm.dim()
    };
    if cfg.use_backbone && model.backbone.out_dim != model.gmm.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.gmm.dim(),
            actual: model.backbone.out_dim,
        });
    }
    for item in items {
        if item.input.dim() != expected {
            return Err(Error::Manifest(format!(
                "item {} has dimension {}, expected {expected}",
                item.id,
                item.input.dim()
            )));
        }
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs of single-pair SGD starting from `init`.
///
/// Tuples are re-mined with the current model every `remine_every`
/// iterations; the matching pairs are re-sampled at each round. When `eval`
/// is non-empty, its leave-one-out mAP is logged after every epoch.
pub fn train(
    items: &[TrainingItem],
    eval: &[TrainingItem],
    init: SiameseModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.gmm.validate()?;
    check_items(items, &init, cfg)?;
    check_items(eval, &init, cfg)?;

    let mut model = init;
    let mut velocity = ModelGradients::zeros(&model);
    let trainable = Trainable {
        gmm: cfg.train_gmm,
        backbone: cfg.use_backbone,
    };
    let sgd = cfg.sgd();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs: Vec<LabeledPair> = Vec::new();
    let mut cursor = 0usize;
    let mut iteration = 0usize;
    let mut skipped = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for _ in 0..cfg.iterations_per_epoch {
            if iteration % cfg.remine_every == 0 {
                pairs = mine_round(&model, items, cfg, &mut rng)?;
                cursor = 0;
            }
            iteration += 1;
            let pair = pairs[cursor % pairs.len()];
            cursor += 1;
            let step = pair_gradients(
                &model,
                &items[pair.left].input,
                &items[pair.right].input,
                pair.label,
                cfg.margin,
                cfg.mode,
                cfg.use_backbone,
            );
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::DegenerateFisherVector) => {
                    warn!("iteration {iteration}: degenerate Fisher vector, skipped");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if sgd_step(&mut model, &grads, &mut velocity, &sgd, trainable)
                == StepOutcome::SkippedNonFinite
            {
                skipped += 1;
                continue;
            }
            loss_sum += loss;
            counted += 1;
        }
        let mean_loss = if counted > 0 {
            loss_sum / counted as f64
        } else {
            f64::NAN
        };
        let map_eval = if eval.is_empty() {
            None
        } else {
            Some(evaluate_map(&model, eval, cfg.mode, cfg.use_backbone)?)
        };
        info!("epoch {epoch}: mean loss {mean_loss:.6} mAP {map_eval:?}");
        log.push(EpochMetrics {
            epoch,
            mean_loss,
            map_eval,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        skipped_iterations: skipped,
    })
}
