//! Labeled synthetic descriptor datasets.
//!
//! Every class draws its descriptors from a mixture over a shared set of
//! visual words, with its own word proportions and per-word displacement.
//! Each item is additionally shifted along a few global nuisance
//! directions, which carry no class information and dominate the raw
//! Euclidean geometry until a learned linear map suppresses them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::train::TrainingItem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub items_per_class: usize,
    pub descriptors_per_item: usize,
    pub dim: usize,
    pub seed: u64,
    /// Size of the shared word vocabulary.
    pub words: usize,
    /// Words active in each class.
    pub words_per_class: usize,
    pub word_spread: f64,
    /// Scale of the class-specific displacement of each word.
    pub class_shift: f64,
    /// Number of global nuisance directions (capped at `dim - 1`).
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
    pub noise: f64,
    /// Classes (taken from the end) reserved for evaluation; defaults to a
    /// quarter of the classes when that is at least two.
    pub eval_classes: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, items_per_class: usize, descriptors_per_item: usize, dim: usize, seed: u64) -> Self {
        Self {
            classes,
            items_per_class,
            descriptors_per_item,
            dim,
            seed,
            words: 16,
            words_per_class: 4,
            word_spread: 2.0,
            class_shift: 0.5,
            nuisance_rank: 4,
            nuisance_scale: 3.0,
            noise: 0.5,
            eval_classes: if classes / 4 >= 2 { classes / 4 } else { 0 },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.items_per_class < 2 {
            return Err(Error::InvalidInput("need at least 2 classes of 2 items".into()));
        }
        if self.descriptors_per_item == 0 || self.dim == 0 {
            return Err(Error::InvalidInput("descriptor count and dimension must be positive".into()));
        }
        if self.words == 0 || self.words_per_class == 0 || self.words_per_class > self.words {
            return Err(Error::InvalidInput("words per class must lie in 1..=words".into()));
        }
        if self.eval_classes >= self.classes {
            return Err(Error::InvalidInput("evaluation split leaves no training classes".into()));
        }
        if self.eval_classes == 1 {
            return Err(Error::InvalidInput("evaluation split needs 0 or at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<TrainingItem>,
    pub eval: Vec<TrainingItem>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gram–Schmidt on Gaussian draws.
fn orthonormal_directions(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian_vec(rng, dim, 1.0);
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

struct ClassModel {
    words: Vec<usize>,
    cumulative: Vec<f64>,
    shifts: Vec<Vec<f64>>,
}

pub fn class_label(class: usize) -> String {
    format!("c{class:03}")
}

pub fn item_id(class: usize, item: usize) -> String {
    format!("c{class:03}_i{item:03}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let centers: Vec<Vec<f64>> = (0..cfg.words).map(|_| gaussian_vec(&mut rng, d, cfg.word_spread)).collect();
    let nuisance = orthonormal_directions(&mut rng, cfg.nuisance_rank.min(d.saturating_sub(1)), d);
    let classes: Vec<ClassModel> = (0..cfg.classes)
        .map(|_| {
            let words = sample(&mut rng, cfg.words, cfg.words_per_class).into_vec();
            let raw: Vec<f64> = words.iter().map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            let mut acc = 0.0;
            let cumulative = raw.iter().map(|w| {
                acc += w / total;
                acc
            }).collect();
            let shifts = words.iter().map(|_| gaussian_vec(&mut rng, d, cfg.class_shift)).collect();
            ClassModel { words, cumulative, shifts }
        })
        .collect();

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        for i in 0..cfg.items_per_class {
            let mut offset = vec![0.0; d];
            for u in &nuisance {
                let a = cfg.nuisance_scale * rng.sample::<f64, _>(StandardNormal);
                offset.iter_mut().zip(u).for_each(|(o, v)| *o += a * v);
            }
            let mut data = Vec::with_capacity(cfg.descriptors_per_item * d);
            for _ in 0..cfg.descriptors_per_item {
                let r: f64 = rng.random();
                let slot = class.cumulative.iter().position(|&c| r < c).unwrap_or(class.words.len() - 1);
                let center = &centers[class.words[slot]];
                let shift = &class.shifts[slot];
                for k in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(center[k] + shift[k] + offset[k] + cfg.noise * noise);
                }
            }
            let item = TrainingItem {
                id: item_id(c, i),
                class_label: class_label(c),
                input: LocalDescriptorSet::new(cfg.descriptors_per_item, d, data)?,
            };
            if c >= cfg.classes - cfg.eval_classes {
                eval.push(item);
            } else {
                train.push(item);
            }
        }
    }
    Ok(SynthDataset { train, eval })
}
