//! Aggregator comparison on synthetic data: Fisher vectors against sum and
//! max pooling, with PCA or LDA whitening fitted on one dataset and
//! evaluated on another.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::descriptors::LocalDescriptorSet;
use crate::em::{em_fit, EmConfig};
use crate::error::{Error, Result};
use crate::fisher::fv_encode;
use crate::gmm::{GmmModel, PosteriorMode};
use crate::projection::{fit_lda_whiten, fit_pca_whiten, ProjectionMethod, ProjectionModel};
use crate::retrieval::{baseline_pool, class_map, PoolMode};
use crate::synth::{generate, SynthConfig};
use crate::train::TrainingItem;

/// A projection together with the datasets it was fitted on. Applying it to
/// a gallery that shares any of those datasets is refused.
#[derive(Debug, Clone)]
pub struct FittedProjection {
    pub model: ProjectionModel,
    pub fit_tags: BTreeSet<String>,
}

impl FittedProjection {
    pub fn check_disjoint(&self, eval_tags: &BTreeSet<String>) -> Result<()> {
        let shared: Vec<&String> = self.fit_tags.intersection(eval_tags).collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "projection fitted on dataset(s) {shared:?} that are also evaluated"
            )))
        }
    }

    pub fn apply(&self, vectors: &[Vec<f64>], eval_tags: &BTreeSet<String>) -> Result<Vec<Vec<f64>>> {
        self.check_disjoint(eval_tags)?;
        self.model.project_batch(vectors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Fv,
    Sum,
    Max,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Fv, Aggregator::Sum, Aggregator::Max];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Fv => "FV",
            Aggregator::Sum => "SUM",
            Aggregator::Max => "MAX",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonConfig {
    pub classes_per_dataset: usize,
    pub items_per_class: usize,
    pub descriptors_per_item: usize,
    pub dim: usize,
    pub clusters: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            classes_per_dataset: 20,
            items_per_class: 10,
            descriptors_per_item: 32,
            dim: 64,
            clusters: 8,
            dims: vec![128, 256, 512],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub aggregator: Aggregator,
    pub method: ProjectionMethod,
    pub requested_dim: usize,
    /// Dimension actually used, capped by the input dimension and the rank
    /// available in the fitting dataset.
    pub effective_dim: usize,
    /// mAP on each dataset, with the projection fitted on the other one.
    pub map: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub config: ComparisonConfig,
    pub datasets: Vec<String>,
    /// mAP of each aggregator before any projection.
    pub unprojected: Vec<(Aggregator, usize, Vec<f64>)>,
    pub rows: Vec<ComparisonRow>,
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8} {:<5} {:>5} {:>5}", "method", "proj", "dim", "eff")?;
        for d in &self.datasets {
            write!(f, " {:>10}", d)?;
        }
        writeln!(f)?;
        for (agg, dim, maps) in &self.unprojected {
            write!(f, "{:<8} {:<5} {:>5} {:>5}", agg.name(), "-", dim, dim)?;
            for m in maps {
                write!(f, " {:>9.2}%", 100.0 * m)?;
            }
            writeln!(f)?;
        }
        for r in &self.rows {
            let proj = match r.method {
                ProjectionMethod::Pca => "PCA",
                ProjectionMethod::Lda => "LDA",
            };
            write!(f, "{:<8} {:<5} {:>5} {:>5}", r.aggregator.name(), proj, r.requested_dim, r.effective_dim)?;
            for m in &r.map {
                write!(f, " {:>9.2}%", 100.0 * m)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

struct Dataset {
    tag: String,
    items: Vec<TrainingItem>,
}

impl Dataset {
    fn labels(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.class_label.as_str()).collect()
    }

    fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    fn tags(&self) -> BTreeSet<String> {
        BTreeSet::from([self.tag.clone()])
    }

    fn pooled(&self) -> Result<LocalDescriptorSet> {
        let mut data = Vec::new();
        let mut count = 0;
        for i in &self.items {
            data.extend_from_slice(i.input.data());
            count += i.input.count();
        }
        LocalDescriptorSet::new(count, self.items[0].input.dim(), data)
    }
}

fn aggregate(items: &[TrainingItem], agg: Aggregator, gmm: &GmmModel) -> Result<Vec<Vec<f64>>> {
    items
        .par_iter()
        .map(|i| match agg {
            Aggregator::Fv => fv_encode(&i.input, gmm, PosteriorMode::Unweighted).map(|f| f.normalized),
            Aggregator::Sum => baseline_pool(&i.input, PoolMode::Sum),
            Aggregator::Max => baseline_pool(&i.input, PoolMode::Max),
        })
        .collect()
}

fn effective_dim(requested: usize, method: ProjectionMethod, input_dim: usize, items: usize, classes: usize) -> usize {
    let cap = match method {
        ProjectionMethod::Pca => input_dim.min(items - 1),
        ProjectionMethod::Lda => input_dim.min(classes - 1).min(items - classes),
    };
    requested.min(cap)
}

fn fit(method: ProjectionMethod, vectors: &[Vec<f64>], labels: &[&str], m: usize, ds: &Dataset) -> Result<FittedProjection> {
    let model = match method {
        ProjectionMethod::Pca => fit_pca_whiten(vectors, m)?,
        ProjectionMethod::Lda => fit_lda_whiten(vectors, labels, m)?,
    };
    Ok(FittedProjection { model, fit_tags: ds.tags() })
}

/// Builds two disjoint synthetic datasets from one generator, fits a GMM
/// and every projection on one and evaluates on the other, in both
/// directions.
pub fn run_comparison(cfg: &ComparisonConfig) -> Result<ComparisonReport> {
    let k = cfg.classes_per_dataset;
    let mut synth = SynthConfig::new(2 * k, cfg.items_per_class, cfg.descriptors_per_item, cfg.dim, cfg.seed);
    synth.eval_classes = 0;
    let all = generate(&synth)?.train;
    let split = k * cfg.items_per_class;
    let datasets = [
        Dataset { tag: "synth-a".into(), items: all[..split].to_vec() },
        Dataset { tag: "synth-b".into(), items: all[split..].to_vec() },
    ];

    // the GMM for dataset i is fitted on the other dataset
    let gmms = datasets
        .iter()
        .rev()
        .map(|ds| em_fit(&ds.pooled()?, &EmConfig::new(cfg.clusters, cfg.seed)))
        .collect::<Result<Vec<_>>>()?;

    let mut unprojected = Vec::new();
    let mut rows = Vec::new();
    for agg in Aggregator::ALL {
        // vectors[i][j]: dataset j encoded with the GMM used when evaluating i
        let vectors = (0..2)
            .map(|i| (0..2).map(|j| aggregate(&datasets[j].items, agg, &gmms[i])).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let input_dim = vectors[0][0][0].len();
        let maps = (0..2)
            .map(|i| class_map(&datasets[i].ids(), &datasets[i].labels(), &vectors[i][i]))
            .collect::<Result<Vec<_>>>()?;
        unprojected.push((agg, input_dim, maps));
        for method in [ProjectionMethod::Pca, ProjectionMethod::Lda] {
            for &requested in &cfg.dims {
                let mut effective = requested;
                let mut maps = Vec::with_capacity(2);
                for (i, eval) in datasets.iter().enumerate() {
                    let other = &datasets[1 - i];
                    let m = effective_dim(requested, method, input_dim, other.items.len(), k);
                    effective = effective.min(m);
                    let proj = fit(method, &vectors[i][1 - i], &other.labels(), m, other)?;
                    let projected = proj.apply(&vectors[i][i], &eval.tags())?;
                    maps.push(class_map(&eval.ids(), &eval.labels(), &projected)?);
                }
                rows.push(ComparisonRow {
                    aggregator: agg,
                    method,
                    requested_dim: requested,
                    effective_dim: effective,
                    map: maps,
                });
            }
        }
    }
    Ok(ComparisonReport {
        config: cfg.clone(),
        datasets: datasets.iter().map(|d| d.tag.clone()).collect(),
        unprojected,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_tags_are_refused() {
        let model = ProjectionModel::new(ProjectionMethod::Pca, vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0]).unwrap();
        let fitted = FittedProjection { model, fit_tags: BTreeSet::from(["a".to_string()]) };
        assert!(fitted.check_disjoint(&BTreeSet::from(["b".to_string()])).is_ok());
        let err = fitted.apply(&[vec![1.0, 0.0]], &BTreeSet::from(["a".to_string(), "b".to_string()]));
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn effective_dim_caps() {
        assert_eq!(effective_dim(512, ProjectionMethod::Pca, 512, 200, 20), 199);
        assert_eq!(effective_dim(128, ProjectionMethod::Lda, 512, 200, 20), 19);
        assert_eq!(effective_dim(128, ProjectionMethod::Pca, 16, 200, 20), 16);
    }
}
