//! Seeded random GMM and descriptor-set generators used by the gradient
//! checker, the CLI and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::descriptors::LocalDescriptorSet;
use crate::gmm::GmmModel;

/// How concentrated the posteriors of the generated instance are.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Component separation scaled by `1/√d` so every posterior stays
    /// bounded away from 0 and 1. Finite differences are accurate here.
    Soft,
    /// Well separated components with heterogeneous spreads.
    Peaked,
}

pub fn random_gmm(clusters: usize, dim: usize, rng: &mut impl Rng, cond: Conditioning) -> GmmModel {
    let scale = match cond {
        Conditioning::Soft => 1.0 / (dim as f64).sqrt(),
        Conditioning::Peaked => 3.0,
    };
    let raw_w: Vec<f64> = (0..clusters).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw_w.iter().sum();
    let weights = raw_w.iter().map(|w| w / total).collect();
    let means = (0..clusters * dim)
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect();
    let stddevs = (0..clusters * dim)
        .map(|_| match cond {
            Conditioning::Soft => {
                let z: f64 = StandardNormal.sample(rng);
                (0.25 * z / (dim as f64).sqrt()).exp()
            }
            Conditioning::Peaked => rng.random_range(0.3..1.5),
        })
        .collect();
    GmmModel::new(clusters, dim, weights, means, stddevs).expect("generated GMM is valid")
}

/// Draws `count` descriptors from `gmm` itself.
pub fn sample_descriptors(gmm: &GmmModel, count: usize, rng: &mut impl Rng) -> LocalDescriptorSet {
    let d = gmm.dim();
    let mut data = Vec::with_capacity(count * d);
    for _ in 0..count {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = gmm.num_clusters() - 1;
        for (i, w) in gmm.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        for k in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            data.push(gmm.mean(j)[k] + gmm.stddev(j)[k] * z);
        }
    }
    LocalDescriptorSet::new(count, d, data).expect("finite samples")
}

/// A GMM and a descriptor set drawn from it, fully determined by `seed`.
pub fn random_instance(
    clusters: usize,
    dim: usize,
    count: usize,
    seed: u64,
    cond: Conditioning,
) -> (LocalDescriptorSet, GmmModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gmm = random_gmm(clusters, dim, &mut rng, cond);
    let set = sample_descriptors(&gmm, count, &mut rng);
    (set, gmm)
}
