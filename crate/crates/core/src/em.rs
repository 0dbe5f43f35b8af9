//! Expectation-maximization fit of a diagonal GMM, used to initialize the
//! Fisher-vector layer.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::fisher::{check_dim, log_numerator};
use crate::gmm::{GmmModel, PosteriorMode, VARIANCE_FLOOR};

/// A cluster whose responsibility mass falls below this is re-seeded.
const COLLAPSE_MASS: f64 = 1e-10;

/// Cap on the k-means refinements run before EM.
const LLOYD_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub num_clusters: usize,
    pub max_iters: usize,
    /// Stop when the relative log-likelihood improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
}

impl EmConfig {
    pub fn new(num_clusters: usize, seed: u64) -> Self {
        Self {
            num_clusters,
            max_iters: 100,
            tol: 1e-6,
            seed,
            variance_floor: VARIANCE_FLOOR,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(Error::InvalidInput("cluster count must be positive".into()));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidInput("max_iters must be ≥ 1 and tol > 0".into()));
        }
        if !(self.variance_floor >= VARIANCE_FLOOR) {
            return Err(Error::InvalidInput(format!(
                "variance floor must be at least {VARIANCE_FLOOR}"
            )));
        }
        Ok(())
    }
}

/// Per-iteration record of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Log-likelihood of the initial model followed by one entry per M-step.
    pub log_likelihoods: Vec<f64>,
    /// Iterations (1-based M-step index) at which a collapsed cluster was
    /// re-seeded.
    pub reseeds: Vec<usize>,
    pub converged: bool,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `Σ_t log Σ_j ω_j N(x_t; μ_j, diag σ_j²)` in nats.
pub fn log_likelihood(set: &LocalDescriptorSet, gmm: &GmmModel) -> Result<f64> {
    check_dim(gmm, set.dim())?;
    let per_row: Vec<f64> = set
        .data()
        .par_chunks(set.dim())
        .map(|x| {
            let logs: Vec<f64> = (0..gmm.num_clusters())
                .map(|j| log_numerator(x, gmm, j, PosteriorMode::Standard))
                .collect();
            log_sum_exp(&logs)
        })
        .collect();
    Ok(per_row.iter().sum())
}

/// Rows sorted lexicographically so that the fit does not depend on the
/// order descriptors were pooled in.
fn canonical_rows(set: &LocalDescriptorSet) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = set.rows().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
fn kmeans_pp(rows: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut centers = vec![rng.random_range(0..rows.len())];
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, rows[centers[0]])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = rows.len() - 1;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a center
            rng.random_range(0..rows.len())
        };
        centers.push(next);
        for (n, r) in nearest.iter_mut().zip(rows) {
            *n = n.min(sq_dist(r, rows[next]));
        }
    }
    centers
}

/// Index of the nearest center, lowest index on ties.
fn nearest_center(x: &[f64], centers: &[f64], d: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centers.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, c);
        if dist < best.0 {
            best = (dist, j);
        }
    }
    best.1
}

/// Lloyd refinement of the seeds, then weights, means and spreads of the
/// resulting hard partition. Empty cells keep their center and take the
/// global spread.
fn partition_init(rows: &[&[f64]], seeds: &[usize], global_sd: &[f64], floor: f64) -> Result<GmmModel> {
    let (c, d) = (seeds.len(), global_sd.len());
    let mut centers: Vec<f64> = seeds.iter().flat_map(|&i| rows[i].iter().copied()).collect();
    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..LLOYD_ITERS {
        let next: Vec<usize> = rows.par_iter().map(|x| nearest_center(x, &centers, d)).collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![0.0; c * d];
        let mut counts = vec![0usize; c];
        for (x, &j) in rows.iter().zip(&assign) {
            counts[j] += 1;
            sums[j * d..(j + 1) * d].iter_mut().zip(*x).for_each(|(s, v)| *s += v);
        }
        for j in (0..c).filter(|&j| counts[j] > 0) {
            for k in 0..d {
                centers[j * d + k] = sums[j * d + k] / counts[j] as f64;
            }
        }
    }
    let mut counts = vec![0usize; c];
    let mut sq = vec![0.0; c * d];
    for (x, &j) in rows.iter().zip(&assign) {
        counts[j] += 1;
        for k in 0..d {
            let dev = x[k] - centers[j * d + k];
            sq[j * d + k] += dev * dev;
        }
    }
    let stddevs = (0..c * d)
        .map(|i| {
            let (j, k) = (i / d, i % d);
            let sd = if counts[j] > 1 { (sq[i] / counts[j] as f64).sqrt() } else { global_sd[k] };
            sd.max(floor)
        })
        .collect();
    // every cluster keeps some weight so that none starts collapsed
    let mass: Vec<f64> = counts.iter().map(|&n| n.max(1) as f64).collect();
    let total: f64 = mass.iter().sum();
    GmmModel::from_parts_unchecked(c, d, mass.iter().map(|m| m / total).collect(), centers, stddevs)
}

fn column_stats(rows: &[&[f64]], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            mean[k] += r[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            var[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Responsibilities (row-major `T × C`) and total log-likelihood.
fn e_step(rows: &[&[f64]], gmm: &GmmModel) -> (Vec<f64>, f64) {
    let c = gmm.num_clusters();
    let per_row: Vec<(Vec<f64>, f64)> = rows
        .par_iter()
        .map(|x| {
            let mut logs: Vec<f64> = (0..c)
                .map(|j| log_numerator(x, gmm, j, PosteriorMode::Standard))
                .collect();
            let lse = log_sum_exp(&logs);
            logs.iter_mut().for_each(|v| *v = (*v - lse).exp());
            (logs, lse)
        })
        .collect();
    let mut resp = Vec::with_capacity(rows.len() * c);
    let mut ll = 0.0;
    for (r, l) in per_row {
        resp.extend(r);
        ll += l;
    }
    (resp, ll)
}

/// Returns the indices of clusters that had to be re-seeded.
fn m_step(rows: &[&[f64]], resp: &[f64], gmm: &mut GmmModel, floor: f64, global_sd: &[f64]) -> Vec<usize> {
    let (c, d) = (gmm.num_clusters(), gmm.dim());
    let mut mass = vec![0.0; c];
    let mut sums = vec![0.0; c * d];
    for (t, x) in rows.iter().enumerate() {
        for j in 0..c {
            let r = resp[t * c + j];
            mass[j] += r;
            for k in 0..d {
                sums[j * d + k] += r * x[k];
            }
        }
    }
    let mut means = vec![0.0; c * d];
    for j in 0..c {
        if mass[j] >= COLLAPSE_MASS {
            for k in 0..d {
                means[j * d + k] = sums[j * d + k] / mass[j];
            }
        }
    }
    let mut sq = vec![0.0; c * d];
    for (t, x) in rows.iter().enumerate() {
        for j in 0..c {
            let r = resp[t * c + j];
            for k in 0..d {
                let dev = x[k] - means[j * d + k];
                sq[j * d + k] += r * dev * dev;
            }
        }
    }

    let collapsed: Vec<usize> = (0..c).filter(|&j| mass[j] < COLLAPSE_MASS).collect();
    let mut stddevs = vec![0.0; c * d];
    for j in 0..c {
        for k in 0..d {
            stddevs[j * d + k] = if mass[j] >= COLLAPSE_MASS {
                (sq[j * d + k] / mass[j]).sqrt().max(floor)
            } else {
                global_sd[k].max(floor)
            };
        }
    }
    for &j in &collapsed {
        // farthest point from every healthy mean
        let far = rows
            .iter()
            .enumerate()
            .map(|(t, x)| {
                let near = (0..c)
                    .filter(|i| !collapsed.contains(i))
                    .map(|i| sq_dist(x, &means[i * d..(i + 1) * d]))
                    .fold(f64::INFINITY, f64::min);
                (near, t)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .map(|(_, t)| t)
            .unwrap_or(0);
        means[j * d..(j + 1) * d].copy_from_slice(rows[far]);
        mass[j] = 1.0;
    }
    let total: f64 = mass.iter().sum();
    let weights = mass.iter().map(|m| m / total).collect();
    *gmm = GmmModel::from_parts_unchecked(c, d, weights, means, stddevs)
        .expect("shapes are preserved by the M-step");
    collapsed
}

/// Default cap on the number of descriptors pooled for a fit.
pub const DEFAULT_POOL_SIZE: usize = 200_000;

/// Concatenates descriptor sets, keeping a seeded uniform subsample of at
/// most `max_rows` rows (in their original order) when there are more.
pub fn pool_descriptors(sets: &[&LocalDescriptorSet], max_rows: usize, seed: u64) -> Result<LocalDescriptorSet> {
    let first = sets.first().ok_or(Error::EmptyInput)?;
    let d = first.dim();
    let total: usize = sets.iter().map(|s| s.count()).sum();
    let mut data = Vec::with_capacity(total.min(max_rows) * d);
    for s in sets {
        if s.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: s.dim() });
        }
        data.extend_from_slice(s.data());
    }
    if total <= max_rows {
        return LocalDescriptorSet::new(total, d, data);
    }
    if max_rows == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, total, max_rows).into_vec();
    keep.sort_unstable();
    let mut out = Vec::with_capacity(max_rows * d);
    for t in keep {
        out.extend_from_slice(&data[t * d..(t + 1) * d]);
    }
    LocalDescriptorSet::new(max_rows, d, out)
}

/// Fits a diagonal GMM to pooled descriptors, returning the per-iteration
/// trace alongside the model.
pub fn em_fit_traced(set: &LocalDescriptorSet, cfg: &EmConfig) -> Result<(GmmModel, EmTrace)> {
    cfg.validate()?;
    let (c, d) = (cfg.num_clusters, set.dim());
    if set.count() < c {
        return Err(Error::InsufficientData {
            samples: set.count(),
            clusters: c,
        });
    }
    let rows = canonical_rows(set);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = kmeans_pp(&rows, c, &mut rng);
    let (_, var) = column_stats(&rows, d);
    let global_sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let mut gmm = partition_init(&rows, &seeds, &global_sd, cfg.variance_floor)?;

    let (mut resp, mut ll) = e_step(&rows, &gmm);
    let mut trace = EmTrace {
        log_likelihoods: vec![ll],
        reseeds: Vec::new(),
        converged: false,
    };
    for iter in 1..=cfg.max_iters {
        let collapsed = m_step(&rows, &resp, &mut gmm, cfg.variance_floor, &global_sd);
        if !collapsed.is_empty() {
            debug!("EM iteration {iter}: re-seeded clusters {collapsed:?}");
            trace.reseeds.push(iter);
        }
        let (next_resp, next_ll) = e_step(&rows, &gmm);
        trace.log_likelihoods.push(next_ll);
        let improvement = (next_ll - ll) / ll.abs().max(f64::MIN_POSITIVE);
        resp = next_resp;
        ll = next_ll;
        if collapsed.is_empty() && improvement < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    gmm.validate()?;
    Ok((gmm, trace))
}

pub fn em_fit(set: &LocalDescriptorSet, cfg: &EmConfig) -> Result<GmmModel> {
    em_fit_traced(set, cfg).map(|(g, _)| g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_is_the_sample_mle() {
        let x = LocalDescriptorSet::new(4, 2, vec![0.0, 1.0, 2.0, 1.0, 4.0, 5.0, 6.0, 1.0]).unwrap();
        let g = em_fit(&x, &EmConfig::new(1, 3)).unwrap();
        assert_eq!(g.weights(), &[1.0]);
        assert!((g.means()[0] - 3.0).abs() < 1e-12 && (g.means()[1] - 2.0).abs() < 1e-12);
        assert!((g.stddevs()[0] - 5.0f64.sqrt()).abs() < 1e-12);
        assert!((g.stddevs()[1] - 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_data_is_floored() {
        let x = LocalDescriptorSet::new(3, 1, vec![2.0; 3]).unwrap();
        let g = em_fit(&x, &EmConfig::new(1, 0)).unwrap();
        assert_eq!(g.stddevs(), &[VARIANCE_FLOOR]);
    }

    #[test]
    fn too_few_samples() {
        let x = LocalDescriptorSet::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            em_fit(&x, &EmConfig::new(3, 0)),
            Err(Error::InsufficientData { samples: 2, clusters: 3 })
        ));
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let g = GmmModel::uniform(vec![vec![0.0]], 1.0).unwrap();
        let x = LocalDescriptorSet::new(1, 1, vec![0.0]).unwrap();
        let ll = log_likelihood(&x, &g).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-15);
        let twice = x.concat(&x).unwrap();
        assert_eq!(log_likelihood(&twice, &g).unwrap(), 2.0 * ll);
    }

    #[test]
    fn pooling_subsamples_deterministically() {
        let a = LocalDescriptorSet::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let b = LocalDescriptorSet::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(pool_descriptors(&[&a, &b], 10, 0).unwrap().data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let sub = pool_descriptors(&[&a, &b], 3, 5).unwrap();
        assert_eq!(sub, pool_descriptors(&[&a, &b], 3, 5).unwrap());
        assert_eq!(sub.count(), 3);
        assert!(sub.data().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn partition_start_uses_cluster_statistics() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0], vec![12.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let gmm = partition_init(&refs, &[0, 4], &[4.0], VARIANCE_FLOOR).unwrap();
        assert_eq!(gmm.means(), &[1.0, 11.0]);
        assert_eq!(gmm.weights(), &[0.6, 0.4]);
        assert!((gmm.stddev(0)[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(gmm.stddev(1)[0], 1.0);
    }

    #[test]
    fn duplicate_points_still_seed() {
        let x = LocalDescriptorSet::new(4, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = em_fit(&x, &EmConfig::new(2, 9)).unwrap();
        g.validate().unwrap();
    }
}
