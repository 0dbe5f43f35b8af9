use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use siamfv::fisher::{fv_encode, fv_unnormalized, l2_norm, posterior};
use siamfv::grad::{fv_gradients, normalized_chain};
use siamfv::instances::{random_instance, Conditioning};
use siamfv::{LocalDescriptorSet, PosteriorMode};

fn conditioning() -> impl Strategy<Value = Conditioning> {
    prop_oneof![Just(Conditioning::Soft), Just(Conditioning::Peaked)]
}

fn mode() -> impl Strategy<Value = PosteriorMode> {
    prop_oneof![Just(PosteriorMode::Unweighted), Just(PosteriorMode::Standard)]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct evaluation of the first-order statistic with a naive posterior.
fn naive_raw(set: &LocalDescriptorSet, gmm: &siamfv::GmmModel) -> Vec<f64> {
    let (c, d) = (gmm.num_clusters(), gmm.dim());
    let mut out = vec![0.0; c * d];
    for x in set.rows() {
        let logs: Vec<f64> = (0..c)
            .map(|j| {
                -0.5 * (0..d)
                    .map(|k| ((x[k] - gmm.mean(j)[k]) / gmm.stddev(j)[k]).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        for j in 0..c {
            let tau = (logs[j] - top).exp() / z;
            for k in 0..d {
                out[j * d + k] += tau * (x[k] - gmm.mean(j)[k]) / gmm.stddev(j)[k];
            }
        }
    }
    for j in 0..c {
        for k in 0..d {
            out[j * d + k] /= set.count() as f64 * gmm.weights()[j].sqrt();
        }
    }
    out
}

proptest! {
    #[test]
    fn posterior_rows_are_distributions(c in 1usize..=8, d in 1usize..=16, seed: u64, cond in conditioning(), mode in mode()) {
        let (set, gmm) = random_instance(c, d, 4, seed, cond);
        for x in set.rows() {
            let p = posterior(x, &gmm, mode).unwrap();
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoded_vectors_are_unit(c in 1usize..=8, d in 1usize..=16, t in 1usize..=32, seed: u64, cond in conditioning()) {
        let (set, gmm) = random_instance(c, d, t, seed, cond);
        let fv = fv_encode(&set, &gmm, PosteriorMode::Unweighted).unwrap();
        prop_assert!((l2_norm(&fv.normalized) - 1.0).abs() <= 1e-10);
        prop_assert_eq!(fv.len(), c * d);
    }

    #[test]
    fn raw_vector_matches_naive_evaluation(c in 1usize..=6, d in 1usize..=8, t in 1usize..=16, seed: u64) {
        let (set, gmm) = random_instance(c, d, t, seed, Conditioning::Peaked);
        let fast = fv_unnormalized(&set, &gmm, PosteriorMode::Unweighted).unwrap();
        let naive = naive_raw(&set, &gmm);
        let scale = l2_norm(&naive).max(1.0);
        prop_assert!(max_abs_diff(&fast, &naive) <= 1e-12 * scale);
    }

    #[test]
    fn order_and_duplication_do_not_matter(c in 1usize..=8, d in 1usize..=16, t in 1usize..=32, seed: u64, copies in 2usize..=3) {
        let (set, gmm) = random_instance(c, d, t, seed, Conditioning::Soft);
        let base = fv_unnormalized(&set, &gmm, PosteriorMode::Unweighted).unwrap();
        let mut rows: Vec<Vec<f64>> = set.rows().map(<[f64]>::to_vec).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = LocalDescriptorSet::from_rows(&rows).unwrap();
        let permuted = fv_unnormalized(&shuffled, &gmm, PosteriorMode::Unweighted).unwrap();
        prop_assert!(max_abs_diff(&base, &permuted) <= 1e-12);
        let repeated: Vec<Vec<f64>> = (0..copies).flat_map(|_| rows.clone()).collect();
        let dup = fv_unnormalized(&LocalDescriptorSet::from_rows(&repeated).unwrap(), &gmm, PosteriorMode::Unweighted).unwrap();
        prop_assert!(max_abs_diff(&base, &dup) <= 1e-12);
    }

    #[test]
    fn normalized_gradients_are_tangent(c in 1usize..=4, d in 1usize..=6, t in 1usize..=8, seed: u64, mode in mode()) {
        let (set, gmm) = random_instance(c, d, t, seed, Conditioning::Soft);
        let raw = fv_gradients(&set, &gmm, mode).unwrap();
        let fv = fv_encode(&set, &gmm, mode).unwrap();
        let chain = normalized_chain(&fv.raw, &raw).unwrap();
        let dot = |row: &[f64]| row.iter().zip(&fv.normalized).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..c {
            prop_assert!(dot(chain.omega_row(j)).abs() <= 1e-10);
            for k in 0..d {
                prop_assert!(dot(chain.mu_row(j, k)).abs() <= 1e-10);
                prop_assert!(dot(chain.sigma_row(j, k)).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn single_component_normalized_vector_ignores_the_weight() {
    let (set, gmm) = random_instance(1, 3, 5, 4, Conditioning::Soft);
    let raw = fv_unnormalized(&set, &gmm, PosteriorMode::Unweighted).unwrap();
    let mean: Vec<f64> = (0..3)
        .map(|k| set.rows().map(|x| (x[k] - gmm.mean(0)[k]) / gmm.stddev(0)[k]).sum::<f64>() / 5.0)
        .collect();
    assert!(max_abs_diff(&raw, &mean) < 1e-14);
}
