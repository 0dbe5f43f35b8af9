use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use siamfv::em::{em_fit, em_fit_traced, log_likelihood, EmConfig};
use siamfv::instances::{random_gmm, sample_descriptors, Conditioning};
use siamfv::LocalDescriptorSet;

/// Two spherical clouds whose centres are `separation` apart, unit spread.
/// Returns the sample means of the clouds, which EM should reproduce.
fn two_clouds(separation: f64, per_cloud: usize, dim: usize, seed: u64) -> (LocalDescriptorSet, [Vec<f64>; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let b: Vec<f64> = a.iter().zip(&dir).map(|(x, u)| x + separation * u / norm).collect();
    let mut rows = Vec::new();
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    for _ in 0..per_cloud {
        for (c, sum) in [&a, &b].into_iter().zip(sums.iter_mut()) {
            let row: Vec<f64> = c.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            sum.iter_mut().zip(&row).for_each(|(s, v)| *s += v);
            rows.push(row);
        }
    }
    let means = sums.map(|s| s.into_iter().map(|v| v / per_cloud as f64).collect());
    (LocalDescriptorSet::from_rows(&rows).unwrap(), means)
}

#[test]
fn log_likelihood_never_decreases() {
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..=5);
        let d = rng.random_range(1..=6);
        let truth = random_gmm(c, d, &mut rng, Conditioning::Peaked);
        let set = sample_descriptors(&truth, 200, &mut rng);
        let (gmm, trace) = em_fit_traced(&set, &EmConfig::new(c, seed)).unwrap();
        for w in trace.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "seed {seed}: {} -> {}", w[0], w[1]);
        }
        let final_ll = log_likelihood(&set, &gmm).unwrap();
        assert!((final_ll - trace.log_likelihoods.last().unwrap()).abs() < 1e-9 * final_ll.abs());
        assert!((gmm.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gmm.stddevs().iter().all(|s| *s >= 1e-3));
    }
}

#[test]
fn planted_centres_are_recovered() {
    // separation 8 at unit spread: SNR 8σ between centres
    for seed in 0..10u64 {
        let (set, truth) = two_clouds(8.0, 400, 3, seed);
        let gmm = em_fit(&set, &EmConfig::new(2, seed)).unwrap();
        let fitted = [gmm.mean(0).to_vec(), gmm.mean(1).to_vec()];
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let direct = dist(&fitted[0], &truth[0]).max(dist(&fitted[1], &truth[1]));
        let swapped = dist(&fitted[0], &truth[1]).max(dist(&fitted[1], &truth[0]));
        assert!(direct.min(swapped) < 0.1, "seed {seed}: {direct} / {swapped}");
    }
}

#[test]
fn row_order_does_not_change_the_fit() {
    let (set, _) = two_clouds(5.0, 50, 2, 1);
    let mut rows: Vec<Vec<f64>> = set.rows().map(<[f64]>::to_vec).collect();
    rows.reverse();
    let reversed = LocalDescriptorSet::from_rows(&rows).unwrap();
    let cfg = EmConfig::new(3, 4);
    assert_eq!(em_fit(&set, &cfg).unwrap(), em_fit(&reversed, &cfg).unwrap());
}

/// One EM step written out directly from a one-iteration fit, compared with
/// the likelihoods of the library's first and second iterations.
#[test]
fn second_iteration_matches_textbook_update() {
    let (set, _) = two_clouds(4.0, 30, 2, 9);
    let mut cfg = EmConfig::new(2, 2);
    cfg.max_iters = 1;
    let (one, trace) = em_fit_traced(&set, &cfg).unwrap();
    assert_eq!(trace.log_likelihoods.len(), 2);

    let mut two_cfg = cfg.clone();
    two_cfg.max_iters = 2;
    let (_, two_trace) = em_fit_traced(&set, &two_cfg).unwrap();
    let (c, d) = (2, 2);
    let rows: Vec<&[f64]> = set.rows().collect();
    let mut resp = Vec::new();
    for x in &rows {
        let dens: Vec<f64> = (0..c)
            .map(|j| {
                let mut p = one.weights()[j];
                for k in 0..d {
                    let s = one.stddev(j)[k];
                    let z = (x[k] - one.mean(j)[k]) / s;
                    p *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
                p
            })
            .collect();
        let total: f64 = dens.iter().sum();
        resp.push(dens.iter().map(|p| p / total).collect::<Vec<f64>>());
    }
    let ll_one: f64 = rows
        .iter()
        .map(|x| {
            (0..c)
                .map(|j| {
                    let mut p = one.weights()[j];
                    for k in 0..d {
                        let s = one.stddev(j)[k];
                        let z = (x[k] - one.mean(j)[k]) / s;
                        p *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                    }
                    p
                })
                .sum::<f64>()
                .ln()
        })
        .sum();
    assert!((ll_one - trace.log_likelihoods[1]).abs() < 1e-9 * ll_one.abs());
    let mass: Vec<f64> = (0..c).map(|j| resp.iter().map(|r| r[j]).sum()).collect();
    let means: Vec<Vec<f64>> = (0..c)
        .map(|j| (0..d).map(|k| rows.iter().zip(&resp).map(|(x, r)| r[j] * x[k]).sum::<f64>() / mass[j]).collect())
        .collect();
    let next_ll: f64 = {
        let sds: Vec<Vec<f64>> = (0..c)
            .map(|j| {
                (0..d)
                    .map(|k| {
                        (rows.iter().zip(&resp).map(|(x, r)| r[j] * (x[k] - means[j][k]).powi(2)).sum::<f64>() / mass[j])
                            .sqrt()
                            .max(1e-3)
                    })
                    .collect()
            })
            .collect();
        rows.iter()
            .map(|x| {
                (0..c)
                    .map(|j| {
                        let mut p = mass[j] / rows.len() as f64;
                        for k in 0..d {
                            let z = (x[k] - means[j][k]) / sds[j][k];
                            p *= (-0.5 * z * z).exp() / (sds[j][k] * (2.0 * std::f64::consts::PI).sqrt());
                        }
                        p
                    })
                    .sum::<f64>()
                    .ln()
            })
            .sum()
    };
    assert!((next_ll - two_trace.log_likelihoods[2]).abs() < 1e-9 * next_ll.abs());
}
