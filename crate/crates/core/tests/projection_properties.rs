use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use siamfv::projection::{fit_lda_whiten, fit_pca_whiten, principal_components};

fn correlated_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    (0..n)
        .map(|_| {
            let z = nalgebra::DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            (&mix * z).iter().map(|v| v + 3.0).collect()
        })
        .collect()
}

fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    DMatrix::from_fn(d, d, |a, b| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n as f64
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn whitened_training_set_has_identity_covariance(n in 4usize..80, d in 2usize..10, seed: u64) {
        let rows = correlated_rows(n, d, seed);
        let m = d.min(n - 1);
        // the whitening regularizer leaves a relative error of ε/λ per axis
        let (_, values, _) = principal_components(&rows).unwrap();
        prop_assume!(values[m - 1] >= 1e-3);
        let model = fit_pca_whiten(&rows, m).unwrap();
        let out: Vec<Vec<f64>> = rows.iter().map(|r| model.transform(r).unwrap()).collect();
        let cov = covariance(&out);
        let err = (cov - DMatrix::<f64>::identity(m, m)).abs().max();
        prop_assert!(err <= 1e-6, "{}", err);
    }

    #[test]
    fn basis_columns_are_orthonormal(n in 4usize..40, d in 2usize..12, seed: u64) {
        let rows = correlated_rows(n, d, seed);
        let m = d.min(n - 1);
        let model = fit_pca_whiten(&rows, m).unwrap();
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = model.column(i).iter().zip(model.column(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn lda_output_has_unit_within_class_covariance(k in 2usize..6, per in 3usize..8, d in 2usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            let centre: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
            for _ in 0..per {
                rows.push(centre.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
                labels.push(c);
            }
        }
        let m = (k - 1).min(d);
        prop_assume!(k * per - k >= d);
        let model = fit_lda_whiten(&rows, &labels, m).unwrap();
        let out: Vec<Vec<f64>> = rows.iter().map(|r| model.transform(r).unwrap()).collect();
        let mut sw = DMatrix::<f64>::zeros(m, m);
        for c in 0..k {
            let members: Vec<&Vec<f64>> = out.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(v, _)| v).collect();
            let mean: Vec<f64> = (0..m).map(|a| members.iter().map(|v| v[a]).sum::<f64>() / members.len() as f64).collect();
            for v in members {
                for a in 0..m {
                    for b in 0..m {
                        sw[(a, b)] += (v[a] - mean[a]) * (v[b] - mean[b]);
                    }
                }
            }
        }
        let err = (sw / out.len() as f64 - DMatrix::<f64>::identity(m, m)).abs().max();
        prop_assert!(err <= 1e-6, "{}", err);
    }
}

#[test]
fn projected_vectors_are_unit() {
    let rows = correlated_rows(30, 6, 2);
    let model = fit_pca_whiten(&rows, 4).unwrap();
    for r in &rows {
        let p = model.project(r).unwrap();
        assert!((p.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
}
