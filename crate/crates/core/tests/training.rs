use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use siamfv::em::{em_fit, pool_descriptors, EmConfig};
use siamfv::synth::{generate, SynthConfig};
use siamfv::train::loss::{contrastive_loss, loss_and_upstream, PairLabel};
use siamfv::train::sgd::{sgd_step, ModelGradients, SgdConfig, SiameseModel, Trainable};
use siamfv::train::{train, BackboneModel, TrainConfig};
use siamfv::GmmModel;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn reference_loss_values() {
    let z = unit(vec![1.0, 2.0, -0.5]);
    assert_eq!(contrastive_loss(&z, &z, PairLabel::Matching, 0.8), 0.0);
    assert_eq!(contrastive_loss(&z, &z, PairLabel::NonMatching, 0.8), 0.5 * 0.8 * 0.8);
    assert!((contrastive_loss(&z, &z, PairLabel::NonMatching, 0.8) - 0.32).abs() < 1e-15);
    let far = z.iter().map(|v| -v).collect::<Vec<_>>();
    assert_eq!(contrastive_loss(&z, &far, PairLabel::NonMatching, 0.8), 0.0);
    assert_eq!(contrastive_loss(&z, &far, PairLabel::Matching, 0.8), 2.0);
}

proptest! {
    #[test]
    fn loss_is_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 4), b in proptest::collection::vec(-1.0f64..1.0, 4),
                         matching: bool, margin in 0.01f64..2.0) {
        let label = if matching { PairLabel::Matching } else { PairLabel::NonMatching };
        prop_assert_eq!(contrastive_loss(&a, &b, label, margin), contrastive_loss(&b, &a, label, margin));
        let (_, g, g_other) = loss_and_upstream(&a, &b, label, margin);
        prop_assert!(g.iter().zip(&g_other).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn non_matching_pairs_beyond_the_margin_cost_nothing(a in proptest::collection::vec(-1.0f64..1.0, 3), margin in 0.01f64..0.5) {
        let b: Vec<f64> = a.iter().map(|v| v + margin).collect();
        prop_assert_eq!(contrastive_loss(&a, &b, PairLabel::NonMatching, margin), 0.0);
    }

    #[test]
    fn sgd_keeps_the_mixture_valid(grad in proptest::collection::vec(-1e3f64..1e3, 9), lr in 0.0f64..1.0, momentum in 0.0f64..0.99) {
        let mut model = SiameseModel {
            gmm: GmmModel::new(3, 1, vec![0.2, 0.3, 0.5], vec![-1.0, 0.0, 1.0], vec![0.5, 1.0, 2.0]).unwrap(),
            backbone: BackboneModel::identity(1),
        };
        let mut grads = ModelGradients::zeros(&model);
        grads.omega.copy_from_slice(&grad[0..3]);
        grads.mu.copy_from_slice(&grad[3..6]);
        grads.sigma.copy_from_slice(&grad[6..9]);
        let mut velocity = ModelGradients::zeros(&model);
        let cfg = SgdConfig { learning_rate: lr, momentum, weight_decay: 0.0005 };
        let all = Trainable { gmm: true, backbone: true };
        for _ in 0..3 {
            sgd_step(&mut model, &grads, &mut velocity, &cfg, all);
        }
        prop_assert!((model.gmm.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(model.gmm.weights().iter().all(|w| *w > 0.0));
        prop_assert!(model.gmm.stddevs().iter().all(|s| *s >= 1e-3));
        prop_assert!(model.gmm.validate().is_ok());
    }
}

fn small_run(seed: u64) -> (Vec<f64>, SiameseModel) {
    let data = generate(&SynthConfig::new(8, 6, 16, 4, 1)).unwrap();
    let sets: Vec<_> = data.train.iter().map(|i| &i.input).collect();
    let pool = pool_descriptors(&sets, 200_000, 0).unwrap();
    let gmm = em_fit(&pool, &EmConfig::new(3, 0)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        iterations_per_epoch: 300,
        pairs_per_mine: 50,
        remine_every: 200,
        seed,
        ..TrainConfig::default()
    };
    let init = SiameseModel { gmm, backbone: BackboneModel::identity(4) };
    let out = train(&data.train, &data.eval, init, &cfg).unwrap();
    (out.log.iter().map(|m| m.mean_loss).collect(), out.model)
}

#[test]
fn training_is_reproducible_under_a_seed() {
    let (loss_a, model_a) = small_run(7);
    let (loss_b, model_b) = small_run(7);
    assert_eq!(loss_a, loss_b);
    assert_eq!(model_a, model_b);
    let (loss_c, _) = small_run(8);
    assert_ne!(loss_a, loss_c);
}

#[test]
fn frozen_parameters_stay_fixed() {
    let data = generate(&SynthConfig::new(4, 4, 8, 3, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gmm = siamfv::instances::random_gmm(2, 3, &mut rng, siamfv::instances::Conditioning::Soft);
    let init = SiameseModel { gmm: gmm.clone(), backbone: BackboneModel::identity(3) };
    let cfg = TrainConfig {
        epochs: 1,
        iterations_per_epoch: 50,
        pairs_per_mine: 10,
        negatives_per_pair: 2,
        train_gmm: false,
        ..TrainConfig::default()
    };
    let out = train(&data.train, &[], init, &cfg).unwrap();
    assert_eq!(out.model.gmm, gmm);
    assert_ne!(out.model.backbone, BackboneModel::identity(3));
}
