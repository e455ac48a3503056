use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safl_core::bigan::{BranchArchitecture, Domain};
use safl_core::sync::{
    infer_sequence, reweight, train, unfamiliarity, BatchMode, DualBiGAN, Reweighting, TrainConfig, Trainer,
    TrainingPair,
};

fn tiny(domain: Domain) -> BranchArchitecture {
    BranchArchitecture {
        domain,
        input_size: 8,
        latent_dim: 4,
        channels: vec![2, 4],
        code_hidden: 8,
        joint_hidden: 16,
        ..BranchArchitecture::default_2d()
    }
}

fn tiny_model(seed: u64, cfg: &TrainConfig) -> DualBiGAN {
    DualBiGAN::new(tiny(Domain::Map2d), tiny(Domain::Map3d), seed, cfg.adam()).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng, id: usize) -> TrainingPair {
    TrainingPair {
        id,
        map3d: (0..512).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        map2d: (0..64).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
    }
}

fn pairs(n: usize, seed: u64) -> Vec<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_pair(&mut rng, i)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn weights_form_a_distribution(u in prop::collection::vec(0.5f64..1e6, 1..50)) {
        let w = reweight(&u);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn weights_ignore_a_common_shift(u in prop::collection::vec(1.0f64..20.0, 1..50), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = u.iter().map(|x| x + c).collect();
        for (a, b) in reweight(&u).iter().zip(reweight(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn weights_preserve_unfamiliarity_order(u in prop::collection::vec(1.0f64..20.0, 2..50)) {
        let w = reweight(&u);
        for i in 0..u.len() {
            for j in 0..u.len() {
                if u[i] < u[j] {
                    prop_assert!(w[i] <= w[j]);
                }
            }
        }
    }

    #[test]
    fn unfamiliarity_is_bounded(a in -1.0f64..2.0, b in -1.0f64..2.0) {
        let u = unfamiliarity(a, b, 1e-6);
        prop_assert!(u.is_finite());
        prop_assert!((1.0..=1e6).contains(&u));
    }
}

#[test]
fn unfamiliarity_of_half_half_is_two() {
    assert_eq!(unfamiliarity(0.5, 0.5, 1e-6), 2.0);
    assert_eq!(unfamiliarity(1.0 - 1e-6, 1.0 - 1e-6, 1e-6), 2.0 / (2.0 * (1.0 - 1e-6)));
}

#[test]
fn single_pair_is_drawn_once_per_epoch() {
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
    let mut model = tiny_model(1, &cfg);
    let log = train(&pairs(1, 3), &mut model, &cfg, |_, _, _| Ok(())).unwrap();
    for e in &log.epochs {
        assert_eq!(e.draws, vec![1]);
        assert_eq!(e.weights, vec![1.0]);
    }
}

#[test]
fn draws_are_reproducible() {
    let mut a = Trainer::new(10, 42);
    let mut b = Trainer::new(10, 42);
    assert_eq!(a.draw(10).unwrap(), b.draw(10).unwrap());
    let mut c = Trainer::new(10, 43);
    assert_ne!(a.draw(50).unwrap(), c.draw(50).unwrap());
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let mut model = tiny_model(5, &cfg);
    let fresh = tiny_model(5, &cfg);
    let data = pairs(4, 1);
    let log = train(&data, &mut model, &cfg, |_, _, _| Ok(())).unwrap();
    assert_eq!(log.weight_history, vec![vec![0.25; 4]]);
    assert!(log.epochs.is_empty());
    let maps: Vec<(Vec<f32>, Vec<f32>)> = data.iter().map(|p| (p.map3d.clone(), p.map2d.clone())).collect();
    let (fa, _) = infer_sequence(&model, &maps).unwrap();
    let (fb, _) = infer_sequence(&fresh, &maps).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn history_rows_are_distributions_and_runs_repeat() {
    for mode in [BatchMode::Grouped, BatchMode::Fill] {
        for rw in [Reweighting::Resample, Reweighting::LossScale] {
            let cfg = TrainConfig { epochs: 3, batch_size: 3, batch_mode: mode, reweighting: rw, seed: 9, ..TrainConfig::default() };
            let data = pairs(7, 2);
            let mut m1 = tiny_model(3, &cfg);
            let mut m2 = tiny_model(3, &cfg);
            let l1 = train(&data, &mut m1, &cfg, |_, _, _| Ok(())).unwrap();
            let l2 = train(&data, &mut m2, &cfg, |_, _, _| Ok(())).unwrap();
            assert_eq!(l1, l2);
            assert_eq!(l1.weight_history.len(), 4);
            for row in &l1.weight_history {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|&w| w > 0.0));
            }
        }
    }
}

#[test]
fn unfamiliar_sample_gains_weight() {
    let cfg = TrainConfig { epochs: 5, batch_size: 1, seed: 4, lr: 2e-3, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = TrainingPair { id: 0, map3d: vec![0.0; 512], map2d: vec![0.0; 64] };
    let b = TrainingPair {
        id: 1,
        map3d: (0..512).map(|_| rng.random_range(0.0..1.0)).collect(),
        map2d: (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let mut model = tiny_model(2, &cfg);
    let log = train(&[a, b], &mut model, &cfg, |_, _, _| Ok(())).unwrap();
    let w = log.weight_history.last().unwrap();
    assert!(w[1] > w[0], "weights {w:?}");
}

#[test]
fn inference_edges() {
    let cfg = TrainConfig::default();
    let model = tiny_model(0, &cfg);
    let (f, _) = infer_sequence(&model, &[]).unwrap();
    assert_eq!(f.count(), 0);
    assert_eq!(f.dim, 8);
    let p = pairs(1, 0).remove(0);
    let maps = vec![(p.map3d.clone(), p.map2d.clone()); 2];
    let (f, lat) = infer_sequence(&model, &maps).unwrap();
    assert_eq!(f.row(0), f.row(1));
    assert!(lat.total_ms() >= 0.0);
    let bad = vec![(p.map3d.clone(), vec![0.0; 3])];
    let err = infer_sequence(&model, &bad).unwrap_err().to_string();
    assert!(err.contains("frame 0"), "{err}");
}

#[test]
fn trained_model_survives_save_and_load() {
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
    let data = pairs(3, 5);
    let mut model = tiny_model(8, &cfg);
    train(&data, &mut model, &cfg, |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = DualBiGAN::load(dir.path(), cfg.adam()).unwrap();
    let maps: Vec<(Vec<f32>, Vec<f32>)> = data.iter().map(|p| (p.map3d.clone(), p.map2d.clone())).collect();
    assert_eq!(infer_sequence(&model, &maps).unwrap().0, infer_sequence(&back, &maps).unwrap().0);
}
