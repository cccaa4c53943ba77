//! Property checks over randomly drawn networks and datasets.

use ndarray::{s, Array1};
use proptest::prelude::*;
use teachnet::analysis::{alignment, observer_stats, prune_unspecialized, rho_matrix, rho_mean, success_rate, Centering, PruneScore};
use teachnet::data::{augment_agnostic, augment_aware, band_count, label_with, random_unit, sample, Distribution};
use teachnet::teacher::{build_teacher, top_fanout_norms, TeacherSpec};
use teachnet::train::{init_student, per_sample_gradient_sup, train, TrainConfig};
use teachnet::{Activation, Network, Role};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

fn teacher(d: usize, m: usize, c: usize, polarity: f64, seed: u64) -> Network {
    let calib = sample(Distribution::Gaussian, 100 * d.max(20), d, 1.0, seed ^ 0xca1).unwrap();
    let spec = TeacherSpec { layer_sizes: vec![d, m, c], polarity, seed, ..TeacherSpec::default() };
    build_teacher(&spec, &calib).unwrap()
}

/// Batch and per-sample forward passes sum in different orders.
fn close(a: Array1<f64>, b: Array1<f64>) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn teacher_columns_regular_separated_and_ordered(d in 3usize..8, m in 2usize..6, p in 0.0f64..2.0, seed in 0u64..1000) {
        let t = teacher(d, m, 3, p, seed);
        let w = t.weight(1);
        for (j, col) in w.columns().into_iter().enumerate() {
            let norm = col.slice(s![..d]).dot(&col.slice(s![..d])).sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12, "node {} norm {}", j, norm);
            for k in 0..j {
                let a = alignment(w.column(k), col).unwrap();
                prop_assert!(!a.is_aligned(0.05), "nodes {} and {} aligned", k, j);
            }
        }
        let fan = top_fanout_norms(&t);
        if p > 0.0 {
            prop_assert!(fan.windows(2).all(|v| v[0] >= v[1]), "{:?}", fan);
        }
    }

    #[test]
    fn band_count_monotone_in_width(seed in 0u64..500, e1 in 0.0f64..3.0, e2 in 0.0f64..3.0) {
        let data = sample(Distribution::Gaussian, 500, 4, 2.0, seed).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut w = random_unit(4, &mut rng).to_vec();
        w.push(0.3);
        let w = Array1::from(w);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(band_count(&data, w.view(), lo).unwrap() <= band_count(&data, w.view(), hi).unwrap());
    }

    #[test]
    fn agnostic_augmentation_keeps_base_and_labels_commute(seed in 0u64..500, eps in 0.01f64..1.0) {
        let t = teacher(3, 2, 2, 0.0, seed);
        let base = sample(Distribution::Gaussian, 40, 3, 1.0, seed).unwrap();
        let aug = augment_agnostic(&base, eps, 0.5, 4, 10_000).unwrap();
        prop_assert_eq!(aug.base_only().inputs, base.inputs.clone());
        let labeled = label_with(&t, &aug).unwrap();
        let labels = labeled.labels().unwrap();
        for i in (0..aug.len()).step_by(7) {
            prop_assert!(close(labels.row(i).to_owned(), t.output(aug.sample(i)).unwrap()));
        }
        let aware = augment_aware(&base, &t, eps, 0.5, 4).unwrap();
        prop_assert_eq!(aware.base_only().inputs, base.inputs.clone());
        let labels = aware.labels().unwrap();
        for i in 0..aware.len() {
            prop_assert!(close(labels.row(i).to_owned(), t.output(aware.sample(i)).unwrap()));
        }
    }

    #[test]
    fn copy_with_extras_is_fully_specialized(seed in 0u64..500, extra in 1usize..4, threshold in 0.0f64..0.999) {
        let t = teacher(4, 3, 2, 0.0, seed);
        let spare = Network::random(Role::Student, Activation::Rectifier, &[4, 3 + extra, 2], seed).unwrap();
        let mut w1 = spare.weight(1).clone();
        w1.slice_mut(s![.., ..3]).assign(t.weight(1));
        let mut w2 = ndarray::Array2::zeros((4 + extra, 2));
        w2.slice_mut(s![..3, ..]).assign(&t.weight(2).slice(s![..3, ..]));
        w2.row_mut(3 + extra).assign(&t.weight(2).row(3));
        let student = Network::new(Role::Student, Activation::Rectifier, vec![w1, w2]).unwrap();
        let eval = label_with(&t, &sample(Distribution::Gaussian, 300, 4, 1.0, seed + 1).unwrap()).unwrap();
        let rho = rho_matrix(&student, &t, &eval, 1, Centering::MeanCentered).unwrap();
        prop_assert!((rho_mean(&rho).unwrap() - 1.0).abs() < 1e-9);
        prop_assert_eq!(success_rate(&rho, threshold).unwrap(), 1.0);

        // spares carry zero fan-out, so removing them changes nothing
        let (pruned, rep) = prune_unspecialized(&student, 1e-300, &eval, PruneScore::FanOut).unwrap();
        prop_assert_eq!(rep.removed.len(), extra);
        for i in 0..eval.len() {
            let a = student.output(eval.sample(i)).unwrap();
            let b = pruned.output(eval.sample(i)).unwrap();
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn observer_counts_monotone(seed in 0u64..500, e in 0.05f64..1.0, de in 0.0f64..1.0) {
        let t = teacher(3, 2, 2, 0.0, seed);
        let student = init_student(&[3, 5, 2], Activation::Rectifier, seed).unwrap();
        let data = sample(Distribution::Gaussian, 300, 3, 1.0, seed + 9).unwrap();
        let narrow = observer_stats(&student, &t, &data, e, 0.5).unwrap();
        let wide = observer_stats(&student, &t, &data, e + de, 0.5).unwrap();
        for (a, b) in narrow.observed_counts.iter().zip(wide.observed_counts.iter()) {
            prop_assert!(a <= b);
        }
        let strict = observer_stats(&student, &t, &data, e, 0.9).unwrap();
        for j in 0..2 {
            for k in 0..5 {
                prop_assert!(!strict.observes(j, k) || narrow.observes(j, k));
            }
        }
    }
}

#[test]
fn training_is_reproducible_and_early_stop_is_honest() {
    let t = teacher(2, 2, 3, 0.0, 3);
    let data = label_with(&t, &sample(Distribution::Gaussian, 400, 2, 1.0, 4).unwrap()).unwrap();
    let eval = label_with(&t, &sample(Distribution::Gaussian, 200, 2, 1.0, 5).unwrap()).unwrap();
    let student = init_student(&[2, 6, 3], Activation::Rectifier, 6).unwrap();
    let cfg = TrainConfig { epochs: 400, learning_rate: 0.05, stop_when_g1_below: Some(5e-2), seed: 7, ..TrainConfig::default() };
    let a = train(&student, &t, &data, &eval, &cfg).unwrap();
    let b = train(&student, &t, &data, &eval, &cfg).unwrap();
    assert_eq!(a.student, b.student);
    assert_eq!(a.trace, b.trace);
    assert!(a.stopped_early, "threshold never reached in {} epochs", cfg.epochs);
    let sup = per_sample_gradient_sup(&a.student, &t, &data, 1).unwrap();
    assert!(sup <= 5e-2, "stopped with sup {sup}");
    assert_eq!(a.trace.last().unwrap().g1_sup, sup);
}
