use std::collections::BTreeSet;

use proptest::prelude::*;

use ggm_core::concepts::{build_gt_relation, ConceptVocabulary, SceneSpec};
use ggm_core::dataset::{compute_metrics, generate_dataset, is_tail, CompositionFreq, DatasetConfig};
use ggm_core::encoder::{init_encoder_params, EncoderConfig};
use ggm_core::numerics::{gaussian_kl_sym_value, pack_upper, unpack_upper, upper_len, Matrix, RngState};
use ggm_core::rggm::{loss_grad_consistency, loss_kl_symmetric, r_gen_values, r_init_values, NoiseScoreMode};
use ggm_core::vqa::{bce_loss, VqaExample};

fn matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    RngState::new(seed, 77).generator().gaussian_matrix(rows, cols, 0.0, scale).unwrap()
}

fn assert_symmetric(m: &Matrix, what: &str) {
    assert!(m.asymmetry() <= 1e-12, "{what} asymmetry {}", m.asymmetry());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_round_trip_is_exact(n in 2usize..9, seed in any::<u64>()) {
        let r = matrix(1, upper_len(n), seed, 3.0);
        let full = unpack_upper(&r, n).unwrap();
        prop_assert_eq!(pack_upper(&full).unwrap(), r);
        prop_assert_eq!(full.asymmetry(), 0.0);
        for i in 0..n {
            prop_assert_eq!(full.get(i, i), 1.0);
        }
    }

    #[test]
    fn r_init_ranges_and_symmetry(n in 2usize..7, d in 1usize..6, sigma in 0.0f64..2.0, seed in any::<u64>()) {
        let p = upper_len(n);
        let res = r_init_values(&matrix(1, d, seed, 1.0), &matrix(d, p, seed ^ 1, 1.0), &matrix(1, p, seed ^ 2, 1.0),
            sigma, RngState::new(seed, 3), n).unwrap();
        prop_assert!(res.r.data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(res.r0.asymmetry(), 0.0);
        for i in 0..n {
            prop_assert_eq!(res.r0.get(i, i), 1.0);
        }
        prop_assert_eq!(pack_upper(&res.r0).unwrap(), res.r_hat.clone());
        if sigma == 0.0 {
            prop_assert_eq!(res.r_hat, res.r);
        }
    }

    #[test]
    fn every_generated_relation_is_symmetric_in_unit_interval(
        n in 2usize..6, d in 1usize..6, iterations in 1usize..4, layers in 0usize..3, seed in any::<u64>()
    ) {
        let cfg = EncoderConfig { n_objects: n, hidden: d, iterations, layers, tie_assembly: seed % 2 == 0 };
        let params = init_encoder_params(&cfg, "enc", RngState::new(seed, 5)).unwrap();
        let r0 = unpack_upper(&matrix(1, upper_len(n), seed, 1.0), n).unwrap();
        let (rg, trace) = r_gen_values(&params, &cfg, "enc", &matrix(n, d, seed ^ 9, 1.0), &r0).unwrap();
        prop_assert_eq!(trace.len(), iterations);
        for step in &trace {
            let r = step.relation.as_ref().unwrap();
            assert_symmetric(r, "R_k");
            prop_assert!(r.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_symmetric(&rg, "R_g");
        prop_assert_eq!(&rg, trace.last().unwrap().relation.as_ref().unwrap());
    }

    #[test]
    fn gt_relation_is_symmetric_with_unit_diagonal(n in 2usize..8, dim in 1usize..10, seed in any::<u64>()) {
        let vocab = ConceptVocabulary { num_classes: 8, num_attributes: 5, embed_dim: dim, embed_seed: seed };
        let mut g = RngState::new(seed, 8).generator();
        let mut classes: Vec<usize> = (0..8).collect();
        g.shuffle(&mut classes);
        let objects = classes[..n].iter().map(|&c| (c, g.below(5))).collect();
        let r = build_gt_relation(&SceneSpec { objects }, &vocab).unwrap();
        prop_assert_eq!(r.asymmetry(), 0.0);
        prop_assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..n {
            prop_assert_eq!(r.get(i, i), 1.0);
        }
    }

    #[test]
    fn bce_of_zero_logits_is_ln2(k in 1usize..20, hot in 0usize..20) {
        let mut target = vec![0.0; k];
        target[hot % k] = 1.0;
        let loss = bce_loss(&vec![0.0; k], &target).unwrap();
        prop_assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn bce_is_nonnegative(z in prop::collection::vec(-50.0f64..50.0, 1..12), hot in 0usize..12) {
        let mut target = vec![0.0; z.len()];
        target[hot % z.len()] = 1.0;
        prop_assert!(bce_loss(&z, &target).unwrap() >= 0.0);
    }

    #[test]
    fn histogram_kl_is_symmetric_and_nonnegative(
        p in prop::collection::vec(0.0f64..1.0, 1..40), q in prop::collection::vec(0.0f64..1.0, 1..40), bins in 2usize..20
    ) {
        let a = loss_kl_symmetric(&p, &q, bins, 1e-3).unwrap();
        let b = loss_kl_symmetric(&q, &p, bins, 1e-3).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert_eq!(loss_kl_symmetric(&p, &p, bins, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_kl_is_symmetric_and_nonnegative(ma in -3.0f64..3.0, mb in -3.0f64..3.0, va in 1e-3f64..5.0, vb in 1e-3f64..5.0) {
        let ab = gaussian_kl_sym_value(ma, va, mb, vb);
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - gaussian_kl_sym_value(mb, vb, ma, va)).abs() <= 1e-12 * ab.abs().max(1.0));
    }

    #[test]
    fn grad_consistency_is_nonnegative(n in 3usize..6, sigma in 0.1f64..2.0, seed in any::<u64>(), squared in any::<bool>()) {
        let p = upper_len(n);
        let rg = unpack_upper(&matrix(1, p, seed, 0.2).map(|v| 0.5 + v.clamp(-0.45, 0.45)), n).unwrap();
        let r = matrix(1, p, seed ^ 3, 1.0).map(|v| 1.0 / (1.0 + (-v).exp()));
        let r_hat = r.add(&matrix(1, p, seed ^ 4, sigma)).unwrap();
        let mode = if squared { NoiseScoreMode::Squared } else { NoiseScoreMode::Corrected };
        let l = loss_grad_consistency(&rg, r_hat.data(), r.data(), sigma, mode, 1e-6).unwrap();
        prop_assert!(l >= 0.0);
    }
}

fn small_dataset(seed: u64, holdout: f64) -> DatasetConfig {
    DatasetConfig { train_size: 300, id_test_size: 80, ood_test_size: 80, holdout_fraction: holdout, seed, ..DatasetConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_contracts(seed in any::<u64>()) {
        let cfg = small_dataset(seed, 0.2);
        let split = generate_dataset(&cfg).unwrap();
        prop_assert_eq!(split.train.len(), cfg.train_size);
        prop_assert_eq!(split.id_test.len(), cfg.id_test_size);
        prop_assert_eq!(split.ood_test.len(), cfg.ood_test_size);

        let held: BTreeSet<_> = split.heldout.iter().copied().collect();
        let rare: BTreeSet<_> = split.rare.iter().copied().collect();
        prop_assert!(split.train_compositions().is_disjoint(&held));
        for ex in &split.ood_test {
            let c = ex.composition();
            prop_assert!(held.contains(&c) || rare.contains(&c));
        }

        // frequency table by brute-force scan
        let mut counts = vec![vec![0u64; cfg.num_attributes]; cfg.num_classes];
        for ex in &split.train {
            for &(c, a) in &ex.scene.objects {
                counts[c][a] += 1;
            }
        }
        prop_assert_eq!(&split.composition_freq, &CompositionFreq(counts));
        let total: u64 = split.composition_freq.0.iter().flatten().sum();
        prop_assert_eq!(total as usize, cfg.train_size * cfg.n_objects);
        prop_assert_eq!(generate_dataset(&cfg).unwrap(), split);
    }

    #[test]
    fn more_holdout_never_adds_train_compositions(seed in any::<u64>()) {
        let lo = generate_dataset(&small_dataset(seed, 0.1)).unwrap();
        let hi = generate_dataset(&small_dataset(seed, 0.4)).unwrap();
        prop_assert!(hi.train_compositions().len() <= lo.train_compositions().len());
    }

    #[test]
    fn metrics_match_brute_force_counter(seed in any::<u64>(), q in 0.05f64..1.0) {
        let split = generate_dataset(&small_dataset(seed, 0.2)).unwrap();
        let mut g = RngState::new(seed, 1).generator();
        for examples in [&split.id_test, &split.ood_test] {
            let preds: Vec<usize> = examples.iter().map(|ex| if g.open01() < 0.5 { ex.answer } else { g.below(8) }).collect();
            let m = compute_metrics(&preds, examples, &split.composition_freq, q).unwrap();

            let (mut tail, mut tail_ok, mut head, mut head_ok) = (0, 0, 0, 0);
            for (p, ex) in preds.iter().zip(examples.iter()) {
                let (c, a) = ex.composition();
                // tail: frequency within the lowest ceil(q·A) frequencies of the group
                let mut group = split.composition_freq.0[c].clone();
                group.sort();
                let k = ((q * group.len() as f64).ceil() as usize).max(1);
                let in_tail = group[..k].iter().any(|&f| split.composition_freq.0[c][a] <= f);
                prop_assert_eq!(in_tail, is_tail(&split.composition_freq, c, a, q));
                if in_tail {
                    tail += 1;
                    tail_ok += usize::from(*p == ex.answer);
                } else {
                    head += 1;
                    head_ok += usize::from(*p == ex.answer);
                }
            }
            prop_assert_eq!(tail + head, examples.len());
            prop_assert_eq!(m.n_tail, tail);
            let correct = preds.iter().zip(examples.iter()).filter(|(p, ex)| **p == ex.answer).count();
            prop_assert_eq!(m.all, 100.0 * correct as f64 / examples.len() as f64);
            prop_assert_eq!(m.tail, (tail > 0).then(|| 100.0 * tail_ok as f64 / tail as f64));
            prop_assert_eq!(m.head, (head > 0).then(|| 100.0 * head_ok as f64 / head as f64));
        }
    }
}

#[test]
fn compute_metrics_rejects_length_mismatch() {
    let ex = VqaExample { scene: SceneSpec { objects: vec![(0, 1), (1, 0)] }, question: 0, answer: 1 };
    let freq = CompositionFreq(vec![vec![1, 1], vec![1, 1]]);
    assert!(compute_metrics(&[0, 1], &[ex], &freq, 0.2).is_err());
}
