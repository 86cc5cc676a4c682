use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrm_core::attacks::{pgd, project, AdversaryBudget, Init, Norm};
use rrm_core::bench::{confidence_interval_95, Phase};
use rrm_core::data::batch_indices;
use rrm_core::models::{build_model, load_checkpoint, save_checkpoint, ArchDescriptor};
use rrm_core::objectives::{representation_loss, RepLossKind};
use rrm_core::tensor::{Graph, Tensor};

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::Linf), Just(Norm::L2)]
}

fn lp(row: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => row.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Norm::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgd_stays_in_budget_and_box(
        norm in norm_strategy(),
        eps in 0.0f64..2.0,
        step_factor in 0.05f64..3.0,
        steps in 1usize..6,
        boxed in any::<bool>(),
        seed in any::<u64>(),
        xs in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = build_model(&ArchDescriptor::mlp(4, &[5], 3), &mut rng).unwrap();
        let b = AdversaryBudget::new(norm, eps, steps)
            .with_step_size(eps * step_factor)
            .with_box(boxed.then_some([0.0, 1.0]));
        let x = Tensor::new(vec![3, 4], xs).unwrap();
        let adv = pgd(&model, &x, &[0, 1, 2], &b, Init::Random, &mut rng).unwrap();
        for i in 0..3 {
            let d: Vec<f64> = adv.row(i).iter().zip(x.row(i)).map(|(a, c)| a - c).collect();
            prop_assert!(lp(&d, norm) <= eps + 1e-9);
            if boxed {
                prop_assert!(adv.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn projection_is_idempotent(
        norm in norm_strategy(),
        eps in 0.0f64..2.0,
        ds in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let b = AdversaryBudget::new(norm, eps, 1).with_box(None);
        let d = Tensor::new(vec![2, 4], ds).unwrap();
        let once = project(&d, &b);
        let twice = project(&once, &b);
        for i in 0..2 {
            prop_assert!(lp(once.row(i), norm) <= eps + 1e-12);
            for (a, c) in once.row(i).iter().zip(twice.row(i)) {
                prop_assert!((a - c).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn epoch_covers_every_index_once(n in 1usize..300, bs in 1usize..70, shuffle in any::<bool>(), seed in any::<u64>()) {
        let batches = batch_indices(n, bs, shuffle, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn gradients_are_linear_in_the_loss(a in -3.0f64..3.0, c in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = build_model(&ArchDescriptor::mlp(3, &[4], 2), &mut rng).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let target = Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let y = [0, 1, 1, 0];
        let grads = |wa: f64, wc: f64| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let fp = model.forward(&mut g, xv, true, Phase::Eval).unwrap();
            let tv = g.constant(target.clone()).unwrap();
            let ce = g.softmax_cross_entropy(fp.logits, &y).unwrap();
            let rep = representation_loss(&mut g, RepLossKind::L2Distance, fp.features, tv).unwrap();
            let (sa, sc) = (g.scale(ce, wa), g.scale(rep, wc));
            let total = g.add(sa, sc).unwrap();
            g.backward(total).unwrap();
            fp.params.iter().map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec)).collect()
        };
        let (both, ce, rep) = (grads(a, c), grads(1.0, 0.0), grads(0.0, 1.0));
        for ((gb, gc), gr) in both.iter().zip(&ce).zip(&rep) {
            for ((vb, vc), vr) in gb.iter().zip(gc).zip(gr) {
                let want = a * vc + c * vr;
                prop_assert!((vb - want).abs() <= 1e-12 * (1.0 + want.abs()), "{vb} vs {want}");
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(inputs in 1usize..6, hidden in prop::collection::vec(1usize..6, 1..3), classes in 2usize..5, seed in any::<u64>()) {
        let model = build_model(&ArchDescriptor::mlp(inputs, &hidden, classes), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.params(), model.params());
        prop_assert_eq!(back.param_hash(), model.param_hash());
    }

    #[test]
    fn confidence_interval_shifts_with_the_samples(xs in prop::collection::vec(-10.0f64..10.0, 2..12), shift in -5.0f64..5.0) {
        let (m, h) = confidence_interval_95(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let (ms, hs) = confidence_interval_95(&shifted).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!((ms - (m + shift)).abs() < 1e-9);
        prop_assert!((hs - h).abs() < 1e-9);
    }
}
