mod common;

use std::collections::HashSet;

use capsroute::augment::{apply_geometry_and_brightness, drop_blocks, AugmentParams, CoarseDropout};
use capsroute::capsnet::{dynamic_routing, squash};
use capsroute::checkpoint::Checkpoint;
use capsroute::config::{parse_key_values, RunConfig, SplitMode};
use capsroute::eval::{make_splits, metrics, ConfusionMatrix, SplitOptions};
use capsroute::image::GrayImage;
use capsroute::model::{Model, ModelKind};
use capsroute::tensor::Tensor;
use capsroute::Label;
use common::rng;
use proptest::prelude::*;

proptest! {
    #[test]
    fn squash_keeps_direction_and_stays_below_one(s in prop::collection::vec(-1e3f64..1e3, 1..9)) {
        let v = squash(&s);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm < 1.0);
        for (a, b) in v.iter().zip(&s) {
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn coupling_rows_sum_to_one(
        (p, j, d, data) in (1usize..8, 1usize..4, 1usize..5)
            .prop_flat_map(|(p, j, d)| (Just(p), Just(j), Just(d), prop::collection::vec(-3f64..3.0, p * j * d))),
        iters in 1usize..5,
    ) {
        let (_, state) = dynamic_routing(&Tensor::new(&[p, j, d], data).unwrap(), iters).unwrap();
        for row in state.couplings.data().chunks(j) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&c| c > 0.0));
        }
    }

    #[test]
    fn metric_identities(tp in 0usize..500, fn_ in 0usize..500, fp in 0usize..500, tn in 0usize..500) {
        let cm = ConfusionMatrix::new(tp, fn_, fp, tn);
        let m = metrics(&cm);
        let total = tp + fn_ + fp + tn;
        prop_assert_eq!(m.accuracy, (total > 0).then(|| (tp + tn) as f64 / total as f64));
        if tp > 0 {
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            prop_assert!((m.f1.unwrap() - f1).abs() < 1e-12);
        }
        for v in m.values().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn splits_partition_and_stratify(
        labels in prop::collection::vec(prop::bool::ANY, 12..80),
        seed in any::<u64>(),
        partition in prop::bool::ANY,
    ) {
        let labels: Vec<Label> = labels.into_iter().map(|b| if b { Label::Drowsy } else { Label::Alert }).collect();
        let mode = if partition { SplitMode::Partition } else { SplitMode::Holdout };
        let opts = SplitOptions { folds: 3, train_frac: 0.8, seed, mode };
        let Ok(plan) = make_splits(&labels, None, &opts) else {
            let few = [Label::Alert, Label::Drowsy].iter().any(|&c| labels.iter().filter(|&&l| l == c).count() < 3);
            prop_assert!(few);
            return Ok(());
        };
        let mut tested = HashSet::new();
        for fold in &plan.folds {
            let train: HashSet<_> = fold.train.iter().collect();
            prop_assert!(fold.test.iter().all(|i| !train.contains(i)));
            prop_assert_eq!(fold.train.len() + fold.test.len(), labels.len());
            tested.extend(fold.test.iter().copied());
            if !partition {
                for c in [Label::Alert, Label::Drowsy] {
                    let n = labels.iter().filter(|&&l| l == c).count() as f64;
                    let k = fold.train.iter().filter(|&&i| labels[i] == c).count() as f64;
                    prop_assert!((k - 0.8 * n).abs() <= 1.0);
                }
            }
        }
        if partition {
            prop_assert_eq!(tested.len(), labels.len());
        }
        prop_assert_eq!(make_splits(&labels, None, &opts).unwrap(), plan);
    }

    #[test]
    fn grouped_splits_keep_subjects_together(subjects in 6usize..16, per in 1usize..5, seed in any::<u64>()) {
        let groups: Vec<String> = (0..subjects * per).map(|i| format!("S{}", i / per)).collect();
        let labels: Vec<Label> = (0..subjects * per)
            .map(|i| if (i / per) % 2 == 0 { Label::Alert } else { Label::Drowsy })
            .collect();
        let opts = SplitOptions { folds: 2, train_frac: 0.7, seed, mode: SplitMode::Holdout };
        let plan = make_splits(&labels, Some(&groups), &opts).unwrap();
        for fold in &plan.folds {
            let train: HashSet<&str> = fold.train.iter().map(|&i| groups[i].as_str()).collect();
            prop_assert!(fold.test.iter().all(|&i| !train.contains(groups[i].as_str())));
        }
    }

    #[test]
    fn dropout_blocks_are_aligned_and_counted(h in 2usize..40, w in 2usize..40, seed in any::<u64>()) {
        let mut img = GrayImage::filled(h, w, 200);
        let cfg = CoarseDropout::default();
        let corners = drop_blocks(&mut img, &cfg, &mut rng(seed));
        let cells = h.div_ceil(2) * w.div_ceil(2);
        prop_assert_eq!(corners.len(), (0.02 * cells as f64).round() as usize);
        prop_assert!(corners.iter().all(|&(r, c)| r % 2 == 0 && c % 2 == 0));
        let zeros = img.pixels().iter().filter(|&&p| p == 0).count();
        let covered: usize = corners.iter().map(|&(r, c)| (h - r).min(2) * (w - c).min(2)).sum();
        prop_assert_eq!(zeros, covered);
    }

    #[test]
    fn identity_transform_is_bitwise(pixels in prop::collection::vec(any::<u8>(), 64 * 32)) {
        let img = GrayImage::new(64, 32, pixels).unwrap();
        prop_assert_eq!(apply_geometry_and_brightness(&img, &AugmentParams::IDENTITY), img);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let model = Model::new(ModelKind::Mlp, h, w, &mut rng(seed)).unwrap();
        let ckpt = Checkpoint::from_model(&model);
        let back = Checkpoint::decode(&ckpt.encode()).unwrap();
        prop_assert_eq!(back.into_model().unwrap(), model);
    }

    #[test]
    fn config_snapshot_round_trips(seed in any::<u64>(), epochs in 1usize..1000, batch in 1usize..256, lr in 1e-6f64..1.0) {
        let mut cfg = RunConfig { seed, epochs, batch_size: batch, ..RunConfig::default() };
        cfg.adam.lr = lr;
        cfg.augmentation.seed = seed;
        let mut back = RunConfig::default();
        back.apply(&parse_key_values(&cfg.snapshot()).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
