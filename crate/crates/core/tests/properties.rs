mod common;

use proptest::prelude::*;
use stilt_core::data::fractional_sample_indices;
use stilt_core::metrics::evaluate;
use stilt_core::model::{Batch, Model, ModelConfig};
use stilt_core::ops::Mode;
use stilt_core::stats::wilcoxon_from_differences;
use stilt_core::tensor::Matrix;
use stilt_core::training::{weighted_ce_loss, LossWeights};
use stilt_core::DeterministicRng;

fn labels_and_preds() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..120).prop_flat_map(|n| {
        (
            proptest::collection::vec(0usize..3, n),
            proptest::collection::vec(0usize..3, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_ignore_sample_order((labels, preds) in labels_and_preds(), shift in 0usize..500) {
        let a = evaluate(&labels, &preds).unwrap();
        let k = shift % labels.len();
        let mut l2 = labels.clone();
        let mut p2 = preds.clone();
        l2.rotate_left(k);
        p2.rotate_left(k);
        l2.reverse();
        p2.reverse();
        let b = evaluate(&l2, &p2).unwrap();
        prop_assert!((a.weighted_f1 - b.weighted_f1).abs() < 1e-12);
        prop_assert!((a.weighted_precision - b.weighted_precision).abs() < 1e-12);
    }

    #[test]
    fn weighted_recall_is_accuracy((labels, preds) in labels_and_preds()) {
        let r = evaluate(&labels, &preds).unwrap();
        let acc = labels.iter().zip(&preds).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        prop_assert!((r.weighted_recall - acc).abs() < 1e-12);
        for v in [r.weighted_f1, r.weighted_precision, r.weighted_recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn wilcoxon_symmetries(d in proptest::collection::vec(-4i32..=4, 1..16)) {
        let d: Vec<f64> = d.into_iter().map(f64::from).collect();
        let Ok(base) = wilcoxon_from_differences(&d) else { return Ok(()) };
        prop_assert!((0.0..=1.0).contains(&base.p_two_sided));
        let mut rev = d.clone();
        rev.reverse();
        prop_assert_eq!(wilcoxon_from_differences(&rev).unwrap().p_two_sided, base.p_two_sided);
        let flipped: Vec<f64> = d.iter().map(|x| -x).collect();
        prop_assert!((wilcoxon_from_differences(&flipped).unwrap().p_two_sided - base.p_two_sided).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_per_row_logit_shift(
        logits in proptest::collection::vec(-20.0f64..20.0, 12),
        shifts in proptest::collection::vec(-50.0f64..50.0, 4),
        labels in proptest::collection::vec(0usize..3, 4),
        w in proptest::collection::vec(0.05f64..1.0, 3),
    ) {
        let weights = LossWeights([w[0], w[1], w[2]]);
        let a = Matrix::from_vec(4, 3, logits.clone()).unwrap();
        let b = Matrix::from_vec(4, 3, logits.iter().enumerate().map(|(i, v)| v + shifts[i / 3]).collect()).unwrap();
        let (la, _) = weighted_ce_loss(&a, &labels, &weights).unwrap();
        let (lb, _) = weighted_ce_loss(&b, &labels, &weights).unwrap();
        prop_assert!((la - lb).abs() < 1e-12, "{} vs {}", la, lb);
    }

    #[test]
    fn sampler_sizes_and_uniqueness(n in 1usize..300, f in 0.01f64..=1.0, seed in any::<u64>()) {
        let counts = [n / 6, n / 3, n - n / 6 - n / 3];
        let records = common::imbalanced_records(counts, 1, 0);
        let idx = fractional_sample_indices(&records, f, &mut DeterministicRng::new(seed)).unwrap();
        prop_assert_eq!(idx.len(), (f * n as f64).round() as usize);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fusion_invariants_hold(seed in any::<u64>(), scale in 0.1f64..30.0) {
        let cfg = ModelConfig { dim: 4, fused_dim: 3, attention_hidden: vec![5], head_hidden: vec![6], ..Default::default() };
        let mut rng = DeterministicRng::new(seed);
        let model = Model::<f64>::init(&cfg, &mut rng).unwrap();
        let mut m = || Matrix::from_vec(3, 4, (0..12).map(|_| scale * rng.standard_normal()).collect()).unwrap();
        let batch = Batch::new(m(), m()).unwrap();
        let t = model.forward(&batch, Mode::Train, 0.2, &mut DeterministicRng::new(seed)).unwrap();
        for r in 0..3 {
            prop_assert!((t.scores.get(r, 0) + t.scores.get(r, 1) - 1.0).abs() <= 1e-12);
            prop_assert!((t.shifted_scores.get(r, 0) + t.shifted_scores.get(r, 1) - 3.0).abs() <= 1e-12);
        }
        prop_assert!(t.fused_raw.as_slice().iter().all(|v| v.abs() < 1.0));
    }
}
