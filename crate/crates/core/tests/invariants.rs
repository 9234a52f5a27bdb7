use std::collections::BTreeSet;

use fm3_core::contrastive::{
    label_distinct_batches, mine_pairs, mnr_loss_value, LabeledExample, PairMiningConfig, Polarity,
};
use fm3_core::heads::{compute_metrics, HeadType};
use fm3_core::numerics::{clip_global_norm, Tensor};
use fm3_core::rng;
use proptest::prelude::*;

fn examples(labels: &[usize]) -> Vec<LabeledExample> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| LabeledExample { example_id: i as u64, task_id: 0, text: Some(vec![0]), image: None, label })
        .collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_filter("rows need a direction", move |v| v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
        .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn mined_pairs_respect_labels(labels in prop::collection::vec(0usize..4, 2..30), r in 1usize..40, seed in any::<u64>()) {
        let ex = examples(&labels);
        if let Ok(m) = mine_pairs(&ex, &PairMiningConfig { r, rng_seed: seed }) {
            let mut seen = BTreeSet::new();
            for p in m.positives.iter().chain(&m.negatives) {
                prop_assert_ne!(p.anchor, p.other);
                prop_assert_eq!(labels[p.anchor] == labels[p.other], p.polarity == Polarity::Positive);
                prop_assert!(seen.insert((p.anchor.min(p.other), p.anchor.max(p.other))));
            }
            prop_assert!(m.positives.len() <= r && m.negatives.len() <= r);
        }
    }

    #[test]
    fn batches_never_repeat_an_anchor_label(labels in prop::collection::vec(0usize..5, 4..30), seed in any::<u64>()) {
        let ex = examples(&labels);
        if let Ok(m) = mine_pairs(&ex, &PairMiningConfig { r: 30, rng_seed: seed }) {
            let groups = label_distinct_batches(&m.positives, &ex, &mut rng::seeded(seed));
            let mut used = 0;
            for g in &groups {
                prop_assert!(g.len() >= 2);
                let anchor_labels: BTreeSet<usize> = g.iter().map(|p| labels[p.anchor]).collect();
                prop_assert_eq!(anchor_labels.len(), g.len());
                prop_assert!(g.iter().all(|p| m.positives.contains(p)));
                used += g.len();
            }
            prop_assert!(used <= m.positives.len());
        }
    }

    #[test]
    fn mnr_ignores_row_norms(a in matrix(4, 3), p in matrix(4, 3), scales in prop::collection::vec(0.1f64..10.0, 4), s in 1.0f64..30.0) {
        let mut scaled = a.clone();
        for (i, c) in scales.iter().enumerate() {
            scaled.data_mut()[i * 3..i * 3 + 3].iter_mut().for_each(|x| *x *= c);
        }
        let base = mnr_loss_value(&a, &p, s).unwrap();
        prop_assert!((base - mnr_loss_value(&scaled, &p, s).unwrap()).abs() < 1e-9);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn clipping_is_idempotent(data in prop::collection::vec(-50.0f64..50.0, 1..20), max_norm in 0.1f64..20.0) {
        let mut grads = vec![Tensor::vector(data)];
        clip_global_norm(&mut grads, max_norm).unwrap();
        let once = grads.clone();
        let norm = clip_global_norm(&mut grads, max_norm).unwrap();
        prop_assert!(norm <= max_norm * (1.0 + 1e-12));
        for (x, y) in grads[0].data().iter().zip(once[0].data()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn metrics_stay_in_range(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..50)) {
        let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = compute_metrics(&pred, &labels, HeadType::Softmax).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.accuracy) && (0.0..=1.0).contains(&m.f1));
        let perfect = compute_metrics(&labels, &labels, HeadType::Softmax).unwrap();
        prop_assert_eq!(perfect.accuracy, 1.0);
        prop_assert_eq!(perfect.f1, 1.0);
    }
}
