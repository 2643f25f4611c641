use std::collections::BTreeSet;

use otseg_core::data::Rng;
use otseg_core::metrics::ConfusionMatrix;
use proptest::prelude::*;

/// IoU from explicit pixel index sets.
fn set_iou(pred: &[usize], gt: &[usize], k: usize) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
            let g: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
            let union = p.union(&g).count();
            (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
        })
        .collect()
}

#[test]
fn random_grids_match_loop_and_set_oracles() {
    let mut rng = Rng::new(8);
    for _ in 0..50 {
        let k = 3;
        let pred: Vec<usize> = (0..64).map(|_| rng.below(k)).collect();
        let gt: Vec<usize> = (0..64).map(|_| rng.below(k)).collect();
        let mut cm = ConfusionMatrix::new(k).unwrap();
        cm.accumulate(&pred, &gt).unwrap();
        let mut counts = vec![vec![0u64; k]; k];
        for (&p, &g) in pred.iter().zip(&gt) {
            counts[g][p] += 1;
        }
        for (g, row) in counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                assert_eq!(cm.count(g, p), n);
            }
        }
        let oracle = set_iou(&pred, &gt, k);
        for (a, b) in cm.iou_per_class().iter().zip(&oracle) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-15),
                (None, None) => {}
                _ => panic!("presence mismatch"),
            }
        }
        let present: Vec<f64> = oracle.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        assert!((cm.miou().unwrap() - mean).abs() < 1e-15);
    }
}

fn grids() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2usize..6, 1usize..80).prop_flat_map(|(k, n)| {
        (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
    })
}

proptest! {
    #[test]
    fn iou_in_unit_interval_and_total_counts((k, pred, gt) in grids()) {
        let mut cm = ConfusionMatrix::new(k).unwrap();
        cm.accumulate(&pred, &gt).unwrap();
        prop_assert_eq!(cm.total(), pred.len() as u64);
        for v in cm.iou_per_class().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn consistent_relabeling_permutes_iou((k, pred, gt) in grids(), shift in 1usize..5) {
        let perm = |c: usize| (c + shift) % k;
        let mut a = ConfusionMatrix::new(k).unwrap();
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(k).unwrap();
        let pp: Vec<usize> = pred.iter().map(|&c| perm(c)).collect();
        let gp: Vec<usize> = gt.iter().map(|&c| perm(c)).collect();
        b.accumulate(&pp, &gp).unwrap();
        let (ia, ib) = (a.iou_per_class(), b.iou_per_class());
        for c in 0..k {
            prop_assert_eq!(ia[c], ib[perm(c)]);
        }
    }

    #[test]
    fn accumulation_is_order_independent((k, pred, gt) in grids(), split in 0usize..80) {
        let s = split.min(pred.len());
        let mut whole = ConfusionMatrix::new(k).unwrap();
        whole.accumulate(&pred, &gt).unwrap();
        let mut rev = ConfusionMatrix::new(k).unwrap();
        rev.accumulate(&pred[s..], &gt[s..]).unwrap();
        rev.accumulate(&pred[..s], &gt[..s]).unwrap();
        let mut merged = ConfusionMatrix::new(k).unwrap();
        let mut part = ConfusionMatrix::new(k).unwrap();
        part.accumulate(&pred[..s], &gt[..s]).unwrap();
        merged.accumulate(&pred[s..], &gt[s..]).unwrap();
        merged.merge(&part).unwrap();
        prop_assert_eq!(&whole, &rev);
        prop_assert_eq!(&whole, &merged);
    }
}
