use proptest::prelude::*;
use xdvmr_core::losses::{mmd, triplet_loss, Bandwidth, MmdConfig, MmdVariant};
use xdvmr_core::{expand_moment, mean_iou, recall_at, temporal_iou, MomentBoundary, ScoreSequence};

fn span(max: usize) -> impl Strategy<Value = MomentBoundary> {
    (0..max)
        .prop_flat_map(move |s| (Just(s), s..max))
        .prop_map(|(start, end)| MomentBoundary { start, end })
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), 1..=n)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in span(50), b in span(50)) {
        let x = temporal_iou(&a, &b);
        prop_assert_eq!(x, temporal_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(temporal_iou(&a, &a), 1.0);
    }

    #[test]
    fn recall_grows_with_n_and_shrinks_with_m(
        pairs in prop::collection::vec((prop::collection::vec(span(30), 1..6), span(30)), 1..20),
    ) {
        let (preds, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let r = |n, m| recall_at(&preds, &truths, n, m).unwrap();
        prop_assert!(r(1, 0.5) <= r(5, 0.5));
        prop_assert!(r(5, 0.7) <= r(5, 0.3));
        let top1: Vec<_> = preds.iter().map(|p| p[0]).collect();
        let miou = mean_iou(&top1, &truths).unwrap();
        prop_assert!((0.0..=1.0).contains(&miou));
    }

    #[test]
    fn expansion_contains_peak_and_nests(
        scores in prop::collection::vec(-1.0..1.0f64, 1..60),
        a in 0.05..1.0f64,
        b in 0.05..1.0f64,
    ) {
        let s = ScoreSequence::new(scores.clone()).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let wide = expand_moment(&s, lo).unwrap();
        let narrow = expand_moment(&s, hi).unwrap();
        prop_assert!(wide.contains_span(&narrow));
        let peak = scores.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!((narrow.start..=narrow.end).any(|i| scores[i] == peak));
        prop_assert!(narrow.end < scores.len());
    }

    #[test]
    fn mmd_is_nonnegative_and_symmetric(u in rows(6, 3), w in rows(6, 3), h in 0.2..4.0f64) {
        for bandwidth in [Bandwidth::Median, Bandwidth::Fixed(h)] {
            let c = MmdConfig { variant: MmdVariant::Standard, bandwidth };
            let d = mmd(&u, &w, c).unwrap();
            prop_assert!(d >= -1e-12);
            prop_assert!((d - mmd(&w, &u, c).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_is_zero_past_the_margin(p in -1.0..1.0f64, negs in prop::collection::vec(-1.0..1.0f64, 1..8), m in 0.0..0.5f64) {
        let l = triplet_loss(p, &negs, m).unwrap();
        prop_assert!(l >= 0.0);
        let shifted: Vec<f64> = negs.iter().map(|n| n - 2.0 - m).collect();
        prop_assert_eq!(triplet_loss(p.max(0.0), &shifted, m).unwrap(), 0.0);
    }
}
