use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uaglnet::metrics::{confusion_counts, metrics_from_counts, ConfusionCounts, Report};
use uaglnet::Tensor;

/// Logit tensor whose thresholded prediction is `pred`.
fn logits(pred: &[bool]) -> Tensor<f64> {
    let d: Vec<f64> = pred.iter().map(|&p| if p { 2.0 } else { -2.0 }).collect();
    Tensor::from_f64(&[1, 1, pred.len()], &d).unwrap()
}

fn mask(bits: &[bool]) -> Tensor<f64> {
    let d: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
    Tensor::from_f64(&[1, 1, bits.len()], &d).unwrap()
}

/// Direct pixel-count definitions of the four metrics.
fn brute_force(pred: &[bool], target: &[bool]) -> (f64, f64, f64, f64) {
    let both = pred.iter().zip(target).filter(|(p, t)| **p && **t).count() as f64;
    let predicted = pred.iter().filter(|p| **p).count() as f64;
    let actual = target.iter().filter(|t| **t).count() as f64;
    let union = pred.iter().zip(target).filter(|(p, t)| **p || **t).count() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (p, r) = (div(both, predicted), div(both, actual));
    (p, r, div(2.0 * p * r, p + r), div(both, union))
}

#[test]
fn ten_pixel_example() {
    let pred = [true, true, true, true, true, true, true, true, false, false];
    let target = [true, true, true, true, true, true, false, false, true, true];
    let c = confusion_counts(&logits(&pred), &mask(&target), 0.5).unwrap();
    assert_eq!(c, ConfusionCounts { tp: 6, fp: 2, tn: 0, fn_: 2 });
    let m = metrics_from_counts(&c);
    assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.75, 0.75, 0.75, 0.6));
    assert!(!m.degenerate);
}

#[test]
fn perfect_and_inverted_predictions() {
    let target = [true, false, true, true, false];
    let c = confusion_counts(&logits(&target), &mask(&target), 0.5).unwrap();
    assert_eq!((c.fp, c.fn_), (0, 0));
    let m = metrics_from_counts(&c);
    assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
    let inverted: Vec<bool> = target.iter().map(|t| !t).collect();
    let c = confusion_counts(&logits(&inverted), &mask(&target), 0.5).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
    assert!(!metrics_from_counts(&c).degenerate);
}

#[test]
fn empty_masks_are_flagged() {
    let c = ConfusionCounts { tp: 0, fp: 0, tn: 9, fn_: 0 };
    let m = metrics_from_counts(&c);
    assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
    assert!(m.degenerate);
    assert!(Report::new(c).key_values().contains("warning=empty_mask"));
    assert!(Report::new(c).to_string().contains("warning"));
}

#[test]
fn threshold_is_applied_on_probabilities() {
    let x = Tensor::from_f64(&[1, 1, 3], &[-0.1, 0.0, 0.1]).unwrap();
    let y = mask(&[true, true, true]);
    assert_eq!(confusion_counts(&x, &y, 0.5).unwrap().tp, 2);
    let high = (0.7f64 / 0.3).ln();
    let x = Tensor::from_f64(&[1, 1, 2], &[high - 1e-9, high + 1e-9]).unwrap();
    assert_eq!(confusion_counts(&x, &mask(&[true, true]), 0.7).unwrap().tp, 1);
    assert!(confusion_counts(&x, &mask(&[true, true]), 1.0).is_err());
    let soft = Tensor::from_f64(&[1, 1, 2], &[0.0, 0.5]).unwrap();
    assert!(confusion_counts(&x, &soft, 0.5).is_err());
}

#[test]
fn thousand_random_mask_pairs_match_pixel_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let density: f64 = rng.random_range(0.0..1.0);
        let pred: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
        let target: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
        let c = confusion_counts(&logits(&pred), &mask(&target), 0.5).unwrap();
        assert_eq!(c.total(), 256);
        let m = metrics_from_counts(&c);
        let (p, r, f1, iou) = brute_force(&pred, &target);
        for (a, b) in [(m.precision, p), (m.recall, r), (m.f1, f1), (m.iou, iou)] {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn tile_counts_accumulate_to_the_whole_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pred: Vec<bool> = (0..400).map(|_| rng.random_bool(0.4)).collect();
    let target: Vec<bool> = (0..400).map(|_| rng.random_bool(0.3)).collect();
    let whole = ConfusionCounts::from_binary(&pred, &target).unwrap();
    let tiles: ConfusionCounts = pred
        .chunks(37)
        .zip(target.chunks(37))
        .map(|(p, t)| ConfusionCounts::from_binary(p, t).unwrap())
        .sum();
    assert_eq!(whole, tiles);
    assert_eq!(metrics_from_counts(&whole), metrics_from_counts(&tiles));
}

proptest! {
    #[test]
    fn f1_is_a_function_of_iou(tp in 1u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let m = metrics_from_counts(&ConfusionCounts { tp, fp, tn: 0, fn_ });
        prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_joint_pixel_order(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..300),
        seed in any::<u64>(),
    ) {
        let (pred, target): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let before = ConfusionCounts::from_binary(&pred, &target).unwrap();
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let (p2, t2): (Vec<bool>, Vec<bool>) = shuffled.into_iter().unzip();
        prop_assert_eq!(before, ConfusionCounts::from_binary(&p2, &t2).unwrap());
    }
}
