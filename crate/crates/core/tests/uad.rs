use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uaglnet::nn::{Graph, Init, ParamStore};
use uaglnet::uad::{
    aggregate, predict_distribution, reparameterized_samples, segmentation_head, uncertainty_map, GaussianField,
    GaussianHead, SIGMA_FLOOR,
};
use uaglnet::{Error, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn field(tape: &mut Tape<f64>, mu: &[f64], sigma: &[f64]) -> GaussianField {
    let shape = [1, 1, mu.len()];
    GaussianField {
        mu: tape.constant(t(&shape, mu)),
        sigma: tape.constant(t(&shape, sigma)),
    }
}

#[test]
fn zero_head_predicts_a_flat_unit_field() {
    let mut store = ParamStore::<f64>::new();
    let head = GaussianHead::new(&mut Init::new(&mut store, 0), "h", 4);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new(&store, false, 0);
    let f = g.constant(Tensor::zeros(&[4, 3, 5]));
    let d = predict_distribution(&mut g, f, &head).unwrap();
    assert_eq!(g.shape(d.mu), &[1, 3, 5]);
    assert_eq!(g.shape(d.sigma), &[1, 3, 5]);
    assert!(g.value(d.mu).data().iter().all(|&v| v == 0.0));
    let expected = 2f64.ln() + SIGMA_FLOOR;
    assert!(g.value(d.sigma).data().iter().all(|&v| (v - expected).abs() < 1e-15));
}

#[test]
fn zero_sigma_draws_collapse_to_the_mean() {
    let mut tape = Tape::new();
    let f = field(&mut tape, &[0.25, -3.0, 7.5], &[0.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in reparameterized_samples(&mut tape, &f, 8, &mut rng).unwrap() {
        assert_eq!(tape.value(s).to_f64_vec(), vec![0.25, -3.0, 7.5]);
    }
}

#[test]
fn sample_moments_concentrate_on_the_field() {
    let mu = [0.0, 1.5, -2.0, 10.0];
    let sigma = [1.0, 0.1, 3.0, 0.5];
    let mut tape = Tape::new();
    let f = field(&mut tape, &mu, &sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let samples = reparameterized_samples(&mut tape, &f, n, &mut rng).unwrap();
    for p in 0..mu.len() {
        let xs: Vec<f64> = samples.iter().map(|s| tape.value(*s).data()[p]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - mu[p]).abs() < 4.0 * sigma[p] / (n as f64).sqrt(), "pixel {p}: mean {mean}");
        assert!((var / (sigma[p] * sigma[p]) - 1.0).abs() < 0.1, "pixel {p}: var {var}");
    }
}

#[test]
fn fewer_than_two_samples_is_an_error() {
    let mut tape = Tape::new();
    let f = field(&mut tape, &[0.0], &[1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(matches!(reparameterized_samples(&mut tape, &f, 1, &mut rng), Err(Error::Config(_))));
    let one = tape.constant(t(&[1, 1, 1], &[0.0]));
    assert!(uncertainty_map(&mut tape, &[one]).is_err());
}

#[test]
fn identical_samples_give_zero_uncertainty() {
    let mut tape = Tape::new();
    let s = t(&[1, 2, 3], &[0.1, 0.7, -0.3, 2.0, 5.0, 1.0]);
    let samples: Vec<_> = (0..4).map(|_| tape.constant(s.clone())).collect();
    let u = uncertainty_map(&mut tape, &samples).unwrap();
    assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
}

#[test]
fn the_most_variable_pixel_maps_to_one() {
    let mut tape = Tape::new();
    let r = 2f64.sqrt();
    let a = tape.constant(t(&[1, 2, 2], &[0.0; 4]));
    let b = tape.constant(t(&[1, 2, 2], &[r, r, 2.0 * r, r]));
    let u = uncertainty_map(&mut tape, &[a, b]).unwrap();
    assert_eq!(tape.value(u).to_f64_vec(), vec![0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn aggregation_reduces_to_the_branch_sum_and_to_zero() {
    let mut tape = Tape::new();
    let fl = t(&[3, 2, 2], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
    let fg = t(&[3, 2, 2], &(0..12).map(|i| (i as f64 * 1.3).cos() * 2.0).collect::<Vec<_>>());
    let (l, gv) = (tape.constant(fl.clone()), tape.constant(fg.clone()));
    let zero = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let one = tape.constant(Tensor::ones(&[1, 2, 2]));
    let out = aggregate(&mut tape, l, gv, zero, zero).unwrap();
    let sum: Vec<f64> = fl.data().iter().zip(fg.data()).map(|(a, b)| b + a).collect();
    assert_eq!(tape.value(out).to_f64_vec(), sum);
    let out = aggregate(&mut tape, l, gv, one, one).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn aggregation_scalar_case() {
    let mut tape = Tape::new();
    let mut c = |v: f64| tape.constant(t(&[1, 1, 1], &[v]));
    let (fl, fg, ul, ug) = (c(2.0), c(4.0), c(0.5), c(0.25));
    let out = aggregate(&mut tape, fl, fg, ul, ug).unwrap();
    assert_eq!(tape.value(out).item(), 4.0);
}

#[test]
fn aggregation_rejects_mismatched_branches() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[3, 2, 2]));
    let u = tape.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(aggregate(&mut tape, a, b, u, u), Err(Error::Dimension { .. })));
}

#[test]
fn zero_segmentation_head_is_undecided_at_full_size() {
    let mut store = ParamStore::<f32>::new();
    let head = Init::new(&mut store, 4).conv_zeroed("seg", 1, 64, 1);
    let mut g = Graph::new(&store, false, 0);
    let f = g.constant(Tensor::ones(&[64, 128, 128]));
    let logits = segmentation_head(&mut g, f, &head, (512, 512)).unwrap();
    assert_eq!(g.shape(logits), &[1, 512, 512]);
    let p = g.sigmoid(logits);
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    let bad = segmentation_head(&mut g, f, &head, (500, 512));
    assert!(matches!(bad, Err(Error::Dimension { .. })));
}

fn uncertainty_of(samples: &[Vec<f64>], shift: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = samples
        .iter()
        .map(|s| {
            let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
            tape.constant(t(&[1, 1, s.len()], &shifted))
        })
        .collect();
    let u = uncertainty_map(&mut tape, &vars).unwrap();
    tape.value(u).to_f64_vec()
}

proptest! {
    #[test]
    fn sigma_is_positive_for_any_finite_feature(vals in prop::collection::vec(-1e3f64..1e3, 8), seed in 0u64..100) {
        let mut store = ParamStore::<f64>::new();
        let head = GaussianHead::new(&mut Init::new(&mut store, seed), "h", 2);
        let mut g = Graph::new(&store, false, 0);
        let f = g.constant(t(&[2, 2, 2], &vals));
        let d = predict_distribution(&mut g, f, &head).unwrap();
        prop_assert!(g.value(d.sigma).data().iter().all(|&s| s > 0.0 && s.is_finite()));
    }

    #[test]
    fn uncertainty_is_bounded_and_shift_invariant(
        samples in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..6),
        shift in -3.0f64..3.0,
    ) {
        let base = uncertainty_of(&samples, 0.0);
        prop_assert!(base.iter().all(|&u| (0.0..=1.0).contains(&u)));
        let moved = uncertainty_of(&samples, shift);
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_seeds_draw_identical_samples(seed in 0u64..1000) {
        let draw = || {
            let mut tape = Tape::new();
            let f = field(&mut tape, &[0.5, -1.0, 2.0], &[1.0, 0.3, 2.0]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = reparameterized_samples(&mut tape, &f, 4, &mut rng).unwrap();
            let u = uncertainty_map(&mut tape, &s).unwrap();
            let mut out: Vec<f64> = s.iter().flat_map(|v| tape.value(*v).to_f64_vec()).collect();
            out.extend(tape.value(u).to_f64_vec());
            out
        };
        prop_assert_eq!(draw(), draw());
    }
}
