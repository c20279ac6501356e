use proptest::prelude::*;
use uaglnet::autodiff::gradcheck::{check, finite_difference_gradient, max_relative_error, readout};
use uaglnet::{Error, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn delta_kernel(c: usize) -> Tensor<f64> {
    let mut w = Tensor::zeros(&[c, c, 3, 3]);
    for i in 0..c {
        w.set(&[i, i, 1, 1], 1.0);
    }
    w
}

/// Nested-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.get(&[c, iy as usize, ix as usize]) * w.get(&[o, c, ky, kx]);
                            }
                        }
                    }
                }
                out.set(&[o, y, xx], s);
            }
        }
    }
    out
}

#[test]
fn conv_ones_kernel_counts_neighbours() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.get(&[0, 1, 1]), 9.0);
    assert_eq!(v.get(&[0, 0, 0]), 4.0);
    assert_eq!(v.get(&[0, 3, 3]), 4.0);
    assert_eq!(v.get(&[0, 0, 1]), 6.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let x = t(&[2, 5, 6], &(0..60).map(|i| ((i * 37 % 11) as f64) - 5.0).collect::<Vec<_>>());
    let w = t(&[3, 2, 3, 3], &(0..54).map(|i| ((i * 13 % 7) as f64) / 7.0 - 0.4).collect::<Vec<_>>());
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        close(tape.value(y).data(), naive_conv(&x, &w, stride, pad).data(), 1e-12);
    }
}

#[test]
fn stem_conv_shape() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3, 512, 512]));
    let w = tape.constant(Tensor::zeros(&[64, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[64, 256, 256]);
}

#[test]
fn conv_rejects_channel_mismatch_naming_axis() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
    assert!(err.to_string().contains("channel"), "{err}");
}

#[test]
fn depthwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.depthwise_conv2d(x, w, None, 1).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![10.0; 4]);

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[16, 8, 8]));
    let w = tape.constant(Tensor::ones(&[16, 1, 9, 9]));
    let y = tape.depthwise_conv2d(x, w, None, 4).unwrap();
    assert_eq!(tape.shape(y), &[16, 8, 8]);

    let mut tape = Tape::<f64>::new();
    let xv = t(&[2, 3, 3], &(0..18).map(f64::from).collect::<Vec<_>>());
    let mut d = Tensor::zeros(&[2, 1, 5, 5]);
    d.set(&[0, 0, 2, 2], 1.0);
    d.set(&[1, 0, 2, 2], 1.0);
    let (x, w) = (tape.constant(xv.clone()), tape.constant(d));
    let y = tape.depthwise_conv2d(x, w, None, 2).unwrap();
    assert_eq!(tape.value(y), &xv);
}

#[test]
fn depthwise_even_kernel_is_a_config_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
    assert!(matches!(tape.depthwise_conv2d(x, w, None, 1), Err(Error::Config(_))));
}

#[test]
fn pointwise_matches_per_pixel_matmul() {
    let x = t(&[3, 2, 2], &(0..12).map(|i| f64::from(i) * 0.5 - 2.0).collect::<Vec<_>>());
    let wv: Vec<f64> = (0..15).map(|i| f64::from((i * 7) % 5) - 2.0).collect();
    let mut tape = Tape::<f64>::new();
    let (xv, w) = (tape.constant(x.clone()), tape.constant(t(&[5, 3, 1, 1], &wv)));
    let y = tape.pointwise_conv2d(xv, w, None).unwrap();
    for o in 0..5 {
        for p in 0..4 {
            let want: f64 = (0..3).map(|c| wv[o * 3 + c] * x.data()[c * 4 + p]).sum();
            assert_eq!(tape.value(y).data()[o * 4 + p], want);
        }
    }

    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 10.0, 20.0]));
    let w = tape.constant(t(&[1, 2, 1, 1], &[1.0, 1.0]));
    let y = tape.pointwise_conv2d(xv, w, None).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![11.0, 22.0]);

    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::<f64>::zeros(&[2, 1, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 1, 1]));
    assert!(tape.pointwise_conv2d(xv, w, None).is_err());
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 3], &[1.0, -2.0, 0.5]));
    let w = tape.constant(t(&[3, 1], &[4.0, 1.0, 2.0]));
    let b = tape.constant(t(&[1], &[0.25]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![1.0 * 4.0 - 2.0 + 1.0 + 0.25]);

    let mut eye = Tensor::zeros(&[3, 3]);
    (0..3).for_each(|i| eye.set(&[i, i], 1.0));
    let xv = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut tape = Tape::<f64>::new();
    let (x, w, b) = (tape.constant(xv.clone()), tape.constant(eye), tape.constant(Tensor::zeros(&[3])));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &xv);

    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[7, 256]));
    let w = tape.constant(Tensor::zeros(&[256, 256]));
    let y = tape.linear(x, w, None).unwrap();
    assert_eq!(tape.shape(y), &[7, 256]);
    let bad = tape.constant(Tensor::zeros(&[255, 256]));
    assert!(tape.linear(x, bad, None).is_err());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let y = tape.softmax(x, 1).unwrap();
    close(&tape.value(y).to_f64_vec(), &[0.25, 0.75], 1e-15);
    let u = tape.constant(Tensor::full(&[1, 4], 2.5));
    let y = tape.softmax(u, 1).unwrap();
    close(&tape.value(y).to_f64_vec(), &[0.25; 4], 1e-15);
    let big = tape.constant(t(&[1, 3], &[1000.0, 1001.0, 999.0]));
    let y = tape.softmax(big, 1).unwrap();
    assert!(tape.value(y).all_finite());
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    close(&tape.value(y).to_f64_vec(), &[-1.0, 1.0], 1e-9);
    let c = tape.constant(Tensor::full(&[3, 4], 7.0));
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_moments_over_many_draws() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (n, c) = (10_000, 8);
    let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..5.0)).collect();
    let gain: Vec<f64> = (0..c).map(|i| 0.5 + i as f64 * 0.25).collect();
    let shift: Vec<f64> = (0..c).map(|i| i as f64 - 3.0).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[n, c], &data));
    let (g, b) = (tape.constant(t(&[c], &gain)), tape.constant(t(&[c], &shift)));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y).data();
    for row in 0..n {
        let z: Vec<f64> = (0..c).map(|j| (v[row * c + j] - shift[j]) / gain[j]).collect();
        let mean = z.iter().sum::<f64>() / c as f64;
        let var = z.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-4);
    }
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
    let y = tape.bilinear_upsample(x, 2).unwrap();
    let v = tape.value(y).to_f64_vec();
    close(&v[..4], &[0.0, 0.25, 0.75, 1.0], 1e-15);
    let c = tape.constant(Tensor::full(&[2, 3, 3], 5.0));
    let y = tape.bilinear_upsample(c, 4).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    let one = tape.constant(t(&[1, 1, 1], &[-2.0]));
    let y = tape.bilinear_upsample(one, 2).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![-2.0; 4]);
    assert!(tape.bilinear_upsample(one, 0).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().to_f64_vec(), vec![1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.square(x);
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().to_f64_vec(), vec![2.0, 4.0]);
    assert!(matches!(tape.backward(s), Err(Error::Autodiff(_))));
    tape.zero_grad();
    tape.backward(s).unwrap();
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(tape.backward(x).is_err());
    let c = tape.constant(t(&[1], &[3.0]));
    let s = tape.sum(c);
    assert!(tape.backward(s).is_err());
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[1], &[3.0]));
    let a = tape.mul(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let s = tape.sum(b);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().to_f64_vec(), vec![7.0]);
}

#[test]
fn finite_difference_examples() {
    let x = t(&[3], &[0.5, -1.0, 2.0]);
    let g = finite_difference_gradient(|p| p.sum(), &x, 1e-5);
    close(&g.to_f64_vec(), &[1.0; 3], 1e-9);
    let g = finite_difference_gradient(|p| p.data()[0] * p.data()[0], &t(&[1], &[3.0]), 1e-5);
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn composite_pipeline_matches_finite_differences() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut draw = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    };
    let inputs = vec![draw(&[2, 4, 4]), draw(&[3, 2, 3, 3]), draw(&[3]), draw(&[3])];
    let err = check(&inputs, &[], |tape, v, _| {
        let c = tape.conv2d(v[0], v[1], None, 1, 1)?;
        let tok = tape.reshape(c, &[3, 16])?;
        let tok = tape.transpose(tok)?;
        let n = tape.layer_norm(tok, v[2], v[3], 1e-5)?;
        let s = tape.softmax(n, 1)?;
        readout(tape, s)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn relative_error_of_identical_gradients_is_zero() {
    let g = t(&[2], &[1.0, -3.0]);
    assert_eq!(max_relative_error(&g, &g), 0.0);
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[rows, cols], &data));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).to_f64_vec();
        for r in 0..rows {
            let s: f64 = v[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let shifted: Vec<f64> = data.iter().map(|d| d + shift).collect();
        let xs = tape.constant(t(&[rows, cols], &shifted));
        let ys = tape.softmax(xs, 1).unwrap();
        for (a, b) in v.iter().zip(tape.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_stays_within_input_bounds(
        c in 1usize..3, h in 1usize..6, w in 1usize..6,
        factor in prop::sample::select(vec![2usize, 4]),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = t(&[c, h, w], &(0..c * h * w).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>());
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let y = tape.bilinear_upsample(xv, factor).unwrap();
        prop_assert_eq!(tape.shape(y), &[c, factor * h, factor * w][..]);
        for ch in 0..c {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let n = factor * factor * h * w;
            for &v in &tape.value(y).data()[ch * n..(ch + 1) * n] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn delta_kernel_conv_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = t(&[c, h, w], &(0..c * h * w).map(|_| rng.random_range(-1e3..1e3)).collect::<Vec<_>>());
        let mut tape = Tape::<f64>::new();
        let (xv, k) = (tape.constant(x.clone()), tape.constant(delta_kernel(c)));
        let y = tape.conv2d(xv, k, None, 1, 1).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }
}

#[test]
fn depthwise_kernel_larger_than_map() {
    use uaglnet::nn::{Graph, Init, ParamStore};
    let mut store = ParamStore::<f64>::new();
    let dw = Init::new(&mut store, 0).depthwise("dw", 2, 7);
    let mut g = Graph::new(&store, false, 0);
    let x = g.constant(Tensor::full(&[2, 1, 2], 1.0));
    let y = dw.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 2]);
    assert!(g.value(y).all_finite());
}
