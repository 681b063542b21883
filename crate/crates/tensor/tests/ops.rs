use bssgan_tensor::{Mode, Tape, Tensor};
use bssgan_testkit::SplitMix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut SplitMix) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng.vec(n, -1.0, 1.0)).unwrap()
}

#[test]
fn conv_stride_two_halves_spatial_dims() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 128, 128, 3]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 3, 32]));
    let b = tape.constant(Tensor::zeros(&[32]));
    let y = tape.conv2d(x, k, b, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 64, 64, 32]);
}

#[test]
fn conv_identity_kernel_on_single_pixel() {
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 1, 1, 1], &[0.7]));
    let k = tape.constant(t(&[3, 3, 1, 1], &kernel));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[0.7]);
}

#[test]
fn conv_all_ones_kernel_over_zero_padding() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
}

#[test]
fn conv_channel_mismatch_is_config_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 3]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 2, 8]));
    let b = tape.constant(Tensor::zeros(&[8]));
    assert!(matches!(tape.conv2d(x, k, b, 1), Err(bssgan_tensor::Error::Config(_))));
    let k3 = tape.constant(Tensor::zeros(&[3, 3, 3, 8]));
    assert!(tape.conv2d(x, k3, b, 3).is_err());
}

#[test]
fn transposed_conv_doubles_spatial_dims() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 32, 32, 128]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 64, 128]));
    let b = tape.constant(Tensor::zeros(&[64]));
    let y = tape.conv_transpose2d(x, k, b, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 64, 64, 64]);
    assert!(tape.conv_transpose2d(x, k, b, 3).is_err());
}

#[test]
fn transposed_conv_of_zeros_is_bias() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4, 5]));
    let k = tape.constant(Tensor::full(&[3, 3, 3, 5], 0.3));
    let b = tape.constant(t(&[3], &[0.1, -0.2, 0.5]));
    let y = tape.conv_transpose2d(x, k, b, 2).unwrap();
    for px in tape.value(y).data().chunks(3) {
        assert_eq!(px, &[0.1, -0.2, 0.5]);
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut rng = SplitMix::new(11);
    for stride in [1, 2] {
        for trial in 0..10 {
            let (cin, cout) = (1 + trial % 3, 1 + (trial / 3) % 3);
            let side = 4;
            let out_side = side / stride;
            let x = random(&[1, side, side, cin], &mut rng);
            let k = random(&[3, 3, cin, cout], &mut rng);
            let y = random(&[1, out_side, out_side, cout], &mut rng);
            let mut tape = Tape::<f64>::new();
            let (xv, kv, yv) = (tape.constant(x.clone()), tape.constant(k), tape.constant(y.clone()));
            let zero_out = tape.constant(Tensor::zeros(&[cout]));
            let zero_in = tape.constant(Tensor::zeros(&[cin]));
            let conv = tape.conv2d(xv, kv, zero_out, stride).unwrap();
            let deconv = tape.conv_transpose2d(yv, kv, zero_in, stride).unwrap();
            let lhs = tape.value(conv).dot(&y);
            let rhs = x.dot(tape.value(deconv));
            assert!((lhs - rhs).abs() < 1e-4, "stride {stride}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let mut rng = SplitMix::new(5);
    let data: Vec<f32> = (0..4 * 3 * 3 * 2).map(|_| rng.uniform(-3.0, 5.0) as f32).collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[4, 3, 3, 2], &data));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let (y, stats) = tape.batch_norm(x, g, b, Mode::Train, None).unwrap();
    assert!(stats.is_some());
    let out = tape.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = out.iter().skip(c).step_by(2).map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batch_norm_constant_channel_gives_beta() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[3, 2, 2, 1], 4.2));
    let g = tape.constant(Tensor::full(&[1], 2.0));
    let b = tape.constant(Tensor::full(&[1], 0.25));
    let (y, _) = tape.batch_norm(x, g, b, Mode::Train, None).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
}

#[test]
fn batch_norm_infer_requires_running_stats() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[2, 1], 3.0));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(tape.batch_norm(x, g, b, Mode::Infer, None).is_err());
    let (y, stats) = tape.batch_norm(x, g, b, Mode::Infer, Some((&[1.0], &[4.0]))).unwrap();
    assert!(stats.is_none());
    let expected = 2.0 / (4.0f64 + 1e-5).sqrt();
    assert!((tape.value(y).data()[0] as f64 - expected).abs() < 1e-6);
}

#[test]
fn dropout_rate_zero_and_infer_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 4.0]));
    let a = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    let b = tape.dropout(x, 0.25, Mode::Infer, &mut rng).unwrap();
    assert_eq!(tape.value(a), tape.value(x));
    assert_eq!(tape.value(b), tape.value(x));
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_keeps_three_quarters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::<f32>::new();
    let n = 1_000_000;
    let x = tape.constant(Tensor::ones(&[n]));
    let y = tape.dropout(x, 0.25, Mode::Train, &mut rng).unwrap();
    let out = tape.value(y).data();
    let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.75).abs() < 0.005, "kept {kept}");
    assert!(out.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6));
}

#[test]
fn activations() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let l = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
    let th = tape.tanh(x);
    assert_eq!(tape.value(th).data()[1], 0.0);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::zeros(&[1, 3]));
    let s = tape.softmax(z);
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn dense_hand_matmul() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2], &[3.0, 3.0]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 5.0]);
    let bad = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.dense(x, bad, b).is_err());
}

#[test]
fn dense_paper_width() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 65536]));
    let w = tape.constant(Tensor::zeros(&[65536, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[2, 3]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_inner_product() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param("w", t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.named()["w"].data(), &[2.0, 4.0]);
}

#[test]
fn unreachable_params_get_zero_and_second_backward_fails() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param("a", t(&[2], &[1.0, 1.0]));
    let _b = tape.param("b", t(&[3], &[1.0, 1.0, 1.0]));
    let loss = tape.sum(a);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.named()["b"].data(), &[0.0; 3]);
    assert!(matches!(tape.backward(loss), Err(bssgan_tensor::Error::Usage(_))));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let a = tape.variable(Tensor::ones(&[2]));
    assert!(tape.backward(a).is_err());
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::scalar(3.0));
    let a = tape.affine(x, 2.0, 0.0);
    let b = tape.affine(x, 5.0, 1.0);
    let s = tape.add(a, b).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 7.0);
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = SplitMix::new(3);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&[3, 8, 8, 2], &mut init).cast());
        let k = tape.param("k", random(&[3, 3, 2, 4], &mut init).cast());
        let b = tape.param("b", Tensor::zeros(&[4]));
        let y = tape.conv2d(x, k, b, 2).unwrap();
        let y = tape.leaky_relu(y, 0.2);
        let y = tape.dropout(y, 0.25, Mode::Train, &mut rng).unwrap();
        let loss = tape.mean(y);
        let value = tape.value(loss).item();
        let g = tape.backward(loss).unwrap().named();
        (value.to_bits(), g["k"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = SplitMix::new(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.uniform(-30.0, 30.0) as f32).collect();
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::new(&[rows, cols], data).unwrap());
            let s = tape.softmax(x);
            for row in tape.value(s).data().chunks(cols) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                let total: f64 = row.iter().map(|&p| p as f64).sum();
                prop_assert!((total - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn tanh_stays_in_range(v in -1e3f32..1e3) {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::scalar(v));
            let y = tape.tanh(x);
            let out = tape.value(y).item();
            prop_assert!((-1.0..=1.0).contains(&out));
        }
    }
}
