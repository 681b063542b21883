//! Finite-difference checks for every differentiable op, in f64.

use bssgan_tensor::{Mode, Tape, Tensor, Var};
use bssgan_testkit::gradcheck::{check, Build};
use bssgan_testkit::SplitMix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOLERANCE: f64 = 1e-3;

fn tensor(shape: &[usize], rng: &mut SplitMix, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng.vec(n, lo, hi)).unwrap()
}

fn away(shape: &[usize], rng: &mut SplitMix) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.away_from_zero(0.05, 1.0)).collect()).unwrap()
}

fn run(name: &str, make: impl Fn(&mut SplitMix) -> Vec<Tensor<f64>>, build: &Build<'_>) {
    for i in 0..INSTANCES {
        let mut rng = SplitMix::new(1000 + i);
        let inputs = make(&mut rng);
        let err = check(&inputs, build, i);
        assert!(err < TOLERANCE, "{name} instance {i}: relative error {err:.3e}");
    }
}

#[test]
fn conv2d() {
    for stride in [1, 2] {
        run(
            "conv2d",
            |r| {
                let (h, cin, cout) = (3 + r.below(3), 1 + r.below(3), 1 + r.below(3));
                vec![tensor(&[2, h, h + 1, cin], r, -1.0, 1.0), tensor(&[3, 3, cin, cout], r, -1.0, 1.0), tensor(&[cout], r, -1.0, 1.0)]
            },
            &|t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v[2], stride).unwrap(),
        );
    }
}

#[test]
fn conv_transpose2d() {
    for stride in [1, 2] {
        run(
            "conv_transpose2d",
            |r| {
                let (h, cin, cout) = (2 + r.below(3), 1 + r.below(3), 1 + r.below(3));
                vec![tensor(&[2, h, h, cin], r, -1.0, 1.0), tensor(&[3, 3, cout, cin], r, -1.0, 1.0), tensor(&[cout], r, -1.0, 1.0)]
            },
            &|t: &mut Tape<f64>, v: &[Var]| t.conv_transpose2d(v[0], v[1], v[2], stride).unwrap(),
        );
    }
}

#[test]
fn dense() {
    run(
        "dense",
        |r| {
            let (n, i, o) = (1 + r.below(4), 1 + r.below(6), 1 + r.below(4));
            vec![tensor(&[n, i], r, -1.0, 1.0), tensor(&[i, o], r, -1.0, 1.0), tensor(&[o], r, -1.0, 1.0)]
        },
        &|t: &mut Tape<f64>, v: &[Var]| t.dense(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn batch_norm_train() {
    run(
        "batch_norm(train)",
        |r| {
            let c = 1 + r.below(3);
            vec![tensor(&[3, 2, 2, c], r, -2.0, 2.0), tensor(&[c], r, 0.5, 1.5), tensor(&[c], r, -0.5, 0.5)]
        },
        &|t: &mut Tape<f64>, v: &[Var]| t.batch_norm(v[0], v[1], v[2], Mode::Train, None).unwrap().0,
    );
}

#[test]
fn batch_norm_infer() {
    run(
        "batch_norm(infer)",
        |r| vec![tensor(&[4, 3], r, -2.0, 2.0), tensor(&[3], r, 0.5, 1.5), tensor(&[3], r, -0.5, 0.5)],
        &|t: &mut Tape<f64>, v: &[Var]| {
            t.batch_norm(v[0], v[1], v[2], Mode::Infer, Some((&[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0]))).unwrap().0
        },
    );
}

#[test]
fn dropout_train() {
    run(
        "dropout",
        |r| vec![tensor(&[5, 4], r, -1.0, 1.0)],
        &|t: &mut Tape<f64>, v: &[Var]| {
            // Same stream on every evaluation, so the mask is fixed.
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            t.dropout(v[0], 0.25, Mode::Train, &mut rng).unwrap()
        },
    );
}

#[test]
fn activations() {
    let shape = [3, 5];
    run("leaky_relu", |r| vec![away(&shape, r)], &|t: &mut Tape<f64>, v: &[Var]| t.leaky_relu(v[0], 0.2));
    run("relu", |r| vec![away(&shape, r)], &|t: &mut Tape<f64>, v: &[Var]| t.relu(v[0]));
    run("tanh", |r| vec![tensor(&shape, r, -2.0, 2.0)], &|t: &mut Tape<f64>, v: &[Var]| t.tanh(v[0]));
    run("softmax", |r| vec![tensor(&shape, r, -3.0, 3.0)], &|t: &mut Tape<f64>, v: &[Var]| t.softmax(v[0]));
}

#[test]
fn structural() {
    run("reshape+flatten", |r| vec![tensor(&[2, 2, 3], r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| {
        let f = t.flatten(v[0]).unwrap();
        t.reshape(f, &[3, 4]).unwrap()
    });
    run(
        "concat_rows",
        |r| vec![tensor(&[2, 3], r, -1.0, 1.0), tensor(&[1, 3], r, -1.0, 1.0)],
        &|t: &mut Tape<f64>, v: &[Var]| t.concat_rows(&[v[0], v[1]]).unwrap(),
    );
    run("slice_rows", |r| vec![tensor(&[4, 3], r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.slice_rows(v[0], 1, 2).unwrap());
    run("column", |r| vec![tensor(&[4, 3], r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.column(v[0], 2).unwrap());
    run("gather", |r| vec![tensor(&[4, 3], r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.gather(v[0], &[0, 2, 1, 2]).unwrap());
}

#[test]
fn elementwise_and_reductions() {
    let s = [3, 4];
    run("affine", |r| vec![tensor(&s, r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.affine(v[0], -1.5, 1.0));
    run("ln", |r| vec![tensor(&s, r, 0.05, 2.0)], &|t: &mut Tape<f64>, v: &[Var]| t.ln(v[0]));
    run("powf", |r| vec![tensor(&s, r, 0.1, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.powf(v[0], 2.0));
    run("powf(0.5)", |r| vec![tensor(&s, r, 0.1, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.powf(v[0], 0.5));
    run("square", |r| vec![tensor(&s, r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.square(v[0]));
    let pair = |r: &mut SplitMix| vec![tensor(&s, r, -1.0, 1.0), away(&s, r)];
    run("add", pair, &|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1]).unwrap());
    run("sub", pair, &|t: &mut Tape<f64>, v: &[Var]| t.sub(v[0], v[1]).unwrap());
    run("mul", pair, &|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1]).unwrap());
    run("div", |r| vec![tensor(&s, r, -1.0, 1.0), tensor(&s, r, 0.3, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.div(v[0], v[1]).unwrap());
    run("sum", |r| vec![tensor(&s, r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]));
    run("mean", |r| vec![tensor(&s, r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.mean(v[0]));
    run("mean_rows", |r| vec![tensor(&s, r, -1.0, 1.0)], &|t: &mut Tape<f64>, v: &[Var]| t.mean_rows(v[0]).unwrap());
}

#[test]
fn ln_floor_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::new(&[2], vec![0.0, 0.5]).unwrap());
    let y = tape.ln(x);
    assert!((tape.value(y).data()[0] - 1e-12f64.ln()).abs() < 1e-9);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 2.0]);
}
