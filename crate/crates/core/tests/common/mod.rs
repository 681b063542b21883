//! Shared gradient-check cases for the loss and acceptance suites.
#![allow(dead_code)]

use bssgan::losses::{self, SubBatches, SupervisedForm};
use bssgan_tensor::{Mode, Tape, Tensor, Var};
use bssgan_testkit::gradcheck::{check, Build};
use bssgan_testkit::SplitMix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const TOLERANCE: f64 = 1e-3;

pub type Make = Box<dyn Fn(&mut SplitMix) -> Vec<Tensor<f64>>>;

pub struct Case {
    pub name: &'static str,
    pub make: Make,
    pub build: Box<Build<'static>>,
}

fn case(
    name: &'static str,
    make: impl Fn(&mut SplitMix) -> Vec<Tensor<f64>> + 'static,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static,
) -> Case {
    Case { name, make: Box::new(make), build: Box::new(build) }
}

pub fn uniform(shape: &[usize], r: &mut SplitMix, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, r.vec(n, lo, hi)).unwrap()
}

fn away(shape: &[usize], r: &mut SplitMix) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.away_from_zero(0.05, 1.0)).collect()).unwrap()
}

/// Worst relative error of `c` over `INSTANCES` random inputs.
pub fn worst_error(c: &Case) -> f64 {
    (0..INSTANCES)
        .map(|i| {
            let mut r = SplitMix::new(5000 + i);
            let inputs = (c.make)(&mut r);
            check(&inputs, &*c.build, i)
        })
        .fold(0.0, f64::max)
}

fn logits(rows: usize, cols: usize) -> impl Fn(&mut SplitMix) -> Vec<Tensor<f64>> {
    move |r| vec![uniform(&[rows, cols], r, -2.0, 2.0)]
}

fn probs(t: &mut Tape<f64>, logits: Var) -> Var {
    t.softmax(logits)
}

/// Every training objective, fed softmax probabilities so inputs stay on
/// the simplex.
pub fn loss_cases() -> Vec<Case> {
    const LABELS: [usize; 4] = [0, 1, 1, 0];
    let sub = SubBatches { n_l: 4, n_ul: 2, n_g: 3 };
    vec![
        case("d_unsupervised", |r| vec![uniform(&[4, 3], r, -2.0, 2.0), uniform(&[3, 3], r, -2.0, 2.0)], |t, v| {
            let (a, b) = (probs(t, v[0]), probs(t, v[1]));
            losses::d_unsupervised(t, a, b).unwrap().total
        }),
        case("d_supervised(conditional)", logits(4, 3), |t, v| {
            let p = probs(t, v[0]);
            losses::d_supervised(t, p, &LABELS, SupervisedForm::Conditional).unwrap().total
        }),
        case("d_supervised(unconditioned)", logits(4, 3), |t, v| {
            let p = probs(t, v[0]);
            losses::d_supervised(t, p, &LABELS, SupervisedForm::Unconditioned).unwrap().total
        }),
        case("d_total", logits(9, 3), move |t, v| {
            let p = probs(t, v[0]);
            losses::d_total(t, p, &LABELS, sub, SupervisedForm::Conditional).unwrap().total
        }),
        case("g_heuristic", logits(3, 4), |t, v| {
            let p = probs(t, v[0]);
            losses::g_heuristic(t, p).unwrap().total
        }),
        case("g_feature_matching", |r| vec![uniform(&[5, 6], r, -1.0, 1.0), uniform(&[3, 6], r, -1.0, 1.0)], |t, v| {
            losses::g_feature_matching(t, v[0], v[1]).unwrap().total
        }),
        case(
            "g_total",
            |r| vec![uniform(&[3, 3], r, -2.0, 2.0), uniform(&[4, 5], r, -1.0, 1.0), uniform(&[3, 5], r, 0.0, 1.0)],
            |t, v| {
                let p = probs(t, v[0]);
                losses::g_total(t, p, v[1], v[2]).unwrap().total
            },
        ),
        case("ordinary_gan(d)", |r| vec![uniform(&[3, 2], r, -2.0, 2.0), uniform(&[3, 2], r, -2.0, 2.0)], |t, v| {
            let (a, b) = (probs(t, v[0]), probs(t, v[1]));
            losses::ordinary_gan_losses(t, a, b).unwrap().0.total
        }),
        case("ordinary_gan(g)", |r| vec![uniform(&[3, 2], r, -2.0, 2.0), uniform(&[3, 2], r, -2.0, 2.0)], |t, v| {
            let (a, b) = (probs(t, v[0]), probs(t, v[1]));
            losses::ordinary_gan_losses(t, a, b).unwrap().1.total
        }),
        case("balanced_cross_entropy", logits(4, 2), |t, v| {
            let p = probs(t, v[0]);
            losses::balanced_cross_entropy(t, p, &LABELS, &[1.2, 17.0]).unwrap().total
        }),
        case("focal(gamma=2)", logits(4, 2), |t, v| {
            let p = probs(t, v[0]);
            losses::focal_loss(t, p, &LABELS, &[1.2, 17.0], 2.0).unwrap().total
        }),
        case("focal(gamma=0.5)", logits(4, 3), |t, v| {
            let p = probs(t, v[0]);
            losses::focal_loss(t, p, &LABELS, &[1.0, 2.0, 3.0], 0.5).unwrap().total
        }),
    ]
}

/// Every differentiable tensor op used by the networks and losses.
pub fn op_cases() -> Vec<Case> {
    let s = [3usize, 4];
    let mut cases = Vec::new();
    for stride in [1usize, 2] {
        cases.push(case(
            if stride == 1 { "conv2d(stride 1)" } else { "conv2d(stride 2)" },
            |r| vec![uniform(&[2, 4, 5, 2], r, -1.0, 1.0), uniform(&[3, 3, 2, 3], r, -1.0, 1.0), uniform(&[3], r, -1.0, 1.0)],
            move |t, v| t.conv2d(v[0], v[1], v[2], stride).unwrap(),
        ));
        cases.push(case(
            if stride == 1 { "conv_transpose2d(stride 1)" } else { "conv_transpose2d(stride 2)" },
            |r| vec![uniform(&[2, 3, 3, 2], r, -1.0, 1.0), uniform(&[3, 3, 3, 2], r, -1.0, 1.0), uniform(&[3], r, -1.0, 1.0)],
            move |t, v| t.conv_transpose2d(v[0], v[1], v[2], stride).unwrap(),
        ));
    }
    cases.extend([
        case("dense", |r| vec![uniform(&[3, 5], r, -1.0, 1.0), uniform(&[5, 2], r, -1.0, 1.0), uniform(&[2], r, -1.0, 1.0)], |t, v| {
            t.dense(v[0], v[1], v[2]).unwrap()
        }),
        case(
            "batch_norm(train)",
            |r| vec![uniform(&[3, 2, 2, 2], r, -2.0, 2.0), uniform(&[2], r, 0.5, 1.5), uniform(&[2], r, -0.5, 0.5)],
            |t, v| t.batch_norm(v[0], v[1], v[2], Mode::Train, None).unwrap().0,
        ),
        case(
            "batch_norm(infer)",
            |r| vec![uniform(&[4, 2], r, -2.0, 2.0), uniform(&[2], r, 0.5, 1.5), uniform(&[2], r, -0.5, 0.5)],
            |t, v| t.batch_norm(v[0], v[1], v[2], Mode::Infer, Some((&[0.1, -0.2], &[0.5, 2.0]))).unwrap().0,
        ),
        case("dropout", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            t.dropout(v[0], 0.25, Mode::Train, &mut rng).unwrap()
        }),
        case("leaky_relu", move |r| vec![away(&s, r)], |t, v| t.leaky_relu(v[0], 0.2)),
        case("relu", move |r| vec![away(&s, r)], |t, v| t.relu(v[0])),
        case("tanh", move |r| vec![uniform(&s, r, -2.0, 2.0)], |t, v| t.tanh(v[0])),
        case("softmax", move |r| vec![uniform(&s, r, -3.0, 3.0)], |t, v| t.softmax(v[0])),
        case("flatten+reshape", |r| vec![uniform(&[2, 2, 3], r, -1.0, 1.0)], |t, v| {
            let f = t.flatten(v[0]).unwrap();
            t.reshape(f, &[3, 4]).unwrap()
        }),
        case("concat_rows", |r| vec![uniform(&[2, 3], r, -1.0, 1.0), uniform(&[1, 3], r, -1.0, 1.0)], |t, v| {
            t.concat_rows(&[v[0], v[1]]).unwrap()
        }),
        case("slice_rows", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.slice_rows(v[0], 1, 2).unwrap()),
        case("column", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.column(v[0], 3).unwrap()),
        case("gather", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.gather(v[0], &[3, 0, 0]).unwrap()),
        case("affine", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.affine(v[0], -1.0, 1.0)),
        case("neg", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.neg(v[0])),
        case("ln", move |r| vec![uniform(&s, r, 0.05, 2.0)], |t, v| t.ln(v[0])),
        case("powf", move |r| vec![uniform(&s, r, 0.1, 1.0)], |t, v| t.powf(v[0], 2.5)),
        case("square", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.square(v[0])),
        case("add", move |r| vec![uniform(&s, r, -1.0, 1.0), uniform(&s, r, -1.0, 1.0)], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", move |r| vec![uniform(&s, r, -1.0, 1.0), uniform(&s, r, -1.0, 1.0)], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", move |r| vec![uniform(&s, r, -1.0, 1.0), uniform(&s, r, -1.0, 1.0)], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("div", move |r| vec![uniform(&s, r, -1.0, 1.0), uniform(&s, r, 0.3, 1.0)], |t, v| t.div(v[0], v[1]).unwrap()),
        case("sum", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.sum(v[0])),
        case("mean", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.mean(v[0])),
        case("mean_rows", move |r| vec![uniform(&s, r, -1.0, 1.0)], |t, v| t.mean_rows(v[0]).unwrap()),
    ]);
    cases
}
