mod common;

use bssgan::losses::{self, SubBatches, SupervisedForm};
use bssgan_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;

#[test]
fn every_loss_matches_finite_differences() {
    for c in common::loss_cases() {
        let err = common::worst_error(&c);
        assert!(err < common::TOLERANCE, "{}: relative error {err:.3e}", c.name);
    }
}

/// Rows of random logits turned into probabilities with an independent
/// softmax.
fn prob_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    logits
        .chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

fn constant(t: &mut Tape<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    t.constant(Tensor::new(&[rows, cols], data).unwrap())
}

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn d_total_is_sum_of_parts(
        (n_l, n_ul, n_g) in (1usize..5, 0usize..4, 1usize..5),
        seed in any::<u64>(),
        conditional in any::<bool>(),
    ) {
        let m = n_l + n_ul + n_g;
        let mut r = bssgan_testkit::SplitMix::new(seed);
        let p = prob_rows(&r.vec(m * 3, -5.0, 5.0), 3);
        let labels: Vec<usize> = (0..n_l).map(|_| r.below(2)).collect();
        let form = if conditional { SupervisedForm::Conditional } else { SupervisedForm::Unconditioned };
        let mut t = Tape::new();
        let all = constant(&mut t, m, 3, p.clone());
        let total = losses::d_total(&mut t, all, &labels, SubBatches { n_l, n_ul, n_g }, form).unwrap().value(&t);
        let real = constant(&mut t, n_l + n_ul, 3, p[..(n_l + n_ul) * 3].to_vec());
        let gen = constant(&mut t, n_g, 3, p[(n_l + n_ul) * 3..].to_vec());
        let lab = constant(&mut t, n_l, 3, p[..n_l * 3].to_vec());
        let us = losses::d_unsupervised(&mut t, real, gen).unwrap().value(&t).scalar;
        let s = losses::d_supervised(&mut t, lab, &labels, form).unwrap().value(&t).scalar;
        prop_assert!((total.scalar - us - s).abs() < 1e-6);
        prop_assert!((total.component("unsupervised") - us).abs() < 1e-12);
        prop_assert!((total.component("supervised") - s).abs() < 1e-12);
        prop_assert!(total.scalar >= 0.0);
    }

    #[test]
    fn g_total_is_sum_of_parts(l in logits(3, 3), fr in logits(4, 5), fg in logits(3, 5)) {
        let mut t = Tape::new();
        let p = constant(&mut t, 3, 3, prob_rows(&l, 3));
        let a = constant(&mut t, 4, 5, fr);
        let b = constant(&mut t, 3, 5, fg);
        let total = losses::g_total(&mut t, p, a, b).unwrap().value(&t);
        let h = losses::g_heuristic(&mut t, p).unwrap().value(&t).scalar;
        let fm = losses::g_feature_matching(&mut t, a, b).unwrap().value(&t).scalar;
        prop_assert!((total.scalar - h - fm).abs() < 1e-6);
        let parts: f64 = total.components.values().sum();
        prop_assert!((total.scalar - parts).abs() < 1e-6);
        prop_assert!(fm >= 0.0 && h >= 0.0);
    }

    #[test]
    fn focal_without_focusing_is_balanced_ce(
        l in logits(6, 3),
        labels in prop::collection::vec(0usize..3, 6),
        alpha in prop::collection::vec(0.1f64..20.0, 3),
    ) {
        let mut t = Tape::new();
        let p = constant(&mut t, 6, 3, prob_rows(&l, 3));
        let f = losses::focal_loss(&mut t, p, &labels, &alpha, 0.0).unwrap().value(&t).scalar;
        let ce = losses::balanced_cross_entropy(&mut t, p, &labels, &alpha).unwrap().value(&t).scalar;
        prop_assert!((f - ce).abs() < 1e-6);
    }

    #[test]
    fn focusing_never_increases_the_loss(l in logits(5, 2), labels in prop::collection::vec(0usize..2, 5), gamma in 0.0f64..5.0) {
        let mut t = Tape::new();
        let p = constant(&mut t, 5, 2, prob_rows(&l, 2));
        let f = losses::focal_loss(&mut t, p, &labels, &[1.0, 1.0], gamma).unwrap().value(&t).scalar;
        let ce = losses::balanced_cross_entropy(&mut t, p, &labels, &[1.0, 1.0]).unwrap().value(&t).scalar;
        prop_assert!(f <= ce + 1e-12);
    }

    #[test]
    fn unit_weights_give_plain_cross_entropy(l in logits(4, 3), labels in prop::collection::vec(0usize..3, 4)) {
        let p = prob_rows(&l, 3);
        let oracle = -labels.iter().enumerate().map(|(i, &y)| p[i * 3 + y].ln()).sum::<f64>() / 4.0;
        let mut t = Tape::new();
        let pv = constant(&mut t, 4, 3, p);
        let ce = losses::balanced_cross_entropy(&mut t, pv, &labels, &[1.0; 3]).unwrap().value(&t).scalar;
        prop_assert!((ce - oracle).abs() < 1e-9);
    }

    #[test]
    fn conditional_supervised_never_exceeds_unconditioned(l in logits(4, 3), labels in prop::collection::vec(0usize..2, 4)) {
        // p_y / (1 - p_synth) >= p_y, so the conditional loss is smaller.
        let mut t = Tape::new();
        let p = constant(&mut t, 4, 3, prob_rows(&l, 3));
        let c = losses::d_supervised(&mut t, p, &labels, SupervisedForm::Conditional).unwrap().value(&t).scalar;
        let u = losses::d_supervised(&mut t, p, &labels, SupervisedForm::Unconditioned).unwrap().value(&t).scalar;
        prop_assert!(c <= u + 1e-12);
    }

    #[test]
    fn reverse_frequency_weights_invert_counts(counts in prop::collection::vec(1usize..5000, 2..5)) {
        let w = losses::reverse_frequency_weights(&counts).unwrap();
        let total: usize = counts.iter().sum();
        for (a, c) in w.iter().zip(&counts) {
            prop_assert!((a * *c as f64 - total as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn ordinary_gan_at_uniform_output() {
    let mut t = Tape::new();
    let p = constant(&mut t, 2, 2, vec![0.5; 4]);
    let (d, g) = losses::ordinary_gan_losses(&mut t, p, p).unwrap();
    assert!((d.value(&t).scalar - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
    assert!((g.value(&t).scalar - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn d_total_rejects_plan_mismatch() {
    let mut t = Tape::new();
    let p = constant(&mut t, 5, 3, vec![1.0 / 3.0; 15]);
    let sub = SubBatches { n_l: 2, n_ul: 2, n_g: 2 };
    assert!(losses::d_total(&mut t, p, &[0, 1], sub, SupervisedForm::Conditional).is_err());
}
