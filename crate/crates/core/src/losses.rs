//! Training objectives, built on the autodiff tape so every loss is
//! differentiable end to end.
//!
//! Probabilities come in as `(N, C)` rows. For the semi-supervised
//! discriminator the last column is the synthetic class; labels are
//! zero-based real-class indices. Every logarithm is `ln(max(p, 1e-12))` and
//! batch reductions are arithmetic means.

use bssgan_tensor::{Element, Tape, Tensor, Var};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sampling::BatchPlan;

/// How the supervised discriminator term treats the synthetic class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedForm {
    /// `-ln(p_y / (1 - p_synthetic))`: probability conditioned on the
    /// sample being real.
    #[default]
    Conditional,
    /// `-ln p_y` over the raw `K + 1` distribution.
    Unconditioned,
}

/// A scalar loss on the tape plus its named additive parts.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub total: Var,
    pub components: Vec<(&'static str, Var)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub scalar: f64,
    pub components: IndexMap<String, f64>,
}

impl LossTerm {
    fn single(name: &'static str, total: Var) -> Self {
        LossTerm { total, components: vec![(name, total)] }
    }

    pub fn value<T: Element>(&self, tape: &Tape<T>) -> LossValue {
        LossValue {
            scalar: tape.value(self.total).item().as_f64(),
            components: self
                .components
                .iter()
                .map(|(n, v)| (n.to_string(), tape.value(*v).item().as_f64()))
                .collect(),
        }
    }
}

impl LossValue {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

fn rows<T: Element>(tape: &Tape<T>, p: Var, what: &str) -> Result<(usize, usize)> {
    let s = tape.shape(p);
    if s.len() != 2 {
        return config_err(format!("{what}: expected (N, C) probabilities, got {s:?}"));
    }
    if s[0] == 0 {
        return config_err(format!("{what}: empty batch"));
    }
    Ok((s[0], s[1]))
}

/// `-mean ln(x)`.
fn neg_mean_ln<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let l = tape.ln(x);
    let m = tape.mean(l);
    tape.neg(m)
}

/// `-mean ln(1 - p_synth)` over rows of `p`.
fn neg_mean_ln_real<T: Element>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let (_, c) = rows(tape, p, "real-probability term")?;
    let synth = tape.column(p, c - 1)?;
    let real = tape.affine(synth, -1.0, 1.0);
    Ok(neg_mean_ln(tape, real))
}

/// `-mean ln(p_synth)` over rows of `p`.
fn neg_mean_ln_synth<T: Element>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let (_, c) = rows(tape, p, "synthetic-probability term")?;
    let synth = tape.column(p, c - 1)?;
    Ok(neg_mean_ln(tape, synth))
}

fn check_labels(labels: &[usize], k: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return config_err(format!("{} labels for {n} rows", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return config_err(format!("label {bad} outside real classes 0..{k}"));
    }
    Ok(())
}

/// Unsupervised discriminator loss: real rows should not look synthetic,
/// generated rows should.
pub fn d_unsupervised<T: Element>(tape: &mut Tape<T>, p_real: Var, p_gen: Var) -> Result<LossTerm> {
    let real = neg_mean_ln_real(tape, p_real)?;
    let gen = neg_mean_ln_synth(tape, p_gen)?;
    let total = tape.add(real, gen)?;
    Ok(LossTerm::single("unsupervised", total))
}

/// Supervised discriminator loss on labeled real rows.
pub fn d_supervised<T: Element>(tape: &mut Tape<T>, p_labeled: Var, labels: &[usize], form: SupervisedForm) -> Result<LossTerm> {
    let (n, c) = rows(tape, p_labeled, "d_supervised")?;
    check_labels(labels, c - 1, n)?;
    let py = tape.gather(p_labeled, labels)?;
    let ln_py = tape.ln(py);
    let ll = match form {
        SupervisedForm::Unconditioned => ln_py,
        SupervisedForm::Conditional => {
            let synth = tape.column(p_labeled, c - 1)?;
            let real = tape.affine(synth, -1.0, 1.0);
            let ln_real = tape.ln(real);
            tape.sub(ln_py, ln_real)?
        }
    };
    let m = tape.mean(ll);
    let total = tape.neg(m);
    Ok(LossTerm::single("supervised", total))
}

/// Row counts of the three discriminator sub-batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubBatches {
    pub n_l: usize,
    pub n_ul: usize,
    pub n_g: usize,
}

impl From<&BatchPlan> for SubBatches {
    fn from(p: &BatchPlan) -> Self {
        SubBatches { n_l: p.n_l, n_ul: p.n_ul, n_g: p.n_g }
    }
}

/// Full discriminator loss for one balanced batch.
///
/// `probs` holds `n_l` labeled rows, then `n_ul` unlabeled rows, then `n_g`
/// generated rows.
pub fn d_total<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[usize],
    plan: SubBatches,
    form: SupervisedForm,
) -> Result<LossTerm> {
    let (m, _) = rows(tape, probs, "d_total")?;
    let expected = plan.n_l + plan.n_ul + plan.n_g;
    if m != expected {
        return config_err(format!("discriminator scored {m} rows, batch plan has {expected}"));
    }
    let n_real = plan.n_l + plan.n_ul;
    let real = tape.slice_rows(probs, 0, n_real)?;
    let labeled = tape.slice_rows(probs, 0, plan.n_l)?;
    let gen = tape.slice_rows(probs, n_real, plan.n_g)?;
    let us = d_unsupervised(tape, real, gen)?.total;
    let s = d_supervised(tape, labeled, labels, form)?.total;
    let total = tape.add(us, s)?;
    Ok(LossTerm { total, components: vec![("unsupervised", us), ("supervised", s)] })
}

/// Heuristic generator loss `-mean ln(1 - p_synth(G(z)))`.
pub fn g_heuristic<T: Element>(tape: &mut Tape<T>, p_gen: Var) -> Result<LossTerm> {
    let total = neg_mean_ln_real(tape, p_gen)?;
    Ok(LossTerm::single("heuristic", total))
}

/// Squared L2 distance between mean real and mean generated features.
pub fn g_feature_matching<T: Element>(tape: &mut Tape<T>, f_real: Var, f_gen: Var) -> Result<LossTerm> {
    let (wr, wg) = (tape.shape(f_real).to_vec(), tape.shape(f_gen).to_vec());
    if wr.len() != 2 || wg.len() != 2 || wr[1] != wg[1] {
        return config_err(format!("feature widths differ: {wr:?} vs {wg:?}"));
    }
    let mr = tape.mean_rows(f_real)?;
    let mg = tape.mean_rows(f_gen)?;
    let d = tape.sub(mr, mg)?;
    let sq = tape.square(d);
    let total = tape.sum(sq);
    Ok(LossTerm::single("feature_matching", total))
}

pub fn g_total<T: Element>(tape: &mut Tape<T>, p_gen: Var, f_real: Var, f_gen: Var) -> Result<LossTerm> {
    let fm = g_feature_matching(tape, f_real, f_gen)?.total;
    let h = g_heuristic(tape, p_gen)?.total;
    let total = tape.add(fm, h)?;
    Ok(LossTerm { total, components: vec![("heuristic", h), ("feature_matching", fm)] })
}

/// Original two-player GAN losses for a 2-way discriminator whose column 0
/// is "real" and column 1 "synthetic". The generator uses the
/// non-saturating form `-mean ln D(G(z))`.
pub fn ordinary_gan_losses<T: Element>(tape: &mut Tape<T>, d_real: Var, d_gen: Var) -> Result<(LossTerm, LossTerm)> {
    for p in [d_real, d_gen] {
        let (_, c) = rows(tape, p, "ordinary_gan_losses")?;
        if c != 2 {
            return config_err(format!("ordinary GAN discriminator must have 2 outputs, got {c}"));
        }
    }
    let real_of_real = tape.column(d_real, 0)?;
    let synth_of_gen = tape.column(d_gen, 1)?;
    let real_of_gen = tape.column(d_gen, 0)?;
    let a = neg_mean_ln(tape, real_of_real);
    let b = neg_mean_ln(tape, synth_of_gen);
    let d = tape.add(a, b)?;
    let g = neg_mean_ln(tape, real_of_gen);
    Ok((LossTerm::single("adversarial", d), LossTerm::single("adversarial", g)))
}

fn weighted_log_likelihood<T: Element>(
    tape: &mut Tape<T>,
    p: Var,
    labels: &[usize],
    alpha: &[f64],
) -> Result<(Var, Var)> {
    let (n, k) = rows(tape, p, "classification loss")?;
    check_labels(labels, k, n)?;
    if alpha.len() != k {
        return config_err(format!("{} class weights for {k} classes", alpha.len()));
    }
    if alpha.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
        return config_err("class weights must be positive");
    }
    let py = tape.gather(p, labels)?;
    let ln_py = tape.ln(py);
    let w: Vec<f64> = labels.iter().map(|&y| alpha[y]).collect();
    let w = tape.constant(Tensor::from_f64(&[n], &w)?);
    let weighted = tape.mul(ln_py, w)?;
    Ok((py, weighted))
}

/// `-mean alpha_y ln p_y`. With all weights 1 this is plain cross entropy.
pub fn balanced_cross_entropy<T: Element>(tape: &mut Tape<T>, p: Var, labels: &[usize], alpha: &[f64]) -> Result<LossTerm> {
    let (_, weighted) = weighted_log_likelihood(tape, p, labels, alpha)?;
    let total = neg_mean(tape, weighted);
    Ok(LossTerm::single("classification", total))
}

/// `-mean alpha_y (1 - p_y)^gamma ln p_y`.
pub fn focal_loss<T: Element>(tape: &mut Tape<T>, p: Var, labels: &[usize], alpha: &[f64], gamma: f64) -> Result<LossTerm> {
    if !(gamma >= 0.0) {
        return config_err(format!("focal gamma must be >= 0, got {gamma}"));
    }
    let (py, weighted) = weighted_log_likelihood(tape, p, labels, alpha)?;
    let miss = tape.affine(py, -1.0, 1.0);
    let focus = tape.powf(miss, gamma);
    let focused = tape.mul(weighted, focus)?;
    let total = neg_mean(tape, focused);
    Ok(LossTerm::single("classification", total))
}

fn neg_mean<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let m = tape.mean(x);
    tape.neg(m)
}

/// `alpha_i = N_total / count_i`.
pub fn reverse_frequency_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(i) = class_counts.iter().position(|&c| c == 0) {
        return config_err(format!("class {i} has no samples; cannot weight by reverse frequency"));
    }
    let total: usize = class_counts.iter().sum();
    Ok(class_counts.iter().map(|&c| total as f64 / c as f64).collect())
}
