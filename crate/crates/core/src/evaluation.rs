//! Confusion matrices, imbalance-aware rates, F-beta scores and report
//! files.
//!
//! Rates with a zero denominator are `None` (written as `null`), never 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{config_err, Error, Result};

/// Betas written to `fbeta_sweep.csv` when none are requested.
pub const DEFAULT_SWEEP: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

/// `K x K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return config_err(format!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return config_err(format!("label pair ({t}, {p}) outside 0..{k}"));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return config_err("confusion matrix must be square and non-empty");
        }
        Ok(ConfusionMatrix { counts })
    }

    /// Binary matrix with class 0 negative and class 1 positive.
    pub fn binary(tp: u64, fn_: u64, tn: u64, fp: u64) -> Self {
        ConfusionMatrix { counts: vec![vec![tn, fp], vec![fn_, tp]] }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }

    /// Row-normalized matrix; rows with no support stay all-zero and are
    /// flagged `false` in the second vector.
    pub fn normalized(&self) -> (Vec<Vec<f64>>, Vec<bool>) {
        let sums = self.row_sums();
        let rows = self
            .counts
            .iter()
            .zip(&sums)
            .map(|(r, &s)| r.iter().map(|&v| if s > 0 { v as f64 / s as f64 } else { 0.0 }).collect())
            .collect();
        (rows, sums.iter().map(|&s| s > 0).collect())
    }
}

/// Diagonal over row sums.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    cm.row_sums().iter().enumerate().map(|(i, &s)| ratio(cm.counts[i][i], s)).collect()
}

/// Positive/negative rates of a one-vs-one reading: TPR is the recall of
/// `positive`, TNR the recall of `negative`. On a binary matrix this is
/// exactly `TP / (TP + FN)` and `TN / (TN + FP)`.
pub fn tpr_tnr(cm: &ConfusionMatrix, positive: usize, negative: usize) -> Result<(Option<f64>, Option<f64>)> {
    if positive >= cm.k() || negative >= cm.k() || positive == negative {
        return config_err(format!("invalid positive/negative classes ({positive}, {negative}) for K = {}", cm.k()));
    }
    let r = per_class_recall(cm);
    Ok((r[positive], r[negative]))
}

/// Precision and recall of the `positive` class.
pub fn precision_recall(cm: &ConfusionMatrix, positive: usize) -> Result<(Option<f64>, Option<f64>)> {
    if positive >= cm.k() {
        return config_err(format!("positive class {positive} out of range"));
    }
    let tp = cm.counts[positive][positive];
    Ok((ratio(tp, cm.column_sum(positive)), ratio(tp, cm.row_sums()[positive])))
}

/// `(1 + b^2) P R / (b^2 P + R)`, defined as 0 when `P = R = 0`.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return config_err(format!("beta must be positive, got {beta}"));
    }
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    Ok(if den == 0.0 { 0.0 } else { (1.0 + b2) * precision * recall / den })
}

/// F-beta of the positive class for each beta; `None` when precision or
/// recall is undefined.
pub fn f_beta_sweep(cm: &ConfusionMatrix, positive: usize, betas: &[f64]) -> Result<Vec<(f64, Option<f64>)>> {
    let (p, r) = precision_recall(cm, positive)?;
    betas
        .iter()
        .map(|&b| {
            let v = match (p, r) {
                (Some(p), Some(r)) => Some(f_beta(p, r, b)?),
                _ => {
                    f_beta(0.0, 0.0, b)?;
                    None
                }
            };
            Ok((b, v))
        })
        .collect()
}

/// Key used for a beta in reports: `2` for 2.0, `0.5` for 0.5.
pub fn beta_key(beta: f64) -> String {
    format!("{beta}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pipeline: String,
    pub checkpoint: String,
    pub class_names: Vec<String>,
    pub positive_class: usize,
    pub negative_class: usize,
    pub accuracy: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
    pub f: BTreeMap<String, Option<f64>>,
    pub cm: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// Summarize `cm`; positive is the damaged (minority) class, negative
    /// the undamaged (majority) class.
    pub fn from_confusion(
        pipeline: &str,
        checkpoint: &str,
        class_names: &[String],
        cm: &ConfusionMatrix,
        positive: usize,
        negative: usize,
        betas: &[f64],
    ) -> Result<Self> {
        let (tpr, tnr) = tpr_tnr(cm, positive, negative)?;
        let (precision, recall) = precision_recall(cm, positive)?;
        let f = f_beta_sweep(cm, positive, betas)?.into_iter().map(|(b, v)| (beta_key(b), v)).collect();
        Ok(MetricsReport {
            pipeline: pipeline.to_string(),
            checkpoint: checkpoint.to_string(),
            class_names: class_names.to_vec(),
            positive_class: positive,
            negative_class: negative,
            accuracy: cm.accuracy(),
            tpr,
            tnr,
            precision,
            recall,
            per_class_recall: per_class_recall(cm),
            f,
            cm: cm.counts.clone(),
        })
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix { counts: self.cm.clone() }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

fn write(path: &Path, text: String) -> Result<PathBuf> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Write `metrics.json`, `metrics.csv`, `cm.csv` (row-normalized),
/// `cm_counts.csv` and `fbeta_sweep.csv` into `out`.
pub fn emit_report(report: &MetricsReport, sweep_betas: &[f64], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = vec![write(&out.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?];

    let mut csv = String::from("pipeline,checkpoint,accuracy,tpr,tnr,precision,recall");
    for k in report.f.keys() {
        write!(csv, ",f{k}").unwrap();
    }
    for name in &report.class_names {
        write!(csv, ",recall_{name}").unwrap();
    }
    write!(
        csv,
        "\n{},{},{},{},{},{},{}",
        report.pipeline,
        report.checkpoint,
        opt(report.accuracy),
        opt(report.tpr),
        opt(report.tnr),
        opt(report.precision),
        opt(report.recall)
    )
    .unwrap();
    for v in report.f.values().chain(&report.per_class_recall) {
        write!(csv, ",{}", opt(*v)).unwrap();
    }
    csv.push('\n');
    files.push(write(&out.join("metrics.csv"), csv)?);

    let cm = report.confusion();
    let (norm, _) = cm.normalized();
    let header = format!("true\\pred,{}\n", report.class_names.join(","));
    let mut text = header.clone();
    for (name, row) in report.class_names.iter().zip(&norm) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(text, "{name},{}", cells.join(",")).unwrap();
    }
    files.push(write(&out.join("cm.csv"), text)?);
    let mut text = header;
    for (name, row) in report.class_names.iter().zip(&cm.counts) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(text, "{name},{}", cells.join(",")).unwrap();
    }
    files.push(write(&out.join("cm_counts.csv"), text)?);

    let mut text = String::from("beta,f_beta\n");
    for (b, v) in f_beta_sweep(&cm, report.positive_class, sweep_betas)? {
        writeln!(text, "{b},{}", opt(v)).unwrap();
    }
    files.push(write(&out.join("fbeta_sweep.csv"), text)?);
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Tile `tiles x tiles` images of size `S` into one PNG of side `tiles * S`.
/// Missing tiles are left black.
pub fn write_sample_grid(path: &Path, images: &[f32], size: usize, tiles: usize) -> Result<()> {
    let per = size * size * 3;
    let side = tiles * size;
    let mut buf = vec![0u8; side * side * 3];
    for (t, img) in images.chunks_exact(per).take(tiles * tiles).enumerate() {
        let (ty, tx) = (t / tiles, t % tiles);
        for y in 0..size {
            for x in 0..size {
                for ch in 0..3 {
                    let dst = ((ty * size + y) * side + tx * size + x) * 3 + ch;
                    buf[dst] = data::unit_to_byte(img[(y * size + x) * 3 + ch]);
                }
            }
        }
    }
    data::write_rgb(path, buf, side as u32, side as u32)
}
