//! Experiment configuration, one JSON file per experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::SupervisedForm;
use crate::sampling::DaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "bsl")]
    Bsl,
    #[serde(rename = "bus")]
    Bus,
    #[serde(rename = "bos-da")]
    BosDa,
    #[serde(rename = "bos-gan")]
    BosGan,
    #[serde(rename = "bsl-sdf")]
    BslSdf,
    #[serde(rename = "bss-gan")]
    BssGan,
    #[serde(rename = "bsl-bce")]
    BslBce,
    #[serde(rename = "bsl-focal")]
    BslFocal,
}

impl Pipeline {
    pub const ALL: [Pipeline; 8] = [
        Pipeline::Bsl,
        Pipeline::Bus,
        Pipeline::BosDa,
        Pipeline::BosGan,
        Pipeline::BslSdf,
        Pipeline::BssGan,
        Pipeline::BslBce,
        Pipeline::BslFocal,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Pipeline::Bsl => "bsl",
            Pipeline::Bus => "bus",
            Pipeline::BosDa => "bos-da",
            Pipeline::BosGan => "bos-gan",
            Pipeline::BslSdf => "bsl-sdf",
            Pipeline::BssGan => "bss-gan",
            Pipeline::BslBce => "bsl-bce",
            Pipeline::BslFocal => "bsl-focal",
        }
    }

    /// Outputs of the deployed classifier for `k` real classes.
    pub fn classifier_outputs(self, k: usize) -> usize {
        if self == Pipeline::BssGan {
            k + 1
        } else {
            k
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL.into_iter().find(|p| p.id() == s).ok_or_else(|| {
            let ids: Vec<&str> = Pipeline::ALL.iter().map(|p| p.id()).collect();
            Error::Config(format!("unknown pipeline '{s}'; valid ids: {}", ids.join(", ")))
        })
    }
}

/// Model-selection rule. Both maximize recall of the smallest class subject
/// to recall of the largest class exceeding the threshold; for a binary
/// task these are TPR and TNR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectRule {
    Binary,
    Ternary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub k: usize,
    pub image_size: usize,
    pub n_l: usize,
    pub c: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Defaults to `binary` for two classes, `ternary` otherwise.
    pub select_rule: Option<SelectRule>,
    pub select_threshold: f64,
    pub select_on_test: bool,
    /// Fraction of labeled training data held out for model selection.
    pub validation_fraction: f64,
    pub dataset_root: PathBuf,
    pub labeled_fraction: f64,
    pub unlabeled_fraction: f64,
    pub da: DaConfig,
    pub focal_gamma: f64,
    pub supervised_form: SupervisedForm,
    /// Epochs for the ordinary GANs of bos-gan and bsl-sdf; defaults to
    /// `epochs`.
    pub gan_epochs: Option<usize>,
    pub eval_betas: Vec<f64>,
    /// Write `epoch_<n>/` checkpoint directories.
    pub save_checkpoints: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pipeline: Pipeline::BssGan,
            k: 2,
            image_size: 128,
            n_l: 60,
            c: 0.0,
            epochs: 300,
            lr: 2e-5,
            seed: 0,
            select_rule: None,
            select_threshold: 0.9,
            select_on_test: false,
            validation_fraction: 0.1,
            dataset_root: PathBuf::from("data"),
            labeled_fraction: 1.0,
            unlabeled_fraction: 1.0,
            da: DaConfig::default(),
            focal_gamma: 2.0,
            supervised_form: SupervisedForm::Conditional,
            gan_epochs: None,
            eval_betas: vec![2.0, 5.0],
            save_checkpoints: true,
            out_dir: PathBuf::from("runs/experiment"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn rule(&self) -> SelectRule {
        self.select_rule.unwrap_or(if self.k == 2 { SelectRule::Binary } else { SelectRule::Ternary })
    }

    pub fn gan_epochs(&self) -> usize {
        self.gan_epochs.unwrap_or(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return config_err(format!("k must be at least 2, got {}", self.k));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return config_err(format!("image_size must be a positive multiple of 4, got {}", self.image_size));
        }
        if self.n_l == 0 {
            return config_err("n_l must be positive");
        }
        if self.epochs == 0 || self.gan_epochs == Some(0) {
            return config_err("epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.focal_gamma >= 0.0) {
            return config_err(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return config_err(format!("labeled_fraction must be in (0, 1], got {}", self.labeled_fraction));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return config_err(format!("unlabeled_fraction must be in [0, 1], got {}", self.unlabeled_fraction));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return config_err(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        if !(self.select_threshold >= 0.0) {
            return config_err("select_threshold must be >= 0");
        }
        if self.rule() == SelectRule::Binary && self.k != 2 {
            return config_err("the binary selection rule needs k = 2");
        }
        if self.eval_betas.iter().any(|&b| !(b > 0.0)) {
            return config_err("eval_betas must be positive");
        }
        if self.pipeline == Pipeline::BssGan {
            crate::sampling::plan_balanced_batch(self.k, self.n_l, self.c)?;
        } else if self.c != 0.0 {
            return config_err(format!("c applies only to bss-gan, got c = {} for {}", self.c, self.pipeline));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.epochs, c.lr, c.n_l), (300, 2e-5, 60));
        assert_eq!(c.rule(), SelectRule::Binary);
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.pipeline = Pipeline::BslFocal;
        c.select_rule = Some(SelectRule::Binary);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn unknown_pipeline_lists_ids() {
        let err = ExperimentConfig::from_json(r#"{"pipeline": "wgan"}"#).unwrap_err();
        assert!(err.to_string().contains("bss-gan"));
        assert_eq!(err.exit_code(), 2);
        let err = "wgan".parse::<Pipeline>().unwrap_err().to_string();
        assert!(err.contains("bsl-focal"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"n_l": 61}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"k": 3, "select_rule": "binary"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"focal_gamma": -1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"pipeline": "bsl", "c": 1}"#).is_err());
    }

    #[test]
    fn pipeline_ids_round_trip() {
        for p in Pipeline::ALL {
            assert_eq!(p.id().parse::<Pipeline>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.id()));
        }
    }
}
