//! Run configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use trilandmark::downstream::ClassifyConfig;
use trilandmark::losses::LossConfig;
use trilandmark::proposal::ModelConfig;
use trilandmark::synth::{CohortConfig, Timepoint};
use trilandmark::trainer::TrainConfig;
use trilandmark::{Error, Result};

/// Evaluation settings shared by `eval` and `classify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// The last `test_subjects` subjects are held out from training; `None`
    /// holds out a third, rounded down.
    pub test_subjects: Option<usize>,
    /// Timepoint of the evaluated pairs.
    pub timepoint: Timepoint,
    /// Seed for drawing each pair's anchor image.
    pub triplet_seed: u64,
    /// Number of test images rendered as overlay PNGs.
    pub overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_subjects: None,
            timepoint: Timepoint::T0,
            triplet_seed: 1000,
            overlays: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cohort: CohortConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub classify: ClassifyConfig,
}

/// Values given on the command line; each one replaces the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Sets the cohort, training and cross-validation seeds together.
    pub seed: Option<u64>,
    pub subjects: Option<usize>,
    pub epochs: Option<usize>,
    pub top_k: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, then `path` if given, then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.cohort.seed = s;
            cfg.train.seed = s;
            cfg.classify.seed = s;
        }
        if let Some(n) = overrides.subjects {
            cfg.cohort.num_subjects = n;
        }
        if let Some(e) = overrides.epochs {
            cfg.train.epochs = e;
        }
        if let Some(k) = overrides.top_k {
            cfg.classify.top_k = Some(k);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.loss.validate()?;
        self.train_config().validate()
    }

    /// Optimizer settings with the loss section attached.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss.clone(),
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Subject indices `(train, test)` of a cohort with `n` subjects.
    pub fn split(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let test = self.eval.test_subjects.unwrap_or(n / 3);
        if test > n {
            return Err(Error::Config(format!("test_subjects = {test} exceeds the {n} subjects of the cohort")));
        }
        Ok(((0..n - test).collect(), (n - test..n).collect()))
    }
}
