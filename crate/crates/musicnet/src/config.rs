//! Run configuration: one TOML file covers the task, data source, training
//! schedule, loss weights, and model dimensions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classify,
    Interpolate,
    Forecast,
}

/// Which channel-correlation matrix feeds the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationKind {
    #[default]
    LspDtw,
    IDtw,
    Ones,
    Identity,
}

/// CSV-backed data source. Ratios order: train, validation, test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataSection {
    pub observations: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_epochs() -> usize {
    300
}
fn default_batch() -> usize {
    50
}
fn default_base_lr() -> f64 {
    1e-3
}
fn default_mask_ratio() -> f64 {
    0.1
}
fn default_observed_fraction() -> f64 {
    0.5
}
fn default_forecast_split() -> f64 {
    0.75
}
fn default_horizon() -> usize {
    3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Fraction of observed cells hidden per scale during training.
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(flatten)]
    pub weights: LossWeights,
    /// Reference-point budget at the finest scale; derived from the median
    /// series length when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_refs: Option<usize>,
    /// Number of scales; derived by the halving rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_scales: Option<usize>,
    /// Train/validation/test ratios; overrides the data section's ratios and
    /// applies to generated datasets too.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[f64; 3]>,
    /// Seed for the split shuffle alone. When absent the run seed is used.
    /// Setting it holds train/test membership fixed while `seed` varies the
    /// rest of the run (init, masks, batch order), the usual protocol for
    /// seed-averaged comparisons on one dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    /// Fraction of observations revealed during interpolation evaluation.
    #[serde(default = "default_observed_fraction")]
    pub observed_fraction: f64,
    /// Fraction of the (normalized) span observed before forecasting.
    #[serde(default = "default_forecast_split")]
    pub forecast_split: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub correlation: CorrelationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub model: ModelConfig,
}

impl RunConfig {
    /// A config with every field at its file-format default for `task`,
    /// with no data source attached yet.
    pub fn for_task(task: Task) -> RunConfig {
        RunConfig {
            task,
            seed: 0,
            epochs: default_epochs(),
            batch_size: default_batch(),
            base_lr: default_base_lr(),
            weight_decay: 0.0,
            mask_ratio: default_mask_ratio(),
            weights: LossWeights::default(),
            max_refs: None,
            num_scales: None,
            split: None,
            split_seed: None,
            observed_fraction: default_observed_fraction(),
            forecast_split: default_forecast_split(),
            horizon: default_horizon(),
            correlation: CorrelationKind::default(),
            data: None,
            generator: None,
            model: ModelConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!(
                "mask_ratio must lie strictly between 0 and 1, got {}",
                self.mask_ratio
            )));
        }
        self.weights.validate()?;
        if !(0.5..=0.9).contains(&self.observed_fraction) {
            return Err(Error::config(format!(
                "observed_fraction must lie in [0.5, 0.9], got {}",
                self.observed_fraction
            )));
        }
        if !(self.forecast_split > 0.0 && self.forecast_split < 1.0) {
            return Err(Error::config(format!(
                "forecast_split must lie strictly between 0 and 1, got {}",
                self.forecast_split
            )));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if let Some(l) = self.num_scales {
            if !(crate::multiscale::MIN_SCALES..=crate::multiscale::MAX_SCALES).contains(&l) {
                return Err(Error::config(format!(
                    "num_scales must lie in [{}, {}], got {l}",
                    crate::multiscale::MIN_SCALES,
                    crate::multiscale::MAX_SCALES
                )));
            }
        }
        if let Some(m) = self.max_refs {
            if m < 4 {
                return Err(Error::config(format!("max_refs must be at least 4, got {m}")));
            }
        }
        match (&self.data, &self.generator) {
            (Some(_), Some(_)) => {
                return Err(Error::config("config sets both [data] and [generator]; pick one"))
            }
            (None, None) => {
                return Err(Error::config("config needs a data source: [data] or [generator]"))
            }
            (Some(d), None) => {
                if self.task == Task::Classify && d.labels.is_none() {
                    return Err(Error::config("task \"classify\" needs [data].labels"));
                }
                let sum: f64 = d.split.iter().sum();
                if d.split.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "split ratios must be nonnegative and sum to 1, got {:?}",
                        d.split
                    )));
                }
            }
            (None, Some(g)) => g.validate()?,
        }
        if let Some(ratios) = self.split {
            let sum: f64 = ratios.iter().sum();
            if ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "split ratios must be nonnegative and sum to 1, got {:?}",
                    ratios
                )));
            }
        }
        if self.model.num_heads == 0 || self.model.d_r < 2 || self.model.d_model == 0 || self.model.gru_hidden == 0 {
            return Err(Error::config(
                "model dimensions must be positive (and d_r at least 2)",
            ));
        }
        Ok(())
    }
}

/// Reference-point budget by typical series length: long series earn more
/// reference points.
pub fn auto_max_refs(median_len: usize) -> usize {
    if median_len >= 200 {
        128
    } else if median_len >= 64 {
        96
    } else {
        48
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        r#"
task = "interpolate"
seed = 9

[generator]
instances_per_class = 4
span = 20.0
rate_min = 1.0
rate_max = 2.0

[[generator.classes]]
[[generator.classes.channels]]
sinusoids = [{ freq = 0.1, amp = 1.0, phase = 0.0 }]
"#
    }

    #[test]
    fn defaults_fill_in() {
        let config: RunConfig = toml::from_str(minimal_toml()).unwrap();
        config.validate().unwrap();
        assert_eq!(config.epochs, 300);
        assert_eq!(config.batch_size, 50);
        assert_eq!(config.base_lr, 1e-3);
        assert_eq!(config.mask_ratio, 0.1);
        assert_eq!(config.weights.lambda1, 1.0);
        assert_eq!(config.horizon, 3);
        assert_eq!(config.correlation, CorrelationKind::LspDtw);
        assert_eq!(config.model.num_heads, 4);
        assert_eq!(config.model.d_model, 256);
        assert_eq!(config.model.gru_hidden, 50);
    }

    #[test]
    fn lambda_keys_land_in_weights() {
        let text = format!("lambda1 = 0.5\nlambda2 = 2.0\nlambda3 = 0.0\n{}", minimal_toml());
        let config: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config.weights.lambda1, 0.5);
        assert_eq!(config.weights.lambda2, 2.0);
        assert_eq!(config.weights.lambda3, 0.0);
    }

    #[test]
    fn rejects_contradictory_sources() {
        let mut config: RunConfig = toml::from_str(minimal_toml()).unwrap();
        config.data = Some(DataSection {
            observations: "obs.csv".into(),
            labels: None,
            split: default_split(),
        });
        assert!(config.validate().is_err());
        config.generator = None;
        config.data = None;
        assert!(config.validate().is_err());
    }

    #[test]
    fn rejects_out_of_range_knobs() {
        let base: RunConfig = toml::from_str(minimal_toml()).unwrap();
        let mut c = base.clone();
        c.mask_ratio = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.observed_fraction = 0.3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.observed_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.weights.lambda2 = -1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.num_scales = Some(1);
        assert!(c.validate().is_err());
        let mut c = base;
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn classification_needs_labels() {
        let text = minimal_toml().replace("interpolate", "classify");
        let mut config: RunConfig = toml::from_str(&text).unwrap();
        // Generator path: labels come from class identity, fine.
        config.validate().unwrap();
        // CSV path without labels: rejected.
        config.generator = None;
        config.data = Some(DataSection {
            observations: "obs.csv".into(),
            labels: None,
            split: default_split(),
        });
        assert!(config.validate().is_err());
    }

    #[test]
    fn reference_budget_follows_length_bands() {
        assert_eq!(auto_max_refs(10), 48);
        assert_eq!(auto_max_refs(63), 48);
        assert_eq!(auto_max_refs(64), 96);
        assert_eq!(auto_max_refs(199), 96);
        assert_eq!(auto_max_refs(200), 128);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config: RunConfig = toml::from_str(minimal_toml()).unwrap();
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.epochs, config.epochs);
        assert_eq!(back.task, config.task);
        assert_eq!(back.generator, config.generator);
    }
}
