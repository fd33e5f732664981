//! Flat TOML experiment configuration. Every key is optional; command-line
//! flags override file values.

use std::path::{Path, PathBuf};

use compresskit::nn::ArchTag;
use compresskit::prune::{LayerFilter, PruneConfig, RetrainPolicy, ScanScope};
use compresskit::train::{StopRule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DatasetSource {
    FashionMnist,
    Cifar10,
    SyntheticStripes,
    SyntheticBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: String,
    /// Channel multiplier of the desk-scale architectures.
    pub width: usize,
    pub dataset: DatasetSource,
    /// Dataset root; defaults to `$COMPRESSKIT_DATA`, then `./data`.
    pub data_dir: Option<PathBuf>,
    /// First N training samples per class.
    pub subset: Option<usize>,
    /// Sample count of synthetic datasets.
    pub synthetic_count: usize,
    pub synthetic_classes: usize,
    pub split_seed: u64,
    pub val_fraction: f64,
    pub seed: u64,

    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub decay_every: Option<usize>,
    pub epochs: usize,
    pub patience: usize,

    pub sensitivity: f64,
    pub iterations: usize,
    pub retrain_policy: String,
    pub retrain_lr: Option<f64>,
    pub retrain_epochs: usize,
    pub retrain_patience: usize,
    /// Prunable layer kinds; empty means all.
    pub layer_filter: Vec<String>,

    pub grid: Vec<f64>,
    pub scan_scope: String,
    pub scan_epochs: usize,

    pub bit_width: u8,
    pub calib_size: usize,

    pub warmup: usize,
    pub repetitions: usize,
    /// Split scored by `bench`: `test` or `val`.
    pub eval_split: String,

    pub overfit_target: f64,
    pub overfit_epochs: usize,
    pub prune_step: f64,

    pub out: PathBuf,
    /// Input model for scan, prune, quantize, bench and overfit-study.
    pub model: Option<PathBuf>,
    /// Baseline model for bench speedups.
    pub reference: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: "mini_alexnet".into(),
            width: 1,
            dataset: DatasetSource::FashionMnist,
            data_dir: None,
            subset: None,
            synthetic_count: 2000,
            synthetic_classes: 10,
            split_seed: 0,
            val_fraction: 0.1,
            seed: 0,
            batch_size: 50,
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.5,
            decay_every: None,
            epochs: 10,
            patience: 3,
            sensitivity: 0.5,
            iterations: 1,
            retrain_policy: "fine_tune".into(),
            retrain_lr: None,
            retrain_epochs: 3,
            retrain_patience: 2,
            layer_filter: Vec::new(),
            grid: compresskit::prune::default_grid(),
            scan_scope: "global".into(),
            scan_epochs: 2,
            bit_width: 8,
            calib_size: 500,
            warmup: 10,
            repetitions: 100,
            eval_split: "test".into(),
            overfit_target: 0.999,
            overfit_epochs: 60,
            prune_step: 0.05,
            out: PathBuf::from("runs/default"),
            model: None,
            reference: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.arch_tag()?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.retrain_policy()?;
        self.scan_scope()?;
        let bad = |msg: String| Err(CliError::Config(msg));
        if !(0.0..1.0).contains(&self.sensitivity) {
            return bad(format!("sensitivity {} outside [0, 1)", self.sensitivity));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.warmup < 10 || self.repetitions < 100 {
            return bad(format!(
                "latency protocol needs at least 10 warmups and 100 repetitions (got {} and {})",
                self.warmup, self.repetitions
            ));
        }
        if !matches!(self.eval_split.as_str(), "test" | "val") {
            return bad(format!("eval_split {:?} is not test or val", self.eval_split));
        }
        if !(2..=16).contains(&self.bit_width) {
            return bad(format!("bit_width {} outside 2..=16", self.bit_width));
        }
        if self.width == 0 || self.calib_size == 0 {
            return bad("width and calib_size must be positive".into());
        }
        if !(self.prune_step > 0.0 && self.prune_step < 1.0) {
            return bad(format!("prune_step {} outside (0, 1)", self.prune_step));
        }
        Ok(())
    }

    pub fn arch_tag(&self) -> Result<ArchTag, CliError> {
        self.arch
            .parse()
            .map_err(|e: compresskit::Error| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn retrain_policy(&self) -> Result<RetrainPolicy, CliError> {
        match self.retrain_policy.as_str() {
            "fine_tune" => Ok(RetrainPolicy::FineTune),
            "reinitialise" | "reinitialize" => Ok(RetrainPolicy::Reinitialise),
            other => Err(CliError::Config(format!(
                "retrain_policy {other:?} is not fine_tune or reinitialise"
            ))),
        }
    }

    pub fn scan_scope(&self) -> Result<ScanScope, CliError> {
        match self.scan_scope.as_str() {
            "global" => Ok(ScanScope::Global),
            "per_layer" => Ok(ScanScope::PerLayer),
            other => Err(CliError::Config(format!(
                "scan_scope {other:?} is not global or per_layer"
            ))),
        }
    }

    pub fn layer_filter(&self) -> LayerFilter {
        if self.layer_filter.is_empty() {
            LayerFilter::All
        } else {
            LayerFilter::Kinds(self.layer_filter.clone())
        }
    }

    /// Short early-stopped retraining used after each pruning step.
    pub fn retrain_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.retrain_lr.unwrap_or(self.lr),
            max_epochs: self.retrain_epochs,
            patience: self.retrain_patience,
            ..self.train_config()
        }
    }

    pub fn prune_config(&self) -> Result<PruneConfig, CliError> {
        Ok(PruneConfig {
            sensitivity: self.sensitivity,
            iterations: self.iterations,
            retrain_policy: self.retrain_policy()?,
            retrain: self.retrain_config(),
            retrain_stop: StopRule::EarlyStop,
            layer_filter: self.layer_filter(),
        })
    }

    pub fn scan_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.scan_epochs,
            patience: 1,
            ..self.retrain_config()
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(compresskit::data::data_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn flat_keys_parse() {
        let c: ExperimentConfig = toml::from_str(
            "arch = \"mini_mobilenet\"\ndataset = \"synthetic_stripes\"\nsensitivity = 0.3\ngrid = [0.0, 0.5]\n",
        )
        .unwrap();
        assert_eq!(c.arch_tag().unwrap(), ArchTag::MiniMobilenet);
        assert_eq!(c.dataset, DatasetSource::SyntheticStripes);
        assert_eq!(c.grid, vec![0.0, 0.5]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("learning_rate = 0.1").is_err());
    }

    #[test]
    fn short_latency_protocol_rejected() {
        let c = ExperimentConfig {
            repetitions: 50,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
