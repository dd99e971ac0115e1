//! Experiment driver: configuration, the distributed training loop, metrics
//! and summaries, sweeps, and gradient skewness reports.

mod node;
mod run;
mod skew;
mod sweep;

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compress::{DropConfig, QuantMode, ThresholdScope};
use crate::data::{load_mnist_dir, synth_split, Dataset};
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::net::ScheduleMode;

pub use run::{run_experiment, run_with_data, train_local, MetricsRecord, RunReport, Summary};
pub use skew::{report_skewness, SkewnessReport, TensorSkewness};
pub use sweep::{sweep, SweepAxis, SweepEntry, SweepReport};

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    /// IDX files in a directory, under their standard MNIST names.
    Mnist { dir: PathBuf },
    /// Gaussian clusters shaped like MNIST unless configured otherwise.
    Synth {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
    },
}

impl DataSource {
    pub fn synth_default() -> Self {
        DataSource::Synth {
            classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            dim: 784,
        }
    }

    /// Loads (train, test).
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Mnist { dir } => load_mnist_dir(dir),
            DataSource::Synth {
                classes,
                train_per_class,
                test_per_class,
                dim,
            } => synth_split(*classes, *train_per_class, *test_per_class, *dim, seed),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    /// `mnist:<dir>` or `synth`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "synth" {
            return Ok(Self::synth_default());
        }
        match s.strip_prefix("mnist:") {
            Some(dir) if !dir.is_empty() => Ok(DataSource::Mnist { dir: dir.into() }),
            _ => Err(Error::Config(format!(
                "data source must be mnist:<dir> or synth, got {s:?}"
            ))),
        }
    }
}

/// Everything that determines a run. Serialized into the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub workers: usize,
    /// Dropping applied to pushes, and to pulls unless overridden.
    pub drop: DropConfig,
    /// Drop ratio for pull deltas when it should differ from pushes.
    pub pull_drop_ratio: Option<f64>,
    pub hidden_dims: Vec<usize>,
    pub layer_norm: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub mode: ScheduleMode,
    pub data: DataSource,
    /// Use only the first this-many training examples.
    pub train_limit: Option<usize>,
    /// Evaluate on only the first this-many test examples.
    pub eval_limit: Option<usize>,
    /// Worker steps (summed over workers) between evaluations.
    pub eval_interval: u64,
    /// Stop each worker after this many steps.
    pub max_worker_steps: Option<u64>,
    pub out: Option<PathBuf>,
    /// Also write a per-message trace.
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            drop: DropConfig::default(),
            pull_drop_ratio: None,
            hidden_dims: vec![256; 3],
            layer_norm: true,
            batch_size: 40,
            epochs: 20,
            learning_rate: 0.005,
            seed: 1,
            mode: ScheduleMode::Async,
            data: DataSource::synth_default(),
            train_limit: None,
            eval_limit: None,
            eval_interval: 500,
            max_worker_steps: None,
            out: None,
            trace: false,
        }
    }
}

impl RunConfig {
    pub fn with_drop_ratio(mut self, drop_ratio: f64) -> Self {
        self.drop.drop_ratio = drop_ratio;
        self
    }

    pub fn with_scope(mut self, scope: ThresholdScope) -> Self {
        self.drop.scope = scope;
        self
    }

    pub fn with_quantization(mut self, mode: Option<QuantMode>) -> Self {
        self.drop.quantization = mode;
        self
    }

    /// Three hidden layers of 4096 units.
    pub fn paper_scale(mut self) -> Self {
        self.hidden_dims = vec![4096; 3];
        self
    }

    pub fn pull_config(&self) -> DropConfig {
        DropConfig {
            drop_ratio: self.pull_drop_ratio.unwrap_or(self.drop.drop_ratio),
            ..self.drop.clone()
        }
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: classes,
            layer_norm: self.layer_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.workers == 0 {
            return bad("at least one worker is required".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_interval == 0 {
            return bad("batch size, epochs and evaluation interval must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        if self.max_worker_steps == Some(0) {
            return bad("max worker steps must be >= 1".into());
        }
        self.drop.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pull_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_data_sources() {
        assert_eq!(
            "mnist:/tmp/m".parse::<DataSource>().unwrap(),
            DataSource::Mnist { dir: "/tmp/m".into() }
        );
        assert_eq!("synth".parse::<DataSource>().unwrap(), DataSource::synth_default());
        assert!("mnist:".parse::<DataSource>().is_err());
        assert!("cifar".parse::<DataSource>().is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let c = RunConfig {
            workers: 0,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::default().with_drop_ratio(100.0);
        assert!(c.validate().is_err());
        let c = RunConfig {
            pull_drop_ratio: Some(-1.0),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            learning_rate: 0.0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig::default().with_quantization(Some(QuantMode::TwoBit));
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
