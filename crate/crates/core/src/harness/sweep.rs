use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::Serialize;

use crate::compress::{QuantMode, ThresholdScope};
use crate::data::Dataset;
use crate::error::{Error, Result};

use super::run::{run_with_data, MetricsRecord, Summary};
use super::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    DropRatio,
    /// Values are `local` or `global`, optionally suffixed `/ln-on` or `/ln-off`.
    ThresholdScope,
    /// Values are `none` or a quantization mode.
    Quantization,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop-ratio" => Ok(SweepAxis::DropRatio),
            "threshold-scope" => Ok(SweepAxis::ThresholdScope),
            "quantization" => Ok(SweepAxis::Quantization),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut config = base.clone();
        match self {
            SweepAxis::DropRatio => {
                config.drop.drop_ratio = value
                    .parse()
                    .map_err(|_| Error::Config(format!("drop ratio {value:?} is not a number")))?;
            }
            SweepAxis::ThresholdScope => {
                let (scope, ln) = match value.split_once('/') {
                    Some((scope, "ln-on")) => (scope, Some(true)),
                    Some((scope, "ln-off")) => (scope, Some(false)),
                    Some(_) => return Err(Error::Config(format!("bad scope value {value:?}"))),
                    None => (value, None),
                };
                config.drop.scope = scope.parse::<ThresholdScope>()?;
                if let Some(ln) = ln {
                    config.layer_norm = ln;
                }
            }
            SweepAxis::Quantization => {
                config.drop.quantization = match value {
                    "none" => None,
                    mode => Some(mode.parse::<QuantMode>()?),
                };
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub value: String,
    pub outcome: std::result::Result<(Summary, Vec<MetricsRecord>), String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    /// Every run's metrics in one CSV with a leading `value` column.
    pub fn write_merged(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "value",
            "step",
            "epoch",
            "train_loss",
            "eval_accuracy",
            "payload_bytes",
            "dense_equivalent_bytes",
            "compression_ratio",
            "kept_fraction",
        ])?;
        for entry in &self.entries {
            if let Ok((_, metrics)) = &entry.outcome {
                for record in metrics {
                    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    w.write_record([
                        entry.value.clone(),
                        record.step.to_string(),
                        record.epoch.to_string(),
                        opt(record.train_loss),
                        record.eval_accuracy.to_string(),
                        record.payload_bytes.to_string(),
                        record.dense_equivalent_bytes.to_string(),
                        opt(record.compression_ratio),
                        opt(record.kept_fraction),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One run per value with the base seed. A failing run is recorded and the
/// sweep moves on. With `base.out` set, each run writes into
/// `<out>/<value>/` and the merged metrics go to `<out>/sweep.csv`.
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    train: &Dataset,
    test: &Dataset,
) -> Result<SweepReport> {
    let mut entries = Vec::with_capacity(values.len());
    for value in values {
        let outcome = axis.apply(base, value).and_then(|mut config| {
            config.out = base.out.as_ref().map(|dir| dir.join(value.replace('/', "_")));
            run_with_data(&config, train, test)
        });
        let outcome = match outcome {
            Ok(report) => Ok((report.summary, report.metrics)),
            Err(e) => {
                warn!("sweep value {value}: {e}");
                Err(e.to_string())
            }
        };
        entries.push(SweepEntry {
            value: value.clone(),
            outcome,
        });
    }
    let report = SweepReport { axis, entries };
    if let Some(dir) = &base.out {
        std::fs::create_dir_all(dir)?;
        report.write_merged(&dir.join("sweep.csv"))?;
    }
    Ok(report)
}
