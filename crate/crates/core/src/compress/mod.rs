//! Gradient dropping with residual accumulation, and the wire encodings for
//! the updates it produces.
//!
//! The flow for one transmission is: add the gradient into the residual
//! buffer, pick a magnitude threshold (exactly or from a sample), move every
//! entry strictly above the threshold into a [`SparseUpdate`] and leave the
//! rest behind as the new residual. An optional quantizer then replaces the
//! surviving values by sign and shared magnitude; its error is folded back
//! into the residual too.

mod codec;
mod drop;
mod quant;
mod select;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use codec::{frame_header_len, DenseFrame, SparseUpdate};
pub(crate) use codec::{write_frame_header, Reader};
pub use drop::{
    accumulate, extract_survivors, extract_survivors_piecewise, fold_quantization_error, grad_drop, grad_drop_slice,
    DropOutcome,
};
pub use quant::{dequantize, quantize, ColumnMap, QuantContext, QuantMode, QuantizedUpdate};
pub use select::{drop_rank, select_threshold, threshold_sample_size, TAIL_SAMPLES};
pub use stats::{skewness, skewness_f32, skewness_of_magnitudes};

/// Whether one threshold covers a whole transmission or each named tensor
/// gets its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdScope {
    #[default]
    Global,
    Local,
}

impl std::str::FromStr for ThresholdScope {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            other => Err(crate::Error::Config(format!("unknown threshold scope {other:?}"))),
        }
    }
}

/// Settings for one direction of gradient dropping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropConfig {
    /// Percentage of entries suppressed, in `[0, 100)`.
    pub drop_ratio: f64,
    pub scope: ThresholdScope,
    /// Fraction of entries sampled for threshold estimation.
    pub sample_fraction: f64,
    /// Use full selection instead of sampling. Meant for tests.
    pub exact_selection: bool,
    pub quantization: Option<QuantMode>,
}

impl Default for DropConfig {
    fn default() -> Self {
        Self {
            drop_ratio: 99.0,
            scope: ThresholdScope::Global,
            sample_fraction: 0.001,
            exact_selection: false,
            quantization: None,
        }
    }
}

impl DropConfig {
    pub fn with_ratio(drop_ratio: f64) -> Self {
        Self {
            drop_ratio,
            ..Self::default()
        }
    }

    pub fn exact(mut self) -> Self {
        self.exact_selection = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..100.0).contains(&self.drop_ratio) {
            return Err(invalid(format!("drop ratio {} outside [0, 100)", self.drop_ratio)));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(invalid(format!(
                "sample fraction {} outside (0, 1]",
                self.sample_fraction
            )));
        }
        Ok(())
    }

    /// True when nothing is dropped and nothing is quantized.
    pub fn is_lossless(&self) -> bool {
        self.drop_ratio == 0.0 && self.quantization.is_none()
    }
}

/// Accumulated dropped values, one flat buffer per tensor id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualStore {
    buffers: BTreeMap<String, Vec<f32>>,
}

impl ResidualStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// The buffer for `id`, created zero-filled on first use.
    pub fn entry(&mut self, id: &str, len: usize) -> Result<&mut Vec<f32>> {
        let buf = self.buffers.entry(id.to_string()).or_insert_with(|| vec![0.0; len]);
        if buf.len() != len {
            return Err(invalid(format!(
                "residual {id} has length {}, expected {len}",
                buf.len()
            )));
        }
        Ok(buf)
    }

    /// Stores `buf` under `id`, returning the previous buffer.
    pub fn replace(&mut self, id: &str, buf: Vec<f32>) -> Option<Vec<f32>> {
        self.buffers.insert(id.to_string(), buf)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.buffers.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}
