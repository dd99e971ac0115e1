//! MLP classifier, layer normalization, AdaGrad and checkpoints.

mod adagrad;
mod checkpoint;
mod layer_norm;
mod mlp;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

pub use adagrad::{AdaGrad, AdaGradState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layer_norm::{layer_norm_backward, layer_norm_forward, LN_EPSILON};
pub use mlp::{cross_entropy, ForwardPass, Mlp};

/// Architecture of the fully connected classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// Normalize every hidden pre-activation per example.
    pub layer_norm: bool,
}

impl MlpSpec {
    /// 784-256-256-256-10, the desk-scale MNIST network.
    pub fn mnist_desk(layer_norm: bool) -> Self {
        Self {
            input_dim: 784,
            hidden_dims: vec![256; 3],
            output_dim: 10,
            layer_norm,
        }
    }

    /// Three hidden layers of 4096 units.
    pub fn mnist_paper(layer_norm: bool) -> Self {
        Self {
            hidden_dims: vec![4096; 3],
            ..Self::mnist_desk(layer_norm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(invalid(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Widths of every layer boundary, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    /// Recovers the architecture from a layout produced by [`MlpSpec::layout`],
    /// for instance one read back from a checkpoint.
    pub fn from_layout(layout: &ParamLayout) -> Result<Self> {
        let mut dims = Vec::new();
        let mut l = 0;
        while let Some(w) = layout.slot(&format!("fc{l}.weight")) {
            if w.shape.len() != 2 {
                return Err(invalid(format!("fc{l}.weight is not a matrix")));
            }
            if l == 0 {
                dims.push(w.shape[1]);
            }
            dims.push(w.shape[0]);
            l += 1;
        }
        if dims.len() < 2 {
            return Err(invalid("layout has no fc0.weight"));
        }
        let spec = Self {
            input_dim: dims[0],
            hidden_dims: dims[1..dims.len() - 1].to_vec(),
            output_dim: dims[dims.len() - 1],
            layer_norm: layout.slot("ln0.gain").is_some(),
        };
        if &spec.layout() != layout {
            return Err(invalid("layout does not describe an MLP"));
        }
        Ok(spec)
    }

    /// Parameter tensors in flattening order.
    pub fn layout(&self) -> ParamLayout {
        let dims = self.dims();
        let layers = dims.len() - 1;
        let mut slots = Vec::new();
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            slots.push((format!("fc{l}.weight"), vec![fan_out, fan_in]));
            slots.push((format!("fc{l}.bias"), vec![fan_out]));
            if self.layer_norm && l + 1 < layers {
                slots.push((format!("ln{l}.gain"), vec![fan_out]));
                slots.push((format!("ln{l}.bias"), vec![fan_out]));
            }
        }
        ParamLayout::new(slots)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Columns used for column-wise quantization: the last extent of a
    /// matrix, 1 for vectors.
    pub fn columns(&self) -> usize {
        if self.shape.len() >= 2 {
            *self.shape.last().unwrap()
        } else {
            1
        }
    }
}

/// Ordered names and shapes of the parameter tensors and where each sits in
/// the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Arc<[TensorSlot]>,
    total: usize,
}

impl ParamLayout {
    pub fn new(tensors: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let slots: Vec<TensorSlot> = tensors
            .into_iter()
            .map(|(name, shape)| {
                let slot = TensorSlot { name, shape, offset };
                offset += slot.len();
                slot
            })
            .collect();
        Self {
            slots: slots.into(),
            total: offset,
        }
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slot(&self, name: &str) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// Flat parameter (or gradient) vector with its tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: ParamLayout,
    values: Vec<f32>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn from_flat(layout: ParamLayout, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(invalid(format!(
                "layout needs {} values, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn from_tensors(tensors: &[DenseTensor]) -> Self {
        let layout = ParamLayout::new(
            tensors
                .iter()
                .map(|t| (t.id().to_string(), t.shape().to_vec()))
                .collect(),
        );
        let values = tensors.iter().flat_map(|t| t.values().iter().copied()).collect();
        Self { layout, values }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn flat(&self) -> &[f32] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.layout.slot(name).map(|s| &self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.layout.slot(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn tensors(&self) -> Vec<DenseTensor> {
        self.layout
            .slots()
            .iter()
            .map(|s| {
                DenseTensor::new(s.name.clone(), s.shape.clone(), self.values[s.range()].to_vec())
                    .expect("layout matches values")
            })
            .collect()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::zeros(self.layout().clone());
        let slots = params.layout().slots().to_vec();
        for slot in slots {
            let values = &mut params.flat_mut()[slot.range()];
            if slot.name.ends_with(".weight") {
                let limit = (6.0 / (slot.shape[0] + slot.shape[1]) as f64).sqrt() as f32;
                for v in values.iter_mut() {
                    *v = rng.random_range(-limit..=limit);
                }
            } else if slot.name.ends_with(".gain") {
                values.fill(1.0);
            }
        }
        params
    }
}
