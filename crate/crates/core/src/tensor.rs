//! Dense 32-bit tensors and the sampling helper used by threshold selection.
//!
//! Values are stored row-major; the flat index space defined here is the one
//! sparse updates address.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Smallest number of elements drawn when estimating a threshold from a sample.
pub const MIN_SAMPLE: usize = 64;

/// A named, shaped buffer of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    id: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl DenseTensor {
    pub fn new(id: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if shape.contains(&0) {
            return Err(invalid(format!("tensor {id}: zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(invalid(format!(
                "tensor {id}: shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("tensor {id}: non-finite value at {pos}")));
        }
        Ok(Self { id, shape, values })
    }

    pub fn zeros(id: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(id, shape, vec![0.0; numel])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access for the unique owner of the tensor.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample_without_replacement(&self, fraction: f64, seed: u64) -> Result<Vec<f32>> {
        sample_without_replacement(&[&self.values], fraction, seed)
    }
}

/// Elementwise sum of two tensors of identical shape. The result keeps `a`'s id.
pub fn elementwise_add(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.shape != b.shape {
        return Err(invalid(format!("shape mismatch: {:?} vs {:?}", a.shape, b.shape)));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
    DenseTensor::new(a.id.clone(), a.shape.clone(), values)
}

/// Number of elements drawn from a population of `n` for the given fraction:
/// `max(ceil(fraction * n), MIN_SAMPLE)`, capped at `n`.
pub fn sample_size(n: usize, fraction: f64) -> usize {
    let wanted = (fraction * n as f64).ceil() as usize;
    wanted.max(MIN_SAMPLE).min(n)
}

/// Draws distinct positions uniformly from the concatenation of `parts` and
/// returns the values found there. Deterministic for a fixed seed.
pub fn sample_without_replacement(parts: &[&[f32]], fraction: f64, seed: u64) -> Result<Vec<f32>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let n: usize = parts.iter().map(|p| p.len()).sum();
    if n == 0 {
        return Err(invalid("cannot sample from an empty tensor"));
    }
    Ok(sample_values(parts, sample_size(n, fraction), seed))
}

/// `amount` values at distinct uniformly drawn positions of the
/// concatenation of `parts`. `amount` must not exceed the total length.
pub fn sample_values(parts: &[&[f32]], amount: usize, seed: u64) -> Vec<f32> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = index::sample(&mut rng, n, amount).into_vec();
    // Sorted positions let us walk the parts once.
    positions.sort_unstable();
    let mut out = Vec::with_capacity(amount);
    let mut base = 0usize;
    let mut part = 0usize;
    for pos in positions {
        while pos >= base + parts[part].len() {
            base += parts[part].len();
            part += 1;
        }
        out.push(parts[part][pos - base]);
    }
    out
}
