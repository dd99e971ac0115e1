use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

use super::{dequantize, quantize, select_threshold, QuantContext, QuantMode, QuantizedUpdate};
use super::{DropConfig, ResidualStore, SparseUpdate};

/// What one call to the dropping step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DropOutcome {
    pub update: SparseUpdate,
    pub threshold: f32,
}

/// `residual += gradient`.
pub fn accumulate(residual: &mut [f32], gradient: &[f32]) {
    for (r, g) in residual.iter_mut().zip(gradient) {
        *r += g;
    }
}

/// Moves every entry with `|v| > threshold` out of `combined` into a sparse
/// update; what stays behind is the new residual.
pub fn extract_survivors(tensor_id: &str, combined: &mut [f32], threshold: f32) -> SparseUpdate {
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, v) in combined.iter_mut().enumerate() {
        if v.abs() > threshold {
            indices.push(i as u32);
            values.push(*v);
            *v = 0.0;
        }
    }
    SparseUpdate::from_parts(tensor_id.to_string(), combined.len() as u32, indices, values)
}

/// Like [`extract_survivors`], with a separate threshold for each
/// consecutive piece of the buffer. `pieces` must cover `combined` in order.
pub fn extract_survivors_piecewise(
    tensor_id: &str,
    combined: &mut [f32],
    pieces: &[(std::ops::Range<usize>, f32)],
) -> SparseUpdate {
    debug_assert_eq!(pieces.iter().map(|(r, _)| r.len()).sum::<usize>(), combined.len());
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (range, threshold) in pieces {
        for i in range.clone() {
            let v = combined[i];
            if v.abs() > *threshold {
                indices.push(i as u32);
                values.push(v);
                combined[i] = 0.0;
            }
        }
    }
    SparseUpdate::from_parts(tensor_id.to_string(), combined.len() as u32, indices, values)
}

/// Gradient dropping on one flat buffer. `residual` holds the previous
/// residual on entry and the new one on return.
pub fn grad_drop_slice(
    tensor_id: &str,
    gradient: &[f32],
    residual: &mut [f32],
    config: &DropConfig,
    seed: u64,
) -> Result<DropOutcome> {
    if gradient.len() != residual.len() {
        return Err(invalid(format!(
            "gradient length {} != residual length {}",
            gradient.len(),
            residual.len()
        )));
    }
    if u32::try_from(gradient.len()).is_err() {
        return Err(invalid("tensor too large for 32-bit indices"));
    }
    config.validate()?;
    accumulate(residual, gradient);
    let threshold = select_threshold(&[residual], config, seed)?;
    let update = extract_survivors(tensor_id, residual, threshold);
    Ok(DropOutcome { update, threshold })
}

/// Gradient dropping for a named tensor using the residual kept under the
/// same name.
pub fn grad_drop(
    gradient: &DenseTensor,
    residuals: &mut ResidualStore,
    config: &DropConfig,
    seed: u64,
) -> Result<DropOutcome> {
    let residual = residuals.entry(gradient.id(), gradient.len())?;
    grad_drop_slice(gradient.id(), gradient.values(), residual, config, seed)
}

/// Quantizes `sent` and adds the quantization error back into `residual`
/// (which must be the buffer `sent` was extracted from), so the receiver's
/// reconstruction plus the residual still accounts for the combined gradient.
pub fn fold_quantization_error(
    sent: &SparseUpdate,
    residual: &mut [f32],
    mode: QuantMode,
    ctx: &QuantContext<'_>,
) -> Result<QuantizedUpdate> {
    if residual.len() != sent.total_length() as usize {
        return Err(invalid("residual length does not match update"));
    }
    let q = quantize(sent, mode, ctx)?;
    let reconstructed = dequantize(&q, ctx.columns)?;
    for ((i, v), r) in sent.entries().zip(reconstructed.values()) {
        residual[i as usize] += v - r;
    }
    Ok(q)
}
