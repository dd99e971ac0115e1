use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compress::skewness_of_magnitudes;
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::{Mlp, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSkewness {
    pub name: String,
    /// `None` when the statistic is undefined (fewer than three entries or
    /// all magnitudes equal).
    pub g1: Option<f64>,
}

/// Sample skewness of gradient magnitudes for one minibatch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewnessReport {
    pub tensors: Vec<TensorSkewness>,
    /// Over all parameters together.
    pub pooled: Option<f64>,
}

/// Computes one minibatch gradient at `params` and reports the skewness of
/// `|g|` per tensor and pooled. The batch is `batch` examples drawn with
/// `seed`.
pub fn report_skewness(
    mlp: &Mlp,
    params: &ModelParams,
    data: &Dataset,
    batch: usize,
    seed: u64,
) -> Result<SkewnessReport> {
    if batch == 0 || data.is_empty() {
        return Err(invalid("skewness needs a non-empty batch"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(batch);
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    data.gather(&order, &mut images, &mut labels);
    let (_, grads) = mlp.loss_and_grad(params, &images, &labels)?;
    let tensors = grads
        .layout()
        .slots()
        .iter()
        .map(|slot| TensorSkewness {
            name: slot.name.clone(),
            g1: skewness_of_magnitudes(&grads.flat()[slot.range()]).ok(),
        })
        .collect();
    Ok(SkewnessReport {
        tensors,
        pooled: skewness_of_magnitudes(grads.flat()).ok(),
    })
}
