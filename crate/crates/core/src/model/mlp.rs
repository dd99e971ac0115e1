//! Forward and backward passes of the fully connected classifier.
//!
//! Hidden layers compute `relu(ln(x W^T + b))` (layer norm optional); the
//! output layer is affine and feeds a softmax cross-entropy averaged over
//! the batch.

use std::ops::Range;

use crate::error::{invalid, Result};

use super::layer_norm::{normalize_row, normalize_row_backward, LN_EPSILON};
use super::{Gradients, MlpSpec, ModelParams, ParamLayout};

#[derive(Debug, Clone)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weight: Range<usize>,
    bias: Range<usize>,
    /// (gain, bias) ranges of the layer norm, hidden layers only.
    norm: Option<(Range<usize>, Range<usize>)>,
    hidden: bool,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layout: ParamLayout,
    layers: Vec<Layer>,
}

/// Activations cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    rows: usize,
    /// Input to each layer; `inputs[0]` is the batch.
    inputs: Vec<Vec<f32>>,
    /// Normalized pre-activations and their 1/std, for layer-normed layers.
    normalized: Vec<Option<(Vec<f32>, Vec<f32>)>>,
    logits: Vec<f32>,
}

impl ForwardPass {
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` with explicit strides, overwriting `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa as usize + (k - 1) * csa as usize);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb as usize + (n - 1) * csb as usize);
    // SAFETY: the asserts above bound every access made through the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let dims = spec.dims();
        let n_layers = dims.len() - 1;
        let range = |name: String| layout.slot(&name).expect("layout built from spec").range();
        let layers = (0..n_layers)
            .map(|l| {
                let hidden = l + 1 < n_layers;
                Layer {
                    fan_in: dims[l],
                    fan_out: dims[l + 1],
                    weight: range(format!("fc{l}.weight")),
                    bias: range(format!("fc{l}.bias")),
                    norm: (spec.layer_norm && hidden)
                        .then(|| (range(format!("ln{l}.gain")), range(format!("ln{l}.bias")))),
                    hidden,
                }
            })
            .collect();
        Ok(Self { spec, layout, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.layout() != &self.layout {
            return Err(invalid("parameter layout does not match the network"));
        }
        Ok(())
    }

    /// Runs the batch (`rows x input_dim`, row-major) through the network.
    pub fn forward(&self, params: &ModelParams, batch: &[f32], rows: usize) -> Result<ForwardPass> {
        self.check_params(params)?;
        if rows == 0 || batch.len() != rows * self.spec.input_dim {
            return Err(invalid(format!(
                "batch of {} values is not {rows} rows of {}",
                batch.len(),
                self.spec.input_dim
            )));
        }
        let p = params.flat();
        let mut inputs = vec![batch.to_vec()];
        let mut normalized = Vec::with_capacity(self.layers.len());
        let mut logits = Vec::new();
        for layer in &self.layers {
            let x = inputs.last().unwrap();
            let mut z = vec![0.0f32; rows * layer.fan_out];
            gemm(
                rows,
                layer.fan_in,
                layer.fan_out,
                x,
                (layer.fan_in as isize, 1),
                &p[layer.weight.clone()],
                (1, layer.fan_in as isize),
                &mut z,
            );
            let bias = &p[layer.bias.clone()];
            for row in z.chunks_exact_mut(layer.fan_out) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            let norm = layer.norm.as_ref().map(|(gain, beta)| {
                let mut xhat = vec![0.0f32; z.len()];
                let mut rstd = Vec::with_capacity(rows);
                for (zrow, hrow) in z
                    .chunks_exact_mut(layer.fan_out)
                    .zip(xhat.chunks_exact_mut(layer.fan_out))
                {
                    rstd.push(normalize_row(zrow, hrow, LN_EPSILON));
                    for (((o, h), g), b) in zrow
                        .iter_mut()
                        .zip(hrow.iter())
                        .zip(&p[gain.clone()])
                        .zip(&p[beta.clone()])
                    {
                        *o = h * g + b;
                    }
                }
                (xhat, rstd)
            });
            normalized.push(norm);
            if layer.hidden {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
                inputs.push(z);
            } else {
                logits = z;
            }
        }
        Ok(ForwardPass {
            rows,
            inputs,
            normalized,
            logits,
        })
    }

    /// Gradients of the mean cross-entropy w.r.t. every parameter, plus the loss.
    pub fn backward(&self, params: &ModelParams, pass: &ForwardPass, labels: &[u8]) -> Result<(Gradients, f32)> {
        self.check_params(params)?;
        let rows = pass.rows;
        if labels.len() != rows {
            return Err(invalid(format!("{} labels for {rows} rows", labels.len())));
        }
        let classes = self.spec.output_dim;
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(invalid(format!("label {l} out of range for {classes} classes")));
        }
        let (loss, mut delta) = softmax_cross_entropy(&pass.logits, labels, classes);
        let p = params.flat();
        let mut grads = ModelParams::zeros(self.layout.clone());
        let g = grads.flat_mut();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
            if layer.hidden {
                // relu: the stored output of this layer is the next layer's input
                let out = &pass.inputs[l + 1];
                for (d, a) in delta.iter_mut().zip(out) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                if let (Some((gain, beta)), Some((xhat, rstd))) = (&layer.norm, &pass.normalized[l]) {
                    let gain_vals = &p[gain.clone()];
                    let mut dgain = vec![0.0f32; fan_out];
                    let mut dbeta = vec![0.0f32; fan_out];
                    let mut dxhat = vec![0.0f32; fan_out];
                    let mut dz = vec![0.0f32; fan_out];
                    for r in 0..rows {
                        let drow = &mut delta[r * fan_out..(r + 1) * fan_out];
                        let hrow = &xhat[r * fan_out..(r + 1) * fan_out];
                        for j in 0..fan_out {
                            dgain[j] += drow[j] * hrow[j];
                            dbeta[j] += drow[j];
                            dxhat[j] = drow[j] * gain_vals[j];
                        }
                        normalize_row_backward(hrow, &dxhat, rstd[r], &mut dz);
                        drow.copy_from_slice(&dz);
                    }
                    g[gain.clone()].copy_from_slice(&dgain);
                    g[beta.clone()].copy_from_slice(&dbeta);
                }
            }
            let x = &pass.inputs[l];
            gemm(
                fan_out,
                rows,
                fan_in,
                &delta,
                (1, fan_out as isize),
                x,
                (fan_in as isize, 1),
                &mut g[layer.weight.clone()],
            );
            let db = &mut g[layer.bias.clone()];
            for row in delta.chunks_exact(fan_out) {
                for (b, d) in db.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if l > 0 {
                let mut dx = vec![0.0f32; rows * fan_in];
                gemm(
                    rows,
                    fan_out,
                    fan_in,
                    &delta,
                    (fan_out as isize, 1),
                    &p[layer.weight.clone()],
                    (fan_in as isize, 1),
                    &mut dx,
                );
                delta = dx;
            }
        }
        Ok((grads, loss))
    }

    pub fn loss_and_grad(&self, params: &ModelParams, batch: &[f32], labels: &[u8]) -> Result<(f32, Gradients)> {
        let pass = self.forward(params, batch, labels.len())?;
        let (grads, loss) = self.backward(params, &pass, labels)?;
        Ok((loss, grads))
    }

    /// Class predictions, evaluated in chunks to bound memory.
    pub fn predict(&self, params: &ModelParams, inputs: &[f32], rows: usize) -> Result<Vec<usize>> {
        let dim = self.spec.input_dim;
        let classes = self.spec.output_dim;
        let mut out = Vec::with_capacity(rows);
        for start in (0..rows).step_by(1000) {
            let n = (rows - start).min(1000);
            let pass = self.forward(params, &inputs[start * dim..(start + n) * dim], n)?;
            out.extend(pass.logits.chunks_exact(classes).map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            }));
        }
        Ok(out)
    }

    pub fn accuracy(&self, params: &ModelParams, inputs: &[f32], labels: &[u8]) -> Result<f64> {
        let pred = self.predict(params, inputs, labels.len())?;
        let correct = pred.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }
}

/// Mean cross-entropy of softmax(logits) against the labels.
pub fn cross_entropy(logits: &[f32], labels: &[u8], classes: usize) -> f32 {
    softmax_cross_entropy(logits, labels, classes).0
}

/// Loss and gradient w.r.t. the logits.
fn softmax_cross_entropy(logits: &[f32], labels: &[u8], classes: usize) -> (f32, Vec<f32>) {
    let rows = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    let inv_rows = 1.0 / rows as f32;
    for ((row, grow), &label) in logits
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (g, &z) in grow.iter_mut().zip(row) {
            *g = (z - max).exp();
            sum += *g;
        }
        total += (sum.ln() - (row[label as usize] - max)) as f64;
        for g in grow.iter_mut() {
            *g /= sum;
        }
        grow[label as usize] -= 1.0;
        for g in grow.iter_mut() {
            *g *= inv_rows;
        }
    }
    ((total / rows as f64) as f32, grad)
}
