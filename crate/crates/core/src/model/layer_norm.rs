pub const LN_EPSILON: f32 = 1e-5;

/// Writes the standardized row into `xhat` and returns `1 / sqrt(var + eps)`.
pub(crate) fn normalize_row(x: &[f32], xhat: &mut [f32], eps: f32) -> f32 {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for (h, v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * rstd;
    }
    rstd
}

/// Gradient w.r.t. the row input given the gradient w.r.t. `xhat`.
pub(crate) fn normalize_row_backward(xhat: &[f32], dxhat: &[f32], rstd: f32, dx: &mut [f32]) {
    let n = xhat.len() as f32;
    let mean_d = dxhat.iter().sum::<f32>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f32>() / n;
    for ((o, d), h) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = rstd * (d - mean_d - h * mean_dx);
    }
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over one row.
pub fn layer_norm_forward(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Vec<f32> {
    assert!(!x.is_empty() && gain.len() == x.len() && bias.len() == x.len());
    let mut out = vec![0.0; x.len()];
    normalize_row(x, &mut out, eps);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
    out
}

/// Returns `(dx, dgain, dbias)` for one row.
pub fn layer_norm_backward(x: &[f32], gain: &[f32], dy: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut xhat = vec![0.0; x.len()];
    let rstd = normalize_row(x, &mut xhat, eps);
    let dgain: Vec<f32> = dy.iter().zip(&xhat).map(|(d, h)| d * h).collect();
    let dxhat: Vec<f32> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    let mut dx = vec![0.0; x.len()];
    normalize_row_backward(&xhat, &dxhat, rstd, &mut dx);
    (dx, dgain, dy.to_vec())
}
