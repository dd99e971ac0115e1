use crate::error::{Error, Result};

/// Pearson moment coefficient of skewness `m3 / m2^(3/2)`, using central
/// sample moments accumulated in `f64`.
pub fn skewness(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 3 {
        return Err(Error::UndefinedStatistic(format!("skewness needs 3 values, got {n}")));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (m2, m3) = values.iter().fold((0.0, 0.0), |(m2, m3), v| {
        let d = v - mean;
        (m2 + d * d, m3 + d * d * d)
    });
    let (m2, m3) = (m2 / nf, m3 / nf);
    if m2 <= 0.0 || !m2.is_finite() {
        return Err(Error::UndefinedStatistic("zero variance".into()));
    }
    Ok(m3 / m2.powf(1.5))
}

pub fn skewness_f32(values: &[f32]) -> Result<f64> {
    let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    skewness(&wide)
}

/// Skewness of `|v|`, the statistic used to describe how concentrated
/// gradient magnitudes are near zero.
pub fn skewness_of_magnitudes(values: &[f32]) -> Result<f64> {
    let wide: Vec<f64> = values.iter().map(|&v| v.abs() as f64).collect();
    skewness(&wide)
}
