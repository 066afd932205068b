//! Quantized-integer inference.
//!
//! Features are quantized with a symmetric affine map (levels evenly spaced,
//! zero point 0); grid weights already live on evenly spaced levels, encoded
//! as the odd integers `2k − (m̄−1)` times half the grid step so that both
//! even and odd `m̄` get integer level codes. A prediction is then one wide
//! integer accumulation `Σ_j qφ_j · v_j` and a single dequantization, with
//! exact-zero weight levels skipped entirely — the sparsity the discrete
//! posterior was designed to produce.

use rand::Rng;

use crate::error::{DirectError, Result};
use crate::glm::{predict_mean, GlmModel};
use crate::numeric::dot;
use crate::variational::{sample_posterior, QuantizedSample, SupportGrid};

/// Evenly spaced signed quantizer: `dequantize(q) = (q − zero_point)·scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineQuantizer {
    pub scale: f64,
    pub zero_point: i64,
    pub bit_width: u8,
}

impl AffineQuantizer {
    /// Symmetric-range quantizer covering `[−max_abs, max_abs]` with
    /// `2^(bits−1) − 1` levels per side and zero point 0.
    pub fn symmetric(max_abs: f64, bit_width: u8) -> Result<Self> {
        if bit_width != 8 && bit_width != 16 {
            return Err(DirectError::Config(format!(
                "feature bit width must be 8 or 16, got {bit_width}"
            )));
        }
        if !max_abs.is_finite() || max_abs < 0.0 {
            return Err(DirectError::Domain(format!("bad quantization range {max_abs}")));
        }
        let qmax = (1i64 << (bit_width - 1)) - 1;
        let scale = if max_abs > 0.0 {
            max_abs / qmax as f64
        } else {
            1.0
        };
        Ok(AffineQuantizer {
            scale,
            zero_point: 0,
            bit_width,
        })
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bit_width - 1)) - 1
    }

    /// Round-half-to-even quantization with clamping to the level range.
    pub fn quantize(&self, x: f64) -> i64 {
        let q = (x / self.scale).round_ties_even() as i64 + self.zero_point;
        q.clamp(-self.qmax(), self.qmax())
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }
}

/// Quantize a feature vector symmetrically over its own range.
pub fn quantize_features(features: &[f64], bit_width: u8) -> Result<(Vec<i64>, AffineQuantizer)> {
    if features.iter().any(|x| !x.is_finite()) {
        return Err(DirectError::Domain("non-finite feature".into()));
    }
    let max_abs = features.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
    let quantizer = AffineQuantizer::symmetric(max_abs, bit_width)?;
    let q = features.iter().map(|&x| quantizer.quantize(x)).collect();
    Ok((q, quantizer))
}

/// Integer encoding of a support grid with uniformly spaced rows: level `k`
/// maps to the odd-step integer `2k − (m̄−1)` with scale `step/2`, so the
/// zero level (odd `m̄`) gets code 0 exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GridQuantizer {
    /// Half the grid step.
    pub scale: f64,
    /// Level codes `2k − (m̄−1)` for `k` in `0..m̄`.
    pub level_codes: Vec<i64>,
    /// Largest absolute error `|w̄[k] − code_k·scale|` over all rows and
    /// levels; zero when the grid is exactly representable.
    pub repr_error: f64,
}

impl GridQuantizer {
    /// Build from a grid whose rows all share the same values (the usual
    /// uniform construction). Non-uniform spacing is rejected.
    pub fn from_grid(grid: &SupportGrid) -> Result<Self> {
        let m = grid.m_bar();
        let row0 = grid.row(0);
        let step = (row0[m - 1] - row0[0]) / (m - 1) as f64;
        if !(step > 0.0) {
            return Err(DirectError::Domain("degenerate grid step".into()));
        }
        let scale = 0.5 * step;
        let level_codes: Vec<i64> = (0..m).map(|k| 2 * k as i64 - (m as i64 - 1)).collect();
        let mut repr_error = 0.0f64;
        for j in 0..grid.b() {
            let row = grid.row(j);
            for (k, &w) in row.iter().enumerate() {
                let approx = level_codes[k] as f64 * scale;
                let err = (w - approx).abs();
                if err > 0.1 * step {
                    return Err(DirectError::Domain(format!(
                        "grid row {j} is not evenly spaced (level {k}: {w} vs {approx})"
                    )));
                }
                repr_error = repr_error.max(err);
            }
        }
        Ok(GridQuantizer {
            scale,
            level_codes,
            repr_error,
        })
    }
}

/// Result of one integer prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerPrediction {
    pub value: f64,
    /// Integer multiplies actually performed (zero levels are skipped).
    pub multiplies: usize,
}

/// Accumulate `Σ_j qφ_j · code_j` in integer arithmetic, skipping indices
/// whose weight level is exactly zero, and dequantize once at the end.
/// Overflow retries with a doubled-width accumulator before erroring.
pub fn integer_predict(
    q_features: &[i64],
    sample: &QuantizedSample,
    feature_quantizer: &AffineQuantizer,
    grid_quantizer: &GridQuantizer,
) -> Result<IntegerPrediction> {
    if q_features.len() != sample.indices().len() {
        return Err(DirectError::shape(
            "quantized feature length",
            sample.indices().len(),
            q_features.len(),
        ));
    }
    match accumulate_i64(q_features, sample, grid_quantizer) {
        Some((acc, multiplies)) => Ok(IntegerPrediction {
            value: acc as f64 * feature_quantizer.scale * grid_quantizer.scale,
            multiplies,
        }),
        None => {
            // Widened retry.
            let mut acc: i128 = 0;
            let mut multiplies = 0usize;
            for (&qf, &idx) in q_features.iter().zip(sample.indices()) {
                let code = grid_quantizer.level_codes[idx as usize];
                if code == 0 {
                    continue;
                }
                multiplies += 1;
                let term = (qf as i128)
                    .checked_mul(code as i128)
                    .ok_or_else(|| DirectError::Numeric("integer accumulator overflow".into()))?;
                acc = acc
                    .checked_add(term)
                    .ok_or_else(|| DirectError::Numeric("integer accumulator overflow".into()))?;
            }
            Ok(IntegerPrediction {
                value: acc as f64 * feature_quantizer.scale * grid_quantizer.scale,
                multiplies,
            })
        }
    }
}

fn accumulate_i64(
    q_features: &[i64],
    sample: &QuantizedSample,
    grid_quantizer: &GridQuantizer,
) -> Option<(i64, usize)> {
    let mut acc: i64 = 0;
    let mut multiplies = 0usize;
    for (&qf, &idx) in q_features.iter().zip(sample.indices()) {
        let code = grid_quantizer.level_codes[idx as usize];
        if code == 0 {
            continue;
        }
        multiplies += 1;
        acc = acc.checked_add(qf.checked_mul(code)?)?;
    }
    Some((acc, multiplies))
}

/// Analytic bound on `|integer_predict − Σ_j φ_j w_j|` for a given feature
/// vector and weight draw: feature rounding (`scale_φ/2` per coordinate),
/// grid representation error, and floating-point accumulation slack.
pub fn deviation_bound(
    features: &[f64],
    weights: &[f64],
    q_features: &[i64],
    feature_quantizer: &AffineQuantizer,
    grid_quantizer: &GridQuantizer,
) -> f64 {
    let sum_abs_w: f64 = weights.iter().map(|w| w.abs()).sum();
    let sum_abs_qphi: f64 = q_features
        .iter()
        .map(|&q| (q as f64 * feature_quantizer.scale).abs())
        .sum();
    let sum_abs_prod: f64 = features
        .iter()
        .zip(weights)
        .map(|(&p, &w)| (p * w).abs())
        .sum();
    let b = features.len() as f64;
    // Rounding of each feature is at most half a step; the grid encode error
    // is measured at construction; the rest covers f64 summation and the two
    // final multiplications.
    0.5 * feature_quantizer.scale * sum_abs_w
        + grid_quantizer.repr_error * sum_abs_qphi
        + (b + 4.0) * f64::EPSILON * (sum_abs_prod + sum_abs_qphi * sum_abs_w.max(1.0))
}

/// Empirical mean and spread of the linear predictor over posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub mean: f64,
    /// Population variance of the draws (zero for a deterministic posterior).
    pub variance: f64,
    pub count: usize,
    /// Total integer multiplies across all draws.
    pub multiplies: usize,
}

/// Draw posterior samples, push each through the integer path, and return
/// the empirical mean and spread of `Φ*·w`. The mean converges to the exact
/// predictive mean as the draw count grows.
pub fn posterior_predictive_samples(
    model: &GlmModel,
    test_features: &[f64],
    count: usize,
    bit_width: u8,
    rng: &mut impl Rng,
) -> Result<SampleStats> {
    if count == 0 {
        return Err(DirectError::Domain("sample count must be at least 1".into()));
    }
    if test_features.len() != model.grid.b() {
        return Err(DirectError::shape(
            "test feature length",
            model.grid.b(),
            test_features.len(),
        ));
    }
    let (q_features, fq) = quantize_features(test_features, bit_width)?;
    let gq = GridQuantizer::from_grid(&model.grid)?;
    let draws = sample_posterior(&model.q, &model.grid, count, rng)?;
    let mut values = Vec::with_capacity(count);
    let mut multiplies = 0usize;
    for draw in &draws {
        let pred = integer_predict(&q_features, draw, &fq, &gq)?;
        values.push(pred.value);
        multiplies += pred.multiplies;
    }
    let (mean, variance) = crate::numeric::mean_var(&values);
    Ok(SampleStats {
        mean,
        variance,
        count,
        multiplies,
    })
}

/// Float-path reference for one draw: `Σ_j φ_j · w̄_j[idx_j]`.
pub fn float_predict(features: &[f64], sample: &QuantizedSample) -> f64 {
    dot(features, &sample.dequantize())
}

/// Convenience check used by callers comparing the two paths.
pub fn exact_mean(model: &GlmModel, test_features: &[f64]) -> Result<f64> {
    predict_mean(model, test_features)
}
