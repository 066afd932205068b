//! Small numerically careful primitives used throughout the crate.

/// Natural log of `sum(exp(x))` with max subtraction.
///
/// Returns `-inf` for an empty slice or a slice of `-inf`s.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Row softmax: `probs[i] = exp(logits[i]) / sum_j exp(logits[j])`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| (x - lse).exp()).collect()
}

/// Row log-softmax, finite for any finite logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// Pull a gradient w.r.t. softmax probabilities back to the logits.
///
/// With `p = softmax(theta)` and upstream gradient `g = dL/dp`, the logit
/// gradient is `p ⊙ (g − <g, p>)`. Gradient components that are constant
/// across a row vanish here, which is what makes skipping all-ones Kronecker
/// factors in probability-space gradients exact.
pub fn softmax_backprop(probs: &[f64], dprobs: &[f64], out: &mut [f64]) {
    debug_assert_eq!(probs.len(), dprobs.len());
    debug_assert_eq!(probs.len(), out.len());
    let inner: f64 = probs.iter().zip(dprobs).map(|(&p, &g)| p * g).sum();
    for ((o, &p), &g) in out.iter_mut().zip(probs).zip(dprobs) {
        *o += p * (g - inner);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Magnitudes outside this range trigger the log-magnitude product path.
const SAFE_LO: f64 = 1e-300;
const SAFE_HI: f64 = 1e300;

/// Product of a slice of factors, falling back to log-magnitude + sign
/// accumulation when a plain product would leave the safe range of `f64`.
pub fn stable_product(factors: &[f64]) -> f64 {
    let mut prod = 1.0f64;
    let mut safe = true;
    for &f in factors {
        if f == 0.0 {
            return 0.0;
        }
        prod *= f;
        // Catches overflow (inf), underflow-to-zero, and subnormal drift.
        if !(SAFE_LO..=SAFE_HI).contains(&prod.abs()) {
            safe = false;
            break;
        }
    }
    if safe {
        return prod;
    }
    // Log-magnitude + sign accumulation; zero factors were handled above.
    let mut sign = 1.0f64;
    let mut log_mag = 0.0f64;
    for &f in factors {
        if f < 0.0 {
            sign = -sign;
        }
        log_mag += f.abs().ln();
    }
    sign * log_mag.exp()
}

/// Mean and (population) variance of a slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}
