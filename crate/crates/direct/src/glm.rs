//! Discretely relaxed generalized linear regression.
//!
//! With sufficient statistics `yᵀy`, `Φᵀy`, `ΦᵀΦ`, and `H` precomputed once
//! in `O(n b²)`, the exact ELBO of the Gaussian-noise linear model with a
//! factorized categorical posterior costs `O(b m̄ + b²)` per evaluation —
//! independent of the number of training points — as does its exact logit
//! gradient. The likelihood term is linear in `q`, so a mixture posterior
//! routes through the same bracket per component; entropy then comes from
//! the Taylor lower bound or the sampled surrogate in [`crate::variational`].
//!
//! The ELBO here includes the `−(n/2)·ln 2π` constant of the Gaussian
//! likelihood, so it equals the literal hypothesis sum
//! `qᵀ(log ℓ + log p − log q)` rather than that sum shifted by a constant.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{DirectError, Result};
use crate::numeric::{dot, softmax, softmax_backprop};
use crate::variational::{
    mixture_entropy_lower_bound_grad, EntropyAnchor, MeanFieldDist, MeanFieldGrad, MixtureGrad,
    SupportGrid, VariationalDist,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Row-chunk size for the blocked `ΦᵀΦ` accumulation. Fixed so that the
/// summation order (and hence the result, bit for bit) does not depend on
/// how the data arrives.
const PRECOMPUTE_CHUNK: usize = 4096;

/// Data-dependent precomputations that decouple iteration cost from `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmSuffStats {
    pub yty: f64,
    pub phity: Array1<f64>,
    pub phitphi: Array2<f64>,
    /// `m̄ × b`; column `j` is `w̄_j² · Σ_i φ_ij²`.
    pub h_mat: Array2<f64>,
    pub n: usize,
}

impl GlmSuffStats {
    /// Zero statistics for `n = 0` (prior-matching tests, online starts).
    pub fn empty(grid: &SupportGrid) -> Self {
        let b = grid.b();
        GlmSuffStats {
            yty: 0.0,
            phity: Array1::zeros(b),
            phitphi: Array2::zeros((b, b)),
            h_mat: Array2::zeros((grid.m_bar(), b)),
            n: 0,
        }
    }

    /// Exact `yᵀy`, `Φᵀy`, `ΦᵀΦ`, `H` in one blocked pass over the rows.
    pub fn precompute(
        features: ArrayView2<f64>,
        targets: ArrayView1<f64>,
        grid: &SupportGrid,
    ) -> Result<Self> {
        let mut stats = GlmSuffStats::empty(grid);
        stats.update(features, targets, grid)?;
        Ok(stats)
    }

    /// Fold additional rows into the statistics (online updates).
    pub fn update(
        &mut self,
        features: ArrayView2<f64>,
        targets: ArrayView1<f64>,
        grid: &SupportGrid,
    ) -> Result<()> {
        let b = grid.b();
        if features.ncols() != b {
            return Err(DirectError::shape("feature columns", b, features.ncols()));
        }
        if features.nrows() != targets.len() {
            return Err(DirectError::shape(
                "feature/target rows",
                features.nrows(),
                targets.len(),
            ));
        }
        let n = features.nrows();
        let mut row = 0;
        while row < n {
            let end = (row + PRECOMPUTE_CHUNK).min(n);
            let phi = features.slice(ndarray::s![row..end, ..]);
            let y = targets.slice(ndarray::s![row..end]);
            self.yty += y.dot(&y);
            self.phity += &phi.t().dot(&y);
            self.phitphi += &phi.t().dot(&phi);
            row = end;
        }
        self.n += n;
        self.refresh_h(grid);
        Ok(())
    }

    /// Rebuild `H` from the current grid and `diag(ΦᵀΦ)`.
    pub fn refresh_h(&mut self, grid: &SupportGrid) {
        let (m, b) = (grid.m_bar(), grid.b());
        let mut h = Array2::zeros((m, b));
        for j in 0..b {
            let col_sq = self.phitphi[(j, j)];
            for (k, &w) in grid.row(j).iter().enumerate() {
                h[(k, j)] = w * w * col_sq;
            }
        }
        self.h_mat = h;
    }

    pub fn b(&self) -> usize {
        self.phity.len()
    }
}

/// Residual sum of squares at one weight hypothesis, from the statistics:
/// `yᵀy − 2 wᵀ(Φᵀy) + wᵀ(ΦᵀΦ)w`.
pub fn sse_at(stats: &GlmSuffStats, w: &[f64]) -> f64 {
    let mut quad = 0.0;
    let b = stats.b();
    for j in 0..b {
        let mut acc = 0.0;
        for k in 0..b {
            acc += stats.phitphi[(j, k)] * w[k];
        }
        quad += w[j] * acc;
    }
    let lin: f64 = w.iter().zip(stats.phity.iter()).map(|(&x, &y)| x * y).sum();
    stats.yty - 2.0 * lin + quad
}

/// Gaussian log likelihood of the whole dataset at one hypothesis.
pub fn log_lik_at(stats: &GlmSuffStats, w: &[f64], sigma2: f64) -> f64 {
    let n = stats.n as f64;
    -0.5 * n * (LN_2PI + sigma2.ln()) - 0.5 * sse_at(stats, w) / sigma2
}

/// Discrete prior and variational distribution over the Gaussian noise
/// variance, on its own positive grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma2: Vec<f64>,
    log_sigma2: Vec<f64>,
    inv_sigma2: Vec<f64>,
    p_probs: Vec<f64>,
    p_log_probs: Vec<f64>,
    q_logits: Vec<f64>,
    q_probs: Vec<f64>,
    q_log_probs: Vec<f64>,
}

impl NoiseModel {
    pub fn new(sigma2: Vec<f64>, prior_probs: Vec<f64>, q_logits: Vec<f64>) -> Result<Self> {
        if sigma2.len() < 2 {
            return Err(DirectError::Domain("noise grid needs at least two levels".into()));
        }
        for w in sigma2.windows(2) {
            if !(w[0] > 0.0 && w[0] < w[1]) {
                return Err(DirectError::Domain(
                    "noise grid must be strictly increasing and positive".into(),
                ));
            }
        }
        if prior_probs.len() != sigma2.len() || q_logits.len() != sigma2.len() {
            return Err(DirectError::shape("noise model lengths", sigma2.len(), prior_probs.len()));
        }
        let psum: f64 = prior_probs.iter().sum();
        if prior_probs.iter().any(|&p| p <= 0.0) || (psum - 1.0).abs() > 1e-9 {
            return Err(DirectError::Domain("noise prior must be positive and sum to 1".into()));
        }
        let log_sigma2 = sigma2.iter().map(|&s| s.ln()).collect();
        let inv_sigma2 = sigma2.iter().map(|&s| 1.0 / s).collect();
        let p_log_probs = prior_probs.iter().map(|&p| p.ln()).collect();
        let q_probs = softmax(&q_logits);
        let q_log_probs = crate::numeric::log_softmax(&q_logits);
        Ok(NoiseModel {
            sigma2,
            log_sigma2,
            inv_sigma2,
            p_probs: prior_probs,
            p_log_probs,
            q_logits,
            q_probs,
            q_log_probs,
        })
    }

    /// Log-uniform σ² grid spanning `[center/100, center·100]` with a
    /// uniform prior and `q` initialized to the prior.
    pub fn log_uniform(sigma2_center: f64, m_sigma: usize) -> Result<Self> {
        if sigma2_center <= 0.0 || !sigma2_center.is_finite() {
            return Err(DirectError::Domain(format!(
                "noise grid center must be positive, got {sigma2_center}"
            )));
        }
        if m_sigma < 2 {
            return Err(DirectError::Domain("noise grid needs at least two levels".into()));
        }
        let lo = (sigma2_center / 100.0).ln();
        let hi = (sigma2_center * 100.0).ln();
        let grid: Vec<f64> = (0..m_sigma)
            .map(|k| (lo + (hi - lo) * k as f64 / (m_sigma - 1) as f64).exp())
            .collect();
        let prior = vec![1.0 / m_sigma as f64; m_sigma];
        NoiseModel::new(grid, prior, vec![0.0; m_sigma])
    }

    /// Same grid and prior, new variational logits.
    pub fn with_q_logits(&self, q_logits: Vec<f64>) -> Result<Self> {
        NoiseModel::new(self.sigma2.clone(), self.p_probs.clone(), q_logits)
    }

    pub fn m_sigma(&self) -> usize {
        self.sigma2.len()
    }

    pub fn sigma2_values(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn prior_probs(&self) -> &[f64] {
        &self.p_probs
    }

    pub fn q_logits(&self) -> &[f64] {
        &self.q_logits
    }

    pub fn q_probs(&self) -> &[f64] {
        &self.q_probs
    }

    pub fn q_log_probs(&self) -> &[f64] {
        &self.q_log_probs
    }

    /// `E_q[σ²]`.
    pub fn expected_sigma2(&self) -> f64 {
        dot(&self.q_probs, &self.sigma2)
    }

    /// `E_q[σ⁻²]`.
    pub fn expected_inv_sigma2(&self) -> f64 {
        dot(&self.q_probs, &self.inv_sigma2)
    }

    /// `E_q[log σ²]`.
    pub fn expected_log_sigma2(&self) -> f64 {
        dot(&self.q_probs, &self.log_sigma2)
    }

    /// `q_σᵀ log p_σ − q_σᵀ log q_σ` (the noise part of the KL).
    pub fn kl_terms(&self) -> f64 {
        let cross = dot(&self.q_probs, &self.p_log_probs);
        let neg_entropy = dot(&self.q_probs, &self.q_log_probs);
        cross - neg_entropy
    }

    /// Inverse-CDF draw of a σ² level index.
    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (k, &p) in self.q_probs.iter().enumerate() {
            cum += p;
            if cum > u {
                return k;
            }
        }
        self.q_probs.len() - 1
    }
}

/// Assembled regression model: grid, posterior, prior, noise, statistics.
/// The immutable pieces are shared, so cloning a model to swap in new
/// variational parameters costs only the logit tables.
#[derive(Debug, Clone)]
pub struct GlmModel {
    pub grid: Arc<SupportGrid>,
    pub q: VariationalDist,
    pub prior: Arc<VariationalDist>,
    pub noise: NoiseModel,
    pub stats: Arc<GlmSuffStats>,
}

impl GlmModel {
    pub fn validate(&self) -> Result<()> {
        let (b, m) = (self.grid.b(), self.grid.m_bar());
        if self.stats.b() != b {
            return Err(DirectError::shape("stats columns vs grid", b, self.stats.b()));
        }
        for d in [&self.q, &self.prior] {
            if d.b() != b || d.m_bar() != m {
                return Err(DirectError::shape(
                    "distribution vs grid",
                    format!("{b}x{m}"),
                    format!("{}x{}", d.b(), d.m_bar()),
                ));
            }
        }
        Ok(())
    }

    /// Posterior mean weight per variable: `s_j = q_jᵀ w̄_j`
    /// (mixture-weighted for a mixture posterior).
    pub fn posterior_mean_weights(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.grid.b()];
        for (alpha, comp) in self.q.weighted_components() {
            for (j, row) in comp.probs().iter().enumerate() {
                s[j] += alpha * dot(row, self.grid.row(j));
            }
        }
        s
    }
}

/// Per-component likelihood bracket
/// `E = yᵀy − 2 sᵀ(Φᵀy) + sᵀ(ΦᵀΦ)s − diag(ΦᵀΦ)ᵀs² + Σ_j q_jᵀ h_j`,
/// plus the pieces its gradient reuses.
struct Bracket {
    e: f64,
    s: Vec<f64>,
    /// `(ΦᵀΦ) s`
    ps: Array1<f64>,
}

fn bracket(stats: &GlmSuffStats, grid: &SupportGrid, comp: &MeanFieldDist) -> Bracket {
    let b = grid.b();
    let mut s = vec![0.0; b];
    for (j, row) in comp.probs().iter().enumerate() {
        s[j] = dot(row, grid.row(j));
    }
    let s_arr = Array1::from_vec(s.clone());
    let ps = stats.phitphi.dot(&s_arr);
    let mut e = stats.yty;
    for j in 0..b {
        e += -2.0 * s[j] * stats.phity[j] + s[j] * ps[j] - stats.phitphi[(j, j)] * s[j] * s[j];
        for (k, &p) in comp.probs()[j].iter().enumerate() {
            e += p * stats.h_mat[(k, j)];
        }
    }
    Bracket { e, s, ps }
}

use crate::variational::{prior_cross_dprobs as prior_dprobs, prior_cross_term as prior_term};

/// Exact ELBO for a mean-field posterior.
pub fn elbo(model: &GlmModel) -> Result<f64> {
    model.validate()?;
    let q = match &model.q {
        VariationalDist::MeanField(q) => q,
        VariationalDist::Mixture(_) => {
            return Err(DirectError::Unsupported(
                "mixture posterior: use mixture_elbo_bound or mixture_elbo_sgd".into(),
            ))
        }
    };
    let br = bracket(&model.stats, &model.grid, q);
    let n = model.stats.n as f64;
    let ll = -0.5 * n * (LN_2PI + model.noise.expected_log_sigma2())
        - 0.5 * model.noise.expected_inv_sigma2() * br.e;
    Ok(ll + prior_term(q, &model.prior)? + q.entropy() + model.noise.kl_terms())
}

/// Gradient of [`elbo`] w.r.t. every logit.
#[derive(Debug, Clone)]
pub struct GlmGrad {
    pub weight_rows: Vec<Vec<f64>>,
    pub noise_row: Vec<f64>,
}

/// Exact ELBO and its gradient for a mean-field posterior.
pub fn elbo_grad(model: &GlmModel) -> Result<(f64, GlmGrad)> {
    model.validate()?;
    let q = match &model.q {
        VariationalDist::MeanField(q) => q,
        VariationalDist::Mixture(_) => {
            return Err(DirectError::Unsupported(
                "mixture posterior: use mixture_elbo_bound_grad or mixture_elbo_sgd".into(),
            ))
        }
    };
    let br = bracket(&model.stats, &model.grid, q);
    let n = model.stats.n as f64;
    let a = model.noise.expected_inv_sigma2();
    let value = -0.5 * n * (LN_2PI + model.noise.expected_log_sigma2()) - 0.5 * a * br.e
        + prior_term(q, &model.prior)?
        + q.entropy()
        + model.noise.kl_terms();

    let p_dprobs = prior_dprobs(&model.prior);
    let mut grad = GlmGrad {
        weight_rows: vec![vec![0.0; model.grid.m_bar()]; model.grid.b()],
        noise_row: vec![0.0; model.noise.m_sigma()],
    };
    accumulate_weight_grad(model, q, &br, a, &p_dprobs, None, &mut grad.weight_rows);
    accumulate_noise_grad(model, br.e, &mut grad.noise_row);
    Ok((value, grad))
}

/// Weight-row gradient shared by the mean-field and mixture paths:
/// likelihood bracket and prior terms in probability space, softmax pullback,
/// accumulated into `out`. `mixture_weight = None` is the mean-field case
/// (entropy folded in); `Some(α_i)` scales a mixture component whose entropy
/// is handled elsewhere.
fn accumulate_weight_grad(
    model: &GlmModel,
    comp: &MeanFieldDist,
    br: &Bracket,
    a: f64,
    p_dprobs: &[Vec<f64>],
    mixture_weight: Option<f64>,
    out: &mut [Vec<f64>],
) {
    let m = model.grid.m_bar();
    let (scale, with_entropy) = match mixture_weight {
        None => (1.0, true),
        Some(alpha) => (alpha, false),
    };
    let mut dprobs = vec![0.0; m];
    let mut logit_row = vec![0.0; m];
    for j in 0..model.grid.b() {
        let de_ds = -2.0 * model.stats.phity[j] + 2.0 * br.ps[j]
            - 2.0 * model.stats.phitphi[(j, j)] * br.s[j];
        for k in 0..m {
            let w = model.grid.row(j)[k];
            let mut g = -0.5 * a * (de_ds * w + model.stats.h_mat[(k, j)]) + p_dprobs[j][k];
            if with_entropy {
                g += -comp.log_probs()[j][k] - 1.0;
            }
            dprobs[k] = g;
        }
        logit_row.iter_mut().for_each(|x| *x = 0.0);
        softmax_backprop(&comp.probs()[j], &dprobs, &mut logit_row);
        for (o, &g) in out[j].iter_mut().zip(&logit_row) {
            *o += scale * g;
        }
    }
}

/// Noise-row gradient against a (possibly α-mixed) bracket value.
fn accumulate_noise_grad(model: &GlmModel, e: f64, out: &mut [f64]) {
    let n = model.stats.n as f64;
    let m_sigma = model.noise.m_sigma();
    let mut dnoise = vec![0.0; m_sigma];
    for k in 0..m_sigma {
        dnoise[k] = -0.5 * n * model.noise.log_sigma2[k] - 0.5 * model.noise.inv_sigma2[k] * e
            + model.noise.p_log_probs[k]
            - model.noise.q_log_probs[k]
            - 1.0;
    }
    softmax_backprop(&model.noise.q_probs, &dnoise, out);
}

/// Gradient of the mixture objectives w.r.t. all logits.
#[derive(Debug, Clone)]
pub struct GlmMixtureGrad {
    pub q: MixtureGrad,
    pub noise_row: Vec<f64>,
    /// Present only for the deterministic Taylor-bound objective.
    pub anchor: Option<MeanFieldGrad>,
}

/// Deterministic ELBO lower bound for a mixture posterior: exact likelihood
/// and prior terms (both linear in `q`) plus the Taylor entropy lower bound
/// anchored at `anchor`.
pub fn mixture_elbo_bound(model: &GlmModel, anchor: &EntropyAnchor) -> Result<f64> {
    let (value, _) = mixture_bound_internal(model, anchor, false)?;
    Ok(value)
}

/// [`mixture_elbo_bound`] and its gradient (mixture, noise, anchor logits).
pub fn mixture_elbo_bound_grad(
    model: &GlmModel,
    anchor: &EntropyAnchor,
) -> Result<(f64, GlmMixtureGrad)> {
    let (value, grad) = mixture_bound_internal(model, anchor, true)?;
    Ok((value, grad.expect("gradient requested")))
}

/// Deterministic pieces shared by both mixture objectives.
struct MixturePieces {
    brackets: Vec<Bracket>,
    priors: Vec<f64>,
    e_mix: f64,
    prior_mix: f64,
    a: f64,
}

fn mixture_pieces(model: &GlmModel, q: &crate::variational::MixtureDist) -> Result<MixturePieces> {
    let a = model.noise.expected_inv_sigma2();
    let brackets: Vec<Bracket> = q
        .components()
        .iter()
        .map(|c| bracket(&model.stats, &model.grid, c))
        .collect();
    let priors: Vec<f64> = q
        .components()
        .iter()
        .map(|c| prior_term(c, &model.prior))
        .collect::<Result<_>>()?;
    let e_mix = q
        .weights()
        .iter()
        .zip(&brackets)
        .map(|(&al, br)| al * br.e)
        .sum();
    let prior_mix = q.weights().iter().zip(&priors).map(|(&al, p)| al * p).sum();
    Ok(MixturePieces {
        brackets,
        priors,
        e_mix,
        prior_mix,
        a,
    })
}

fn mixture_deterministic_grad(
    model: &GlmModel,
    q: &crate::variational::MixtureDist,
    pieces: &MixturePieces,
) -> GlmMixtureGrad {
    let p_dprobs = prior_dprobs(&model.prior);
    let (r, b, m) = (q.r(), q.b(), q.m_bar());
    let mut grad = GlmMixtureGrad {
        q: MixtureGrad::zeros(r, b, m),
        noise_row: vec![0.0; model.noise.m_sigma()],
        anchor: None,
    };
    for (i, comp) in q.components().iter().enumerate() {
        accumulate_weight_grad(
            model,
            comp,
            &pieces.brackets[i],
            pieces.a,
            &p_dprobs,
            Some(q.weights()[i]),
            &mut grad.q.components[i].rows,
        );
    }
    let dalpha: Vec<f64> = pieces
        .brackets
        .iter()
        .zip(&pieces.priors)
        .map(|(br, &p)| -0.5 * pieces.a * br.e + p)
        .collect();
    softmax_backprop(q.weights(), &dalpha, &mut grad.q.mixture_logits);
    accumulate_noise_grad(model, pieces.e_mix, &mut grad.noise_row);
    grad
}

fn require_mixture(model: &GlmModel) -> Result<&crate::variational::MixtureDist> {
    match &model.q {
        VariationalDist::Mixture(q) => Ok(q),
        VariationalDist::MeanField(_) => Err(DirectError::Unsupported(
            "mean-field posterior: use elbo / elbo_grad".into(),
        )),
    }
}

fn mixture_bound_internal(
    model: &GlmModel,
    anchor: &EntropyAnchor,
    want_grad: bool,
) -> Result<(f64, Option<GlmMixtureGrad>)> {
    model.validate()?;
    let q = require_mixture(model)?;
    let n = model.stats.n as f64;
    let pieces = mixture_pieces(model, q)?;

    if !want_grad {
        let entropy_bound = crate::variational::mixture_entropy_lower_bound(q, anchor)?;
        let value = -0.5 * n * (LN_2PI + model.noise.expected_log_sigma2())
            - 0.5 * pieces.a * pieces.e_mix
            + pieces.prior_mix
            + entropy_bound
            + model.noise.kl_terms();
        return Ok((value, None));
    }

    let (entropy_bound, ent_grad) = mixture_entropy_lower_bound_grad(q, anchor)?;
    let value = -0.5 * n * (LN_2PI + model.noise.expected_log_sigma2())
        - 0.5 * pieces.a * pieces.e_mix
        + pieces.prior_mix
        + entropy_bound
        + model.noise.kl_terms();

    let mut grad = mixture_deterministic_grad(model, q, &pieces);
    for (i, comp_grad) in ent_grad.q.components.iter().enumerate() {
        for (row, ent_row) in grad.q.components[i].rows.iter_mut().zip(&comp_grad.rows) {
            for (g, &e) in row.iter_mut().zip(ent_row) {
                *g += e;
            }
        }
    }
    for (g, &e) in grad
        .q
        .mixture_logits
        .iter_mut()
        .zip(&ent_grad.q.mixture_logits)
    {
        *g += e;
    }
    grad.anchor = Some(ent_grad.anchor);
    Ok((value, Some(grad)))
}

/// Stochastic mixture objective: exact likelihood/prior/noise terms plus the
/// sampled entropy surrogate. Returns an unbiased ELBO estimate and an
/// unbiased gradient, both deterministic given the generator state.
pub fn mixture_elbo_sgd(
    model: &GlmModel,
    t: usize,
    rng: &mut impl Rng,
) -> Result<(f64, GlmMixtureGrad)> {
    model.validate()?;
    let q = require_mixture(model)?;
    let n = model.stats.n as f64;
    let pieces = mixture_pieces(model, q)?;
    let surrogate = crate::variational::entropy_surrogate(q, t, rng)?;

    let value = -0.5 * n * (LN_2PI + model.noise.expected_log_sigma2())
        - 0.5 * pieces.a * pieces.e_mix
        + pieces.prior_mix
        + surrogate.entropy_estimate
        + model.noise.kl_terms();

    let mut grad = mixture_deterministic_grad(model, q, &pieces);
    // The ELBO carries −qᵀ log q; the surrogate gradient estimates +∂(qᵀ log q).
    for (i, comp_grad) in surrogate.grad.components.iter().enumerate() {
        for (row, sur_row) in grad.q.components[i].rows.iter_mut().zip(&comp_grad.rows) {
            for (g, &s) in row.iter_mut().zip(sur_row) {
                *g -= s;
            }
        }
    }
    for (g, &s) in grad
        .q
        .mixture_logits
        .iter_mut()
        .zip(&surrogate.grad.mixture_logits)
    {
        *g -= s;
    }
    Ok((value, grad))
}

/// Exact predictive posterior mean `Φ* s` for one test row; `O(b)`.
pub fn predict_mean(model: &GlmModel, test_features: &[f64]) -> Result<f64> {
    if test_features.len() != model.grid.b() {
        return Err(DirectError::shape(
            "test feature length",
            model.grid.b(),
            test_features.len(),
        ));
    }
    let s = model.posterior_mean_weights();
    Ok(dot(test_features, &s))
}

/// Predictive means for a batch of rows, reusing one `s`.
pub fn predict_mean_batch(model: &GlmModel, test_features: ArrayView2<f64>) -> Result<Array1<f64>> {
    if test_features.ncols() != model.grid.b() {
        return Err(DirectError::shape(
            "test feature columns",
            model.grid.b(),
            test_features.ncols(),
        ));
    }
    let s = Array1::from_vec(model.posterior_mean_weights());
    Ok(test_features.dot(&s))
}

/// Exact predictive variance under mean-field independence:
/// `E_qσ[σ²] + Σ_j φ*_j² (q_jᵀ w̄_j² − s_j²)`.
pub fn predict_variance(model: &GlmModel, test_features: &[f64]) -> Result<f64> {
    let q = match &model.q {
        VariationalDist::MeanField(q) => q,
        VariationalDist::Mixture(_) => {
            return Err(DirectError::Unsupported(
                "predictive variance needs a mean-field posterior; sample instead".into(),
            ))
        }
    };
    if test_features.len() != model.grid.b() {
        return Err(DirectError::shape(
            "test feature length",
            model.grid.b(),
            test_features.len(),
        ));
    }
    let mut var = model.noise.expected_sigma2();
    for (j, &phi) in test_features.iter().enumerate() {
        let row = model.grid.row(j);
        let probs = &q.probs()[j];
        let mean: f64 = dot(probs, row);
        let second: f64 = probs.iter().zip(row).map(|(&p, &w)| p * w * w).sum();
        var += phi * phi * (second - mean * mean);
    }
    Ok(var)
}
