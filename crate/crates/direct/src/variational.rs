//! Categorical prior/variational distributions over the support grid.
//!
//! A mean-field distribution stores one unconstrained logit row per latent
//! variable; probabilities are the row softmax, so rows always sum to one and
//! entries stay strictly inside `(0,1)`. A mixture distribution is a convex
//! combination of `r` mean-field components with softmax mixture weights.
//! Logit rows carry a one-dimensional gauge freedom (adding a constant to a
//! row changes nothing); no pinning is applied.
//!
//! This module also houses the mixture entropy lower bound (Taylor expansion
//! of `log q` about a factorized anchor), the mixture-prior cross-entropy
//! lower bound, the sampled surrogate whose gradient is an unbiased estimate
//! of `∂(qᵀ log q)/∂θ`, and bit-packed posterior samples.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;

use crate::error::{DirectError, Result};
use crate::kron::{KronSumVec, KronTerm};
use crate::numeric::{logsumexp, softmax_backprop};

/// The discrete hypothesis lattice: per-variable value rows `w̄_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportGrid {
    rows: Vec<Vec<f64>>,
}

impl SupportGrid {
    /// Build from explicit rows. Every row must be strictly increasing, all
    /// rows the same length, and at least two levels per variable.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(DirectError::Domain("support grid needs at least one row".into()));
        }
        let m = rows[0].len();
        if m < 2 {
            return Err(DirectError::Domain(
                "support grid needs at least two levels per variable".into(),
            ));
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(DirectError::shape("support grid row length", m, row.len()));
            }
            for w in row.windows(2) {
                if !(w[0] < w[1]) || !w[0].is_finite() || !w[1].is_finite() {
                    return Err(DirectError::Domain(format!(
                        "support grid row {j} is not strictly increasing and finite"
                    )));
                }
            }
        }
        Ok(SupportGrid { rows })
    }

    /// `b` copies of the same value row.
    pub fn uniform(b: usize, row: Vec<f64>) -> Result<Self> {
        SupportGrid::new(vec![row; b])
    }

    pub fn b(&self) -> usize {
        self.rows.len()
    }

    pub fn m_bar(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Index of the exact-zero level in row `j`, if present.
    pub fn zero_index(&self, j: usize) -> Option<usize> {
        self.rows[j].iter().position(|&w| w == 0.0)
    }

    /// Bits needed to index one level: `ceil(log2(m̄))`, at least 1.
    pub fn index_bit_width(&self) -> u8 {
        let m = self.m_bar();
        let mut bits = 1u8;
        while (1usize << bits) < m {
            bits += 1;
        }
        bits
    }
}

fn softmax_table(logits: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut log_probs = Vec::with_capacity(logits.len());
    for row in logits {
        let lse = logsumexp(row);
        let lp: Vec<f64> = row.iter().map(|&x| x - lse).collect();
        probs.push(lp.iter().map(|&x| x.exp()).collect());
        log_probs.push(lp);
    }
    (probs, log_probs)
}

fn check_rect(logits: &[Vec<f64>], what: &'static str) -> Result<()> {
    if logits.is_empty() || logits[0].is_empty() {
        return Err(DirectError::Domain(format!("{what}: empty logits")));
    }
    let m = logits[0].len();
    for row in logits {
        if row.len() != m {
            return Err(DirectError::shape(what, m, row.len()));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(DirectError::Domain(format!("{what}: non-finite logit")));
        }
    }
    Ok(())
}

/// Fully factorized categorical distribution: one softmax row per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldDist {
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    log_probs: Vec<Vec<f64>>,
}

impl MeanFieldDist {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        check_rect(&logits, "mean-field logits")?;
        let (probs, log_probs) = softmax_table(&logits);
        Ok(MeanFieldDist {
            logits,
            probs,
            log_probs,
        })
    }

    /// Uniform distribution (all-zero logits).
    pub fn uniform(b: usize, m_bar: usize) -> Self {
        MeanFieldDist::from_logits(vec![vec![0.0; m_bar]; b]).expect("uniform logits are valid")
    }

    pub fn b(&self) -> usize {
        self.logits.len()
    }

    pub fn m_bar(&self) -> usize {
        self.logits[0].len()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[Vec<f64>] {
        &self.log_probs
    }

    pub fn prob_row(&self, j: usize) -> &[f64] {
        &self.probs[j]
    }

    /// Joint pmf as a single Kronecker-product term.
    pub fn prob_kron(&self) -> KronSumVec {
        let dims = vec![self.m_bar(); self.b()];
        let mut t = KronTerm::ones(1.0);
        for (j, row) in self.probs.iter().enumerate() {
            t.set_factor(j, row.clone());
        }
        KronSumVec::from_terms(dims, vec![t]).expect("factor shapes match dims")
    }

    /// Exact joint entropy `−Σ_j q_jᵀ log q_j` (≥ 0).
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, lp)| p.iter().zip(lp).map(|(&x, &l)| x * l).sum::<f64>())
            .sum::<f64>()
    }

    /// `Σ_j q_jᵀ log p_j` against another factorized distribution.
    pub fn cross_entropy(&self, other: &MeanFieldDist) -> Result<f64> {
        if self.b() != other.b() || self.m_bar() != other.m_bar() {
            return Err(DirectError::shape(
                "cross entropy shapes",
                format!("{}x{}", self.b(), self.m_bar()),
                format!("{}x{}", other.b(), other.m_bar()),
            ));
        }
        Ok(self
            .probs
            .iter()
            .zip(other.log_probs())
            .map(|(q, lp)| q.iter().zip(lp).map(|(&x, &l)| x * l).sum::<f64>())
            .sum())
    }

    /// `log q(s)` at one lattice point.
    pub fn log_pmf(&self, indices: &[u16]) -> Result<f64> {
        if indices.len() != self.b() {
            return Err(DirectError::shape("log_pmf index count", self.b(), indices.len()));
        }
        let mut total = 0.0;
        for (j, &idx) in indices.iter().enumerate() {
            let idx = idx as usize;
            if idx >= self.m_bar() {
                return Err(DirectError::Domain(format!(
                    "index {idx} out of range for m̄ = {}",
                    self.m_bar()
                )));
            }
            total += self.log_probs[j][idx];
        }
        Ok(total)
    }

    /// One inverse-CDF draw per variable: the smallest index whose cumulative
    /// probability strictly exceeds the uniform draw.
    pub fn sample_indices(&self, rng: &mut impl Rng) -> Vec<u16> {
        self.probs
            .iter()
            .map(|row| {
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                for (k, &p) in row.iter().enumerate() {
                    cum += p;
                    if cum > u {
                        return k as u16;
                    }
                }
                (row.len() - 1) as u16
            })
            .collect()
    }
}

/// Convex combination of `r` mean-field components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDist {
    mixture_logits: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<MeanFieldDist>,
}

impl MixtureDist {
    pub fn new(mixture_logits: Vec<f64>, components: Vec<MeanFieldDist>) -> Result<Self> {
        if components.is_empty() || mixture_logits.len() != components.len() {
            return Err(DirectError::shape(
                "mixture component count",
                components.len(),
                mixture_logits.len(),
            ));
        }
        let (b, m) = (components[0].b(), components[0].m_bar());
        for c in &components {
            if c.b() != b || c.m_bar() != m {
                return Err(DirectError::shape(
                    "mixture component shapes",
                    format!("{b}x{m}"),
                    format!("{}x{}", c.b(), c.m_bar()),
                ));
            }
        }
        let lse = logsumexp(&mixture_logits);
        let log_weights: Vec<f64> = mixture_logits.iter().map(|&x| x - lse).collect();
        let weights: Vec<f64> = log_weights.iter().map(|&x| x.exp()).collect();
        Ok(MixtureDist {
            mixture_logits,
            weights,
            log_weights,
            components,
        })
    }

    /// Components copied from a mean-field solution with logit noise, equal
    /// mixture weights. The usual mixture initialization.
    pub fn perturbed_from(
        mean_field: &MeanFieldDist,
        r: usize,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut components = Vec::with_capacity(r);
        for _ in 0..r {
            let logits: Vec<Vec<f64>> = mean_field
                .logits()
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&x| x + noise * rng.gen_range(-1.0..1.0))
                        .collect()
                })
                .collect();
            components.push(MeanFieldDist::from_logits(logits)?);
        }
        MixtureDist::new(vec![0.0; r], components)
    }

    pub fn r(&self) -> usize {
        self.components.len()
    }

    pub fn b(&self) -> usize {
        self.components[0].b()
    }

    pub fn m_bar(&self) -> usize {
        self.components[0].m_bar()
    }

    pub fn mixture_logits(&self) -> &[f64] {
        &self.mixture_logits
    }

    /// Mixture probabilities `α` (softmax of the mixture logits).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[MeanFieldDist] {
        &self.components
    }

    /// Joint pmf as `r` Kronecker terms, term `i` weighted by `α_i`.
    pub fn prob_kron(&self) -> KronSumVec {
        let dims = vec![self.m_bar(); self.b()];
        let mut v = KronSumVec::zero(dims);
        for (alpha, comp) in self.weights.iter().zip(&self.components) {
            let mut t = KronTerm::ones(*alpha);
            for (j, row) in comp.probs().iter().enumerate() {
                t.set_factor(j, row.clone());
            }
            v.push_term(t).expect("component shapes match dims");
        }
        v
    }

    /// `log q(s)` via LogSumExp over the per-component factorized log pmfs.
    pub fn log_pmf(&self, indices: &[u16]) -> Result<f64> {
        let mut per_comp = Vec::with_capacity(self.r());
        for (lw, comp) in self.log_weights.iter().zip(&self.components) {
            per_comp.push(lw + comp.log_pmf(indices)?);
        }
        Ok(logsumexp(&per_comp))
    }

    /// Component draw from `α`, then per-variable inverse-CDF draws.
    pub fn sample_indices(&self, rng: &mut impl Rng) -> Vec<u16> {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut comp = self.r() - 1;
        for (i, &a) in self.weights.iter().enumerate() {
            cum += a;
            if cum > u {
                comp = i;
                break;
            }
        }
        self.components[comp].sample_indices(rng)
    }
}

/// Either variational family, where an operation accepts both.
#[derive(Debug, Clone, PartialEq)]
pub enum VariationalDist {
    MeanField(MeanFieldDist),
    Mixture(MixtureDist),
}

impl VariationalDist {
    pub fn b(&self) -> usize {
        match self {
            VariationalDist::MeanField(d) => d.b(),
            VariationalDist::Mixture(d) => d.b(),
        }
    }

    pub fn m_bar(&self) -> usize {
        match self {
            VariationalDist::MeanField(d) => d.m_bar(),
            VariationalDist::Mixture(d) => d.m_bar(),
        }
    }

    /// View as weighted mean-field components: a mean-field distribution is
    /// the single component with weight one.
    pub fn weighted_components(&self) -> Vec<(f64, &MeanFieldDist)> {
        match self {
            VariationalDist::MeanField(d) => vec![(1.0, d)],
            VariationalDist::Mixture(d) => {
                d.weights().iter().copied().zip(d.components()).collect()
            }
        }
    }

    pub fn log_pmf(&self, indices: &[u16]) -> Result<f64> {
        match self {
            VariationalDist::MeanField(d) => d.log_pmf(indices),
            VariationalDist::Mixture(d) => d.log_pmf(indices),
        }
    }

    pub fn sample_indices(&self, rng: &mut impl Rng) -> Vec<u16> {
        match self {
            VariationalDist::MeanField(d) => d.sample_indices(rng),
            VariationalDist::Mixture(d) => d.sample_indices(rng),
        }
    }
}

/// Center of the Taylor expansion in the mixture entropy lower bound:
/// a factorized distribution parameterized exactly like a mean-field one.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyAnchor {
    dist: MeanFieldDist,
}

impl EntropyAnchor {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        Ok(EntropyAnchor {
            dist: MeanFieldDist::from_logits(logits)?,
        })
    }

    /// Anchor at a mean-field distribution (the usual initialization).
    pub fn at(dist: &MeanFieldDist) -> Self {
        EntropyAnchor { dist: dist.clone() }
    }

    pub fn b(&self) -> usize {
        self.dist.b()
    }

    pub fn m_bar(&self) -> usize {
        self.dist.m_bar()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        self.dist.logits()
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        self.dist.probs()
    }

    pub fn log_probs(&self) -> &[Vec<f64>] {
        self.dist.log_probs()
    }
}

/// Gradient with respect to a mean-field distribution's logit rows.
#[derive(Debug, Clone)]
pub struct MeanFieldGrad {
    pub rows: Vec<Vec<f64>>,
}

impl MeanFieldGrad {
    pub fn zeros(b: usize, m_bar: usize) -> Self {
        MeanFieldGrad {
            rows: vec![vec![0.0; m_bar]; b],
        }
    }
}

/// Gradient with respect to a mixture's logits (mixture row + components).
#[derive(Debug, Clone)]
pub struct MixtureGrad {
    pub mixture_logits: Vec<f64>,
    pub components: Vec<MeanFieldGrad>,
}

impl MixtureGrad {
    pub fn zeros(r: usize, b: usize, m_bar: usize) -> Self {
        MixtureGrad {
            mixture_logits: vec![0.0; r],
            components: (0..r).map(|_| MeanFieldGrad::zeros(b, m_bar)).collect(),
        }
    }
}

/// Gradient of the mixture entropy lower bound: mixture parameters plus the
/// anchor's logits (the anchor is maximized jointly).
#[derive(Debug, Clone)]
pub struct EntropyBoundGrad {
    pub q: MixtureGrad,
    pub anchor: MeanFieldGrad,
}

fn check_anchor_shape(q: &MixtureDist, anchor: &EntropyAnchor) -> Result<()> {
    if q.b() != anchor.b() || q.m_bar() != anchor.m_bar() {
        return Err(DirectError::shape(
            "entropy anchor shape",
            format!("{}x{}", q.b(), q.m_bar()),
            format!("{}x{}", anchor.b(), anchor.m_bar()),
        ));
    }
    Ok(())
}

/// Lower bound on the mixture entropy `−qᵀ log q` from a first-order Taylor
/// expansion of `log q` about the factorized anchor:
///
/// `1 − Σ_j α_j ( Σ_i q_i^{(j)}ᵀ log a_i + α_j Π_i q_i^{(j)}ᵀ(q_i^{(j)}/a_i)
///   + 2 Σ_{k>j} α_k Π_i q_i^{(j)}ᵀ(q_i^{(k)}/a_i) )`.
///
/// Products over variables are accumulated in log space. Equals the exact
/// entropy when `r = 1` and the anchor coincides with the single component.
pub fn mixture_entropy_lower_bound(q: &MixtureDist, anchor: &EntropyAnchor) -> Result<f64> {
    Ok(entropy_bound_internal(q, anchor, false)?.0)
}

/// Bound value together with its gradient w.r.t. all mixture and anchor logits.
pub fn mixture_entropy_lower_bound_grad(
    q: &MixtureDist,
    anchor: &EntropyAnchor,
) -> Result<(f64, EntropyBoundGrad)> {
    let (value, grad) = entropy_bound_internal(q, anchor, true)?;
    Ok((value, grad.expect("gradient requested")))
}

fn entropy_bound_internal(
    q: &MixtureDist,
    anchor: &EntropyAnchor,
    want_grad: bool,
) -> Result<(f64, Option<EntropyBoundGrad>)> {
    check_anchor_shape(q, anchor)?;
    let (r, b, m) = (q.r(), q.b(), q.m_bar());
    let alpha = q.weights();
    let a_probs = anchor.probs();
    let a_logs = anchor.log_probs();

    // Per-variable cross moments d[j][k][i] = q_i^{(j)}ᵀ (q_i^{(k)} / a_i),
    // symmetric in (j,k); log-accumulated products P[j][k] = Π_i d[j][k][i].
    let mut d = vec![vec![vec![0.0f64; b]; r]; r];
    let mut log_p = vec![vec![0.0f64; r]; r];
    for j in 0..r {
        for k in j..r {
            let qj = q.components()[j].probs();
            let qk = q.components()[k].probs();
            let mut acc = 0.0;
            for i in 0..b {
                let mut dot = 0.0;
                for c in 0..m {
                    dot += qj[i][c] * qk[i][c] / a_probs[i][c];
                }
                d[j][k][i] = dot;
                d[k][j][i] = dot;
                acc += dot.ln();
            }
            log_p[j][k] = acc;
            log_p[k][j] = acc;
        }
    }
    let p = |j: usize, k: usize| log_p[j][k].exp();

    // S_j = Σ_i q_i^{(j)}ᵀ log a_i
    let mut s = vec![0.0f64; r];
    for j in 0..r {
        let qj = q.components()[j].probs();
        for i in 0..b {
            for c in 0..m {
                s[j] += qj[i][c] * a_logs[i][c];
            }
        }
    }

    let mut value = 1.0;
    for j in 0..r {
        value -= alpha[j] * s[j];
        for k in 0..r {
            value -= alpha[j] * alpha[k] * p(j, k);
        }
    }

    if !want_grad {
        return Ok((value, None));
    }

    let mut grad = EntropyBoundGrad {
        q: MixtureGrad::zeros(r, b, m),
        anchor: MeanFieldGrad::zeros(b, m),
    };

    // Mixture weights: d(value)/dα_j = −S_j − 2 Σ_k α_k P_{jk}.
    let mut dalpha = vec![0.0f64; r];
    for j in 0..r {
        let mut acc = -s[j];
        for k in 0..r {
            acc -= 2.0 * alpha[k] * p(j, k);
        }
        dalpha[j] = acc;
    }
    softmax_backprop(q.weights(), &dalpha, &mut grad.q.mixture_logits);

    // Component rows: probability-space gradient, then softmax pullback.
    for j in 0..r {
        for i in 0..b {
            let mut dprobs = vec![0.0f64; m];
            for c in 0..m {
                let mut acc = -alpha[j] * a_logs[i][c];
                for k in 0..r {
                    let qk = q.components()[k].probs();
                    acc -= 2.0 * alpha[j] * alpha[k] * (log_p[j][k] - d[j][k][i].ln()).exp()
                        * qk[i][c]
                        / a_probs[i][c];
                }
                dprobs[c] = acc;
            }
            softmax_backprop(
                q.components()[j].probs()[i].as_slice(),
                &dprobs,
                &mut grad.q.components[j].rows[i],
            );
        }
    }

    // Anchor rows.
    for i in 0..b {
        let mut dprobs = vec![0.0f64; m];
        for c in 0..m {
            let mut acc = 0.0;
            for j in 0..r {
                let qj = q.components()[j].probs();
                acc -= alpha[j] * qj[i][c] / a_probs[i][c];
                for k in 0..r {
                    let qk = q.components()[k].probs();
                    acc += alpha[j] * alpha[k] * (log_p[j][k] - d[j][k][i].ln()).exp() * qj[i][c]
                        * qk[i][c]
                        / (a_probs[i][c] * a_probs[i][c]);
                }
            }
            dprobs[c] = acc;
        }
        softmax_backprop(&anchor.probs()[i], &dprobs, &mut grad.anchor.rows[i]);
    }

    Ok((value, Some(grad)))
}

/// Jensen lower bound on `qᵀ log p` for a mixture prior and factorized `q`:
/// `Σ_i α_i Σ_j q_jᵀ log p_j^{(i)}`. Tight when all prior components agree.
pub fn mixture_prior_lower_bound(q: &MeanFieldDist, prior: &MixtureDist) -> Result<f64> {
    if q.b() != prior.b() || q.m_bar() != prior.m_bar() {
        return Err(DirectError::shape(
            "mixture prior shapes",
            format!("{}x{}", q.b(), q.m_bar()),
            format!("{}x{}", prior.b(), prior.m_bar()),
        ));
    }
    let mut total = 0.0;
    for (alpha, comp) in prior.weights().iter().zip(prior.components()) {
        total += alpha * q.cross_entropy(comp)?;
    }
    Ok(total)
}

/// Probability-space gradient of [`mixture_prior_lower_bound`] w.r.t. `q`:
/// `Σ_i α_i log p_j^{(i)}[c]` per row entry (softmax pullback left to the
/// caller, who owns the row accumulators).
pub fn mixture_prior_bound_dprobs(prior: &MixtureDist) -> Vec<Vec<f64>> {
    let (b, m) = (prior.b(), prior.m_bar());
    let mut rows = vec![vec![0.0f64; m]; b];
    for (alpha, comp) in prior.weights().iter().zip(prior.components()) {
        for (row, lp) in rows.iter_mut().zip(comp.log_probs()) {
            for (x, &l) in row.iter_mut().zip(lp) {
                *x += alpha * l;
            }
        }
    }
    rows
}

/// `qᵀ log p` of a factorized `q` against either prior family: exact for a
/// factorized prior, the Jensen lower bound for a mixture prior.
pub fn prior_cross_term(q: &MeanFieldDist, prior: &VariationalDist) -> Result<f64> {
    match prior {
        VariationalDist::MeanField(p) => q.cross_entropy(p),
        VariationalDist::Mixture(p) => mixture_prior_lower_bound(q, p),
    }
}

/// Probability-space gradient rows of [`prior_cross_term`] w.r.t. `q`
/// (independent of `q` itself, since the term is linear in `q`).
pub fn prior_cross_dprobs(prior: &VariationalDist) -> Vec<Vec<f64>> {
    match prior {
        VariationalDist::MeanField(p) => p.log_probs().to_vec(),
        VariationalDist::Mixture(p) => mixture_prior_bound_dprobs(p),
    }
}

/// Sampled entropy surrogate and its gradient.
#[derive(Debug, Clone)]
pub struct EntropySurrogate {
    /// `(1/2t) Σ_i (log q(s_i) + 1)²`, samples treated as constants.
    pub surrogate: f64,
    /// `−(1/t) Σ_i log q(s_i)`, an unbiased estimate of the entropy.
    pub entropy_estimate: f64,
    /// Gradient of the surrogate: unbiased for `∂(qᵀ log q)/∂θ`.
    pub grad: MixtureGrad,
}

/// Draw `t` samples from `q` and evaluate the surrogate loss
/// `(1/2t) Σ (log q(s_i)+1)²` whose logit gradient estimates
/// `∂(qᵀ log q)/∂θ` without bias.
pub fn entropy_surrogate_loss(q: &MixtureDist, t: usize, rng: &mut impl Rng) -> Result<f64> {
    Ok(entropy_surrogate(q, t, rng)?.surrogate)
}

/// Surrogate value, entropy estimate, and surrogate gradient in one pass.
pub fn entropy_surrogate(
    q: &MixtureDist,
    t: usize,
    rng: &mut impl Rng,
) -> Result<EntropySurrogate> {
    if t == 0 {
        return Err(DirectError::Domain("sample count must be at least 1".into()));
    }
    let (r, b, m) = (q.r(), q.b(), q.m_bar());
    let mut surrogate = 0.0;
    let mut entropy_estimate = 0.0;
    let mut grad = MixtureGrad::zeros(r, b, m);
    let inv_t = 1.0 / t as f64;

    // Reusable accumulators in probability space per sample.
    let mut dalpha = vec![0.0f64; r];
    for _ in 0..t {
        let s = q.sample_indices(rng);
        // Per-component log joint and responsibilities at s.
        let mut comp_log = Vec::with_capacity(r);
        for (lw, comp) in q.log_weights.iter().zip(q.components()) {
            comp_log.push(lw + comp.log_pmf(&s)?);
        }
        let log_q = logsumexp(&comp_log);
        surrogate += 0.5 * inv_t * (log_q + 1.0) * (log_q + 1.0);
        entropy_estimate -= inv_t * log_q;

        // d surrogate / d log q(s) for this sample.
        let up = inv_t * (log_q + 1.0);
        // Responsibilities β_i = exp(comp_log_i − log_q).
        for i in 0..r {
            let beta = (comp_log[i] - log_q).exp();
            // Mixture weights: ∂ log q / ∂α_i = β_i / α_i (prob space).
            dalpha[i] = up * beta / q.weights()[i];
            // Component rows: ∂ log q / ∂q_j^{(i)}[c] = β_i·[c = s_j]/q_j^{(i)}[s_j].
            let probs = q.components()[i].probs();
            for (j, &sj) in s.iter().enumerate() {
                let sj = sj as usize;
                let mut dprobs = vec![0.0f64; m];
                dprobs[sj] = up * beta / probs[j][sj];
                softmax_backprop(&probs[j], &dprobs, &mut grad.components[i].rows[j]);
            }
        }
        softmax_backprop(q.weights(), &dalpha, &mut grad.mixture_logits);
    }
    Ok(EntropySurrogate {
        surrogate,
        entropy_estimate,
        grad,
    })
}

/// Probability mass the distribution puts on the exact-zero grid level,
/// averaged over variables. Zero when no row has an exact-zero level.
pub fn expected_sparsity(q: &MeanFieldDist, grid: &SupportGrid) -> f64 {
    let b = q.b().min(grid.b());
    let mut total = 0.0;
    for j in 0..b {
        if let Some(k) = grid.zero_index(j) {
            total += q.probs()[j][k];
        }
    }
    total / q.b() as f64
}

/// Mixture-weighted expected sparsity.
pub fn expected_sparsity_var(q: &VariationalDist, grid: &SupportGrid) -> f64 {
    q.weighted_components()
        .iter()
        .map(|(a, c)| a * expected_sparsity(c, grid))
        .sum()
}

/// A posterior draw stored as low-bit integer level indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSample {
    indices: Vec<u16>,
    bit_width: u8,
    grid: Arc<SupportGrid>,
}

const SAMPLE_MAGIC: &[u8; 4] = b"DQSW";
const SAMPLE_VERSION: u8 = 1;

impl QuantizedSample {
    pub fn new(indices: Vec<u16>, grid: Arc<SupportGrid>) -> Result<Self> {
        if indices.len() != grid.b() {
            return Err(DirectError::shape("sample index count", grid.b(), indices.len()));
        }
        let m = grid.m_bar() as u16;
        if indices.iter().any(|&i| i >= m) {
            return Err(DirectError::Domain(format!("sample index out of range (m̄ = {m})")));
        }
        let bit_width = grid.index_bit_width();
        Ok(QuantizedSample {
            indices,
            bit_width,
            grid,
        })
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    /// Exact dequantization: `w_j = w̄_j[index_j]`.
    pub fn dequantize(&self) -> Vec<f64> {
        self.indices
            .iter()
            .enumerate()
            .map(|(j, &i)| self.grid.row(j)[i as usize])
            .collect()
    }

    /// Bytes of bit-packed payload (header excluded).
    pub fn payload_len(&self) -> usize {
        (self.indices.len() * self.bit_width as usize).div_ceil(8)
    }

    /// Serialize as header (magic, version, `b`, `m̄`) + indices bit-packed
    /// LSB-first within bytes.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(SAMPLE_MAGIC)?;
        w.write_all(&[SAMPLE_VERSION])?;
        w.write_all(&(self.indices.len() as u32).to_le_bytes())?;
        w.write_all(&(self.grid.m_bar() as u16).to_le_bytes())?;
        let mut payload = vec![0u8; self.payload_len()];
        let width = self.bit_width as usize;
        for (j, &idx) in self.indices.iter().enumerate() {
            for t in 0..width {
                if (idx >> t) & 1 == 1 {
                    let bit = j * width + t;
                    payload[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        w.write_all(&payload)?;
        Ok(())
    }

    /// Parse a sample previously written by [`write_to`](Self::write_to);
    /// the header must agree with the supplied grid.
    pub fn read_from(r: &mut impl Read, grid: Arc<SupportGrid>) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SAMPLE_MAGIC {
            return Err(DirectError::Data("bad sample magic".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != SAMPLE_VERSION {
            return Err(DirectError::Data(format!("unsupported sample version {}", version[0])));
        }
        let mut b_bytes = [0u8; 4];
        r.read_exact(&mut b_bytes)?;
        let b = u32::from_le_bytes(b_bytes) as usize;
        let mut m_bytes = [0u8; 2];
        r.read_exact(&mut m_bytes)?;
        let m = u16::from_le_bytes(m_bytes) as usize;
        if b != grid.b() || m != grid.m_bar() {
            return Err(DirectError::shape(
                "sample header grid",
                format!("{}x{}", grid.b(), grid.m_bar()),
                format!("{b}x{m}"),
            ));
        }
        let width = grid.index_bit_width() as usize;
        let mut payload = vec![0u8; (b * width).div_ceil(8)];
        r.read_exact(&mut payload)?;
        let mut indices = Vec::with_capacity(b);
        for j in 0..b {
            let mut idx = 0u16;
            for t in 0..width {
                let bit = j * width + t;
                if payload[bit / 8] >> (bit % 8) & 1 == 1 {
                    idx |= 1 << t;
                }
            }
            indices.push(idx);
        }
        QuantizedSample::new(indices, grid)
    }
}

/// Draw `count` i.i.d. quantized posterior samples.
pub fn sample_posterior(
    q: &VariationalDist,
    grid: &Arc<SupportGrid>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<QuantizedSample>> {
    if q.b() != grid.b() || q.m_bar() != grid.m_bar() {
        return Err(DirectError::shape(
            "sampling distribution vs grid",
            format!("{}x{}", grid.b(), grid.m_bar()),
            format!("{}x{}", q.b(), q.m_bar()),
        ));
    }
    (0..count)
        .map(|_| QuantizedSample::new(q.sample_indices(rng), Arc::clone(grid)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_mean_field(b: usize, m: usize, rng: &mut impl Rng) -> MeanFieldDist {
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        MeanFieldDist::from_logits(logits).unwrap()
    }

    fn random_mixture(r: usize, b: usize, m: usize, rng: &mut impl Rng) -> MixtureDist {
        let comps = (0..r).map(|_| random_mean_field(b, m, rng)).collect();
        let ml = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        MixtureDist::new(ml, comps).unwrap()
    }

    /// Every lattice point of a small grid, first variable slowest.
    fn enumerate_states(b: usize, m: usize) -> Vec<Vec<u16>> {
        let total = m.pow(b as u32);
        (0..total)
            .map(|mut i| {
                let mut s = vec![0u16; b];
                for j in (0..b).rev() {
                    s[j] = (i % m) as u16;
                    i /= m;
                }
                s
            })
            .collect()
    }

    fn joint_prob(q: &MixtureDist, s: &[u16]) -> f64 {
        q.weights()
            .iter()
            .zip(q.components())
            .map(|(a, c)| {
                a * s
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| c.probs()[j][k as usize])
                    .product::<f64>()
            })
            .sum()
    }

    #[test]
    fn grid_rejects_non_increasing_rows() {
        assert!(SupportGrid::new(vec![vec![1.0, 0.5]]).is_err());
        assert!(SupportGrid::new(vec![vec![0.5]]).is_err());
        assert!(SupportGrid::new(vec![vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn uniform_entropy_is_b_log_m() {
        let q = MeanFieldDist::uniform(4, 3);
        assert_relative_eq!(q.entropy(), 4.0 * 3f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn near_degenerate_entropy_approaches_zero() {
        let logits = vec![vec![50.0, 0.0, 0.0]; 3];
        let q = MeanFieldDist::from_logits(logits).unwrap();
        assert!(q.entropy() >= 0.0);
        assert!(q.entropy() < 1e-14);
    }

    #[test]
    fn entropy_matches_full_enumeration() {
        let mut rng = seeded_rng(2);
        let q = random_mean_field(3, 2, &mut rng);
        let q_mix = MixtureDist::new(vec![0.0], vec![q.clone()]).unwrap();
        let mut exact = 0.0;
        for s in enumerate_states(3, 2) {
            let p = joint_prob(&q_mix, &s);
            exact -= p * p.ln();
        }
        assert_relative_eq!(q.entropy(), exact, max_relative = 1e-10);
    }

    #[test]
    fn cross_entropy_examples() {
        let q = MeanFieldDist::uniform(2, 4);
        assert_relative_eq!(
            q.cross_entropy(&q).unwrap(),
            -2.0 * 4f64.ln(),
            max_relative = 1e-12
        );
        let mut rng = seeded_rng(3);
        let any_q = random_mean_field(3, 5, &mut rng);
        let uniform_p = MeanFieldDist::uniform(3, 5);
        assert_relative_eq!(
            any_q.cross_entropy(&uniform_p).unwrap(),
            -3.0 * 5f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn cross_entropy_matches_enumeration() {
        let mut rng = seeded_rng(4);
        let q = random_mean_field(3, 2, &mut rng);
        let p = random_mean_field(3, 2, &mut rng);
        let qm = MixtureDist::new(vec![0.0], vec![q.clone()]).unwrap();
        let pm = MixtureDist::new(vec![0.0], vec![p.clone()]).unwrap();
        let mut exact = 0.0;
        for s in enumerate_states(3, 2) {
            exact += joint_prob(&qm, &s) * joint_prob(&pm, &s).ln();
        }
        assert_relative_eq!(q.cross_entropy(&p).unwrap(), exact, max_relative = 1e-10);
    }

    #[test]
    fn mixture_prob_vector_is_normalized_and_matches_pmf() {
        let mut rng = seeded_rng(5);
        let q = random_mixture(3, 3, 2, &mut rng);
        let v = q.prob_kron();
        assert_eq!(v.num_terms(), 3);
        let dense = v.dense_expand().unwrap();
        assert_relative_eq!(dense.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        for (i, s) in enumerate_states(3, 2).iter().enumerate() {
            assert_relative_eq!(dense[i], joint_prob(&q, s), max_relative = 1e-12);
        }
        // r = 1 degenerates to the mean-field pmf.
        let mf = random_mean_field(2, 3, &mut rng);
        let single = MixtureDist::new(vec![0.7], vec![mf.clone()]).unwrap();
        assert_eq!(
            single.prob_kron().dense_expand().unwrap(),
            mf.prob_kron().dense_expand().unwrap()
        );
    }

    #[test]
    fn entropy_bound_exact_for_single_component_at_anchor() {
        // Uniform case: the bound equals b·log(m̄) exactly.
        let q = MeanFieldDist::uniform(4, 3);
        let mix = MixtureDist::new(vec![0.0], vec![q.clone()]).unwrap();
        let anchor = EntropyAnchor::at(&q);
        let bound = mixture_entropy_lower_bound(&mix, &anchor).unwrap();
        assert_relative_eq!(bound, 4.0 * 3f64.ln(), max_relative = 1e-12);
        // Arbitrary single component anchored at itself: bound = entropy.
        let mut rng = seeded_rng(6);
        let qr = random_mean_field(3, 4, &mut rng);
        let mixr = MixtureDist::new(vec![0.3], vec![qr.clone()]).unwrap();
        let bound = mixture_entropy_lower_bound(&mixr, &EntropyAnchor::at(&qr)).unwrap();
        assert_relative_eq!(bound, qr.entropy(), max_relative = 1e-10);
    }

    #[test]
    fn entropy_bound_is_below_exact_entropy() {
        let mut rng = seeded_rng(7);
        for _ in 0..20 {
            let q = random_mixture(2, 3, 2, &mut rng);
            let anchor = EntropyAnchor::at(&random_mean_field(3, 2, &mut rng));
            let bound = mixture_entropy_lower_bound(&q, &anchor).unwrap();
            let mut exact = 0.0;
            for s in enumerate_states(3, 2) {
                let p = joint_prob(&q, &s);
                exact -= p * p.ln();
            }
            assert!(
                bound <= exact + 1e-10,
                "bound {bound} exceeded exact entropy {exact}"
            );
        }
    }

    #[test]
    fn entropy_bound_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(8);
        let q = random_mixture(2, 2, 3, &mut rng);
        let anchor = EntropyAnchor::at(&random_mean_field(2, 3, &mut rng));
        let (_, grad) = mixture_entropy_lower_bound_grad(&q, &anchor).unwrap();
        let h = 1e-6;

        // Mixture logits.
        for i in 0..q.r() {
            let mut lo = q.mixture_logits().to_vec();
            let mut hi = lo.clone();
            lo[i] -= h;
            hi[i] += h;
            let q_lo = MixtureDist::new(lo, q.components().to_vec()).unwrap();
            let q_hi = MixtureDist::new(hi, q.components().to_vec()).unwrap();
            let fd = (mixture_entropy_lower_bound(&q_hi, &anchor).unwrap()
                - mixture_entropy_lower_bound(&q_lo, &anchor).unwrap())
                / (2.0 * h);
            assert_relative_eq!(grad.q.mixture_logits[i], fd, max_relative = 1e-5, epsilon = 1e-8);
        }
        // Component logits.
        for comp in 0..q.r() {
            for j in 0..q.b() {
                for c in 0..q.m_bar() {
                    let perturb = |delta: f64| {
                        let mut comps = q.components().to_vec();
                        let mut logits = comps[comp].logits().to_vec();
                        logits[j][c] += delta;
                        comps[comp] = MeanFieldDist::from_logits(logits).unwrap();
                        let qq = MixtureDist::new(q.mixture_logits().to_vec(), comps).unwrap();
                        mixture_entropy_lower_bound(&qq, &anchor).unwrap()
                    };
                    let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                    assert_relative_eq!(
                        grad.q.components[comp].rows[j][c],
                        fd,
                        max_relative = 1e-5,
                        epsilon = 1e-8
                    );
                }
            }
        }
        // Anchor logits.
        for j in 0..q.b() {
            for c in 0..q.m_bar() {
                let perturb = |delta: f64| {
                    let mut logits = anchor.logits().to_vec();
                    logits[j][c] += delta;
                    let a = EntropyAnchor::from_logits(logits).unwrap();
                    mixture_entropy_lower_bound(&q, &a).unwrap()
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                assert_relative_eq!(grad.anchor.rows[j][c], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn prior_bound_examples_and_enumeration() {
        let mut rng = seeded_rng(9);
        let q = random_mean_field(3, 2, &mut rng);
        // r = 1: exactly the factorized cross entropy.
        let p1 = random_mean_field(3, 2, &mut rng);
        let prior1 = MixtureDist::new(vec![0.0], vec![p1.clone()]).unwrap();
        assert_relative_eq!(
            mixture_prior_lower_bound(&q, &prior1).unwrap(),
            q.cross_entropy(&p1).unwrap(),
            max_relative = 1e-12
        );
        // Identical components: same as the r = 1 case.
        let prior3 =
            MixtureDist::new(vec![0.5, -0.2, 0.1], vec![p1.clone(), p1.clone(), p1.clone()])
                .unwrap();
        assert_relative_eq!(
            mixture_prior_lower_bound(&q, &prior3).unwrap(),
            q.cross_entropy(&p1).unwrap(),
            max_relative = 1e-12
        );
        // Random mixture prior: bound ≤ exact qᵀ log p by enumeration.
        for _ in 0..20 {
            let prior = random_mixture(2, 3, 2, &mut rng);
            let q = random_mean_field(3, 2, &mut rng);
            let qm = MixtureDist::new(vec![0.0], vec![q.clone()]).unwrap();
            let mut exact = 0.0;
            for s in enumerate_states(3, 2) {
                exact += joint_prob(&qm, &s) * joint_prob(&prior, &s).ln();
            }
            let bound = mixture_prior_lower_bound(&q, &prior).unwrap();
            assert!(bound <= exact + 1e-10, "bound {bound} > exact {exact}");
        }
    }

    #[test]
    fn log_pmf_examples() {
        let mut rng = seeded_rng(10);
        // r = 1 uniform: −b log m̄ for any state.
        let uq = MixtureDist::new(vec![0.0], vec![MeanFieldDist::uniform(3, 4)]).unwrap();
        assert_relative_eq!(
            uq.log_pmf(&[0, 3, 2]).unwrap(),
            -3.0 * 4f64.ln(),
            max_relative = 1e-12
        );
        // Always ≤ 0, and matches the dense pmf on all states.
        let q = random_mixture(2, 3, 2, &mut rng);
        for s in enumerate_states(3, 2) {
            let lp = q.log_pmf(&s).unwrap();
            assert!(lp <= 1e-12);
            assert_relative_eq!(lp, joint_prob(&q, &s).ln(), max_relative = 1e-10);
        }
        assert!(q.log_pmf(&[0, 0, 9]).is_err());
    }

    #[test]
    fn deterministic_q_surrogate_is_half_with_zero_grad() {
        let logits = vec![vec![45.0, 0.0]; 2];
        let comp = MeanFieldDist::from_logits(logits).unwrap();
        let q = MixtureDist::new(vec![0.0], vec![comp]).unwrap();
        let mut rng = seeded_rng(11);
        let out = entropy_surrogate(&q, 64, &mut rng).unwrap();
        assert_relative_eq!(out.surrogate, 0.5, epsilon = 1e-9);
        for row in &out.grad.components[0].rows {
            for &g in row {
                assert!(g.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn surrogate_is_deterministic_given_seed() {
        let mut rng = seeded_rng(12);
        let q = random_mixture(2, 3, 2, &mut rng);
        let a = entropy_surrogate_loss(&q, 100, &mut seeded_rng(99)).unwrap();
        let b = entropy_surrogate_loss(&q, 100, &mut seeded_rng(99)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn surrogate_gradient_is_unbiased_for_entropy_gradient() {
        // Small mixture; exact ∂(qᵀ log q)/∂θ by enumeration + finite
        // differences, MC mean within 3 standard errors.
        let mut rng = seeded_rng(13);
        let q = random_mixture(2, 2, 2, &mut rng);
        let exact_neg_entropy = |qq: &MixtureDist| {
            let mut v = 0.0;
            for s in enumerate_states(2, 2) {
                let p = joint_prob(qq, &s);
                v += p * p.ln();
            }
            v
        };
        // Exact gradient of qᵀ log q w.r.t. one component logit via FD.
        let h = 1e-6;
        let fd_exact = {
            let mut comps = q.components().to_vec();
            let mut up = comps[0].logits().to_vec();
            let mut dn = up.clone();
            up[0][0] += h;
            dn[0][0] -= h;
            comps[0] = MeanFieldDist::from_logits(up).unwrap();
            let qu = MixtureDist::new(q.mixture_logits().to_vec(), comps.clone()).unwrap();
            comps[0] = MeanFieldDist::from_logits(dn).unwrap();
            let qd = MixtureDist::new(q.mixture_logits().to_vec(), comps).unwrap();
            (exact_neg_entropy(&qu) - exact_neg_entropy(&qd)) / (2.0 * h)
        };
        let mut rng = seeded_rng(14);
        let batches = 200;
        let mut means = Vec::with_capacity(batches);
        for _ in 0..batches {
            let out = entropy_surrogate(&q, 500, &mut rng).unwrap();
            means.push(out.grad.components[0].rows[0][0]);
        }
        let (mean, var) = crate::numeric::mean_var(&means);
        let se = (var / batches as f64).sqrt();
        assert!(
            (mean - fd_exact).abs() <= 3.0 * se.max(1e-12),
            "MC mean {mean} vs exact {fd_exact} (se {se})"
        );
    }

    #[test]
    fn sampling_is_reproducible_and_deterministic_q_collapses() {
        let grid = Arc::new(SupportGrid::uniform(3, vec![-1.0, 0.0, 1.0]).unwrap());
        let peaked = MeanFieldDist::from_logits(vec![vec![0.0, 60.0, 0.0]; 3]).unwrap();
        let q = VariationalDist::MeanField(peaked);
        let mut rng = seeded_rng(15);
        let samples = sample_posterior(&q, &grid, 32, &mut rng).unwrap();
        for s in &samples {
            assert_eq!(s.indices(), &[1, 1, 1]);
        }
        let a = sample_posterior(&q, &grid, 8, &mut seeded_rng(4)).unwrap();
        let b = sample_posterior(&q, &grid, 8, &mut seeded_rng(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_frequencies_within_binomial_bounds() {
        let grid = Arc::new(SupportGrid::uniform(1, vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let q = VariationalDist::MeanField(MeanFieldDist::uniform(1, 4));
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = seeded_rng(16);
        for s in sample_posterior(&q, &grid, n, &mut rng).unwrap() {
            counts[s.indices()[0] as usize] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
                "level count {c} outside 3σ of {}",
                n as f64 * p
            );
        }
    }

    #[test]
    fn expected_sparsity_examples() {
        let grid = SupportGrid::uniform(4, vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let q = MeanFieldDist::uniform(4, 5);
        assert_relative_eq!(expected_sparsity(&q, &grid), 0.2, max_relative = 1e-12);
        let no_zero = SupportGrid::uniform(4, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(expected_sparsity(&q, &no_zero), 0.0);
    }

    #[test]
    fn expected_sparsity_matches_empirical_zero_fraction() {
        let grid = Arc::new(SupportGrid::uniform(3, vec![-1.0, 0.0, 2.0]).unwrap());
        let mut rng = seeded_rng(17);
        let q = random_mean_field(3, 3, &mut rng);
        let expected = expected_sparsity(&q, &grid);
        let n = 100_000;
        let mut zeros = 0usize;
        let qv = VariationalDist::MeanField(q);
        for s in sample_posterior(&qv, &grid, n, &mut rng).unwrap() {
            zeros += s.dequantize().iter().filter(|&&w| w == 0.0).count();
        }
        let frac = zeros as f64 / (n * 3) as f64;
        let sigma = (expected * (1.0 - expected) / (n * 3) as f64).sqrt();
        assert!(
            (frac - expected).abs() <= 3.0 * sigma,
            "empirical {frac} vs expected {expected}"
        );
    }

    #[test]
    fn quantized_sample_roundtrips_bit_exactly() {
        // m̄ = 15 → 4-bit packing; 2000 weights → 1000-byte payload.
        let row: Vec<f64> = (0..15).map(|i| i as f64 - 7.0).collect();
        let grid = Arc::new(SupportGrid::uniform(2000, row).unwrap());
        let mut rng = seeded_rng(18);
        let indices: Vec<u16> = (0..2000).map(|_| rng.gen_range(0..15) as u16).collect();
        let s = QuantizedSample::new(indices, Arc::clone(&grid)).unwrap();
        assert_eq!(s.bit_width(), 4);
        assert_eq!(s.payload_len(), 1000);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 4 + 2 + 1000);
        let back = QuantizedSample::read_from(&mut buf.as_slice(), grid).unwrap();
        assert_eq!(back, s);
    }
}
