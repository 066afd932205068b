//! Deep Bayesian regression network with quadratic activations.
//!
//! The forward pass runs the network once over the training set while
//! simultaneously evaluating it at every point of the hypothesis grid: the
//! internal state of a neuron is `u_l = Σ_j C[j,l] ⊗_k g_jk` — a sum of `h`
//! Kronecker-product terms whose per-point coefficients live in `C` and whose
//! per-variable factors live in sparse maps (absent factor = all-ones).
//! Multiplying by a latent variable touches one factor per term, neuron
//! summation concatenates terms, and squaring a state multiplies term pairs,
//! taking `h` to `h(h+1)/2` before merge; almost all factors stay unity, so
//! products over variables only visit each term's small support.
//!
//! After the pass, `yᵀy`, `p = C y`, and `V = C Cᵀ` make the exact ELBO (and
//! its analytic gradient) independent of the number of training points.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{DirectError, Result};
use crate::glm::NoiseModel;
use crate::kron::{KronSumVec, KronTerm};
use crate::numeric::{softmax_backprop, stable_product};
use crate::variational::{
    prior_cross_dprobs, prior_cross_term, MeanFieldDist, SupportGrid, VariationalDist,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Network architecture and the mapping from (layer, neuron, input) slots to
/// latent-variable indices. Bias terms are not modeled; a fixed-unity input
/// per layer would add them without changing anything below.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnArch {
    input_dim: usize,
    layer_widths: Vec<usize>,
    /// Cumulative variable offsets per layer.
    layer_offsets: Vec<usize>,
}

impl BnnArch {
    pub fn new(input_dim: usize, layer_widths: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || layer_widths.is_empty() || layer_widths.iter().any(|&w| w == 0) {
            return Err(DirectError::Config(
                "network needs a positive input dimension and positive layer widths".into(),
            ));
        }
        if *layer_widths.last().unwrap() != 1 {
            return Err(DirectError::Config("final layer width must be 1".into()));
        }
        let mut layer_offsets = Vec::with_capacity(layer_widths.len() + 1);
        let mut offset = 0;
        let mut inputs = input_dim;
        for &width in &layer_widths {
            layer_offsets.push(offset);
            offset += width * inputs;
            inputs = width;
        }
        layer_offsets.push(offset);
        Ok(BnnArch {
            input_dim,
            layer_widths,
            layer_offsets,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len()
    }

    /// Inputs feeding layer `l` (the previous layer's width, or `d`).
    pub fn inputs_at(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layer_widths[layer - 1]
        }
    }

    /// Total latent variables: one per (layer, neuron, input) weight.
    pub fn total_variables(&self) -> usize {
        *self.layer_offsets.last().unwrap()
    }

    /// Row-major slot assignment over (layer, neuron, input).
    pub fn var_index(&self, layer: usize, neuron: usize, input: usize) -> usize {
        self.layer_offsets[layer] + neuron * self.inputs_at(layer) + input
    }
}

/// One term of a network state: per-point coefficients plus sparse factors.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnTerm {
    /// Coefficient per training point (a row of `C`).
    pub c: Vec<f64>,
    factors: BTreeMap<usize, Vec<f64>>,
}

impl BnnTerm {
    pub fn factor(&self, var: usize) -> Option<&[f64]> {
        self.factors.get(&var).map(|f| f.as_slice())
    }
}

/// Hypothesis-space-wide state of one neuron over all training points.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnState {
    n: usize,
    b: usize,
    m_bar: usize,
    terms: Vec<BnnTerm>,
    consumed: Vec<bool>,
}

impl BnnState {
    /// Initial state of input `i`: a single all-ones term whose coefficients
    /// are that input column of `X`.
    pub fn from_input_column(column: ArrayView1<f64>, grid: &SupportGrid) -> Self {
        BnnState {
            n: column.len(),
            b: grid.b(),
            m_bar: grid.m_bar(),
            terms: vec![BnnTerm {
                c: column.to_vec(),
                factors: BTreeMap::new(),
            }],
            consumed: vec![false; grid.b()],
        }
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[BnnTerm] {
        &self.terms
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn m_bar(&self) -> usize {
        self.m_bar
    }

    /// Elementwise-multiply every term's factor at variable `p` by `w̄_p`
    /// (an absent factor becomes `w̄_p` itself). Coefficients are untouched.
    pub fn mult_var(&self, p: usize, grid: &SupportGrid) -> Result<BnnState> {
        if p >= self.b {
            return Err(DirectError::shape("variable index", self.b, p));
        }
        if self.consumed[p] {
            return Err(DirectError::Config(format!(
                "latent variable {p} consumed twice on one path"
            )));
        }
        let row = grid.row(p);
        let mut out = self.clone();
        for term in &mut out.terms {
            match term.factors.get_mut(&p) {
                Some(f) => {
                    for (x, &w) in f.iter_mut().zip(row) {
                        *x *= w;
                    }
                }
                None => {
                    term.factors.insert(p, row.to_vec());
                }
            }
        }
        out.consumed[p] = true;
        Ok(out)
    }

    /// Square the state per training point: `u_l ⊙ u_l`. Produces exactly
    /// `h(h+1)/2` terms (squared diagonal terms plus doubled off-diagonal
    /// pairs); merge with [`compacted`](Self::compacted) afterwards.
    pub fn quad_activation(&self) -> BnnState {
        let h = self.terms.len();
        let mut terms = Vec::with_capacity(h * (h + 1) / 2);
        for j in 0..h {
            for k in j..h {
                let scale = if j == k { 1.0 } else { 2.0 };
                let c: Vec<f64> = self.terms[j]
                    .c
                    .iter()
                    .zip(&self.terms[k].c)
                    .map(|(&a, &b)| scale * a * b)
                    .collect();
                let mut factors = self.terms[j].factors.clone();
                for (&var, fk) in &self.terms[k].factors {
                    match factors.get_mut(&var) {
                        Some(fj) => {
                            for (x, &y) in fj.iter_mut().zip(fk) {
                                *x *= y;
                            }
                        }
                        None => {
                            factors.insert(var, fk.clone());
                        }
                    }
                }
                terms.push(BnnTerm { c, factors });
            }
        }
        BnnState {
            n: self.n,
            b: self.b,
            m_bar: self.m_bar,
            terms,
            consumed: self.consumed.clone(),
        }
    }

    /// Merge terms with bitwise-identical factor maps by adding their
    /// coefficient rows, and drop terms whose coefficients are all zero.
    /// Dense semantics unchanged.
    pub fn compacted(&self) -> BnnState {
        let mut out = BnnState {
            n: self.n,
            b: self.b,
            m_bar: self.m_bar,
            terms: Vec::new(),
            consumed: self.consumed.clone(),
        };
        let mut index: BTreeMap<Vec<(usize, Vec<u64>)>, usize> = BTreeMap::new();
        for term in &self.terms {
            let key: Vec<(usize, Vec<u64>)> = term
                .factors
                .iter()
                .map(|(&v, f)| (v, f.iter().map(|x| x.to_bits()).collect()))
                .collect();
            match index.get(&key) {
                Some(&slot) => {
                    for (acc, &x) in out.terms[slot].c.iter_mut().zip(&term.c) {
                        *acc += x;
                    }
                }
                None => {
                    index.insert(key, out.terms.len());
                    out.terms.push(term.clone());
                }
            }
        }
        out.terms.retain(|t| t.c.iter().any(|&x| x != 0.0));
        out
    }

    /// Dense hypothesis-space column for training point `l` (test oracle).
    pub fn dense_column(&self, l: usize) -> Result<Vec<f64>> {
        let dims = vec![self.m_bar; self.b];
        let mut v = KronSumVec::zero(dims);
        for term in &self.terms {
            let mut t = KronTerm::ones(term.c[l]);
            for (&var, f) in &term.factors {
                t.set_factor(var, f.clone());
            }
            v.push_term(t)?;
        }
        v.dense_expand()
    }
}

/// Sum the states feeding one neuron: terms concatenate, coefficients stack,
/// then the result is compacted.
pub fn neuron_sum(states: &[BnnState]) -> Result<BnnState> {
    let first = states
        .first()
        .ok_or_else(|| DirectError::Domain("neuron sum needs at least one input".into()))?;
    let mut out = BnnState {
        n: first.n,
        b: first.b,
        m_bar: first.m_bar,
        terms: Vec::new(),
        consumed: vec![false; first.b],
    };
    for st in states {
        if st.n != first.n || st.b != first.b || st.m_bar != first.m_bar {
            return Err(DirectError::shape(
                "neuron sum state shapes",
                format!("n={} b={} m̄={}", first.n, first.b, first.m_bar),
                format!("n={} b={} m̄={}", st.n, st.b, st.m_bar),
            ));
        }
        out.terms.extend(st.terms.iter().cloned());
        for (acc, &c) in out.consumed.iter_mut().zip(&st.consumed) {
            *acc |= c;
        }
    }
    Ok(out.compacted())
}

/// Run the network over all training points and all hypotheses at once.
/// Initial coefficients are `Xᵀ` with all-ones factors; each layer multiplies
/// by its variables, sums per neuron, and squares except on the last layer.
pub fn forward_pass(arch: &BnnArch, x: ArrayView2<f64>, grid: &SupportGrid) -> Result<BnnState> {
    if arch.total_variables() != grid.b() {
        return Err(DirectError::shape(
            "architecture variables vs grid",
            grid.b(),
            arch.total_variables(),
        ));
    }
    if x.ncols() != arch.input_dim() {
        return Err(DirectError::shape("input columns", arch.input_dim(), x.ncols()));
    }
    let mut states: Vec<BnnState> = (0..arch.input_dim())
        .map(|i| BnnState::from_input_column(x.column(i), grid))
        .collect();
    for layer in 0..arch.num_layers() {
        let last = layer + 1 == arch.num_layers();
        let mut next = Vec::with_capacity(arch.layer_widths()[layer]);
        for neuron in 0..arch.layer_widths()[layer] {
            let multiplied: Vec<BnnState> = states
                .iter()
                .enumerate()
                .map(|(input, st)| st.mult_var(arch.var_index(layer, neuron, input), grid))
                .collect::<Result<_>>()?;
            let mut summed = neuron_sum(&multiplied)?;
            if !last {
                summed = summed.quad_activation().compacted();
            }
            next.push(summed);
        }
        states = next;
    }
    Ok(states.pop().expect("final layer has one neuron"))
}

/// Precomputations from the final state: `p = C y` and `V = C Cᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnSuffStats {
    pub yty: f64,
    pub p_vec: Array1<f64>,
    pub v_mat: Array2<f64>,
    pub n: usize,
}

pub fn bnn_precompute(state: &BnnState, y: ArrayView1<f64>) -> Result<BnnSuffStats> {
    if y.len() != state.n {
        return Err(DirectError::shape("target length", state.n, y.len()));
    }
    let h = state.terms.len();
    let mut p_vec = Array1::zeros(h);
    let mut v_mat = Array2::zeros((h, h));
    for j in 0..h {
        let cj = &state.terms[j].c;
        p_vec[j] = cj.iter().zip(y.iter()).map(|(&c, &yk)| yk * c).sum();
        for k in j..h {
            let ck = &state.terms[k].c;
            let v: f64 = cj.iter().zip(ck).map(|(&a, &b)| a * b).sum();
            v_mat[(j, k)] = v;
            v_mat[(k, j)] = v;
        }
    }
    Ok(BnnSuffStats {
        yty: y.dot(&y),
        p_vec,
        v_mat,
        n: y.len(),
    })
}

/// Per-variable inner products a term product needs: `q_lᵀ g_jl` over the
/// term's support (all-ones factors contribute 1 and are skipped).
fn term_dots(q: &MeanFieldDist, term: &BnnTerm) -> (Vec<usize>, Vec<f64>) {
    let mut vars = Vec::with_capacity(term.factors.len());
    let mut dots = Vec::with_capacity(term.factors.len());
    for (&var, f) in &term.factors {
        vars.push(var);
        dots.push(crate::numeric::dot(&q.probs()[var], f));
    }
    (vars, dots)
}

/// Same for a term pair: factors multiply elementwise where both present.
fn pair_dots(
    q: &MeanFieldDist,
    a: &BnnTerm,
    b: &BnnTerm,
) -> (Vec<usize>, Vec<f64>, Vec<Vec<f64>>) {
    let mut vars: Vec<usize> = a.factors.keys().chain(b.factors.keys()).copied().collect();
    vars.sort_unstable();
    vars.dedup();
    let mut dots = Vec::with_capacity(vars.len());
    let mut vecs = Vec::with_capacity(vars.len());
    for &var in &vars {
        let v: Vec<f64> = match (a.factors.get(&var), b.factors.get(&var)) {
            (Some(fa), Some(fb)) => fa.iter().zip(fb).map(|(&x, &y)| x * y).collect(),
            (Some(fa), None) => fa.clone(),
            (None, Some(fb)) => fb.clone(),
            (None, None) => unreachable!("var came from one of the maps"),
        };
        dots.push(crate::numeric::dot(&q.probs()[var], &v));
        vecs.push(v);
    }
    (vars, dots, vecs)
}

/// Leave-one-out products via prefix/suffix scans (no division, so exact
/// zeros in any position are handled).
fn leave_one_out(dots: &[f64]) -> Vec<f64> {
    let n = dots.len();
    let mut prefix = vec![1.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] * dots[i];
    }
    let mut suffix = vec![1.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] * dots[i];
    }
    (0..n).map(|i| prefix[i] * suffix[i + 1]).collect()
}

/// The likelihood bracket
/// `E = yᵀy − 2 Σ_j p_j Π_i q_iᵀ g_ij + Σ_{j,k} V_jk Π_l q_lᵀ(g_jl ⊙ g_kl)`.
fn bnn_bracket(state: &BnnState, stats: &BnnSuffStats, q: &MeanFieldDist) -> f64 {
    let h = state.terms.len();
    let mut e = stats.yty;
    for j in 0..h {
        let (_, dots) = term_dots(q, &state.terms[j]);
        e -= 2.0 * stats.p_vec[j] * stable_product(&dots);
    }
    for j in 0..h {
        for k in j..h {
            let mult = if j == k { 1.0 } else { 2.0 };
            let (_, dots, _) = pair_dots(q, &state.terms[j], &state.terms[k]);
            e += mult * stats.v_mat[(j, k)] * stable_product(&dots);
        }
    }
    e
}

/// Exact ELBO of the network model (mean-field posterior over weights).
/// Includes the `−(n/2)·ln 2π` likelihood constant.
pub fn bnn_elbo(
    state: &BnnState,
    stats: &BnnSuffStats,
    q: &MeanFieldDist,
    prior: &VariationalDist,
    noise: &NoiseModel,
) -> Result<f64> {
    check_shapes(state, stats, q, prior)?;
    let n = stats.n as f64;
    let e = bnn_bracket(state, stats, q);
    let ll = -0.5 * n * (LN_2PI + noise.expected_log_sigma2())
        - 0.5 * noise.expected_inv_sigma2() * e;
    Ok(ll + prior_cross_term(q, prior)? + q.entropy() + noise.kl_terms())
}

fn check_shapes(
    state: &BnnState,
    stats: &BnnSuffStats,
    q: &MeanFieldDist,
    prior: &VariationalDist,
) -> Result<()> {
    if stats.p_vec.len() != state.terms.len() {
        return Err(DirectError::shape(
            "stats terms vs state",
            state.terms.len(),
            stats.p_vec.len(),
        ));
    }
    if q.b() != state.b || q.m_bar() != state.m_bar {
        return Err(DirectError::shape(
            "posterior vs state",
            format!("{}x{}", state.b, state.m_bar),
            format!("{}x{}", q.b(), q.m_bar()),
        ));
    }
    if prior.b() != state.b || prior.m_bar() != state.m_bar {
        return Err(DirectError::shape(
            "prior vs state",
            format!("{}x{}", state.b, state.m_bar),
            format!("{}x{}", prior.b(), prior.m_bar()),
        ));
    }
    Ok(())
}

/// ELBO and its exact gradient w.r.t. weight and noise logits, with the
/// product derivatives reverse-accumulated through leave-one-out scans.
pub fn bnn_elbo_grad(
    state: &BnnState,
    stats: &BnnSuffStats,
    q: &MeanFieldDist,
    prior: &VariationalDist,
    noise: &NoiseModel,
) -> Result<(f64, crate::glm::GlmGrad)> {
    check_shapes(state, stats, q, prior)?;
    let (b, m) = (state.b, state.m_bar);
    let h = state.terms.len();
    let n = stats.n as f64;
    let a = noise.expected_inv_sigma2();

    // Probability-space gradient of the bracket.
    let mut de_dprobs = vec![vec![0.0; m]; b];
    let mut e = stats.yty;
    for j in 0..h {
        let term = &state.terms[j];
        let (vars, dots) = term_dots(q, term);
        e -= 2.0 * stats.p_vec[j] * stable_product(&dots);
        let loo = leave_one_out(&dots);
        for (pos, &var) in vars.iter().enumerate() {
            let f = term.factor(var).expect("var in support");
            for (c, &fv) in de_dprobs[var].iter_mut().zip(f) {
                *c += -2.0 * stats.p_vec[j] * loo[pos] * fv;
            }
        }
    }
    for j in 0..h {
        for k in j..h {
            let mult = if j == k { 1.0 } else { 2.0 };
            let (vars, dots, vecs) = pair_dots(q, &state.terms[j], &state.terms[k]);
            e += mult * stats.v_mat[(j, k)] * stable_product(&dots);
            let loo = leave_one_out(&dots);
            for (pos, &var) in vars.iter().enumerate() {
                let coeff = mult * stats.v_mat[(j, k)] * loo[pos];
                for (c, &fv) in de_dprobs[var].iter_mut().zip(&vecs[pos]) {
                    *c += coeff * fv;
                }
            }
        }
    }

    let value = -0.5 * n * (LN_2PI + noise.expected_log_sigma2()) - 0.5 * a * e
        + prior_cross_term(q, prior)?
        + q.entropy()
        + noise.kl_terms();

    let p_dprobs = prior_cross_dprobs(prior);
    let mut grad = crate::glm::GlmGrad {
        weight_rows: vec![vec![0.0; m]; b],
        noise_row: vec![0.0; noise.m_sigma()],
    };
    for j in 0..b {
        let mut dprobs = vec![0.0; m];
        for k in 0..m {
            dprobs[k] = -0.5 * a * de_dprobs[j][k] + p_dprobs[j][k] - q.log_probs()[j][k] - 1.0;
        }
        softmax_backprop(&q.probs()[j], &dprobs, &mut grad.weight_rows[j]);
    }
    let mut dnoise = vec![0.0; noise.m_sigma()];
    for (k, d) in dnoise.iter_mut().enumerate() {
        *d = -0.5 * n * noise.sigma2_values()[k].ln() - 0.5 * e / noise.sigma2_values()[k]
            + noise.prior_probs()[k].ln()
            - noise.q_log_probs()[k]
            - 1.0;
    }
    softmax_backprop(noise.q_probs(), &dnoise, &mut grad.noise_row);
    Ok((value, grad))
}

/// Scalar reference network: evaluate one input row at one weight vector.
/// This is the per-hypothesis semantics the Kronecker state must reproduce.
pub fn scalar_forward(arch: &BnnArch, x_row: &[f64], w: &[f64]) -> f64 {
    let mut values: Vec<f64> = x_row.to_vec();
    for layer in 0..arch.num_layers() {
        let last = layer + 1 == arch.num_layers();
        let mut next = Vec::with_capacity(arch.layer_widths()[layer]);
        for neuron in 0..arch.layer_widths()[layer] {
            let mut acc = 0.0;
            for (input, &v) in values.iter().enumerate() {
                acc += w[arch.var_index(layer, neuron, input)] * v;
            }
            next.push(if last { acc } else { acc * acc });
        }
        values = next;
    }
    values[0]
}

/// Assembled network model for training and prediction.
#[derive(Debug, Clone)]
pub struct BnnModel {
    pub arch: BnnArch,
    pub grid: Arc<SupportGrid>,
    pub state: BnnState,
    pub stats: BnnSuffStats,
    pub q: MeanFieldDist,
    pub prior: VariationalDist,
    pub noise: NoiseModel,
}

impl BnnModel {
    /// Posterior-mean prediction by sampling the posterior `count` times and
    /// averaging scalar forward passes (the network output is nonlinear in
    /// the weights, so the exact mean is not a linear functional of `q`).
    pub fn predict_mean_sampled(
        &self,
        x_row: &[f64],
        count: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<f64> {
        if count == 0 {
            return Err(DirectError::Domain("sample count must be at least 1".into()));
        }
        let q = VariationalDist::MeanField(self.q.clone());
        let draws = crate::variational::sample_posterior(&q, &self.grid, count, rng)?;
        let mut acc = 0.0;
        for d in &draws {
            acc += scalar_forward(&self.arch, x_row, &d.dequantize());
        }
        Ok(acc / count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn grid(b: usize) -> SupportGrid {
        SupportGrid::uniform(b, vec![-1.0, 0.5]).unwrap()
    }

    fn random_mean_field(b: usize, m: usize, rng: &mut impl Rng) -> MeanFieldDist {
        MeanFieldDist::from_logits(
            (0..b)
                .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    /// All hypotheses of a b-variable, m̄-level grid, first variable slowest.
    fn hypotheses(g: &SupportGrid) -> Vec<Vec<f64>> {
        let (b, m) = (g.b(), g.m_bar());
        (0..m.pow(b as u32))
            .map(|mut code| {
                let mut idx = vec![0usize; b];
                for j in (0..b).rev() {
                    idx[j] = code % m;
                    code /= m;
                }
                idx.iter().enumerate().map(|(j, &k)| g.row(j)[k]).collect()
            })
            .collect()
    }

    #[test]
    fn mult_var_installs_and_multiplies_factors() {
        let g = SupportGrid::uniform(2, vec![-1.0, 1.0]).unwrap();
        let x = ndarray::array![1.0, 2.0];
        let st = BnnState::from_input_column(x.view(), &g);
        let out = st.mult_var(0, &g).unwrap();
        assert_eq!(out.terms()[0].factor(0).unwrap(), &[-1.0, 1.0]);
        // Double consumption on the same path is an assignment error.
        assert!(out.mult_var(0, &g).is_err());
        // Multiplying an existing factor multiplies elementwise: emulate by
        // building a fresh state with the factor pre-installed.
        let mut pre = out.clone();
        pre.consumed[0] = false;
        let twice = pre.mult_var(0, &g).unwrap();
        assert_eq!(twice.terms()[0].factor(0).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn mult_var_commutes_in_dense_semantics() {
        let g = grid(2);
        let x = ndarray::array![0.7, -0.4, 1.1];
        let st = BnnState::from_input_column(x.view(), &g);
        let ab = st.mult_var(0, &g).unwrap().mult_var(1, &g).unwrap();
        let ba = st.mult_var(1, &g).unwrap().mult_var(0, &g).unwrap();
        for l in 0..3 {
            assert_eq!(ab.dense_column(l).unwrap(), ba.dense_column(l).unwrap());
        }
    }

    #[test]
    fn neuron_sum_identity_and_doubling() {
        let g = grid(2);
        let x = ndarray::array![1.0, -2.0];
        let st = BnnState::from_input_column(x.view(), &g).mult_var(0, &g).unwrap();
        let zero = BnnState {
            n: 2,
            b: 2,
            m_bar: 2,
            terms: vec![],
            consumed: vec![false; 2],
        };
        let same = neuron_sum(&[st.clone(), zero]).unwrap();
        for l in 0..2 {
            assert_eq!(same.dense_column(l).unwrap(), st.dense_column(l).unwrap());
        }
        let double = neuron_sum(&[st.clone(), st.clone()]).unwrap();
        for l in 0..2 {
            let d = double.dense_column(l).unwrap();
            let s = st.dense_column(l).unwrap();
            for (x, y) in d.iter().zip(s) {
                assert_relative_eq!(*x, 2.0 * y, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn neuron_sum_matches_dense_oracle_on_three_inputs() {
        let g = grid(3);
        let mut rng = seeded_rng(50);
        let mk = |rng: &mut crate::SeededRng, var: usize| {
            let col = ndarray::Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
            BnnState::from_input_column(col.view(), &g).mult_var(var, &g).unwrap()
        };
        let states = [mk(&mut rng, 0), mk(&mut rng, 1), mk(&mut rng, 2)];
        let sum = neuron_sum(&states).unwrap();
        for l in 0..2 {
            let expect: Vec<f64> = {
                let mut acc = vec![0.0; 8];
                for st in &states {
                    for (a, v) in acc.iter_mut().zip(st.dense_column(l).unwrap()) {
                        *a += v;
                    }
                }
                acc
            };
            for (x, y) in sum.dense_column(l).unwrap().iter().zip(expect) {
                assert_relative_eq!(*x, y, max_relative = 1e-13, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn quad_activation_squares_dense_values_and_counts_terms() {
        let g = grid(2);
        let mut rng = seeded_rng(51);
        // Build a 3-term state: sum of three singly-multiplied inputs on the
        // same two variables (two collapse on var 0 after compaction; rebuild
        // raw to keep h = 3).
        let col = |rng: &mut crate::SeededRng| {
            ndarray::Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0))
        };
        let s0 = BnnState::from_input_column(col(&mut rng).view(), &g).mult_var(0, &g).unwrap();
        let s1 = BnnState::from_input_column(col(&mut rng).view(), &g).mult_var(1, &g).unwrap();
        let sum = neuron_sum(&[s0, s1]).unwrap();
        assert_eq!(sum.num_terms(), 2);
        let squared = sum.quad_activation();
        assert_eq!(squared.num_terms(), 2 * 3 / 2);
        for l in 0..2 {
            let base = sum.dense_column(l).unwrap();
            let sq = squared.dense_column(l).unwrap();
            for (x, y) in sq.iter().zip(&base) {
                assert_relative_eq!(*x, y * y, max_relative = 1e-12, epsilon = 1e-15);
            }
        }
        // Activation of a single-term state squares factors and coefficients.
        let single = BnnState::from_input_column(col(&mut rng).view(), &g)
            .mult_var(0, &g)
            .unwrap();
        let sq = single.quad_activation();
        assert_eq!(sq.num_terms(), 1);
        for (c2, c) in sq.terms()[0].c.iter().zip(&single.terms()[0].c) {
            assert_relative_eq!(*c2, c * c, max_relative = 1e-15);
        }
        // Zero state stays zero.
        let zero = BnnState {
            n: 1,
            b: 2,
            m_bar: 2,
            terms: vec![],
            consumed: vec![false; 2],
        };
        assert_eq!(zero.quad_activation().num_terms(), 0);
    }

    #[test]
    fn single_layer_network_reproduces_linear_state() {
        // widths [1] over d inputs: dense column i must be Σ_j φ_ij w_j at
        // every hypothesis.
        let d = 3;
        let arch = BnnArch::new(d, vec![1]).unwrap();
        let g = grid(d);
        let mut rng = seeded_rng(52);
        let x = ndarray::Array2::from_shape_fn((4, d), |_| rng.gen_range(-1.0..1.0));
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let hyps = hypotheses(&g);
        for i in 0..4 {
            let dense = state.dense_column(i).unwrap();
            for (hy, w) in hyps.iter().enumerate() {
                let expect: f64 = (0..d).map(|j| x[(i, j)] * w[j]).sum();
                assert_relative_eq!(dense[hy], expect, max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn zero_weight_hypothesis_has_zero_output() {
        // Grid rows contain an exact zero level; at the all-zero hypothesis
        // the network output vanishes for every input.
        let arch = BnnArch::new(1, vec![1, 1]).unwrap();
        let g = SupportGrid::uniform(2, vec![-1.0, 0.0, 1.0]).unwrap();
        let mut rng = seeded_rng(53);
        let x = ndarray::Array2::from_shape_fn((3, 1), |_| rng.gen_range(-2.0..2.0));
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        // Hypothesis index with all variables at the zero level (index 1),
        // first variable slowest: 1·3 + 1 = 4.
        for l in 0..3 {
            let dense = state.dense_column(l).unwrap();
            assert_eq!(dense[4], 0.0);
        }
    }

    #[test]
    fn two_layer_state_matches_scalar_network_on_every_hypothesis() {
        // d=1, one hidden neuron, output neuron: y = w2·(w1 x)².
        let arch = BnnArch::new(1, vec![1, 1]).unwrap();
        let g = grid(2);
        let x = ndarray::array![[0.5], [-1.5], [2.0]];
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let hyps = hypotheses(&g);
        for l in 0..3 {
            let dense = state.dense_column(l).unwrap();
            for (hy, w) in hyps.iter().enumerate() {
                let direct = w[1] * (w[0] * x[(l, 0)]) * (w[0] * x[(l, 0)]);
                let scalar = scalar_forward(&arch, &[x[(l, 0)]], w);
                assert_relative_eq!(scalar, direct, max_relative = 1e-13);
                assert_relative_eq!(dense[hy], direct, max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn wider_network_state_matches_scalar_network() {
        let arch = BnnArch::new(2, vec![2, 1]).unwrap();
        assert_eq!(arch.total_variables(), 6);
        let g = grid(6);
        let mut rng = seeded_rng(54);
        let x = ndarray::Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let hyps = hypotheses(&g);
        for l in 0..2 {
            let dense = state.dense_column(l).unwrap();
            for (hy, w) in hyps.iter().enumerate() {
                let expect = scalar_forward(&arch, &[x[(l, 0)], x[(l, 1)]], w);
                assert_relative_eq!(dense[hy], expect, max_relative = 1e-11, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn precompute_matches_direct_products_and_is_additive() {
        let arch = BnnArch::new(1, vec![1, 1]).unwrap();
        let g = grid(2);
        let x = ndarray::array![[0.5], [-1.5], [2.0]];
        let y = ndarray::array![1.0, -0.5, 0.25];
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let stats = bnn_precompute(&state, y.view()).unwrap();
        assert_relative_eq!(stats.yty, y.dot(&y), max_relative = 1e-15);
        for j in 0..state.num_terms() {
            let mut pj = 0.0;
            for l in 0..3 {
                pj += y[l] * state.terms()[j].c[l];
            }
            assert_relative_eq!(stats.p_vec[j], pj, max_relative = 1e-13, epsilon = 1e-15);
            for k in 0..state.num_terms() {
                let mut v = 0.0;
                for l in 0..3 {
                    v += state.terms()[j].c[l] * state.terms()[k].c[l];
                }
                assert_relative_eq!(stats.v_mat[(j, k)], v, max_relative = 1e-13, epsilon = 1e-15);
            }
        }
    }

    fn enumeration_bnn_elbo(
        arch: &BnnArch,
        g: &SupportGrid,
        x: &ndarray::Array2<f64>,
        y: &ndarray::Array1<f64>,
        q: &MeanFieldDist,
        prior: &MeanFieldDist,
        noise: &NoiseModel,
    ) -> f64 {
        let (b, m) = (g.b(), g.m_bar());
        let n = x.nrows();
        let mut total = 0.0;
        for code in 0..m.pow(b as u32) {
            let mut idx = vec![0usize; b];
            let mut c = code;
            for j in (0..b).rev() {
                idx[j] = c % m;
                c /= m;
            }
            let w: Vec<f64> = idx.iter().enumerate().map(|(j, &k)| g.row(j)[k]).collect();
            let qw: f64 = idx.iter().enumerate().map(|(j, &k)| q.probs()[j][k]).product();
            let pw: f64 = idx
                .iter()
                .enumerate()
                .map(|(j, &k)| prior.probs()[j][k])
                .product();
            let mut sse = 0.0;
            for i in 0..n {
                let row: Vec<f64> = x.row(i).to_vec();
                let pred = scalar_forward(arch, &row, &w);
                sse += (y[i] - pred) * (y[i] - pred);
            }
            for (k, &s2) in noise.sigma2_values().iter().enumerate() {
                let qs = noise.q_probs()[k];
                let ps = noise.prior_probs()[k];
                let joint_q = qw * qs;
                let loglik = -0.5 * n as f64 * (LN_2PI + s2.ln()) - 0.5 * sse / s2;
                total += joint_q * (loglik + (pw * ps).ln() - joint_q.ln());
            }
        }
        total
    }

    #[test]
    fn elbo_matches_enumeration_on_two_layer_network() {
        let arch = BnnArch::new(2, vec![1, 1]).unwrap();
        assert_eq!(arch.total_variables(), 3);
        let g = grid(3);
        let mut rng = seeded_rng(55);
        let x = ndarray::Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let y = ndarray::Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let stats = bnn_precompute(&state, y.view()).unwrap();
        let q = random_mean_field(3, 2, &mut rng);
        let prior = random_mean_field(3, 2, &mut rng);
        let noise = NoiseModel::new(vec![0.4, 1.3], vec![0.5, 0.5], vec![0.2, -0.2]).unwrap();
        let fast = bnn_elbo(
            &state,
            &stats,
            &q,
            &VariationalDist::MeanField(prior.clone()),
            &noise,
        )
        .unwrap();
        let slow = enumeration_bnn_elbo(&arch, &g, &x, &y, &q, &prior, &noise);
        assert_relative_eq!(fast, slow, max_relative = 1e-10);
    }

    #[test]
    fn deterministic_q_gives_plain_network_log_likelihood() {
        let arch = BnnArch::new(1, vec![1, 1]).unwrap();
        let g = grid(2);
        let x = ndarray::array![[0.5], [-1.5]];
        let y = ndarray::array![1.0, 0.5];
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let stats = bnn_precompute(&state, y.view()).unwrap();
        let q = MeanFieldDist::from_logits(vec![vec![60.0, 0.0]; 2]).unwrap();
        let prior = MeanFieldDist::uniform(2, 2);
        let noise = NoiseModel::new(vec![0.5, 1.5], vec![0.5, 0.5], vec![60.0, 0.0]).unwrap();
        let elbo_val = bnn_elbo(
            &state,
            &stats,
            &q,
            &VariationalDist::MeanField(prior.clone()),
            &noise,
        )
        .unwrap();
        let w = [g.row(0)[0], g.row(1)[0]];
        let s2 = noise.sigma2_values()[0];
        let mut loglik = -0.5 * 2.0 * (LN_2PI + s2.ln());
        for l in 0..2 {
            let pred = scalar_forward(&arch, &[x[(l, 0)]], &w);
            loglik -= 0.5 * (y[l] - pred) * (y[l] - pred) / s2;
        }
        let expected = loglik + 2.0 * 0.5f64.ln() + 0.5f64.ln();
        assert_relative_eq!(elbo_val, expected, max_relative = 1e-7);
    }

    #[test]
    fn elbo_is_zero_at_prior_with_no_data() {
        let arch = BnnArch::new(1, vec![1, 1]).unwrap();
        let g = grid(2);
        let x = ndarray::Array2::zeros((0, 1));
        let y = ndarray::Array1::zeros(0);
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let stats = bnn_precompute(&state, y.view()).unwrap();
        let mut rng = seeded_rng(56);
        let q = random_mean_field(2, 2, &mut rng);
        let noise = NoiseModel::new(vec![0.5, 1.5], vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let noise_at_prior = noise
            .with_q_logits(noise.prior_probs().iter().map(|&p| p.ln()).collect())
            .unwrap();
        let v = bnn_elbo(
            &state,
            &stats,
            &q,
            &VariationalDist::MeanField(q.clone()),
            &noise_at_prior,
        )
        .unwrap();
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = BnnArch::new(2, vec![1, 1]).unwrap();
        let g = grid(3);
        let mut rng = seeded_rng(57);
        let x = ndarray::Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let y = ndarray::Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let state = forward_pass(&arch, x.view(), &g).unwrap();
        let stats = bnn_precompute(&state, y.view()).unwrap();
        let q = random_mean_field(3, 2, &mut rng);
        let prior = VariationalDist::MeanField(random_mean_field(3, 2, &mut rng));
        let noise = NoiseModel::new(vec![0.4, 1.3], vec![0.5, 0.5], vec![0.1, -0.1]).unwrap();
        let (value, grad) = bnn_elbo_grad(&state, &stats, &q, &prior, &noise).unwrap();
        assert_relative_eq!(
            value,
            bnn_elbo(&state, &stats, &q, &prior, &noise).unwrap(),
            max_relative = 1e-14
        );
        let h = 1e-5;
        for j in 0..3 {
            for k in 0..2 {
                let eval = |delta: f64| {
                    let mut logits = q.logits().to_vec();
                    logits[j][k] += delta;
                    let qq = MeanFieldDist::from_logits(logits).unwrap();
                    bnn_elbo(&state, &stats, &qq, &prior, &noise).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert_relative_eq!(grad.weight_rows[j][k], fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
        for k in 0..2 {
            let eval = |delta: f64| {
                let mut logits = noise.q_logits().to_vec();
                logits[k] += delta;
                let nn = noise.with_q_logits(logits).unwrap();
                bnn_elbo(&state, &stats, &q, &prior, &nn).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert_relative_eq!(grad.noise_row[k], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }
}
