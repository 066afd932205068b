//! Brute-force reference implementations used only in tests.
//!
//! Everything here evaluates models by literal enumeration of the hypothesis
//! lattice, computing likelihoods from raw features and targets — never
//! through the sufficient-statistic or Kronecker paths it is used to check.
//! Enumerations refuse instances above an explicit budget, and every
//! enumeration exists in two independently ordered variants to guard against
//! index-ordering bugs.

use ndarray::{ArrayView1, ArrayView2};

use direct::bnn::BnnArch;
use direct::glm::NoiseModel;
use direct::variational::{MeanFieldDist, MixtureDist, SupportGrid, VariationalDist};
use direct::{DirectError, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Cap on the total number of enumerated hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget(pub usize);

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget(1_000_000)
    }
}

impl EnumerationBudget {
    fn check(&self, dims: &[usize], extra: usize) -> Result<usize> {
        let mut total: u128 = extra.max(1) as u128;
        for &m in dims {
            total = total.saturating_mul(m as u128);
        }
        if total > self.0 as u128 {
            return Err(DirectError::SizeExceeded {
                requested: total,
                cap: self.0 as u128,
            });
        }
        Ok(total as usize)
    }
}

/// Index tuples over `dims` with the first variable varying slowest
/// (the grid ordering).
pub fn enumerate_indices(dims: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = dims.iter().product();
    (0..total)
        .map(|mut code| {
            let mut idx = vec![0usize; dims.len()];
            for j in (0..dims.len()).rev() {
                idx[j] = code % dims[j];
                code /= dims[j];
            }
            idx
        })
        .collect()
}

/// Index tuples with the first variable varying fastest — a deliberately
/// different ordering used to cross-check the primary enumeration.
pub fn enumerate_indices_alt(dims: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = dims.iter().product();
    (0..total)
        .map(|mut code| {
            let mut idx = vec![0usize; dims.len()];
            for j in 0..dims.len() {
                idx[j] = code % dims[j];
                code /= dims[j];
            }
            idx
        })
        .collect()
}

/// Joint pmf of either posterior family at a lattice index tuple.
pub fn joint_prob(dist: &VariationalDist, idx: &[usize]) -> f64 {
    dist.weighted_components()
        .iter()
        .map(|(alpha, comp)| {
            alpha
                * idx
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| comp.probs()[j][k])
                    .product::<f64>()
        })
        .sum()
}

fn weights_at(grid: &SupportGrid, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .enumerate()
        .map(|(j, &k)| grid.row(j)[k])
        .collect()
}

fn gaussian_loglik(sse: f64, n: usize, sigma2: f64) -> f64 {
    -0.5 * n as f64 * (LN_2PI + sigma2.ln()) - 0.5 * sse / sigma2
}

#[allow(clippy::too_many_arguments)]
fn glm_elbo_with_order(
    grid: &SupportGrid,
    q: &VariationalDist,
    prior: &VariationalDist,
    noise: &NoiseModel,
    phi: ArrayView2<f64>,
    y: ArrayView1<f64>,
    budget: EnumerationBudget,
    alt_order: bool,
) -> Result<f64> {
    let dims = vec![grid.m_bar(); grid.b()];
    budget.check(&dims, noise.m_sigma())?;
    let states = if alt_order {
        enumerate_indices_alt(&dims)
    } else {
        enumerate_indices(&dims)
    };
    let n = phi.nrows();
    let mut total = 0.0;
    for idx in &states {
        let w = weights_at(grid, idx);
        let qw = joint_prob(q, idx);
        let pw = joint_prob(prior, idx);
        let mut sse = 0.0;
        for i in 0..n {
            let pred: f64 = (0..w.len()).map(|j| phi[(i, j)] * w[j]).sum();
            sse += (y[i] - pred) * (y[i] - pred);
        }
        for (k, &s2) in noise.sigma2_values().iter().enumerate() {
            let joint_q = qw * noise.q_probs()[k];
            let joint_p = pw * noise.prior_probs()[k];
            total += joint_q * (gaussian_loglik(sse, n, s2) + joint_p.ln() - joint_q.ln());
        }
    }
    Ok(total)
}

/// Exact regression ELBO by hypothesis enumeration from raw data:
/// `Σ_w Σ_σ q(w,σ)·(log ℓ(w,σ) + log p(w,σ) − log q(w,σ))`.
pub fn glm_brute_force_elbo(
    grid: &SupportGrid,
    q: &VariationalDist,
    prior: &VariationalDist,
    noise: &NoiseModel,
    phi: ArrayView2<f64>,
    y: ArrayView1<f64>,
    budget: EnumerationBudget,
) -> Result<f64> {
    glm_elbo_with_order(grid, q, prior, noise, phi, y, budget, false)
}

/// Same sum in the independent (first-variable-fastest) enumeration order.
pub fn glm_brute_force_elbo_alt(
    grid: &SupportGrid,
    q: &VariationalDist,
    prior: &VariationalDist,
    noise: &NoiseModel,
    phi: ArrayView2<f64>,
    y: ArrayView1<f64>,
    budget: EnumerationBudget,
) -> Result<f64> {
    glm_elbo_with_order(grid, q, prior, noise, phi, y, budget, true)
}

/// Scalar network forward pass, written directly against the architecture's
/// slot map and independent of the Kronecker state machinery.
pub fn scalar_network(arch: &BnnArch, x_row: &[f64], w: &[f64]) -> f64 {
    let mut values = x_row.to_vec();
    for layer in 0..arch.num_layers() {
        let last = layer + 1 == arch.num_layers();
        let width = arch.layer_widths()[layer];
        let mut next = Vec::with_capacity(width);
        for neuron in 0..width {
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

/// Exact network ELBO by hypothesis enumeration using the scalar network.
#[allow(clippy::too_many_arguments)]
pub fn bnn_brute_force_elbo(
    arch: &BnnArch,
    grid: &SupportGrid,
    q: &MeanFieldDist,
    prior: &MeanFieldDist,
    noise: &NoiseModel,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    budget: EnumerationBudget,
) -> Result<f64> {
    let dims = vec![grid.m_bar(); grid.b()];
    budget.check(&dims, noise.m_sigma())?;
    let n = x.nrows();
    let mut total = 0.0;
    for idx in enumerate_indices(&dims) {
        let w = weights_at(grid, &idx);
        let qw: f64 = idx
            .iter()
            .enumerate()
            .map(|(j, &k)| q.probs()[j][k])
            .product();
        let pw: f64 = idx
            .iter()
            .enumerate()
            .map(|(j, &k)| prior.probs()[j][k])
            .product();
        let mut sse = 0.0;
        for i in 0..n {
            let row: Vec<f64> = x.row(i).to_vec();
            let pred = scalar_network(arch, &row, &w);
            sse += (y[i] - pred) * (y[i] - pred);
        }
        for (k, &s2) in noise.sigma2_values().iter().enumerate() {
            let joint_q = qw * noise.q_probs()[k];
            let joint_p = pw * noise.prior_probs()[k];
            total += joint_q * (gaussian_loglik(sse, n, s2) + joint_p.ln() - joint_q.ln());
        }
    }
    Ok(total)
}

/// Exact `qᵀ log ℓ` of the logistic model by enumeration, with
/// `log ℓ_i = −y_i z_i − log(1+exp(−z_i))` and `Pr(y=0|w) = σ(z)`.
pub fn logistic_brute_force_qt_logl(
    grid: &SupportGrid,
    q: &MeanFieldDist,
    phi: ArrayView2<f64>,
    labels: ArrayView1<f64>,
    budget: EnumerationBudget,
) -> Result<f64> {
    let dims = vec![grid.m_bar(); grid.b()];
    budget.check(&dims, 1)?;
    let n = phi.nrows();
    let mut total = 0.0;
    for idx in enumerate_indices(&dims) {
        let w = weights_at(grid, &idx);
        let qw: f64 = idx
            .iter()
            .enumerate()
            .map(|(j, &k)| q.probs()[j][k])
            .product();
        let mut loglik = 0.0;
        for i in 0..n {
            let z: f64 = (0..w.len()).map(|j| phi[(i, j)] * w[j]).sum();
            let log1pexp = if -z > 30.0 { -z } else { (-z).exp().ln_1p() };
            loglik += -labels[i] * z - log1pexp;
        }
        total += qw * loglik;
    }
    Ok(total)
}

/// Exact joint entropy `−Σ_w q(w) log q(w)` by enumeration.
pub fn entropy_exact(q: &VariationalDist, budget: EnumerationBudget) -> Result<f64> {
    let dims = vec![q.m_bar(); q.b()];
    budget.check(&dims, 1)?;
    let mut total = 0.0;
    for idx in enumerate_indices(&dims) {
        let p = joint_prob(q, &idx);
        total -= p * p.ln();
    }
    Ok(total)
}

/// Exact cross term `Σ_w q(w) log p(w)` by enumeration.
pub fn cross_term_exact(
    q: &VariationalDist,
    prior: &VariationalDist,
    budget: EnumerationBudget,
) -> Result<f64> {
    let dims = vec![q.m_bar(); q.b()];
    budget.check(&dims, 1)?;
    let mut total = 0.0;
    for idx in enumerate_indices(&dims) {
        total += joint_prob(q, &idx) * joint_prob(prior, &idx).ln();
    }
    Ok(total)
}

/// Exact negative-entropy gradient `∂(qᵀ log q)/∂θ` of a mixture w.r.t. all
/// logits, by central finite differences over the enumerated value. Layout:
/// `[component logits …, mixture logits]`.
pub fn mixture_neg_entropy_grad_fd(
    q: &MixtureDist,
    step: f64,
    budget: EnumerationBudget,
) -> Result<Vec<f64>> {
    let (r, b, m) = (q.r(), q.b(), q.m_bar());
    let pack = |q: &MixtureDist| {
        let mut out = Vec::with_capacity(r * b * m + r);
        for comp in q.components() {
            for row in comp.logits() {
                out.extend_from_slice(row);
            }
        }
        out.extend_from_slice(q.mixture_logits());
        out
    };
    let unpack = |params: &[f64]| -> Result<MixtureDist> {
        let mut pos = 0;
        let mut comps = Vec::with_capacity(r);
        for _ in 0..r {
            let mut rows = Vec::with_capacity(b);
            for _ in 0..b {
                rows.push(params[pos..pos + m].to_vec());
                pos += m;
            }
            comps.push(MeanFieldDist::from_logits(rows)?);
        }
        MixtureDist::new(params[pos..pos + r].to_vec(), comps)
    };
    let params = pack(q);
    let f = |p: &[f64]| -> Result<f64> {
        let dist = VariationalDist::Mixture(unpack(p)?);
        Ok(-entropy_exact(&dist, budget)?)
    };
    finite_diff_grad(f, &params, step)
}

/// Central finite differences, one coordinate at a time.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(DirectError::Domain(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut grad = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for i in 0..params.len() {
        work[i] = params[i] + step;
        let hi = f(&work)?;
        work[i] = params[i] - step;
        let lo = f(&work)?;
        work[i] = params[i];
        grad.push((hi - lo) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use direct::seeded_rng;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    #[test]
    fn budget_refuses_oversized_instances() {
        let q = VariationalDist::MeanField(MeanFieldDist::uniform(30, 2));
        let err = entropy_exact(&q, EnumerationBudget(1000)).unwrap_err();
        assert!(matches!(err, DirectError::SizeExceeded { .. }));
    }

    #[test]
    fn two_orderings_agree() {
        let mut rng = seeded_rng(1);
        let grid = SupportGrid::uniform(4, vec![-1.0, 0.0, 1.0]).unwrap();
        let mf = |rng: &mut direct::SeededRng| {
            MeanFieldDist::from_logits(
                (0..4)
                    .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            )
            .unwrap()
        };
        let q = VariationalDist::MeanField(mf(&mut rng));
        let prior = VariationalDist::MeanField(mf(&mut rng));
        let noise = NoiseModel::log_uniform(0.4, 2).unwrap();
        let phi = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
        let a = glm_brute_force_elbo(
            &grid,
            &q,
            &prior,
            &noise,
            phi.view(),
            y.view(),
            EnumerationBudget::default(),
        )
        .unwrap();
        let b = glm_brute_force_elbo_alt(
            &grid,
            &q,
            &prior,
            &noise,
            phi.view(),
            y.view(),
            EnumerationBudget::default(),
        )
        .unwrap();
        assert!(
            (a - b).abs() <= 1e-12 * a.abs().max(1.0),
            "orderings disagree: {a} vs {b}"
        );
    }

    #[test]
    fn finite_differences_are_exact_on_quadratics() {
        let f = |x: &[f64]| Ok(3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1] * x[1]);
        let g = finite_diff_grad(f, &[1.5, -0.5], 1e-5).unwrap();
        assert!((g[0] - (6.0 * 1.5 - 2.0 * -0.5)).abs() < 1e-8);
        assert!((g[1] - (-2.0 * 1.5 + 2.0 * -0.5)).abs() < 1e-8);
    }

    #[test]
    fn halving_the_step_quarters_the_error() {
        // f(x) = x⁴ has FD error h²·f'''(x)/6 + O(h⁴).
        let f = |x: &[f64]| Ok(x[0].powi(4));
        let exact = 4.0 * 1.2f64.powi(3);
        let err_at = |h: f64| {
            let g = finite_diff_grad(f, &[1.2], h).unwrap();
            (g[0] - exact).abs()
        };
        let e1 = err_at(1e-2);
        let e2 = err_at(5e-3);
        let ratio = e1 / e2;
        assert!(
            (3.0..5.0).contains(&ratio),
            "error ratio {ratio} not ~4 (O(h²) violated)"
        );
    }
}
