//! Dataset ingestion, standardization, random Fourier features, support-grid
//! construction, k-fold splits, and hyperparameter heuristics.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DirectError, Result};
use crate::variational::{MeanFieldDist, SupportGrid};
use crate::SeededRng;

/// A numeric design matrix and target vector.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub column_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Row subset (used by the fold harness).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let d = self.d();
        let mut x = Array2::zeros((rows.len(), d));
        let mut y = Array1::zeros(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            x.row_mut(out).assign(&self.x.row(r));
            y[out] = self.y[r];
        }
        Dataset {
            x,
            y,
            column_names: self.column_names.clone(),
        }
    }
}

/// Load a CSV dataset. The target column is selected by header name or by
/// zero-based index (when the name parses as an integer or there is no
/// header). A leading line with any non-numeric cell is treated as a header.
/// Rows containing unparseable or non-finite cells reject the whole load
/// with a row-indexed report.
pub fn load_csv(path: &Path, target_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| DirectError::Data(format!("cannot open {}: {e}", path.display())))?;

    let mut records: Vec<csv::StringRecord> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DirectError::Data(format!("row {i}: {e}")))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(DirectError::Data("empty dataset".into()));
    }

    // Header detection: first line with any cell that does not parse as f64.
    let first_numeric = records[0]
        .iter()
        .all(|cell| cell.trim().parse::<f64>().is_ok());
    let (header, data_start): (Option<Vec<String>>, usize) = if first_numeric {
        (None, 0)
    } else {
        (
            Some(records[0].iter().map(|s| s.trim().to_string()).collect()),
            1,
        )
    };
    if records.len() == data_start {
        return Err(DirectError::Data("empty dataset (header only)".into()));
    }

    let width = records[data_start].len();
    if width < 2 {
        return Err(DirectError::Data(
            "need at least one feature and one target column".into(),
        ));
    }
    let target_idx = match header
        .as_ref()
        .and_then(|h| h.iter().position(|name| name == target_column))
    {
        Some(idx) => idx,
        None => target_column.parse::<usize>().map_err(|_| {
            DirectError::Data(format!(
                "target column {target_column:?} not found in header and not an index"
            ))
        })?,
    };
    if target_idx >= width {
        return Err(DirectError::Data(format!(
            "target column index {target_idx} out of range (width {width})"
        )));
    }

    let n = records.len() - data_start;
    let d = width - 1;
    let mut x = Array2::zeros((n, d));
    let mut y = Array1::zeros(n);
    let mut bad_rows: Vec<String> = Vec::new();
    for (out, rec) in records[data_start..].iter().enumerate() {
        let row_no = out + data_start;
        if rec.len() != width {
            bad_rows.push(format!("row {row_no}: {} cells, expected {width}", rec.len()));
            continue;
        }
        let mut col_out = 0;
        for (col, cell) in rec.iter().enumerate() {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    if col == target_idx {
                        y[out] = v;
                    } else {
                        x[(out, col_out)] = v;
                        col_out += 1;
                    }
                }
                _ => {
                    bad_rows.push(format!(
                        "row {row_no}: cell {col} ({cell:?}) is not finite numeric"
                    ));
                    break;
                }
            }
        }
    }
    if !bad_rows.is_empty() {
        let shown = bad_rows.iter().take(10).cloned().collect::<Vec<_>>().join("; ");
        let suffix = if bad_rows.len() > 10 {
            format!(" (+{} more)", bad_rows.len() - 10)
        } else {
            String::new()
        };
        return Err(DirectError::Data(format!("unparseable rows: {shown}{suffix}")));
    }

    let column_names = header.map(|h| {
        h.iter()
            .enumerate()
            .filter(|(i, _)| *i != target_idx)
            .map(|(_, s)| s.clone())
            .collect()
    });
    Ok(Dataset { x, y, column_names })
}

/// Load a feature-only CSV (no target column): every cell numeric, optional
/// header line. Same rejection rules as [`load_csv`].
pub fn load_matrix(path: &Path) -> Result<(Array2<f64>, Option<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| DirectError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut records: Vec<csv::StringRecord> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        records.push(rec.map_err(|e| DirectError::Data(format!("row {i}: {e}")))?);
    }
    if records.is_empty() {
        return Err(DirectError::Data("empty dataset".into()));
    }
    let first_numeric = records[0]
        .iter()
        .all(|cell| cell.trim().parse::<f64>().is_ok());
    let (header, data_start) = if first_numeric {
        (None, 0)
    } else {
        (
            Some(records[0].iter().map(|s| s.trim().to_string()).collect()),
            1,
        )
    };
    if records.len() == data_start {
        return Err(DirectError::Data("empty dataset (header only)".into()));
    }
    let width = records[data_start].len();
    let n = records.len() - data_start;
    let mut x = Array2::zeros((n, width));
    let mut bad_rows = Vec::new();
    for (out, rec) in records[data_start..].iter().enumerate() {
        let row_no = out + data_start;
        if rec.len() != width {
            bad_rows.push(format!("row {row_no}: {} cells, expected {width}", rec.len()));
            continue;
        }
        for (col, cell) in rec.iter().enumerate() {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => x[(out, col)] = v,
                _ => {
                    bad_rows.push(format!(
                        "row {row_no}: cell {col} ({cell:?}) is not finite numeric"
                    ));
                    break;
                }
            }
        }
    }
    if !bad_rows.is_empty() {
        let shown = bad_rows.iter().take(10).cloned().collect::<Vec<_>>().join("; ");
        return Err(DirectError::Data(format!("unparseable rows: {shown}")));
    }
    Ok((x, header))
}

/// Per-column affine transform fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    /// Fit per-column mean and standard deviation; constant columns keep a
    /// unit divisor so they map to exactly zero.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(DirectError::Data(
                "standardization needs at least two rows".into(),
            ));
        }
        let mut means = Vec::with_capacity(x.ncols());
        let mut sds = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            means.push(mean);
            sds.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Ok(Standardizer { means, sds })
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.means.len() {
            return Err(DirectError::shape(
                "standardizer columns",
                self.means.len(),
                x.ncols(),
            ));
        }
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.means[j]) / self.sds[j]);
        }
        Ok(out)
    }
}

/// Fit on the training set and return the transform plus the transformed set.
pub fn standardize(train: &Dataset) -> Result<(Standardizer, Dataset)> {
    let t = Standardizer::fit(train.x.view())?;
    let x = t.apply(train.x.view())?;
    Ok((
        t,
        Dataset {
            x,
            y: train.y.clone(),
            column_names: train.column_names.clone(),
        },
    ))
}

/// Random Fourier feature map for a squared-exponential kernel with
/// per-dimension lengthscales. `b` must be even: each frequency contributes
/// a cosine and a sine column scaled by `σ_w·√(2/b)`, so every feature row
/// has squared norm exactly `σ_w²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    /// `(b/2) × d` spectral frequencies.
    pub frequencies: Array2<f64>,
    pub lengthscales: Vec<f64>,
    pub signal_sd: f64,
    pub seed: u64,
}

impl RffMap {
    /// Draw `b/2` frequencies from the SE-ARD spectral density
    /// (`ω_d ~ N(0, 1/lengthscale_d²)`).
    pub fn generate(b: usize, lengthscales: &[f64], signal_sd: f64, seed: u64) -> Result<Self> {
        if b == 0 || b % 2 != 0 {
            return Err(DirectError::Config(format!(
                "feature count must be even, got {b}"
            )));
        }
        if lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(DirectError::Config("lengthscales must be positive".into()));
        }
        if !(signal_sd > 0.0) {
            return Err(DirectError::Config(
                "signal standard deviation must be positive".into(),
            ));
        }
        let d = lengthscales.len();
        let mut rng = crate::seeded_rng(seed);
        let mut frequencies = Array2::zeros((b / 2, d));
        for mut row in frequencies.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z / lengthscales[j];
            }
        }
        Ok(RffMap {
            frequencies,
            lengthscales: lengthscales.to_vec(),
            signal_sd,
            seed,
        })
    }

    pub fn b(&self) -> usize {
        2 * self.frequencies.nrows()
    }

    pub fn d(&self) -> usize {
        self.frequencies.ncols()
    }

    /// Evaluate the map: `Φ[i, 2k] = σ_w √(2/b) cos(ω_kᵀ x_i)`,
    /// `Φ[i, 2k+1] = σ_w √(2/b) sin(ω_kᵀ x_i)`.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d() {
            return Err(DirectError::shape("input columns", self.d(), x.ncols()));
        }
        let b = self.b();
        let scale = self.signal_sd * (2.0 / b as f64).sqrt();
        let proj = x.dot(&self.frequencies.t()); // n × b/2
        let mut out = Array2::zeros((x.nrows(), b));
        for i in 0..x.nrows() {
            for k in 0..b / 2 {
                let angle = proj[(i, k)];
                out[(i, 2 * k)] = scale * angle.cos();
                out[(i, 2 * k + 1)] = scale * angle.sin();
            }
        }
        Ok(out)
    }

    /// The SE-ARD kernel value this map converges to as `b → ∞`.
    pub fn analytic_kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&x, &y), &l) in a.iter().zip(b).zip(&self.lengthscales) {
            let delta = (x - y) / l;
            acc += delta * delta;
        }
        self.signal_sd * self.signal_sd * (-0.5 * acc).exp()
    }
}

/// Hyperparameters from data: per-dimension median pairwise distances for
/// lengthscales, target variance for the signal, a tenth of it for the
/// noise. A stand-in for marginal-likelihood initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lengthscales: Vec<f64>,
    pub signal_sd: f64,
    pub sigma2_hat: f64,
}

pub fn init_hyperparams(train: &Dataset) -> Result<HyperParams> {
    let n = train.n();
    if n < 10 {
        return Err(DirectError::Data(format!(
            "hyperparameter heuristic needs n ≥ 10, got {n}"
        )));
    }
    let y_mean = train.y.sum() / n as f64;
    let y_var = train
        .y
        .iter()
        .map(|&v| (v - y_mean) * (v - y_mean))
        .sum::<f64>()
        / n as f64;
    if y_var <= 0.0 {
        return Err(DirectError::Config("target has zero variance".into()));
    }
    // Deterministic ≤1000-row subsample by stride.
    let cap = 1000.min(n);
    let stride = n.div_ceil(cap);
    let rows: Vec<usize> = (0..n).step_by(stride).collect();
    let mut lengthscales = Vec::with_capacity(train.d());
    for j in 0..train.d() {
        let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
        for (a, &ra) in rows.iter().enumerate() {
            for &rb in rows.iter().skip(a + 1) {
                dists.push((train.x[(ra, j)] - train.x[(rb, j)]).abs());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if dists.is_empty() {
            0.0
        } else if dists.len() % 2 == 1 {
            dists[dists.len() / 2]
        } else {
            0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
        };
        // A constant column gives median 0; fall back to a unit scale.
        lengthscales.push(if median > 0.0 { median } else { 1.0 });
    }
    Ok(HyperParams {
        lengthscales,
        signal_sd: y_var.sqrt(),
        sigma2_hat: 0.1 * y_var,
    })
}

/// One support row: `m̄` evenly spaced values on `[−3σ_w, 3σ_w]`. Built from
/// the exact rational offsets `2i/(m̄−1) − 1`, so an odd `m̄` contains an
/// exact zero and the endpoints are exactly `±3σ_w`.
pub fn make_support(signal_sd: f64, m_bar: usize) -> Result<Vec<f64>> {
    if m_bar < 2 {
        return Err(DirectError::Config(format!("support needs m̄ ≥ 2, got {m_bar}")));
    }
    if !(signal_sd > 0.0) {
        return Err(DirectError::Config(
            "signal standard deviation must be positive".into(),
        ));
    }
    let half = 3.0 * signal_sd;
    Ok((0..m_bar)
        .map(|i| (2.0 * i as f64 / (m_bar - 1) as f64 - 1.0) * half)
        .collect())
}

/// Deterministic shuffled k-fold partition: folds are disjoint, cover every
/// row, and differ in size by at most one.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || n < k {
        return Err(DirectError::Config(format!(
            "k-fold needs 2 ≤ k ≤ n, got k={k}, n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng: SeededRng = crate::seeded_rng(seed);
    order.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// Discretization of a zero-mean Gaussian prior onto the grid by pointwise
/// density normalization: `p_j[k] ∝ exp(−w̄_j[k]²/(2σ_w²))`. The logits are
/// the unnormalized log densities, so the softmax normalization is exact.
pub fn discretized_gaussian_prior(grid: &SupportGrid, signal_sd: f64) -> Result<MeanFieldDist> {
    if !(signal_sd > 0.0) {
        return Err(DirectError::Config(
            "signal standard deviation must be positive".into(),
        ));
    }
    let denom = 2.0 * signal_sd * signal_sd;
    let logits: Vec<Vec<f64>> = grid
        .rows()
        .iter()
        .map(|row| row.iter().map(|&w| -w * w / denom).collect())
        .collect();
    MeanFieldDist::from_logits(logits)
}

/// Synthetic regression data: a random weighting of RFF features corrupted
/// by Gaussian noise. Returns the map, features, targets, and true weights.
pub fn synthetic_rff_regression(
    n: usize,
    d: usize,
    b: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(RffMap, Array2<f64>, Array1<f64>, Vec<f64>)> {
    let map = RffMap::generate(b, &vec![1.0; d], 1.0, seed)?;
    let mut rng = crate::seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let x = Array2::from_shape_fn((n, d), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let phi = map.features(x.view())?;
    let w_true: Vec<f64> = (0..b)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mean: f64 = (0..b).map(|j| phi[(i, j)] * w_true[j]).sum();
        let z: f64 = StandardNormal.sample(&mut rng);
        y[i] = mean + noise_sd * z;
    }
    Ok((map, phi, y, w_true))
}

/// Uniform random row indices (with replacement) for mini-batches.
pub fn batch_indices(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch.min(n)).map(|_| rng.gen_range(0..n)).collect()
}
