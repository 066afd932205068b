//! Sum-of-Kronecker-product vector algebra.
//!
//! A length `m̄_1·m̄_2·…·m̄_b` vector is held implicitly as a sum of terms,
//! each term a scalar coefficient times a Kronecker product of `b` factors
//! of lengths `m̄_1..m̄_b`. Factors equal to the all-ones vector are not
//! stored; a term keeps only its non-unity factors in a sparse map. This is
//! what keeps inner products at `O(b·m̄)` per term pair instead of `O(m̄^b)`,
//! and it is the representation every model in this crate reduces to.
//!
//! Per-variable lengths may differ (the noise-variance variable typically has
//! its own level count), so `dims` is a list rather than a single `m̄`.

use std::collections::BTreeMap;

use crate::error::{DirectError, Result};
use crate::numeric::stable_product;

/// Default cap on dense materialization (`dense_expand`).
pub const DENSE_CAP: usize = 1_000_000;

/// One Kronecker-product term: `coeff · ⊗_j f_j`, storing only non-unity
/// factors. An empty factor map is `coeff · 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronTerm {
    pub coeff: f64,
    factors: BTreeMap<usize, Vec<f64>>,
}

impl KronTerm {
    /// The all-ones term with the given coefficient.
    pub fn ones(coeff: f64) -> Self {
        KronTerm {
            coeff,
            factors: BTreeMap::new(),
        }
    }

    /// Attach a factor for variable `var`. Exact all-ones factors are
    /// dropped since they are implicit.
    pub fn with_factor(mut self, var: usize, factor: Vec<f64>) -> Self {
        self.set_factor(var, factor);
        self
    }

    /// Replace (or remove, if all-ones) the factor for `var`.
    pub fn set_factor(&mut self, var: usize, factor: Vec<f64>) {
        if factor.iter().all(|&x| x == 1.0) {
            self.factors.remove(&var);
        } else {
            self.factors.insert(var, factor);
        }
    }

    pub fn factor(&self, var: usize) -> Option<&[f64]> {
        self.factors.get(&var).map(|f| f.as_slice())
    }

    /// Iterator over stored (variable index, factor) pairs in index order.
    pub fn factors(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.factors.iter().map(|(&j, f)| (j, f.as_slice()))
    }

    /// Indices of variables whose factor is not all-ones.
    pub fn support(&self) -> Vec<usize> {
        self.factors.keys().copied().collect()
    }

    fn check_dims(&self, dims: &[usize]) -> Result<()> {
        for (&j, f) in &self.factors {
            if j >= dims.len() {
                return Err(DirectError::shape(
                    "kron term factor index",
                    format!("< {}", dims.len()),
                    j,
                ));
            }
            if f.len() != dims[j] {
                return Err(DirectError::shape(
                    "kron term factor length",
                    dims[j],
                    f.len(),
                ));
            }
        }
        Ok(())
    }
}

/// A sum of Kronecker-product terms over shared per-variable lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct KronSumVec {
    dims: Vec<usize>,
    terms: Vec<KronTerm>,
}

impl KronSumVec {
    /// The zero vector (no terms) over the given per-variable lengths.
    pub fn zero(dims: Vec<usize>) -> Self {
        KronSumVec {
            dims,
            terms: Vec::new(),
        }
    }

    pub fn from_terms(dims: Vec<usize>, terms: Vec<KronTerm>) -> Result<Self> {
        let mut v = KronSumVec::zero(dims);
        for t in terms {
            v.push_term(t)?;
        }
        Ok(v)
    }

    pub fn push_term(&mut self, term: KronTerm) -> Result<()> {
        term.check_dims(&self.dims)?;
        self.terms.push(term);
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn terms(&self) -> &[KronTerm] {
        &self.terms
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Multiply every coefficient by `alpha`.
    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.terms {
            t.coeff *= alpha;
        }
    }

    /// Append another vector's terms (same dims required).
    pub fn add_assign(&mut self, other: &KronSumVec) -> Result<()> {
        self.check_same_dims(other, "kron add")?;
        self.terms.extend(other.terms.iter().cloned());
        Ok(())
    }

    fn check_same_dims(&self, other: &KronSumVec, context: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(DirectError::shape(
                context,
                format!("{:?}", self.dims),
                format!("{:?}", other.dims),
            ));
        }
        Ok(())
    }

    /// Inner product `<self, other>`, computed per term pair as the product
    /// of per-variable factor inner products. A missing factor contributes
    /// the sum of the other side's entries, and `m̄_j` when both are missing.
    /// Products over variables run through `stable_product`, so extreme
    /// factor magnitudes fall back to log-magnitude + sign accumulation.
    pub fn inner(&self, other: &KronSumVec) -> Result<f64> {
        self.check_same_dims(other, "kron inner product")?;
        let mut total = 0.0;
        let mut per_var: Vec<f64> = Vec::with_capacity(self.dims.len());
        for ta in &self.terms {
            for tk in &other.terms {
                per_var.clear();
                per_var.push(ta.coeff * tk.coeff);
                for (j, &mj) in self.dims.iter().enumerate() {
                    let v = match (ta.factors.get(&j), tk.factors.get(&j)) {
                        (None, None) => mj as f64,
                        (Some(f), None) => f.iter().sum(),
                        (None, Some(g)) => g.iter().sum(),
                        (Some(f), Some(g)) => {
                            f.iter().zip(g.iter()).map(|(&x, &y)| x * y).sum()
                        }
                    };
                    per_var.push(v);
                }
                total += stable_product(&per_var);
            }
        }
        Ok(total)
    }

    /// Elementwise product. Term count multiplies; per-pair factors multiply
    /// elementwise with missing factors acting as ones.
    pub fn hadamard(&self, other: &KronSumVec) -> Result<KronSumVec> {
        self.check_same_dims(other, "kron hadamard")?;
        let mut out = KronSumVec::zero(self.dims.clone());
        for ta in &self.terms {
            for tk in &other.terms {
                let mut t = KronTerm::ones(ta.coeff * tk.coeff);
                for (&j, f) in &ta.factors {
                    match tk.factors.get(&j) {
                        Some(g) => {
                            let prod: Vec<f64> =
                                f.iter().zip(g.iter()).map(|(&x, &y)| x * y).collect();
                            t.set_factor(j, prod);
                        }
                        None => t.set_factor(j, f.clone()),
                    }
                }
                for (&j, g) in &tk.factors {
                    if !ta.factors.contains_key(&j) {
                        t.set_factor(j, g.clone());
                    }
                }
                out.terms.push(t);
            }
        }
        Ok(out)
    }

    /// Elementwise natural log of a single-term vector with positive entries.
    ///
    /// The result is the generalized Kronecker sum of the per-variable logs:
    /// one term per stored factor (carrying `ln f_j` at slot `j`) plus a
    /// constant term carrying `ln coeff`. Stored all-ones factors would
    /// contribute zero terms, which is why only stored factors appear.
    pub fn elementwise_log(&self) -> Result<KronSumVec> {
        if self.terms.len() != 1 {
            return Err(DirectError::Unsupported(format!(
                "elementwise log needs exactly one term, got {}",
                self.terms.len()
            )));
        }
        let term = &self.terms[0];
        if term.coeff <= 0.0 {
            return Err(DirectError::Domain(format!(
                "elementwise log needs a positive coefficient, got {}",
                term.coeff
            )));
        }
        let mut out = KronSumVec::zero(self.dims.clone());
        for (&j, f) in &term.factors {
            if f.iter().any(|&x| x <= 0.0) {
                return Err(DirectError::Domain(format!(
                    "elementwise log needs positive entries, factor {j} has a nonpositive one"
                )));
            }
            let logged: Vec<f64> = f.iter().map(|&x| x.ln()).collect();
            out.terms.push(KronTerm::ones(1.0).with_factor(j, logged));
        }
        out.terms.push(KronTerm::ones(term.coeff.ln()));
        Ok(out)
    }

    /// Explicit dense materialization in the grid ordering (first variable
    /// varies slowest). Test oracle helper; refuses products above `cap`.
    pub fn dense_expand_with_cap(&self, cap: usize) -> Result<Vec<f64>> {
        let mut total: u128 = 1;
        for &m in &self.dims {
            total = total.saturating_mul(m as u128);
        }
        if total > cap as u128 {
            return Err(DirectError::SizeExceeded {
                requested: total,
                cap: cap as u128,
            });
        }
        let total = total as usize;
        let mut dense = vec![0.0; total];
        for term in &self.terms {
            let mut partial = vec![term.coeff];
            for (j, &mj) in self.dims.iter().enumerate() {
                let mut next = Vec::with_capacity(partial.len() * mj);
                match term.factors.get(&j) {
                    Some(f) => {
                        for &e in &partial {
                            for &x in f {
                                next.push(e * x);
                            }
                        }
                    }
                    None => {
                        for &e in &partial {
                            for _ in 0..mj {
                                next.push(e);
                            }
                        }
                    }
                }
                partial = next;
            }
            for (d, p) in dense.iter_mut().zip(partial) {
                *d += p;
            }
        }
        Ok(dense)
    }

    /// `dense_expand_with_cap` at the default cap.
    pub fn dense_expand(&self) -> Result<Vec<f64>> {
        self.dense_expand_with_cap(DENSE_CAP)
    }

    /// Merge terms with matching non-unity support whose factors are equal or
    /// proportional, and drop exact-zero terms. Dense semantics unchanged.
    pub fn compact(&self) -> KronSumVec {
        let mut out = KronSumVec::zero(self.dims.clone());
        'terms: for term in &self.terms {
            if term.coeff == 0.0 {
                continue;
            }
            for kept in &mut out.terms {
                if kept.support() != term.support() {
                    continue;
                }
                if let Some(ratio) = proportional_ratio(kept, term) {
                    kept.coeff += term.coeff * ratio;
                    continue 'terms;
                }
            }
            out.terms.push(term.clone());
        }
        out.terms.retain(|t| t.coeff != 0.0);
        out
    }
}

/// If `b`'s factors are all proportional to `a`'s (same support assumed),
/// return the product of the per-variable ratios so that
/// `dense(b) == ratio · coeff_b/coeff_b · dense-shape-of-a`; bitwise-equal
/// factors take the exact `ratio = 1` path.
fn proportional_ratio(a: &KronTerm, b: &KronTerm) -> Option<f64> {
    const REL_TOL: f64 = 1e-14;
    let mut ratio = 1.0;
    for ((ja, fa), (jb, fb)) in a.factors().zip(b.factors()) {
        debug_assert_eq!(ja, jb);
        if fa == fb {
            continue;
        }
        // Find an anchor entry to define the per-variable ratio.
        let anchor = fa
            .iter()
            .zip(fb)
            .find(|(&x, _)| x != 0.0)
            .map(|(&x, &y)| y / x)?;
        for (&x, &y) in fa.iter().zip(fb) {
            let diff = (y - anchor * x).abs();
            let scale = y.abs().max((anchor * x).abs());
            if diff > REL_TOL * scale.max(1e-300) {
                return None;
            }
        }
        ratio *= anchor;
    }
    Some(ratio)
}
