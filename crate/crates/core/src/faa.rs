//! Variable-scale chain rule: coefficients E_{s,r}(z, x) with
//!
//!   D^s_x u(x + z ε(x)) = (D^s u)(x') + Σ_{|r| <= |s|} (D^r u)(x') E_{s,r}(z, x),
//!
//! x' = x + z ε(x). Each E_{s,r} is a finite sum of terms
//! P(z) · Π_i D^{t_i} ε(x) with P a polynomial of degree <= |r| without
//! constant part and Σ_i (|t_i| - 1) = |s| - |r|. The term list is built by
//! the obvious induction on |s| (differentiate, split into the three sums,
//! merge by (r, factor multiset) key) rather than a closed Bell-polynomial
//! form, so each generation step can be audited directly.

use crate::error::{Error, Result};
use crate::multi_index::{add, indices_up_to, order, unit, MultiIndex};
use std::collections::BTreeMap;

/// One term of E_{s,r}: `poly` maps z-exponents to coefficients, `factors`
/// lists the ε-derivative multi-indices (sorted; each of order >= 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FaaTerm {
    pub r: MultiIndex,
    pub poly: BTreeMap<MultiIndex, f64>,
    pub factors: Vec<MultiIndex>,
}

impl FaaTerm {
    pub fn poly_eval(&self, z: [f64; 2]) -> f64 {
        self.poly
            .iter()
            .map(|(e, c)| c * z[0].powi(e[0] as i32) * z[1].powi(e[1] as i32))
            .sum()
    }

    /// Upper bound for sup_{|z| <= R} |poly(z)| (triangle inequality).
    pub fn poly_sup(&self, radius: f64) -> f64 {
        self.poly
            .iter()
            .map(|(e, c)| c.abs() * radius.powi(order(*e) as i32))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct FaaExpansion {
    pub s: MultiIndex,
    pub d: usize,
    pub terms: Vec<FaaTerm>,
}

/// Bound certificate: |E_{s,r}(z, x)| <= C_r ε(x)^(|r| - |s|) for |z| <= R.
#[derive(Debug, Clone)]
pub struct BoundCertificate {
    pub s: MultiIndex,
    pub radius: f64,
    pub c_r: Vec<(MultiIndex, f64)>,
}

impl BoundCertificate {
    pub fn bound_for(&self, r: MultiIndex, eps: f64) -> f64 {
        let c = self
            .c_r
            .iter()
            .find(|(rr, _)| *rr == r)
            .map(|(_, c)| *c)
            .unwrap_or(0.0);
        c * eps.powi(order(r) as i32 - order(self.s) as i32)
    }
}

pub fn expand(s: MultiIndex, d: usize) -> Result<FaaExpansion> {
    if d != 1 && d != 2 {
        return Err(Error::InvalidInput("dimension must be 1 or 2".into()));
    }
    if d == 1 && s[1] != 0 {
        return Err(Error::InvalidInput("1D multi-index must have zero second entry".into()));
    }
    if order(s) > 4 {
        return Err(Error::InvalidInput("expansion orders above 4 are not supported".into()));
    }
    if order(s) == 0 {
        return Ok(FaaExpansion { s, d, terms: Vec::new() });
    }
    // Differentiate along a fixed unit-step path: axis 0 steps first.
    let mut steps = Vec::new();
    for axis in 0..2 {
        for _ in 0..s[axis] {
            steps.push(axis);
        }
    }
    let mut cur = base_case(steps[0], d);
    let mut cur_s = unit(steps[0]);
    for &axis in &steps[1..] {
        cur = step(&cur, cur_s, axis, d);
        cur_s = add(cur_s, unit(axis));
    }
    Ok(FaaExpansion { s, d, terms: cur })
}

fn base_case(axis: usize, d: usize) -> Vec<FaaTerm> {
    // ∂_i u(x + zε) = (∂_i u)(x') + Σ_m (∂_m u)(x') z_m ∂_i ε.
    (0..d)
        .map(|m| FaaTerm {
            r: unit(m),
            poly: BTreeMap::from([(unit(m), 1.0)]),
            factors: vec![unit(axis)],
        })
        .collect()
}

fn step(terms: &[FaaTerm], s: MultiIndex, axis: usize, d: usize) -> Vec<FaaTerm> {
    let mut merged: BTreeMap<(MultiIndex, Vec<MultiIndex>), BTreeMap<MultiIndex, f64>> =
        BTreeMap::new();
    let mut push = |r: MultiIndex, poly: BTreeMap<MultiIndex, f64>, factors: Vec<MultiIndex>| {
        let mut f = factors;
        f.sort();
        let slot = merged.entry((r, f)).or_default();
        for (e, c) in poly {
            *slot.entry(e).or_insert(0.0) += c;
        }
    };
    // Differentiating the leading term (D^s u)(x') spawns fresh terms.
    for m in 0..d {
        push(
            add(s, unit(m)),
            BTreeMap::from([(unit(m), 1.0)]),
            vec![unit(axis)],
        );
    }
    for t in terms {
        // T1: derivative hits (D^r u)(x') through the plain x-slot.
        push(add(t.r, unit(axis)), t.poly.clone(), t.factors.clone());
        // T2: derivative hits (D^r u)(x') through the zε(x)-slot.
        for m in 0..d {
            let poly: BTreeMap<MultiIndex, f64> =
                t.poly.iter().map(|(e, c)| (add(*e, unit(m)), *c)).collect();
            let mut factors = t.factors.clone();
            factors.push(unit(axis));
            push(add(t.r, unit(m)), poly, factors);
        }
        // T3: derivative hits one of the ε-derivative factors.
        for j in 0..t.factors.len() {
            let mut factors = t.factors.clone();
            factors[j] = add(factors[j], unit(axis));
            push(t.r, t.poly.clone(), factors);
        }
    }
    merged
        .into_iter()
        .filter_map(|((r, factors), poly)| {
            let poly: BTreeMap<MultiIndex, f64> =
                poly.into_iter().filter(|(_, c)| c.abs() > 0.0).collect();
            if poly.is_empty() {
                None
            } else {
                Some(FaaTerm { r, poly, factors })
            }
        })
        .collect()
}

impl FaaExpansion {
    /// Numeric E_{s,r} for all r, from a z-point and the ε-jet at x
    /// (layout of `indices_up_to(d, |s|)`, as produced by
    /// `LengthScaleField::jet`).
    pub fn evaluate(&self, z: [f64; 2], eps_jet: &[f64]) -> Result<Vec<(MultiIndex, f64)>> {
        let idx = indices_up_to(self.d, order(self.s));
        if eps_jet.len() < idx.len() {
            return Err(Error::InvalidInput(format!(
                "ε-jet table has {} entries, need {}",
                eps_jet.len(),
                idx.len()
            )));
        }
        let lookup: BTreeMap<MultiIndex, f64> =
            idx.iter().copied().zip(eps_jet.iter().copied()).collect();
        let mut out: BTreeMap<MultiIndex, f64> = BTreeMap::new();
        for t in &self.terms {
            let mut prod = t.poly_eval(z);
            for f in &t.factors {
                prod *= lookup
                    .get(f)
                    .ok_or_else(|| Error::InvalidInput("ε-jet entry missing".into()))?;
            }
            *out.entry(t.r).or_insert(0.0) += prod;
        }
        Ok(out.into_iter().collect())
    }

    /// Explicit constants C_r with |E_{s,r}| <= C_r ε^(|r|-|s|) on |z| <= R,
    /// from admissibility constants Λ (indexed by derivative order).
    pub fn bound_check(&self, lambda: &[f64], radius: f64) -> Result<BoundCertificate> {
        if lambda.len() <= order(self.s) {
            return Err(Error::InvalidInput(format!(
                "need Λ up to order {}, got {} entries",
                order(self.s),
                lambda.len()
            )));
        }
        let mut c: BTreeMap<MultiIndex, f64> = BTreeMap::new();
        for t in &self.terms {
            // Π Λ_{|t_i|} ε^{1-|t_i|} = (Π Λ) ε^{|r|-|s|} by the index-set
            // identity Σ (|t_i|-1) = |s|-|r|.
            let prod: f64 = t.factors.iter().map(|f| lambda[order(*f)]).product();
            *c.entry(t.r).or_insert(0.0) += prod * t.poly_sup(radius);
        }
        Ok(BoundCertificate { s: self.s, radius, c_r: c.into_iter().collect() })
    }
}
