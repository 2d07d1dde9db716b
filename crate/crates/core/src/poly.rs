//! Polynomial spaces on reference simplices and piecewise polynomials over a
//! mesh: orthonormal reference bases, S^{p,r} bookkeeping (r ∈ {0,1}), and
//! elementwise L² projection.

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::multi_index::{indices_up_to, MultiIndex};
use crate::quad::{gauss_legendre, triangle_rule};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Orthonormal basis of P_p on the reference simplex (unit interval or unit
/// triangle), stored as coefficient rows over centroid-centered monomials
/// (centering keeps the Gram matrices well conditioned).
#[derive(Debug, Clone)]
pub struct RefBasis {
    pub p: usize,
    pub d: usize,
    pub center: [f64; 2],
    pub monomials: Vec<MultiIndex>,
    /// `coefs[i]` expands basis function i over `(x - center)^monomials`.
    pub coefs: Vec<Vec<f64>>,
}

fn basis_cache() -> &'static Mutex<HashMap<(usize, usize), Arc<RefBasis>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<RefBasis>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Quadrature nodes and weights integrating exactly over the reference
/// simplex up to total degree `deg`.
pub fn simplex_quadrature(d: usize, deg: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    match d {
        1 => {
            let n = deg / 2 + 1;
            let (xs, ws) = gauss_legendre(n);
            (
                xs.iter().map(|x| [0.5 * (x + 1.0), 0.0]).collect(),
                ws.iter().map(|w| 0.5 * w).collect(),
            )
        }
        _ => triangle_rule(deg + 1),
    }
}

fn monomial_eval(m: MultiIndex, x: [f64; 2], c: [f64; 2]) -> f64 {
    (x[0] - c[0]).powi(m[0] as i32) * (x[1] - c[1]).powi(m[1] as i32)
}

pub fn reference_basis(p: usize, d: usize) -> Result<Arc<RefBasis>> {
    if d != 1 && d != 2 {
        return Err(Error::InvalidInput("dimension must be 1 or 2".into()));
    }
    if p > 10 {
        return Err(Error::InvalidInput(
            "reference bases are conditioned only up to p = 10".into(),
        ));
    }
    if let Some(b) = basis_cache().lock().unwrap().get(&(p, d)) {
        return Ok(b.clone());
    }
    let monomials = indices_up_to(d, p);
    let n = monomials.len();
    let center = if d == 1 { [0.5, 0.0] } else { [1.0 / 3.0, 1.0 / 3.0] };
    let (qx, qw) = simplex_quadrature(d, 2 * p);
    // Monomial Gram, exact at this quadrature order.
    let mut gram = vec![vec![0.0; n]; n];
    for (i, mi) in monomials.iter().enumerate() {
        for (j, mj) in monomials.iter().enumerate() {
            gram[i][j] = qx
                .iter()
                .zip(&qw)
                .map(|(x, w)| w * monomial_eval(*mi, *x, center) * monomial_eval(*mj, *x, center))
                .sum();
        }
    }
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[i] * gram[i][j] * b[j];
            }
        }
        s
    };
    // Modified Gram-Schmidt on the monomials, run twice for stability.
    let mut coefs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    for _pass in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let proj = dot(&coefs[i], &coefs[j]);
                let prev = coefs[j].clone();
                for (c, pv) in coefs[i].iter_mut().zip(&prev) {
                    *c -= proj * pv;
                }
            }
            let nrm = dot(&coefs[i], &coefs[i]).sqrt();
            if nrm < 1e-13 {
                return Err(Error::Numerical(format!(
                    "reference basis degenerate at p = {p}, d = {d}"
                )));
            }
            for c in coefs[i].iter_mut() {
                *c /= nrm;
            }
        }
    }
    // One Cholesky polish: with G = L Lᵀ close to I, replacing the basis by
    // L⁻¹·basis squares the remaining orthogonality residual away.
    {
        let mut g = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] = dot(&coefs[i], &coefs[j]);
            }
        }
        let chol = nalgebra::Cholesky::new(g)
            .ok_or_else(|| Error::Numerical("reference basis Gram not positive".into()))?;
        let l = chol.l();
        let old = coefs.clone();
        for i in 0..n {
            // Forward-substitute row i of L⁻¹ applied to the old rows.
            let mut row = old[i].clone();
            for j in 0..i {
                let lij = l[(i, j)];
                for (r, o) in row.iter_mut().zip(&coefs[j]) {
                    *r -= lij * o;
                }
            }
            for r in row.iter_mut() {
                *r /= l[(i, i)];
            }
            coefs[i] = row;
        }
    }
    let basis = Arc::new(RefBasis { p, d, center, monomials, coefs });
    basis_cache()
        .lock()
        .unwrap()
        .insert((p, d), basis.clone());
    Ok(basis)
}

impl RefBasis {
    pub fn len(&self) -> usize {
        self.coefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefs.is_empty()
    }

    pub fn eval(&self, i: usize, x: [f64; 2]) -> f64 {
        self.coefs[i]
            .iter()
            .zip(&self.monomials)
            .map(|(c, m)| c * monomial_eval(*m, x, self.center))
            .sum()
    }

    /// Gradient in reference coordinates.
    pub fn grad(&self, i: usize, x: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0, 0.0];
        let (u, v) = (x[0] - self.center[0], x[1] - self.center[1]);
        for (c, m) in self.coefs[i].iter().zip(&self.monomials) {
            if m[0] > 0 {
                g[0] += c * m[0] as f64 * u.powi(m[0] as i32 - 1) * v.powi(m[1] as i32);
            }
            if m[1] > 0 {
                g[1] += c * m[1] as f64 * u.powi(m[0] as i32) * v.powi(m[1] as i32 - 1);
            }
        }
        g
    }

    /// Evaluate all basis functions at once.
    pub fn eval_all(&self, x: [f64; 2]) -> Vec<f64> {
        let mono: Vec<f64> = self
            .monomials
            .iter()
            .map(|m| monomial_eval(*m, x, self.center))
            .collect();
        self.coefs
            .iter()
            .map(|row| row.iter().zip(&mono).map(|(c, v)| c * v).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PiecewisePolynomial {
    pub mesh: Arc<Mesh>,
    pub degrees: Vec<usize>,
    /// Continuity tag: 0 = broken, 1 = claimed continuous (see
    /// `max_facet_jump` for verification).
    pub continuity: u8,
    /// Per-element coefficients in `reference_basis(degrees[k], d)`.
    pub coefs: Vec<Vec<f64>>,
}

impl PiecewisePolynomial {
    pub fn zero(mesh: Arc<Mesh>, degrees: Vec<usize>, continuity: u8) -> Result<Self> {
        if degrees.len() != mesh.n_elements() {
            return Err(Error::InvalidInput("one degree per element required".into()));
        }
        let coefs = degrees
            .iter()
            .map(|&p| Ok(vec![0.0; reference_basis(p, mesh.d)?.len()]))
            .collect::<Result<Vec<_>>>()?;
        Ok(PiecewisePolynomial { mesh, degrees, continuity, coefs })
    }

    pub fn eval_on(&self, k: usize, x: [f64; 2]) -> f64 {
        let basis = reference_basis(self.degrees[k], self.mesh.d).unwrap();
        let xr = self.mesh.maps[k].apply_inverse(x);
        self.coefs[k]
            .iter()
            .enumerate()
            .map(|(i, c)| c * basis.eval(i, xr))
            .sum()
    }

    pub fn gradient_on(&self, k: usize, x: [f64; 2]) -> [f64; 2] {
        let basis = reference_basis(self.degrees[k], self.mesh.d).unwrap();
        let xr = self.mesh.maps[k].apply_inverse(x);
        let mut gr = [0.0, 0.0];
        for (i, c) in self.coefs[k].iter().enumerate() {
            let g = basis.grad(i, xr);
            gr[0] += c * g[0];
            gr[1] += c * g[1];
        }
        self.mesh.maps[k].grad_pullback(gr)
    }

    pub fn evaluate(&self, x: [f64; 2]) -> Result<f64> {
        let k = self.mesh.locate(x)?;
        Ok(self.eval_on(k, x))
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for k in 0..self.mesh.n_elements() {
            let (qx, qw) = simplex_quadrature(self.mesh.d, 2 * self.degrees[k]);
            let basis = reference_basis(self.degrees[k], self.mesh.d).unwrap();
            let det = self.mesh.reference_jacobian(k);
            for (x, w) in qx.iter().zip(&qw) {
                let v: f64 = self.coefs[k]
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * basis.eval(i, *x))
                    .sum();
                s += w * det * v * v;
            }
        }
        s.sqrt()
    }

    /// Largest trace jump across interior facets, sampled at Gauss points.
    pub fn max_facet_jump(&self) -> f64 {
        let mut worst = 0.0f64;
        for f in &self.mesh.facets {
            if f.elems.len() != 2 {
                continue;
            }
            let (k1, k2) = (f.elems[0], f.elems[1]);
            match self.mesh.d {
                1 => {
                    let x = self.mesh.vertices[f.verts[0]];
                    worst = worst.max((self.eval_on(k1, x) - self.eval_on(k2, x)).abs());
                }
                _ => {
                    let a = self.mesh.vertices[f.verts[0]];
                    let b = self.mesh.vertices[f.verts[1]];
                    let (xs, _) = gauss_legendre(self.degrees[k1].max(self.degrees[k2]) + 1);
                    for t in xs.iter().map(|t| 0.5 * (t + 1.0)) {
                        let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                        worst = worst.max((self.eval_on(k1, x) - self.eval_on(k2, x)).abs());
                    }
                }
            }
        }
        worst
    }

    /// Text dump: `element_id c0 c1 ...`, one line per element.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, c) in self.coefs.iter().enumerate() {
            out.push_str(&format!("{k}"));
            for v in c {
                out.push_str(&format!(" {v:.17e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Dimension of S^{p,r}(T) (minimum rule on shared facets for r = 1).
pub fn space_dimension(mesh: &Mesh, degrees: &[usize], continuity: u8) -> Result<usize> {
    if degrees.len() != mesh.n_elements() {
        return Err(Error::InvalidInput("one degree per element required".into()));
    }
    if continuity == 0 {
        return Ok(degrees
            .iter()
            .map(|&p| indices_up_to(mesh.d, p).len())
            .sum());
    }
    match mesh.d {
        1 => Ok(mesh.vertices.len() + degrees.iter().map(|&p| p.saturating_sub(1)).sum::<usize>()),
        _ => {
            let mut dim = mesh.vertices.len();
            for f in &mesh.facets {
                let p = f.elems.iter().map(|&k| degrees[k]).min().unwrap();
                dim += p.saturating_sub(1);
            }
            for &p in degrees {
                if p >= 3 {
                    dim += (p - 1) * (p - 2) / 2;
                }
            }
            Ok(dim)
        }
    }
}

/// Elementwise L² projection onto S^{p,0}.
pub fn l2_project<F: Fn([f64; 2]) -> f64>(
    mesh: Arc<Mesh>,
    degrees: &[usize],
    f: F,
) -> Result<PiecewisePolynomial> {
    let mut u = PiecewisePolynomial::zero(mesh.clone(), degrees.to_vec(), 0)?;
    for k in 0..mesh.n_elements() {
        let p = degrees[k];
        let basis = reference_basis(p, mesh.d)?;
        let (qx, qw) = simplex_quadrature(mesh.d, 2 * p + 12);
        for (x, w) in qx.iter().zip(&qw) {
            let phys = mesh.maps[k].apply(*x);
            let fv = f(phys);
            for i in 0..basis.len() {
                u.coefs[k][i] += w * fv * basis.eval(i, *x);
            }
        }
        // The reference basis is orthonormal on the reference simplex, so the
        // physical Gram is det * I and the det cancels against the rhs.
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_uniform_mesh, Domain};
    use approx::assert_relative_eq;

    #[test]
    fn basis_counts() {
        assert_eq!(reference_basis(0, 2).unwrap().len(), 1);
        assert_eq!(reference_basis(2, 2).unwrap().len(), 6);
        assert_eq!(reference_basis(3, 1).unwrap().len(), 4);
        assert!(reference_basis(11, 2).is_err());
    }

    #[test]
    fn constant_basis_function() {
        // p = 0, d = 2: single function 1/sqrt(|K̂|) = sqrt(2).
        let b = reference_basis(0, 2).unwrap();
        assert_relative_eq!(b.eval(0, [0.3, 0.2]).abs(), 2.0f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn gram_is_identity() {
        // At p = 6 in 2D the evaluation itself carries ~1e-12 of monomial
        // cancellation noise, so the tolerance is loosened there.
        // Higher degrees lose digits to monomial cancellation during
        // evaluation, hence the graded tolerances.
        for (p, d, tol) in [(4, 1, 1e-12), (7, 1, 1e-12), (3, 2, 1e-12), (6, 2, 1e-10)] {
            let b = reference_basis(p, d).unwrap();
            let (qx, qw) = simplex_quadrature(d, 2 * p);
            for i in 0..b.len() {
                for j in 0..b.len() {
                    let g: f64 = qx
                        .iter()
                        .zip(&qw)
                        .map(|(x, w)| w * b.eval(i, *x) * b.eval(j, *x))
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g - want).abs() < tol, "G[{i}][{j}] = {g} at p={p} d={d}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_fd() {
        let b = reference_basis(5, 2).unwrap();
        let x = [0.31, 0.22];
        let h = 1e-6;
        for i in 0..b.len() {
            let g = b.grad(i, x);
            let fx = (b.eval(i, [x[0] + h, x[1]]) - b.eval(i, [x[0] - h, x[1]])) / (2.0 * h);
            let fy = (b.eval(i, [x[0], x[1] + h]) - b.eval(i, [x[0], x[1] - h])) / (2.0 * h);
            assert_relative_eq!(g[0], fx, max_relative = 1e-6, epsilon = 1e-7);
            assert_relative_eq!(g[1], fy, max_relative = 1e-6, epsilon = 1e-7);
        }
    }

    #[test]
    fn project_mean_value() {
        let mesh = Arc::new(build_uniform_mesh(&Domain::unit_interval(), 1).unwrap());
        let u = l2_project(mesh, &[0], |x| x[0]).unwrap();
        assert_relative_eq!(u.evaluate([0.37, 0.0]).unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn projection_reproduces_members() {
        let mesh = Arc::new(build_uniform_mesh(&Domain::unit_square(), 2).unwrap());
        let f = |x: [f64; 2]| 1.0 - 2.0 * x[0] + 3.0 * x[1] + x[0] * x[1];
        let u = l2_project(mesh.clone(), &vec![2; mesh.n_elements()], f).unwrap();
        for x in [[0.3, 0.4], [0.9, 0.05], [0.5, 0.5]] {
            assert_relative_eq!(u.evaluate(x).unwrap(), f(x), max_relative = 1e-11);
        }
    }

    #[test]
    fn projection_orthogonality() {
        let mesh = Arc::new(build_uniform_mesh(&Domain::unit_interval(), 4).unwrap());
        let f = |x: [f64; 2]| (std::f64::consts::PI * x[0]).sin();
        let u = l2_project(mesh.clone(), &[1, 1, 1, 1], f).unwrap();
        for k in 0..4 {
            let basis = reference_basis(1, 1).unwrap();
            let (qx, qw) = simplex_quadrature(1, 24);
            for i in 0..basis.len() {
                let r: f64 = qx
                    .iter()
                    .zip(&qw)
                    .map(|(x, w)| {
                        let phys = mesh.maps[k].apply(*x);
                        w * (f(phys) - u.eval_on(k, phys)) * basis.eval(i, *x)
                    })
                    .sum();
                assert!(r.abs() < 1e-10, "residual {r} on element {k}");
            }
        }
    }

    #[test]
    fn projection_norm_decreasing_and_idempotent() {
        let mesh = Arc::new(build_uniform_mesh(&Domain::unit_interval(), 4).unwrap());
        let f = |x: [f64; 2]| (3.0 * x[0]).exp().sin();
        let degrees = [2, 2, 2, 2];
        let u = l2_project(mesh.clone(), &degrees, f).unwrap();
        let (qx, qw) = simplex_quadrature(1, 40);
        let mut f_norm2 = 0.0;
        for k in 0..4 {
            let det = mesh.reference_jacobian(k);
            for (x, w) in qx.iter().zip(&qw) {
                let phys = mesh.maps[k].apply(*x);
                f_norm2 += w * det * f(phys) * f(phys);
            }
        }
        assert!(u.l2_norm() <= f_norm2.sqrt() * (1.0 + 1e-12));
        let again = l2_project(mesh.clone(), &degrees, |x| u.evaluate(x).unwrap()).unwrap();
        for (a, b) in u.coefs.iter().flatten().zip(again.coefs.iter().flatten()) {
            assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-11);
        }
    }

    #[test]
    fn random_coefficients_vs_monomial_oracle() {
        let mesh = Arc::new(build_uniform_mesh(&Domain::unit_square(), 1).unwrap());
        let mut u = PiecewisePolynomial::zero(mesh.clone(), vec![3, 3], 0).unwrap();
        let vals = [0.37, -1.2, 0.05, 2.2, -0.7, 1.1, 0.4, -0.3, 0.9, 0.13];
        u.coefs[0].copy_from_slice(&vals);
        let basis = reference_basis(3, 2).unwrap();
        let x = [0.61, 0.17];
        let k = mesh.locate(x).unwrap();
        assert_eq!(k, 0);
        let xr = mesh.maps[0].apply_inverse(x);
        let direct: f64 = (0..10)
            .map(|i| {
                let mut v = 0.0;
                for (c, m) in basis.coefs[i].iter().zip(&basis.monomials) {
                    v += c
                        * (xr[0] - basis.center[0]).powi(m[0] as i32)
                        * (xr[1] - basis.center[1]).powi(m[1] as i32);
                }
                vals[i] * v
            })
            .sum();
        assert_relative_eq!(u.evaluate(x).unwrap(), direct, max_relative = 1e-12);
    }

    #[test]
    fn s1_dimension_on_interval() {
        let mesh = build_uniform_mesh(&Domain::unit_interval(), 5).unwrap();
        assert_eq!(space_dimension(&mesh, &[3; 5], 1).unwrap(), 5 * 3 + 1);
        assert_eq!(space_dimension(&mesh, &[1; 5], 1).unwrap(), 6);
        assert_eq!(space_dimension(&mesh, &[2; 5], 0).unwrap(), 15);
    }

    #[test]
    fn outside_point_rejected() {
        let mesh = Arc::new(build_uniform_mesh(&Domain::unit_interval(), 2).unwrap());
        let u = PiecewisePolynomial::zero(mesh, vec![1, 1], 0).unwrap();
        assert!(u.evaluate([1.5, 0.0]).is_err());
    }

    #[test]
    fn facet_jump_of_continuous_function() {
        let mesh = Arc::new(build_uniform_mesh(&Domain::unit_square(), 2).unwrap());
        let f = |x: [f64; 2]| 1.0 + x[0] - 0.5 * x[1];
        let u = l2_project(mesh.clone(), &vec![1; mesh.n_elements()], f).unwrap();
        assert!(u.max_facet_jump() < 1e-10);
    }
}
