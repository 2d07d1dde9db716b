//! Boundary meshes on polygon boundaries and localized residual
//! estimators.
//!
//! Γ = ∂Ω is parametrized by arclength with one affine chart per flat
//! side. Functions on Γ are closures of the arclength parameter; the
//! H^{1/2}(Γ) norm is the L² norm plus the fractional seminorm of the
//! arclength pullback with planar chordal distance, which is equivalent
//! to the chart-based norm on Lipschitz polygons. Residuals are
//! manufactured by removing moments of a smooth datum; no integral
//! operators are assembled.

use crate::error::{Error, Result};
use crate::norms::fractional_core;
use crate::quad::{gauss_legendre, gauss_on};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::sync::Arc;

pub type CurveFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone)]
pub struct BoundaryMesh {
    pub polygon: Vec<[f64; 2]>,
    /// Arclength breakpoints, `breaks[0] = 0`, last entry the perimeter.
    pub breaks: Vec<f64>,
    pub degrees: Vec<usize>,
    /// Polygon side containing each element.
    pub side_of: Vec<usize>,
    /// Arclength of each polygon vertex (length sides + 1).
    pub side_starts: Vec<f64>,
    pub total_length: f64,
    /// Shape-regularity constant max_K (h_K^{-1}|F'_K| + h_K^2 |((F'_K)^T F'_K)^{-1}|).
    pub gamma: f64,
    /// Degree-regularity constant: max ratio of neighboring p-hat.
    pub gamma_p: f64,
}

impl BoundaryMesh {
    pub fn n_elements(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn h(&self, k: usize) -> f64 {
        self.breaks[k + 1] - self.breaks[k]
    }

    pub fn h_max(&self) -> f64 {
        (0..self.n_elements()).map(|k| self.h(k)).fold(0.0, f64::max)
    }

    fn fold(&self, t: f64) -> f64 {
        let lam = self.total_length;
        let mut s = t % lam;
        if s < 0.0 {
            s += lam;
        }
        s
    }

    /// Arclength to plane, periodic in the perimeter.
    pub fn point(&self, t: f64) -> [f64; 2] {
        let s = self.fold(t);
        let ns = self.polygon.len();
        let mut side = match self.side_starts[..=ns]
            .partition_point(|x| *x <= s)
        {
            0 => 0,
            i => i - 1,
        };
        side = side.min(ns - 1);
        let a = self.polygon[side];
        let b = self.polygon[(side + 1) % ns];
        let len = self.side_starts[side + 1] - self.side_starts[side];
        let lam = (s - self.side_starts[side]) / len;
        [a[0] + lam * (b[0] - a[0]), a[1] + lam * (b[1] - a[1])]
    }

    /// Element containing parameter t (ties to the left element break).
    pub fn element_of(&self, t: f64) -> usize {
        let s = self.fold(t);
        match self.breaks.partition_point(|x| *x <= s) {
            0 => 0,
            i => (i - 1).min(self.n_elements() - 1),
        }
    }

    /// Side boundaries around parameter t, for one-sided differencing.
    fn side_window(&self, t: f64) -> (f64, f64) {
        let s = self.fold(t);
        let ns = self.polygon.len();
        let side = match self.side_starts[..=ns].partition_point(|x| *x <= s) {
            0 => 0,
            i => (i - 1).min(ns - 1),
        };
        (self.side_starts[side], self.side_starts[side + 1])
    }
}

fn seg_proper_intersect(p: [f64; 2], q: [f64; 2], r: [f64; 2], s: [f64; 2]) -> bool {
    let orient = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    };
    let (o1, o2) = (orient(p, q, r), orient(p, q, s));
    let (o3, o4) = (orient(r, s, p), orient(r, s, q));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// Uniform subdivision of each polygon side into `n_per_side` elements.
/// `degrees` is one entry (uniform) or one per element.
pub fn boundary_mesh(
    polygon: &[[f64; 2]],
    n_per_side: usize,
    degrees: &[usize],
) -> Result<BoundaryMesh> {
    let ns = polygon.len();
    if ns < 3 {
        return Err(Error::InvalidInput("polygon needs at least 3 vertices".into()));
    }
    if n_per_side == 0 {
        return Err(Error::InvalidInput("need at least one element per side".into()));
    }
    for i in 0..ns {
        for j in i + 1..ns {
            if j == i + 1 || (i == 0 && j == ns - 1) {
                continue;
            }
            let (p, q) = (polygon[i], polygon[(i + 1) % ns]);
            let (r, s) = (polygon[j], polygon[(j + 1) % ns]);
            if seg_proper_intersect(p, q, r, s) {
                return Err(Error::Geometry("polygon is self-intersecting".into()));
            }
        }
    }
    let n = ns * n_per_side;
    let degrees: Vec<usize> = match degrees.len() {
        1 => vec![degrees[0]; n],
        len if len == n => degrees.to_vec(),
        _ => {
            return Err(Error::InvalidInput(format!(
                "expected 1 or {n} degrees, got {}",
                degrees.len()
            )))
        }
    };
    let mut side_starts = vec![0.0];
    for i in 0..ns {
        let (a, b) = (polygon[i], polygon[(i + 1) % ns]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if len < 1e-14 {
            return Err(Error::Geometry("degenerate polygon side".into()));
        }
        side_starts.push(side_starts[i] + len);
    }
    let total_length = side_starts[ns];
    let mut breaks = Vec::with_capacity(n + 1);
    let mut side_of = Vec::with_capacity(n);
    for i in 0..ns {
        let (a, b) = (side_starts[i], side_starts[i + 1]);
        for j in 0..n_per_side {
            breaks.push(a + (b - a) * j as f64 / n_per_side as f64);
            side_of.push(i);
        }
    }
    breaks.push(total_length);
    // Affine chart F_K: (0,1) -> K has |F'| = h_K, so each term is
    // h^{-1}·h + h^2·h^{-2}.
    let gamma = 2.0;
    let phat = |p: usize| p.max(1) as f64;
    let mut gamma_p = 1.0f64;
    for k in 0..n {
        let (a, b) = (phat(degrees[k]), phat(degrees[(k + 1) % n]));
        gamma_p = gamma_p.max(a / b).max(b / a);
    }
    Ok(BoundaryMesh {
        polygon: polygon.to_vec(),
        breaks,
        degrees,
        side_of,
        side_starts,
        total_length,
        gamma,
        gamma_p,
    })
}

/// Tangential (arclength) derivative of u at parameter t, one-sided on
/// the containing flat side near corners.
pub fn surface_gradient(mesh: &BoundaryMesh, u: &dyn Fn(f64) -> f64, t: f64) -> f64 {
    let s = mesh.fold(t);
    let (lo, hi) = mesh.side_window(s);
    let step = 1e-6 * (1.0 + mesh.total_length);
    if s - lo >= 2.0 * step && hi - s >= 2.0 * step {
        (u(s - 2.0 * step) - 8.0 * u(s - step) + 8.0 * u(s + step) - u(s + 2.0 * step))
            / (12.0 * step)
    } else if hi - s >= 2.0 * step {
        (-3.0 * u(s) + 4.0 * u(s + step) - u(s + 2.0 * step)) / (2.0 * step)
    } else {
        (3.0 * u(s) - 4.0 * u(s - step) + u(s - 2.0 * step)) / (2.0 * step)
    }
}

/// A manufactured residual on Γ: a smooth datum minus a piecewise
/// polynomial correction, evaluated in arclength.
#[derive(Clone)]
pub struct GammaFn {
    pub mesh: BoundaryMesh,
    g: CurveFn,
    /// Per element, monomial coefficients of the correction in the local
    /// coordinate s ∈ [0,1].
    coefs: Vec<Vec<f64>>,
}

impl GammaFn {
    fn local(&self, t: f64) -> (usize, f64, f64) {
        let k = self.mesh.element_of(t);
        let h = self.mesh.h(k);
        ((k), (self.mesh.fold(t) - self.mesh.breaks[k]) / h, h)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (k, s, _) = self.local(t);
        let mut poly = 0.0;
        for c in self.coefs[k].iter().rev() {
            poly = poly * s + c;
        }
        (self.g)(self.mesh.fold(t)) - poly
    }

    /// Arclength derivative; the polynomial part is exact, the datum is
    /// differenced inside its flat side.
    pub fn deriv(&self, t: f64) -> f64 {
        let (k, s, h) = self.local(t);
        let mut dpoly = 0.0;
        for (j, c) in self.coefs[k].iter().enumerate().skip(1).rev() {
            dpoly = dpoly * s + j as f64 * c;
        }
        let g = &self.g;
        surface_gradient(&self.mesh, &|x| g(x), t) - dpoly / h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceOrder {
    /// S^{p,0}: no inter-element continuity.
    Discontinuous,
    /// S^{p,1}: continuous, periodic over the closed curve.
    Continuous,
}

/// Basis of the continuous periodic space with per-element degrees
/// `q[k]`: hat functions at the element nodes plus interior bubbles.
/// Returns per-element lists of (global index, local monomial coefs).
fn continuous_basis(mesh: &BoundaryMesh, q: &[usize]) -> (usize, Vec<Vec<(usize, Vec<f64>)>>) {
    let n = mesh.n_elements();
    let mut dim = n;
    let mut per_elem: Vec<Vec<(usize, Vec<f64>)>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut list = vec![
            (k, vec![1.0, -1.0]),
            ((k + 1) % n, vec![0.0, 1.0]),
        ];
        // Bubbles s^{j+1}(1-s), j = 0..q-2; zero at both endpoints.
        for j in 0..q[k].saturating_sub(1) {
            let mut c = vec![0.0; j + 3];
            c[j + 1] = 1.0;
            c[j + 2] = -1.0;
            list.push((dim, c));
            dim += 1;
        }
        per_elem.push(list);
    }
    (dim, per_elem)
}

fn eval_poly(c: &[f64], s: f64) -> f64 {
    let mut v = 0.0;
    for x in c.iter().rev() {
        v = v * s + x;
    }
    v
}

/// u = g − Π g with Π the L² projection onto S^{p,r}(T_Γ).
pub fn orthogonalize(mesh: &BoundaryMesh, g: CurveFn, space: SpaceOrder) -> Result<GammaFn> {
    let n = mesh.n_elements();
    let (gx, gw) = gauss_legendre(24);
    let gauss01: Vec<(f64, f64)> = gx
        .iter()
        .zip(&gw)
        .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect();
    let mut coefs = vec![Vec::new(); n];
    match space {
        SpaceOrder::Discontinuous => {
            for k in 0..n {
                let p = mesh.degrees[k];
                let h = mesh.h(k);
                let m = p + 1;
                let mut gram: DMatrix<f64> = DMatrix::zeros(m, m);
                let mut rhs: DVector<f64> = DVector::zeros(m);
                for &(s, w) in &gauss01 {
                    let t = mesh.breaks[k] + s * h;
                    let gv = g(t);
                    let pows: Vec<f64> = (0..m).map(|j| s.powi(j as i32)).collect();
                    for a in 0..m {
                        rhs[a] += w * gv * pows[a];
                        for b in 0..m {
                            gram[(a, b)] += w * pows[a] * pows[b];
                        }
                    }
                }
                let sol = gram
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::Numerical("projection Gram singular".into()))?;
                coefs[k] = sol.iter().copied().collect();
            }
        }
        SpaceOrder::Continuous => {
            let (dim, basis) = continuous_basis(mesh, &mesh.degrees);
            let mut mass: DMatrix<f64> = DMatrix::zeros(dim, dim);
            let mut rhs: DVector<f64> = DVector::zeros(dim);
            for k in 0..n {
                let h = mesh.h(k);
                for &(s, w) in &gauss01 {
                    let t = mesh.breaks[k] + s * h;
                    let gv = g(t);
                    for (ia, ca) in &basis[k] {
                        let va = eval_poly(ca, s);
                        rhs[*ia] += w * h * gv * va;
                        for (ib, cb) in &basis[k] {
                            mass[(*ia, *ib)] += w * h * va * eval_poly(cb, s);
                        }
                    }
                }
            }
            let sol = mass
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("mass matrix singular".into()))?;
            for k in 0..n {
                let deg = mesh.degrees[k].max(1);
                let mut c = vec![0.0; deg + 1];
                for (ia, ca) in &basis[k] {
                    for (j, cv) in ca.iter().enumerate() {
                        c[j] += sol[*ia] * *cv;
                    }
                }
                coefs[k] = c;
            }
        }
    }
    Ok(GammaFn { mesh: mesh.clone(), g, coefs })
}

/// u = g − w with w continuous of degree p_K + 2 chosen closest to g in
/// L² among corrections whose removal kills all S^{p,0} moments. Unlike
/// the plain projection onto S^{p,0}, u stays in H¹(Γ), matching the
/// regularity of genuine single-layer residuals (the operator smooths
/// the discontinuous density before it meets the data).
pub fn continuous_residual(mesh: &BoundaryMesh, g: CurveFn) -> Result<GammaFn> {
    let n = mesh.n_elements();
    let q: Vec<usize> = mesh.degrees.iter().map(|p| p + 2).collect();
    let (dim, basis) = continuous_basis(mesh, &q);
    let n_con: usize = mesh.degrees.iter().map(|p| p + 1).sum();
    let (gx, gw) = gauss_legendre(24);
    let gauss01: Vec<(f64, f64)> = gx
        .iter()
        .zip(&gw)
        .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect();
    let mut mass: DMatrix<f64> = DMatrix::zeros(dim, dim);
    let mut rhs: DVector<f64> = DVector::zeros(dim);
    let mut con: DMatrix<f64> = DMatrix::zeros(n_con, dim);
    let mut con_rhs: DVector<f64> = DVector::zeros(n_con);
    let mut row = 0;
    for k in 0..n {
        let h = mesh.h(k);
        for &(s, w) in &gauss01 {
            let t = mesh.breaks[k] + s * h;
            let gv = g(t);
            for (ia, ca) in &basis[k] {
                let va = eval_poly(ca, s);
                rhs[*ia] += w * h * gv * va;
                for (ib, cb) in &basis[k] {
                    mass[(*ia, *ib)] += w * h * va * eval_poly(cb, s);
                }
                for m in 0..=mesh.degrees[k] {
                    con[(row + m, *ia)] += w * h * s.powi(m as i32) * va;
                }
            }
            for m in 0..=mesh.degrees[k] {
                con_rhs[row + m] += w * h * gv * s.powi(m as i32);
            }
        }
        row += mesh.degrees[k] + 1;
    }
    // KKT system for min ||w - g||_0 subject to the moment constraints.
    let total = dim + n_con;
    let mut kkt: DMatrix<f64> = DMatrix::zeros(total, total);
    kkt.view_mut((0, 0), (dim, dim)).copy_from(&mass);
    kkt.view_mut((0, dim), (dim, n_con)).copy_from(&con.transpose());
    kkt.view_mut((dim, 0), (n_con, dim)).copy_from(&con);
    let mut full_rhs: DVector<f64> = DVector::zeros(total);
    full_rhs.rows_mut(0, dim).copy_from(&rhs);
    full_rhs.rows_mut(dim, n_con).copy_from(&con_rhs);
    let sol = kkt
        .lu()
        .solve(&full_rhs)
        .ok_or_else(|| Error::Numerical("residual KKT system singular".into()))?;
    let mut coefs = vec![Vec::new(); n];
    for k in 0..n {
        let mut c = vec![0.0; q[k] + 1];
        for (ia, ca) in &basis[k] {
            for (j, cv) in ca.iter().enumerate() {
                c[j] += sol[*ia] * *cv;
            }
        }
        coefs[k] = c;
    }
    Ok(GammaFn { mesh: mesh.clone(), g, coefs })
}

fn l2_norm(u: &GammaFn) -> f64 {
    let mesh = &u.mesh;
    let mut total = 0.0;
    for k in 0..mesh.n_elements() {
        let (xs, ws) = gauss_on(mesh.breaks[k], mesh.breaks[k + 1], 16);
        for (x, w) in xs.iter().zip(&ws) {
            total += w * u.eval(*x).powi(2);
        }
    }
    total.sqrt()
}

/// Largest S^{p,0} moment of u, relative to element scale.
fn check_moments(u: &GammaFn, tol: f64) -> Result<()> {
    let mesh = &u.mesh;
    // Moment residuals from the constraint solve are absolute rounding
    // leftovers of an O(1) assembly; when u itself is tiny the check must
    // not demand them relative to ||u||.
    let scale = l2_norm(u).max(1e-7 * u.mesh.total_length.sqrt());
    for k in 0..mesh.n_elements() {
        let h = mesh.h(k);
        let (xs, ws) = gauss_on(mesh.breaks[k], mesh.breaks[k + 1], 20);
        for m in 0..=mesh.degrees[k] {
            let mut mom = 0.0;
            for (x, w) in xs.iter().zip(&ws) {
                let s = (x - mesh.breaks[k]) / h;
                mom += w * u.eval(*x) * s.powi(m as i32);
            }
            if mom.abs() > tol * scale * h.sqrt() {
                return Err(Error::InvalidInput(format!(
                    "input is not orthogonal to the polynomial space: moment {mom:.3e} on element {k}"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum RatioOutcome {
    /// u vanishes; the ratio 0/0 is reported as a status, not a number.
    Degenerate,
    Ratio {
        norm: f64,
        estimator: f64,
        ratio: f64,
    },
}

fn weighted_gradient_norm(u: &GammaFn, p_exponent: f64) -> f64 {
    let mesh = &u.mesh;
    let mut total = 0.0;
    for k in 0..mesh.n_elements() {
        let h = mesh.h(k);
        let phat = mesh.degrees[k].max(1) as f64;
        let (xs, ws) = gauss_on(mesh.breaks[k], mesh.breaks[k + 1], 16);
        for (x, w) in xs.iter().zip(&ws) {
            total += w * h * phat.powf(p_exponent) * u.deriv(*x).powi(2);
        }
    }
    total.sqrt()
}

pub(crate) fn estimator_single_layer(u: &GammaFn, p_exponent: f64) -> f64 {
    weighted_gradient_norm(u, p_exponent)
}

/// ‖u‖_{1/2,Γ}: L² plus periodic chordal fractional seminorm.
pub fn h_half_norm(u: &GammaFn) -> Result<f64> {
    let mesh = u.mesh.clone();
    let embed = move |t: f64| mesh.point(t);
    let semi = fractional_core(&u.mesh.breaks, true, &embed, &|t| u.eval(t), 0.5, 2.0)?;
    Ok((l2_norm(u).powi(2) + semi.powi(2)).sqrt())
}

/// ‖u‖_{1/2,Γ} / ‖h^{1/2} p̂^{-1/2} ∇_Γ u‖_{0,Γ} for u ⊥ S^{p,0}.
pub fn single_layer_ratio(mesh: &BoundaryMesh, u: &GammaFn) -> Result<RatioOutcome> {
    if mesh.breaks != u.mesh.breaks {
        return Err(Error::InvalidInput("residual lives on a different mesh".into()));
    }
    if l2_norm(u) < 1e-13 * mesh.total_length.sqrt() {
        return Ok(RatioOutcome::Degenerate);
    }
    check_moments(u, 1e-8)?;
    let norm = h_half_norm(u)?;
    let estimator = weighted_gradient_norm(u, -1.0);
    Ok(RatioOutcome::Ratio { norm, estimator, ratio: norm / estimator })
}

/// Continuous piecewise-linear fine space on a refinement of the mesh,
/// with the H^{1/2} Gram factorized for Riesz solves.
pub struct FineSpace {
    pub breaks: Vec<f64>,
    mesh: BoundaryMesh,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Values of the two hat functions alive at parameter t.
fn hat_values(breaks: &[f64], t: f64) -> [(usize, f64); 2] {
    let n = breaks.len() - 1;
    let k = match breaks.partition_point(|x| *x <= t) {
        0 => 0,
        i => (i - 1).min(n - 1),
    };
    let s = (t - breaks[k]) / (breaks[k + 1] - breaks[k]);
    [(k, 1.0 - s), ((k + 1) % n, s)]
}

/// Quadrature points (x, y, w) for one unordered panel pair; the factor
/// 2 for the opposite order is folded into w.
fn pair_points(
    k1: (f64, f64),
    k2: (f64, f64),
    touch: Option<f64>,
) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    if k1 == k2 {
        // y = x + h; for piecewise-linear factors the integrand is
        // smooth in (x, h) up to h = 0.
        let big_h = k1.1 - k1.0;
        let (hs, hw) = gauss_on(0.0, big_h, 10);
        for (h, wh) in hs.iter().zip(&hw) {
            let (xs, xw) = gauss_on(k1.0, k1.1 - h, 10);
            for (x, wx) in xs.iter().zip(&xw) {
                out.push((*x, x + h, 2.0 * wh * wx));
            }
        }
        return out;
    }
    if let Some(c) = touch {
        let m = 30;
        let sub = |pan: (f64, f64)| -> Vec<(f64, f64)> {
            let toward_b = (pan.1 - c).abs() < (pan.0 - c).abs();
            let len = pan.1 - pan.0;
            let mut segs = Vec::with_capacity(m);
            let mut lo = 0.0f64;
            for i in (0..m).rev() {
                let hi = if i == 0 { 1.0 } else { 2.0f64.powi(-(i as i32)) };
                segs.push(if toward_b {
                    (pan.1 - len * hi, pan.1 - len * lo)
                } else {
                    (pan.0 + len * lo, pan.0 + len * hi)
                });
                lo = hi;
            }
            segs
        };
        for (a1, b1) in sub(k1) {
            let (xs, xw) = gauss_on(a1, b1, 4);
            for (a2, b2) in sub(k2) {
                let (ys, yw) = gauss_on(a2, b2, 4);
                for (x, wx) in xs.iter().zip(&xw) {
                    for (y, wy) in ys.iter().zip(&yw) {
                        out.push((*x, *y, 2.0 * wx * wy));
                    }
                }
            }
        }
        return out;
    }
    let (xs, xw) = gauss_on(k1.0, k1.1, 8);
    let (ys, yw) = gauss_on(k2.0, k2.1, 8);
    for (x, wx) in xs.iter().zip(&xw) {
        for (y, wy) in ys.iter().zip(&yw) {
            out.push((*x, *y, 2.0 * wx * wy));
        }
    }
    out
}

pub fn fine_space(mesh: &BoundaryMesh, refine: usize) -> Result<FineSpace> {
    if refine < 4 {
        return Err(Error::InvalidInput(
            "fine space must refine the mesh at least 4x".into(),
        ));
    }
    let mut breaks = Vec::with_capacity(mesh.n_elements() * refine + 1);
    for k in 0..mesh.n_elements() {
        let h = mesh.h(k);
        for j in 0..refine {
            breaks.push(mesh.breaks[k] + h * j as f64 / refine as f64);
        }
    }
    breaks.push(mesh.total_length);
    let n = breaks.len() - 1;
    let lam = mesh.total_length;
    let fold = |t: f64| if t < 0.0 { t + lam } else { t };
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .collect();
    // Per-pair sparse contributions collected in pair order, then summed
    // sequentially: the result must not depend on work-stealing order.
    let contributions: Vec<Vec<((usize, usize), f64)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut acc: Vec<((usize, usize), f64)> = Vec::new();
            let mut add = |key: (usize, usize), v: f64| {
                if let Some(slot) = acc.iter_mut().find(|e| e.0 == key) {
                    slot.1 += v;
                } else {
                    acc.push((key, v));
                }
            };
            {
                let (mut k1, mut k2) = ((breaks[i], breaks[i + 1]), (breaks[j], breaks[j + 1]));
                let touch = if i == j {
                    None
                } else if j == i + 1 {
                    Some(k2.0)
                } else if i == 0 && j == n - 1 {
                    k2 = (k2.0 - lam, k2.1 - lam);
                    std::mem::swap(&mut k1, &mut k2);
                    Some(k2.0)
                } else {
                    None
                };
                for (x, y, w) in pair_points(k1, k2, touch) {
                    let (xf, yf) = (fold(x), fold(y));
                    let (ex, ey) = (mesh.point(xf), mesh.point(yf));
                    let d2 = (ex[0] - ey[0]).powi(2) + (ex[1] - ey[1]).powi(2);
                    let hx = hat_values(&breaks, xf);
                    let hy = hat_values(&breaks, yf);
                    // Differences of the <= 4 hats alive at x or y; all
                    // other basis functions cancel in the kernel.
                    let mut diffs: [(usize, f64); 4] = [(usize::MAX, 0.0); 4];
                    let mut nd = 0;
                    for &(idx, v) in &hx {
                        diffs[nd] = (idx, v);
                        nd += 1;
                    }
                    for &(idx, v) in &hy {
                        if let Some(slot) = diffs[..nd].iter_mut().find(|d| d.0 == idx) {
                            slot.1 -= v;
                        } else {
                            diffs[nd] = (idx, -v);
                            nd += 1;
                        }
                    }
                    let scale = w / d2;
                    for a in 0..nd {
                        for b in 0..nd {
                            add(
                                (diffs[a].0, diffs[b].0),
                                scale * diffs[a].1 * diffs[b].1,
                            );
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut full: DMatrix<f64> = DMatrix::zeros(n, n);
    for part in &contributions {
        for &((a, b), v) in part {
            full[(a, b)] += v;
        }
    }
    // Add the L² mass of the periodic hats.
    for k in 0..n {
        let h = breaks[k + 1] - breaks[k];
        let (i, j) = (k, (k + 1) % n);
        full[(i, i)] += h / 3.0;
        full[(j, j)] += h / 3.0;
        full[(i, j)] += h / 6.0;
        full[(j, i)] += h / 6.0;
    }
    let chol = full
        .cholesky()
        .ok_or_else(|| Error::Numerical("H^{1/2} Gram is not positive definite".into()))?;
    Ok(FineSpace { breaks, mesh: mesh.clone(), chol })
}

impl FineSpace {
    pub fn n_dofs(&self) -> usize {
        self.breaks.len() - 1
    }

    /// sup over the space of <u,v>/‖v‖_{1/2} = sqrt(bᵀ G⁻¹ b).
    pub fn negative_norm(&self, u: &GammaFn) -> f64 {
        let n = self.n_dofs();
        let mut b = DVector::zeros(n);
        for k in 0..n {
            let (xs, ws) = gauss_on(self.breaks[k], self.breaks[k + 1], 12);
            for (x, w) in xs.iter().zip(&ws) {
                for (idx, v) in hat_values(&self.breaks, *x) {
                    b[idx] += w * u.eval(*x) * v;
                }
            }
        }
        let sol = self.chol.solve(&b);
        b.dot(&sol).max(0.0).sqrt()
    }

    /// Riesz representative coefficients (piecewise-linear nodal values).
    pub fn riesz(&self, u: &GammaFn) -> Vec<f64> {
        let n = self.n_dofs();
        let mut b = DVector::zeros(n);
        for k in 0..n {
            let (xs, ws) = gauss_on(self.breaks[k], self.breaks[k + 1], 12);
            for (x, w) in xs.iter().zip(&ws) {
                for (idx, v) in hat_values(&self.breaks, *x) {
                    b[idx] += w * u.eval(*x) * v;
                }
            }
        }
        self.chol.solve(&b).iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct HypersingularReport {
    pub outcome: RatioOutcome,
    pub fine_dofs: usize,
    /// Relative change of the negative norm when the fine space doubles.
    pub doubling_change: f64,
}

/// ‖u‖_{-1/2,Γ} / ‖h^{1/2} p^{-1/2} u‖_{0,Γ} for u ⊥ S^{p,1}, with the
/// negative norm taken on `fine` and certified against `doubled`.
pub fn hypersingular_ratio(
    mesh: &BoundaryMesh,
    u: &GammaFn,
    fine: &FineSpace,
    doubled: &FineSpace,
) -> Result<HypersingularReport> {
    if mesh.degrees.iter().any(|&p| p < 1) {
        return Err(Error::InvalidInput("hypersingular estimate needs p >= 1".into()));
    }
    if mesh.breaks != u.mesh.breaks || mesh.breaks != fine.mesh.breaks {
        return Err(Error::InvalidInput("mesh mismatch".into()));
    }
    if doubled.n_dofs() < 2 * fine.n_dofs() {
        return Err(Error::InvalidInput("second space must double the fine space".into()));
    }
    if l2_norm(u) < 1e-13 * mesh.total_length.sqrt() {
        return Ok(HypersingularReport {
            outcome: RatioOutcome::Degenerate,
            fine_dofs: fine.n_dofs(),
            doubling_change: 0.0,
        });
    }
    check_continuous_moments(u)?;
    let coarse_val = fine.negative_norm(u);
    let norm = doubled.negative_norm(u);
    let change = (norm - coarse_val).abs() / norm;
    if change >= 0.05 {
        return Err(Error::Numerical(format!(
            "negative-norm oracle unstable under fine-space doubling: {change:.3}"
        )));
    }
    let mesh2 = &u.mesh;
    let mut est2 = 0.0;
    for k in 0..mesh2.n_elements() {
        let h = mesh2.h(k);
        let p = mesh2.degrees[k] as f64;
        let (xs, ws) = gauss_on(mesh2.breaks[k], mesh2.breaks[k + 1], 16);
        for (x, w) in xs.iter().zip(&ws) {
            est2 += w * h / p * u.eval(*x).powi(2);
        }
    }
    let estimator = est2.sqrt();
    Ok(HypersingularReport {
        outcome: RatioOutcome::Ratio { norm, estimator, ratio: norm / estimator },
        fine_dofs: doubled.n_dofs(),
        doubling_change: change,
    })
}

/// Orthogonality of u against the continuous space S^{p,1}.
fn check_continuous_moments(u: &GammaFn) -> Result<()> {
    let mesh = &u.mesh;
    let (dim, basis) = continuous_basis(mesh, &mesh.degrees);
    let mut res = vec![0.0; dim];
    // Moment residuals from the constraint solve are absolute rounding
    // leftovers of an O(1) assembly; when u itself is tiny the check must
    // not demand them relative to ||u||.
    let scale = l2_norm(u).max(1e-7 * u.mesh.total_length.sqrt());
    for k in 0..mesh.n_elements() {
        let h = mesh.h(k);
        let (xs, ws) = gauss_on(mesh.breaks[k], mesh.breaks[k + 1], 20);
        for (x, w) in xs.iter().zip(&ws) {
            let s = (x - mesh.breaks[k]) / h;
            let uv = u.eval(*x);
            for (ia, ca) in &basis[k] {
                res[*ia] += w * uv * eval_poly(ca, s);
            }
        }
    }
    let worst = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if worst > 1e-8 * scale * mesh.h_max().sqrt() {
        return Err(Error::InvalidInput(format!(
            "input is not orthogonal to the continuous space: residual {worst:.3e}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    SingleLayer,
    Hypersingular,
}

/// CSV table `level,p,h_max,norm_half,estimator,ratio` over a mesh
/// sequence with manufactured residuals from the datum g.
pub fn estimator_report(
    cases: &[(usize, BoundaryMesh)],
    g: &CurveFn,
    kind: EstimatorKind,
) -> Result<String> {
    let mut out = String::from("level,p,h_max,norm_half,estimator,ratio\n");
    for (level, mesh) in cases {
        let p = mesh.degrees[0];
        let line = match kind {
            EstimatorKind::SingleLayer => {
                let u = continuous_residual(mesh, g.clone())?;
                single_layer_ratio(mesh, &u)?
            }
            EstimatorKind::Hypersingular => {
                let u = orthogonalize(mesh, g.clone(), SpaceOrder::Continuous)?;
                let fine = fine_space(mesh, 4)?;
                let doubled = fine_space(mesh, 8)?;
                hypersingular_ratio(mesh, &u, &fine, &doubled)?.outcome
            }
        };
        match line {
            RatioOutcome::Degenerate => {
                out.push_str(&format!("{level},{p},{:.16e},degenerate,degenerate,degenerate\n", mesh.h_max()));
            }
            RatioOutcome::Ratio { norm, estimator, ratio } => {
                out.push_str(&format!(
                    "{level},{p},{:.16e},{norm:.16e},{estimator:.16e},{ratio:.16e}\n",
                    mesh.h_max()
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn square() -> Vec<[f64; 2]> {
        vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    }

    #[test]
    fn square_mesh_basics() {
        let mesh = boundary_mesh(&square(), 2, &[1]).unwrap();
        assert_eq!(mesh.n_elements(), 8);
        assert!((mesh.total_length - 4.0).abs() < 1e-14);
        for k in 0..8 {
            assert!((mesh.h(k) - 0.5).abs() < 1e-14);
        }
        assert_relative_eq!(mesh.gamma, 2.0);
        assert_relative_eq!(mesh.gamma_p, 1.0);
        // Parametrization walks the sides in order.
        assert_eq!(mesh.point(0.5), [0.5, 0.0]);
        assert_eq!(mesh.point(1.5), [1.0, 0.5]);
        let p = mesh.point(4.25);
        assert!((p[0] - 0.25).abs() < 1e-14 && p[1].abs() < 1e-14);
    }

    #[test]
    fn bowtie_rejected() {
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(boundary_mesh(&bowtie, 1, &[0]).is_err());
    }

    #[test]
    fn surface_gradient_values() {
        let mesh = boundary_mesh(&square(), 2, &[1]).unwrap();
        assert_relative_eq!(surface_gradient(&mesh, &|t| t, 0.3), 1.0, epsilon = 1e-8);
        assert_relative_eq!(surface_gradient(&mesh, &|_| 4.2, 2.3), 0.0, epsilon = 1e-8);
        // Trace of sin(pi x) on the bottom side, where arclength = x.
        let u = |t: f64| (PI * t).sin();
        for t in [0.1, 0.5, 0.97] {
            assert_relative_eq!(
                surface_gradient(&mesh, &u, t),
                PI * (PI * t).cos(),
                epsilon = 1e-7
            );
        }
    }

    #[test]
    fn orthogonalize_reproduces_and_annihilates() {
        let mesh = boundary_mesh(&square(), 2, &[1]).unwrap();
        let zero = orthogonalize(&mesh, Arc::new(|_| 1.0), SpaceOrder::Discontinuous).unwrap();
        for t in [0.1, 1.3, 3.9] {
            assert!(zero.eval(t).abs() < 1e-12);
        }
        let zero_c = orthogonalize(&mesh, Arc::new(|_| 2.5), SpaceOrder::Continuous).unwrap();
        for t in [0.1, 1.3, 3.9] {
            assert!(zero_c.eval(t).abs() < 1e-10);
        }
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin() + 0.3 * (PI * t).cos());
        let u = orthogonalize(&mesh, g, SpaceOrder::Discontinuous).unwrap();
        check_moments(&u, 1e-10).unwrap();
    }

    #[test]
    fn orthogonalize_idempotent() {
        let mesh = boundary_mesh(&square(), 2, &[2]).unwrap();
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin());
        let u1 = orthogonalize(&mesh, g, SpaceOrder::Discontinuous).unwrap();
        let u1c = u1.clone();
        let again: CurveFn = Arc::new(move |t| u1c.eval(t));
        let u2 = orthogonalize(&mesh, again, SpaceOrder::Discontinuous).unwrap();
        for t in [0.07, 0.9, 2.1, 3.8] {
            assert!((u2.eval(t) - u1.eval(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_residual_properties() {
        let mesh = boundary_mesh(&square(), 2, &[1]).unwrap();
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin() + t * (4.0 - t) * 0.1);
        let u = continuous_residual(&mesh, g).unwrap();
        check_moments(&u, 1e-8).unwrap();
        // Continuity across element breaks and the periodic seam.
        for k in 1..mesh.n_elements() {
            let b = mesh.breaks[k];
            assert!((u.eval(b - 1e-12) - u.eval(b + 1e-12)).abs() < 1e-9);
        }
        assert!((u.eval(1e-12) - u.eval(4.0 - 1e-12)).abs() < 1e-9);
    }

    #[test]
    fn single_layer_smoke_and_degenerate() {
        let mesh = boundary_mesh(&square(), 2, &[1]).unwrap();
        let zero = orthogonalize(&mesh, Arc::new(|_| 0.0), SpaceOrder::Discontinuous).unwrap();
        assert!(matches!(single_layer_ratio(&mesh, &zero).unwrap(), RatioOutcome::Degenerate));
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin());
        let u = continuous_residual(&mesh, g.clone()).unwrap();
        match single_layer_ratio(&mesh, &u).unwrap() {
            RatioOutcome::Ratio { norm, estimator, ratio } => {
                assert!(norm > 0.0 && estimator > 0.0 && ratio.is_finite());
            }
            RatioOutcome::Degenerate => panic!("unexpected degenerate"),
        }
        // Raw g is not orthogonal and must be rejected.
        let raw = GammaFn {
            mesh: mesh.clone(),
            g,
            coefs: vec![vec![0.0]; mesh.n_elements()],
        };
        assert!(single_layer_ratio(&mesh, &raw).is_err());
    }

    #[test]
    fn single_layer_ratio_band() {
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin() + 0.4 * (4.0 * PI * t / 4.0).cos());
        let mut ratios = Vec::new();
        for level in 2..=4usize {
            for p in [0usize, 1] {
                let mesh = boundary_mesh(&square(), 1 << level, &[p]).unwrap();
                let u = continuous_residual(&mesh, g.clone()).unwrap();
                match single_layer_ratio(&mesh, &u).unwrap() {
                    RatioOutcome::Ratio { ratio, .. } => ratios.push(ratio),
                    RatioOutcome::Degenerate => panic!("degenerate"),
                }
            }
        }
        let (lo, hi) = ratios
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(*r), h.max(*r)));
        assert!(hi / lo <= 3.0, "ratio band {lo}..{hi}");
    }

    #[test]
    fn negative_norm_matches_direct_riesz_quotient() {
        let mesh = boundary_mesh(&square(), 4, &[1]).unwrap();
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin());
        let u = orthogonalize(&mesh, g, SpaceOrder::Continuous).unwrap();
        let fine = fine_space(&mesh, 4).unwrap();
        let norm = fine.negative_norm(&u);
        // Independent check: evaluate <u,v>/‖v‖_{1/2} for the Riesz
        // representative with the norm recomputed by the generic
        // fractional-seminorm quadrature.
        let coefs = fine.riesz(&u);
        let breaks = fine.breaks.clone();
        let v = move |t: f64| {
            let vals = hat_values(&breaks, t);
            coefs[vals[0].0] * vals[0].1 + coefs[vals[1].0] * vals[1].1
        };
        let mesh2 = mesh.clone();
        let semi = fractional_core(&fine.breaks, true, &move |t| mesh2.point(t), &v, 0.5, 2.0).unwrap();
        let mut l2 = 0.0;
        let mut pairing = 0.0;
        for k in 0..fine.n_dofs() {
            let (xs, ws) = gauss_on(fine.breaks[k], fine.breaks[k + 1], 8);
            for (x, w) in xs.iter().zip(&ws) {
                l2 += w * v(*x).powi(2);
                pairing += w * v(*x) * u.eval(*x);
            }
        }
        let direct = pairing / (l2 + semi.powi(2)).sqrt();
        assert_relative_eq!(direct, norm, max_relative = 2e-2);
    }

    #[test]
    fn hypersingular_smoke() {
        let mesh = boundary_mesh(&square(), 4, &[1]).unwrap();
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin());
        let u = orthogonalize(&mesh, g.clone(), SpaceOrder::Continuous).unwrap();
        let fine = fine_space(&mesh, 4).unwrap();
        let doubled = fine_space(&mesh, 8).unwrap();
        let rep = hypersingular_ratio(&mesh, &u, &fine, &doubled).unwrap();
        match rep.outcome {
            RatioOutcome::Ratio { ratio, .. } => assert!(ratio.is_finite() && ratio > 0.0),
            RatioOutcome::Degenerate => panic!("degenerate"),
        }
        assert!(rep.doubling_change < 0.05);
        let zero = orthogonalize(&mesh, Arc::new(|_| 0.0), SpaceOrder::Continuous).unwrap();
        let rep0 = hypersingular_ratio(&mesh, &zero, &fine, &doubled).unwrap();
        assert!(matches!(rep0.outcome, RatioOutcome::Degenerate));
        // p = 0 coarse degree rejected.
        let mesh0 = boundary_mesh(&square(), 4, &[0]).unwrap();
        let u0 = orthogonalize(&mesh0, g, SpaceOrder::Continuous).unwrap();
        let f0 = fine_space(&mesh0, 4).unwrap();
        let d0 = fine_space(&mesh0, 8).unwrap();
        assert!(hypersingular_ratio(&mesh0, &u0, &f0, &d0).is_err());
    }

    #[test]
    fn degree_weighting_direction() {
        // With the p-weight inverted the estimator overshoots the norm by
        // a growing margin as p increases: the p-scaling carries content.
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin() + 0.2 * (6.0 * PI * t / 4.0).sin());
        let mut wrong = Vec::new();
        for p in [1usize, 2, 3] {
            let mesh = boundary_mesh(&square(), 4, &[p]).unwrap();
            let u = continuous_residual(&mesh, g.clone()).unwrap();
            let norm = h_half_norm(&u).unwrap();
            wrong.push(estimator_single_layer(&u, 1.0) / norm);
        }
        assert!(wrong[0] < wrong[1] && wrong[1] < wrong[2], "{wrong:?}");
    }

    #[test]
    fn estimator_report_schema() {
        let g: CurveFn = Arc::new(|t: f64| (2.0 * PI * t / 4.0).sin());
        let cases: Vec<(usize, BoundaryMesh)> = (1..=2)
            .map(|l| (l, boundary_mesh(&square(), 1 << l, &[1]).unwrap()))
            .collect();
        let csv = estimator_report(&cases, &g, EstimatorKind::SingleLayer).unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "level,p,h_max,norm_half,estimator,ratio");
        assert_eq!(lines.len(), 3);
        // h column is monotone decreasing.
        let h = |line: &str| line.split(',').nth(2).unwrap().parse::<f64>().unwrap();
        assert!(h(lines[1]) > h(lines[2]));
    }
}
