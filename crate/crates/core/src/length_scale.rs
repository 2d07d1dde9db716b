//! Admissible length-scale functions built from piecewise-constant targets.
//!
//! The field is ε = scale · Σ_K ε̃|_K (ρ_{δ_K} ⋆ χ_{K_{δ_K}}) with
//! δ_K = ½ C_reg ε̃|_K, where K_δ is the δ-inflation of K. Each summand is 1
//! on K and supported within 2δ_K of K, so ε ≥ scale·ε̃|_K on K and the sum
//! at any point is over the few elements nearby.
//!
//! Derivatives use the kernel-derivative identity
//! D^r(χ ⋆ ρ_δ) = χ ⋆ (D^r ρ)_δ δ^{-|r|}. In 1D the convolution against an
//! interval indicator reduces exactly to the kernel CDF; in 2D it is computed
//! in polar coordinates around the evaluation point, with the radial extent of
//! the (convex) inflated element on each ray located by convex search.

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::mollifier::Mollifier;
use crate::multi_index::{indices_up_to, order, MultiIndex};
use crate::quad::{gauss_legendre, gauss_on};
use std::collections::HashMap;
use std::sync::Arc;

/// ε̃|_K = h_K / (p_K + 1).
pub fn piecewise_target(mesh: &Mesh, degrees: &[usize]) -> Result<Vec<f64>> {
    if degrees.len() != mesh.n_elements() {
        return Err(Error::InvalidInput("degree list does not match mesh".into()));
    }
    Ok(mesh
        .h
        .iter()
        .zip(degrees)
        .map(|(h, p)| h / (*p as f64 + 1.0))
        .collect())
}

/// Prefix-integrated CDF of a 1D kernel, normalized so the total is exactly 1.
#[derive(Debug, Clone)]
struct KernelCdf {
    breaks: Vec<f64>,
    prefix: Vec<f64>,
    total: f64,
}

impl KernelCdf {
    fn build(moll: &Mollifier) -> KernelCdf {
        let n = 256;
        let breaks: Vec<f64> = (0..=n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            let (xs, ws) = gauss_on(breaks[i], breaks[i + 1], 12);
            let piece: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| w * moll.eval([*x, 0.0]))
                .sum();
            prefix[i + 1] = prefix[i] + piece;
        }
        let total = prefix[n];
        KernelCdf { breaks, prefix, total }
    }

    fn eval(&self, moll: &Mollifier, tau: f64) -> f64 {
        if tau <= -1.0 {
            return 0.0;
        }
        if tau >= 1.0 {
            return 1.0;
        }
        let n = self.breaks.len() - 1;
        let i = (((tau + 1.0) / 2.0 * n as f64) as usize).min(n - 1);
        let (xs, ws) = gauss_on(self.breaks[i], tau, 12);
        let partial: f64 = xs
            .iter()
            .zip(&ws)
            .map(|(x, w)| w * moll.eval([*x, 0.0]))
            .sum();
        (self.prefix[i] + partial) / self.total
    }
}

/// Uniform hash grid over element neighborhoods (element K is registered in
/// every cell its bounding box, inflated by `radius[K]`, overlaps).
#[derive(Debug)]
struct ElementGrid {
    cell: f64,
    origin: [f64; 2],
    map: HashMap<(i64, i64), Vec<usize>>,
}

impl ElementGrid {
    fn build(mesh: &Mesh, radius: &[f64]) -> ElementGrid {
        let mut lo = [f64::INFINITY; 2];
        for v in &mesh.vertices {
            lo[0] = lo[0].min(v[0]);
            lo[1] = lo[1].min(v[1]);
        }
        let cell = mesh
            .h
            .iter()
            .zip(radius)
            .map(|(h, r)| h + 2.0 * r)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let mut map: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for k in 0..mesh.n_elements() {
            let mut bmin = [f64::INFINITY; 2];
            let mut bmax = [f64::NEG_INFINITY; 2];
            for &v in &mesh.elements[k] {
                for a in 0..2 {
                    bmin[a] = bmin[a].min(mesh.vertices[v][a]);
                    bmax[a] = bmax[a].max(mesh.vertices[v][a]);
                }
            }
            let r = radius[k] * 1.000001 + 1e-12;
            let i0 = ((bmin[0] - r - lo[0]) / cell).floor() as i64;
            let i1 = ((bmax[0] + r - lo[0]) / cell).floor() as i64;
            let j0 = ((bmin[1] - r - lo[1]) / cell).floor() as i64;
            let j1 = ((bmax[1] + r - lo[1]) / cell).floor() as i64;
            for i in i0..=i1 {
                for j in j0..=j1 {
                    map.entry((i, j)).or_default().push(k);
                }
            }
        }
        ElementGrid { cell, origin: lo, map }
    }

    fn candidates(&self, x: [f64; 2]) -> &[usize] {
        let i = ((x[0] - self.origin[0]) / self.cell).floor() as i64;
        let j = ((x[1] - self.origin[1]) / self.cell).floor() as i64;
        self.map.get(&(i, j)).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug)]
pub struct LengthScaleField {
    pub mesh: Arc<Mesh>,
    pub targets: Vec<f64>,
    pub delta: Vec<f64>,
    pub c_reg: f64,
    /// Global multiplier applied by `rescale_for_patch_containment`.
    pub scale: f64,
    moll: Mollifier,
    cdf: KernelCdf,
    grid: ElementGrid,
}

/// Report from `audit_admissibility`: `lambda[r]` estimates
/// Λ_r = max |D^r ε| ε^(|r|-1) (Λ_0 = max ε), `lipschitz` is max |∇ε|.
#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    pub lambda: Vec<f64>,
    pub lipschitz: f64,
}

impl AdmissibilityReport {
    pub fn lambda0(&self) -> f64 {
        self.lambda[0]
    }
}

/// Conservative lower estimate of the distance from element K to the nearest
/// element outside its patch, by sampling the boundary of K.
fn outside_patch_distance(mesh: &Mesh, k: usize, search_radius: f64) -> Result<f64> {
    let patch = mesh.patch(k)?;
    let samples = boundary_samples(mesh, k, 8);
    let mut dmin = f64::INFINITY;
    for kp in 0..mesh.n_elements() {
        if patch.contains(&kp) {
            continue;
        }
        // Cheap reject by centroid distance before exact point queries.
        let c = mesh.centroid(kp);
        let ck = mesh.centroid(k);
        let cd = ((c[0] - ck[0]).powi(2) + (c[1] - ck[1]).powi(2)).sqrt();
        if cd - mesh.h[kp] - mesh.h[k] > search_radius.min(dmin) {
            continue;
        }
        for &s in &samples {
            dmin = dmin.min(mesh.distance_to_element(s, kp));
        }
    }
    Ok(dmin)
}

fn boundary_samples(mesh: &Mesh, k: usize, per_edge: usize) -> Vec<[f64; 2]> {
    let el = &mesh.elements[k];
    let verts: Vec<[f64; 2]> = el.iter().map(|&v| mesh.vertices[v]).collect();
    if mesh.d == 1 {
        return verts;
    }
    let mut out = Vec::new();
    for i in 0..3 {
        let a = verts[i];
        let b = verts[(i + 1) % 3];
        for s in 0..per_edge {
            let t = s as f64 / per_edge as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

fn containment_ok(mesh: &Mesh, targets: &[f64], c_reg: f64) -> Result<bool> {
    for k in 0..mesh.n_elements() {
        let infl = c_reg * targets[k];
        let dout = outside_patch_distance(mesh, k, 4.0 * infl)?;
        if infl > 0.95 * dout {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest power of 1/2 for which the inflation K_{C_reg ε̃|_K} stays inside
/// the patch ω_K for every element.
pub fn default_c_reg(mesh: &Mesh, targets: &[f64]) -> Result<f64> {
    let mut c = 1.0;
    for _ in 0..12 {
        if containment_ok(mesh, targets, c)? {
            return Ok(c);
        }
        c *= 0.5;
    }
    Err(Error::Geometry(
        "no feasible C_reg found down to 2^-12; mesh patches are too tight".into(),
    ))
}

pub fn smooth_length_scale(
    mesh: Arc<Mesh>,
    targets: Vec<f64>,
    c_reg: f64,
) -> Result<LengthScaleField> {
    if targets.len() != mesh.n_elements() || targets.iter().any(|&t| t <= 0.0) {
        return Err(Error::InvalidInput("targets must be positive, one per element".into()));
    }
    if c_reg <= 0.0 {
        return Err(Error::InvalidInput("C_reg must be positive".into()));
    }
    if !containment_ok(&mesh, &targets, c_reg)? {
        return Err(Error::Geometry(format!(
            "inflated elements exit their patches at C_reg = {c_reg}; retry with a smaller C_reg"
        )));
    }
    let delta: Vec<f64> = targets.iter().map(|t| 0.5 * c_reg * t).collect();
    let moll = Mollifier::standard_bump(mesh.d)?;
    let cdf = KernelCdf::build(&moll);
    let grid = ElementGrid::build(&mesh, &delta.iter().map(|d| 2.0 * d).collect::<Vec<_>>());
    Ok(LengthScaleField { mesh, targets, delta, c_reg, scale: 1.0, moll, cdf, grid })
}

impl LengthScaleField {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.jet(x, 0)[0]
    }

    /// ε and all derivatives D^m ε for |m| <= up_to (order of
    /// `indices_up_to(d, up_to)`).
    pub fn jet(&self, x: [f64; 2], up_to: usize) -> Vec<f64> {
        let idx = indices_up_to(self.mesh.d, up_to);
        let mut acc = vec![0.0; idx.len()];
        for &k in self.grid.candidates(x) {
            let dk = self.delta[k];
            let dist = self.mesh.distance_to_element(x, k);
            if dist >= 2.0 * dk {
                continue;
            }
            let conv = self.conv_jet(x, k, up_to, &idx);
            for (a, c) in acc.iter_mut().zip(&conv) {
                *a += self.targets[k] * c;
            }
        }
        for a in acc.iter_mut() {
            *a *= self.scale;
        }
        acc
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        let j = self.jet(x, 1);
        match self.mesh.d {
            1 => [j[1], 0.0],
            _ => [j[1], j[2]],
        }
    }

    /// (ρ_{δ_K} ⋆ χ_{K_{δ_K}}) and derivatives at x.
    fn conv_jet(&self, x: [f64; 2], k: usize, up_to: usize, idx: &[MultiIndex]) -> Vec<f64> {
        let dk = self.delta[k];
        match self.mesh.d {
            1 => {
                let el = &self.mesh.elements[k];
                let a = self.mesh.vertices[el[0]][0].min(self.mesh.vertices[el[1]][0]);
                let b = self.mesh.vertices[el[0]][0].max(self.mesh.vertices[el[1]][0]);
                // conv(x) = Φ((b+δ-x)/δ) - Φ((a-δ-x)/δ);
                // D^r conv = (-1)^r δ^{-r} [ρ^{(r-1)}(τ_b) - ρ^{(r-1)}(τ_a)].
                let tb = (b + dk - x[0]) / dk;
                let ta = (a - dk - x[0]) / dk;
                let mut out = vec![0.0; idx.len()];
                out[0] = self.cdf.eval(&self.moll, tb) - self.cdf.eval(&self.moll, ta);
                if up_to >= 1 {
                    let db = self.moll.deriv_table([tb, 0.0], up_to.saturating_sub(1));
                    let da = self.moll.deriv_table([ta, 0.0], up_to.saturating_sub(1));
                    for r in 1..=up_to {
                        let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
                        out[r] = sign * dk.powi(-(r as i32)) * (db[r - 1] - da[r - 1]);
                    }
                }
                out
            }
            _ => self.conv_jet_2d(x, k, up_to, idx),
        }
    }

    /// 2D convolution against the inflated triangle, written as an integral
    /// over K_δ of ρ_δ(x - y). K_δ decomposes exactly into the triangle, one
    /// rectangle per edge (outward, depth δ), and one circular sector per
    /// vertex (radius δ, spanning the exterior angle). Each piece carries a
    /// fixed composite Gauss rule whose nodes do not depend on x, so the
    /// kernel-derivative jets are the exact derivatives of the evaluated
    /// value (finite differences of `eval` agree with `jet` to rounding).
    fn conv_jet_2d(&self, x: [f64; 2], k: usize, up_to: usize, idx: &[MultiIndex]) -> Vec<f64> {
        let dk = self.delta[k];
        let el = &self.mesh.elements[k];
        let mut v: Vec<[f64; 2]> = el.iter().map(|&i| self.mesh.vertices[i]).collect();
        let cross = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1])
            - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]);
        if cross < 0.0 {
            v.swap(1, 2);
        }
        let mut acc = vec![0.0; idx.len()];
        let (gx, gw) = gauss_legendre(6);
        let mut add_node = |acc: &mut [f64], y: [f64; 2], w: f64| {
            let xi = [(x[0] - y[0]) / dk, (x[1] - y[1]) / dk];
            if xi[0] * xi[0] + xi[1] * xi[1] >= 1.0 {
                return;
            }
            let table = self.moll.deriv_table(xi, up_to);
            for ((a, t), m) in acc.iter_mut().zip(&table).zip(idx) {
                *a += w * t * dk.powi(-2 - order(*m) as i32);
            }
        };

        // Triangle interior: uniform barycentric lattice, cells of size <= δ/2.
        let n = ((self.mesh.h[k] / (0.5 * dk)).ceil() as usize).max(1);
        let lat = |i: usize, j: usize| -> [f64; 2] {
            let (a, b) = (i as f64 / n as f64, j as f64 / n as f64);
            [
                v[0][0] + a * (v[1][0] - v[0][0]) + b * (v[2][0] - v[0][0]),
                v[0][1] + a * (v[1][1] - v[0][1]) + b * (v[2][1] - v[0][1]),
            ]
        };
        let cell_diag = self.mesh.h[k] / n as f64;
        let (tx, tw) = crate::quad::triangle_rule(6);
        for i in 0..n {
            for j in 0..n - i {
                for flip in 0..2 {
                    if flip == 1 && i + j + 2 > n {
                        continue;
                    }
                    let (p0, p1, p2) = if flip == 0 {
                        (lat(i, j), lat(i + 1, j), lat(i, j + 1))
                    } else {
                        (lat(i + 1, j), lat(i + 1, j + 1), lat(i, j + 1))
                    };
                    let c = [
                        (p0[0] + p1[0] + p2[0]) / 3.0,
                        (p0[1] + p1[1] + p2[1]) / 3.0,
                    ];
                    let r = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt();
                    if r >= dk + cell_diag {
                        continue;
                    }
                    let det = ((p1[0] - p0[0]) * (p2[1] - p0[1])
                        - (p1[1] - p0[1]) * (p2[0] - p0[0]))
                        .abs();
                    for (q, w) in tx.iter().zip(&tw) {
                        let y = [
                            p0[0] + q[0] * (p1[0] - p0[0]) + q[1] * (p2[0] - p0[0]),
                            p0[1] + q[0] * (p1[1] - p0[1]) + q[1] * (p2[1] - p0[1]),
                        ];
                        add_node(&mut acc, y, w * det);
                    }
                }
            }
        }

        // Edge rectangles [0, L] x [0, δ] in (tangent, outward normal) frame.
        for e in 0..3 {
            let a = v[e];
            let b = v[(e + 1) % 3];
            let ev = [b[0] - a[0], b[1] - a[1]];
            let len = (ev[0] * ev[0] + ev[1] * ev[1]).sqrt();
            let t = [ev[0] / len, ev[1] / len];
            let nrm = [t[1], -t[0]];
            let m = ((len / (0.5 * dk)).ceil() as usize).max(1);
            let cw = len / m as f64;
            let s_x = (x[0] - a[0]) * t[0] + (x[1] - a[1]) * t[1];
            for c in 0..m {
                let s0 = c as f64 * cw;
                if (s_x - (s0 + 0.5 * cw)).abs() >= 2.0 * dk + 0.5 * cw {
                    continue;
                }
                for (qs, ws) in gx.iter().zip(&gw) {
                    let s = s0 + 0.5 * (qs + 1.0) * cw;
                    for (qq, wq) in gx.iter().zip(&gw) {
                        let q = 0.5 * (qq + 1.0) * dk;
                        let y = [
                            a[0] + s * t[0] + q * nrm[0],
                            a[1] + s * t[1] + q * nrm[1],
                        ];
                        add_node(&mut acc, y, ws * wq * 0.25 * cw * dk);
                    }
                }
            }
        }

        // Vertex sectors spanning the exterior angle between adjacent
        // outward normals.
        for c in 0..3 {
            let vv = v[c];
            if ((x[0] - vv[0]).powi(2) + (x[1] - vv[1]).powi(2)).sqrt() >= 2.0 * dk {
                continue;
            }
            let p = v[(c + 2) % 3];
            let nsucc = v[(c + 1) % 3];
            let e_in = [vv[0] - p[0], vv[1] - p[1]];
            let e_out = [nsucc[0] - vv[0], nsucc[1] - vv[1]];
            let n1 = {
                let l = (e_in[0] * e_in[0] + e_in[1] * e_in[1]).sqrt();
                [e_in[1] / l, -e_in[0] / l]
            };
            let n2 = {
                let l = (e_out[0] * e_out[0] + e_out[1] * e_out[1]).sqrt();
                [e_out[1] / l, -e_out[0] / l]
            };
            let phi1 = n1[1].atan2(n1[0]);
            let mut span = n2[1].atan2(n2[0]) - phi1;
            while span < 0.0 {
                span += 2.0 * std::f64::consts::PI;
            }
            for (qp, wp) in gx.iter().zip(&gw) {
                let phi = phi1 + 0.5 * (qp + 1.0) * span;
                let dir = [phi.cos(), phi.sin()];
                for (qr, wr) in gx.iter().zip(&gw) {
                    let r = 0.5 * (qr + 1.0) * dk;
                    let y = [vv[0] + r * dir[0], vv[1] + r * dir[1]];
                    add_node(&mut acc, y, wp * wr * 0.25 * span * dk * r);
                }
            }
        }
        acc
    }
}

/// Shrink the global multiplier (powers of 1/2) until every ball
/// B_{ε(x)}(x), x ∈ K, stays inside the patch ω_K.
pub fn rescale_for_patch_containment(mut field: LengthScaleField) -> Result<LengthScaleField> {
    let mesh = field.mesh.clone();
    let mut clearance = Vec::with_capacity(mesh.n_elements());
    let mut samples_max_eps = Vec::with_capacity(mesh.n_elements());
    for k in 0..mesh.n_elements() {
        let radius = 4.0 * (field.targets[k] + field.delta[k]);
        clearance.push(outside_patch_distance(&mesh, k, radius)?);
        let pts = element_samples(&mesh, k);
        let base = field.scale;
        let m = pts
            .iter()
            .map(|&x| field.eval(x) / base)
            .fold(0.0f64, f64::max);
        samples_max_eps.push(m);
    }
    for _ in 0..60 {
        let ok = (0..mesh.n_elements())
            .all(|k| 1.01 * field.scale * samples_max_eps[k] <= clearance[k]);
        if ok {
            return Ok(field);
        }
        field.scale *= 0.5;
    }
    Err(Error::Geometry("patch containment rescale did not terminate".into()))
}

fn element_samples(mesh: &Mesh, k: usize) -> Vec<[f64; 2]> {
    let el = &mesh.elements[k];
    let verts: Vec<[f64; 2]> = el.iter().map(|&v| mesh.vertices[v]).collect();
    match mesh.d {
        1 => (0..=4)
            .map(|i| {
                let t = i as f64 / 4.0;
                [verts[0][0] + t * (verts[1][0] - verts[0][0]), 0.0]
            })
            .collect(),
        _ => {
            let mut out = Vec::new();
            for i in 0..=3 {
                for j in 0..=3 - i {
                    let (u, v) = (i as f64 / 3.0, j as f64 / 3.0);
                    let w = 1.0 - u - v;
                    out.push([
                        w * verts[0][0] + u * verts[1][0] + v * verts[2][0],
                        w * verts[0][1] + u * verts[1][1] + v * verts[2][1],
                    ]);
                }
            }
            out
        }
    }
}

/// Sample Λ_r = max |D^r ε| ε^(|r|-1) and the Lipschitz constant over a dense
/// per-element grid.
pub fn audit_admissibility(
    field: &LengthScaleField,
    up_to: usize,
    extra_per_element: usize,
) -> Result<AdmissibilityReport> {
    if up_to > 4 {
        return Err(Error::InvalidInput("admissibility audit supports orders <= 4".into()));
    }
    let mesh = &field.mesh;
    let idx = indices_up_to(mesh.d, up_to);
    let mut lambda = vec![0.0f64; up_to + 1];
    let mut lips = 0.0f64;
    for k in 0..mesh.n_elements() {
        let mut pts = element_samples(mesh, k);
        // Deterministic low-discrepancy interior fill.
        for i in 0..extra_per_element {
            let t = (i as f64 + 0.5) / extra_per_element as f64;
            let u = (t * 0.754_877_666_246_692_9).fract();
            let v = (t * 0.569_840_290_998_053_2).fract();
            let el = &mesh.elements[k];
            match mesh.d {
                1 => {
                    let a = mesh.vertices[el[0]][0];
                    let b = mesh.vertices[el[1]][0];
                    pts.push([a + u * (b - a), 0.0]);
                }
                _ => {
                    let (mut u, mut v) = (u, v);
                    if u + v > 1.0 {
                        u = 1.0 - u;
                        v = 1.0 - v;
                    }
                    let (a, b, c) = (
                        mesh.vertices[el[0]],
                        mesh.vertices[el[1]],
                        mesh.vertices[el[2]],
                    );
                    pts.push([
                        a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                        a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
                    ]);
                }
            }
        }
        for x in pts {
            let jet = field.jet(x, up_to);
            let eps = jet[0];
            if eps <= 0.0 {
                return Err(Error::Numerical(format!("ε not positive at {x:?}")));
            }
            lambda[0] = lambda[0].max(eps);
            for (m, v) in idx.iter().zip(&jet).skip(1) {
                let r = order(*m);
                lambda[r] = lambda[r].max(v.abs() * eps.powi(r as i32 - 1));
            }
            let gr = match mesh.d {
                1 => jet[1].abs(),
                _ => (jet[1] * jet[1] + jet[2] * jet[2]).sqrt(),
            };
            lips = lips.max(gr);
        }
    }
    Ok(AdmissibilityReport { lambda, lipschitz: lips })
}
