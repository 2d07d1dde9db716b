//! The regularization operator I_ε: interior mollification E, boundary-shifted
//! Taylor averaging G, and their partition-of-unity assembly on intervals and
//! convex polygons.
//!
//! Both operator kinds share one representation. With s(x) = δ ε(x), a unit
//! shift direction n̂, steepness L (zero for the interior rule), and the
//! combined kernel
//!
//!   K(ξ) = Σ_{|k| <= k_max} ((-L n̂)^k / k!) D^k ρ(ξ),
//!
//! the operator value is ∫_{B_1} u(y(x) - s(x) ξ) K(ξ) dξ with
//! y(x) = x + L s(x) n̂. This follows from writing each D^k(u ⋆ ρ_s) as
//! u ⋆ (D^k ρ)_s s^{-|k|}; no coordinate rotation is needed, the shift
//! direction enters only through the kernel.
//!
//! Spatial derivatives (orders <= 2) never touch derivatives of u: with
//! A[g] := ∫ u(y - sξ) g(ξ) dξ, integration by parts in ξ gives
//! ∂_{y_m} A[g] = s^{-1} A[∂_m g] and ∂_s A[g] = -s^{-1} A[g~] where
//! g~ = d·g + ξ·∇g. Chaining through y(x), s(x) then needs only the ε-jet.
//! Every A[·] is one dot product of the same u samples against a
//! precomputed kernel-node table.
//!
//! The assembly places the partition weights outside the operators,
//! I_ε u(x) = Σ_j η^j(x) · Op_j u(x), which makes polynomial reproduction
//! exact: each chart rule reproduces P_{k_max} pointwise and Σ η^j = 1.
//! Corners of polygons get their own charts with inward-bisector shifts
//! (an edge-normal shift exits the domain near a convex corner).

use crate::error::{Error, Result};
use crate::jet::Jet1;
use crate::length_scale::{AdmissibilityReport, LengthScaleField};
use crate::mesh::Domain;
use crate::mollifier::Mollifier;
use crate::multi_index::{indices_up_to, order, MultiIndex};
use crate::quad::gauss_legendre;
use std::collections::HashMap;
use std::sync::Arc;

pub type PointFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct SmoothingParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub tau: f64,
    /// Cone steepness L of the boundary shift.
    pub l_cone: f64,
    /// Per-chart boundary Lipschitz constant (0 for flat edges).
    pub l_boundary: f64,
    pub k_max: usize,
}

/// Deterministic shrinking search: β from the Lipschitz constant, then α, δ
/// halved together until every constraint holds.
pub fn choose_parameters(
    audit: &AdmissibilityReport,
    l_boundary: f64,
    domain: &Domain,
    k_max: usize,
) -> Result<SmoothingParams> {
    let lip = audit.lipschitz;
    let beta_cap = if lip > 0.0 {
        1.0f64.min(0.5 / lip)
    } else {
        f64::INFINITY
    };
    let beta = if lip > 0.0 { 0.5 * beta_cap } else { 0.25 };
    let theta_min = domain
        .corner_angles()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let mut l_cone = (1.01 * (l_boundary + 1.0)).max(1.5);
    if theta_min.is_finite() {
        l_cone = l_cone.max(1.2 / (0.5 * theta_min).sin());
    }
    let mut alpha = beta / 4.0;
    let mut delta = beta / 16.0;
    for _ in 0..60 {
        let tau = 1.01 * (l_boundary + 1.0) * (1.0 + delta / alpha);
        let ok = 2.0 * delta + alpha < beta
            && beta < beta_cap
            && ((l_boundary + 1.0) * (delta + alpha) + delta).max(
                alpha + delta * (l_cone + 1.0) * (1.0 + lip * alpha),
            ) < beta
            && beta > tau * alpha + delta;
        if ok {
            return Ok(SmoothingParams {
                alpha,
                beta,
                delta,
                tau,
                l_cone,
                l_boundary,
                k_max,
            });
        }
        alpha *= 0.5;
        delta *= 0.5;
    }
    Err(Error::Numerical("parameter search did not converge".into()))
}

/// Tanh-sinh rule on (-1, 1). The kernels vanish to all orders at the
/// support boundary, which this rule resolves to machine precision; plain
/// Gauss rules stall near 1e-9 on the bump profile, and that error gets
/// amplified by 1/s² in the derivative formulas.
fn tanh_sinh(n: usize) -> (Vec<f64>, Vec<f64>) {
    let tmax = 3.0;
    let h = 2.0 * tmax / (n as f64 - 1.0);
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for i in 0..n {
        let t = -tmax + i as f64 * h;
        let u = 0.5 * std::f64::consts::PI * t.sinh();
        let x = u.tanh();
        if 1.0 - x.abs() < 1e-15 {
            continue;
        }
        xs.push(x);
        ws.push(h * 0.5 * std::f64::consts::PI * t.cosh() / u.cosh().powi(2));
    }
    (xs, ws)
}

/// Quadrature over the unit ball used for every averaging integral:
/// symmetric under ξ → -ξ so all odd kernel moments vanish exactly.
fn ball_nodes(d: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    match d {
        1 => {
            let (xs, ws) = tanh_sinh(240);
            (xs.iter().map(|&x| [x, 0.0]).collect(), ws)
        }
        _ => {
            let (rs, rw) = tanh_sinh(160);
            let n_t = 16;
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            for (r, wr) in rs.iter().zip(&rw) {
                let r = 0.5 * (r + 1.0);
                let wr = 0.5 * wr * r;
                for j in 0..n_t {
                    let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / n_t as f64;
                    nodes.push([r * th.cos(), r * th.sin()]);
                    weights.push(wr * 2.0 * std::f64::consts::PI / n_t as f64);
                }
            }
            (nodes, weights)
        }
    }
}

/// Per-node values of the combined kernel and its first two ξ-derivatives,
/// normalized so the discrete mass is exactly 1.
#[derive(Debug, Clone)]
struct KernelTables {
    k: Vec<f64>,
    dk: Vec<[f64; 2]>,
    ddk: Vec<[[f64; 2]; 2]>,
}

fn build_kernel_tables(
    moll: &Mollifier,
    d: usize,
    nodes: &[[f64; 2]],
    weights: &[f64],
    l: f64,
    n_hat: [f64; 2],
    k_max: usize,
) -> KernelTables {
    let idx = indices_up_to(d, k_max + 2);
    let pos: HashMap<MultiIndex, usize> =
        idx.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    // Taylor coefficients (-L n̂)^k / k! of the combined kernel.
    let coef: Vec<(MultiIndex, f64)> = indices_up_to(d, k_max)
        .into_iter()
        .map(|k| {
            let mut c = 1.0;
            for axis in 0..2 {
                c *= (-l * n_hat[axis]).powi(k[axis] as i32);
                for f in 1..=k[axis] {
                    c /= f as f64;
                }
            }
            (k, c)
        })
        .collect();
    let mut k_vals = Vec::with_capacity(nodes.len());
    let mut dk = Vec::with_capacity(nodes.len());
    let mut ddk = Vec::with_capacity(nodes.len());
    for xi in nodes {
        let table = moll.deriv_table(*xi, k_max + 2);
        let sum_for = |extra: MultiIndex| -> f64 {
            if d == 1 && extra[1] > 0 {
                return 0.0;
            }
            coef.iter()
                .map(|(k, c)| {
                    let m = [k[0] + extra[0], k[1] + extra[1]];
                    c * table[pos[&m]]
                })
                .sum()
        };
        k_vals.push(sum_for([0, 0]));
        dk.push([sum_for([1, 0]), sum_for([0, 1])]);
        ddk.push([
            [sum_for([2, 0]), sum_for([1, 1])],
            [sum_for([1, 1]), sum_for([0, 2])],
        ]);
    }
    let mass: f64 = weights.iter().zip(&k_vals).map(|(w, k)| w * k).sum();
    for v in k_vals.iter_mut() {
        *v /= mass;
    }
    for v in dk.iter_mut() {
        v[0] /= mass;
        v[1] /= mass;
    }
    for v in ddk.iter_mut() {
        for r in v.iter_mut() {
            r[0] /= mass;
            r[1] /= mass;
        }
    }
    KernelTables { k: k_vals, dk, ddk }
}

#[derive(Debug, Clone)]
enum ChartGeom {
    Interior,
    /// ψ = prof(dist-to-edge-line / width); shift along the inward normal.
    Edge { anchor: [f64; 2], n_in: [f64; 2], width: f64 },
    /// ψ = prof(|x - v| / radius); shift along the inward bisector.
    Corner { vertex: [f64; 2], radius: f64 },
}

#[derive(Debug, Clone)]
struct Chart {
    geom: ChartGeom,
    shift: [f64; 2],
    l: f64,
    tables: KernelTables,
}

pub struct SmoothedFunction {
    u: PointFn,
    pub field: Arc<LengthScaleField>,
    pub params: SmoothingParams,
    domain: Domain,
    /// charts[0] is the interior rule; corners precede edges so the
    /// telescoping partition gives corners priority.
    charts: Vec<Chart>,
    nodes: Vec<[f64; 2]>,
    weights: Vec<f64>,
    zero_bc: bool,
    /// Reported collar factor for the zero-BC variant: the result vanishes
    /// identically within distance λ·ε(x) of the boundary.
    pub collar_lambda: Option<f64>,
}

/// Value, gradient and Hessian (xx, xy, yy) of a scalar field at a point.
#[derive(Debug, Clone, Copy)]
struct C2 {
    v: f64,
    g: [f64; 2],
    h: [f64; 3],
}

impl C2 {
    fn constant(v: f64) -> C2 {
        C2 { v, g: [0.0, 0.0], h: [0.0; 3] }
    }

    fn one_minus(self) -> C2 {
        C2 {
            v: 1.0 - self.v,
            g: [-self.g[0], -self.g[1]],
            h: [-self.h[0], -self.h[1], -self.h[2]],
        }
    }

    fn mul(self, o: C2) -> C2 {
        C2 {
            v: self.v * o.v,
            g: [
                self.g[0] * o.v + self.v * o.g[0],
                self.g[1] * o.v + self.v * o.g[1],
            ],
            h: [
                self.h[0] * o.v + 2.0 * self.g[0] * o.g[0] + self.v * o.h[0],
                self.h[1] * o.v + self.g[0] * o.g[1] + self.g[1] * o.g[0] + self.v * o.h[1],
                self.h[2] * o.v + 2.0 * self.g[1] * o.g[1] + self.v * o.h[2],
            ],
        }
    }

    fn is_zero(&self) -> bool {
        self.v == 0.0 && self.g == [0.0, 0.0] && self.h == [0.0; 3]
    }
}

/// C^∞ profile: 1 for t <= 1/2, 0 for t >= 1. Returns (value, d/dt, d²/dt²).
fn prof_jet(t: f64) -> (f64, f64, f64) {
    if t <= 0.5 {
        return (1.0, 0.0, 0.0);
    }
    if t >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    // Bridge g(1-s)/(g(1-s)+g(s)) with g(s) = exp(-1/s), s = 2t-1 ∈ (0,1).
    let tj = Jet1::variable(t, 3);
    let s = tj.scale(2.0).add(&Jet1::constant(-1.0, 3));
    let g = |a: &Jet1| a.recip().scale(-1.0).exp();
    let gs = g(&s);
    let g1s = g(&Jet1::constant(1.0, 3).sub(&s));
    let p = g1s.div(&g1s.add(&gs));
    (p.value(), p.derivative(1), p.derivative(2))
}

fn prof_c2(t: C2) -> C2 {
    let (p, dp, ddp) = prof_jet(t.v);
    C2 {
        v: p,
        g: [dp * t.g[0], dp * t.g[1]],
        h: [
            ddp * t.g[0] * t.g[0] + dp * t.h[0],
            ddp * t.g[0] * t.g[1] + dp * t.h[1],
            ddp * t.g[1] * t.g[1] + dp * t.h[2],
        ],
    }
}

/// |x - v| as a C2 quantity (only used where the argument is bounded away
/// from zero by the profile plateau).
fn radius_c2(x: [f64; 2], v: [f64; 2]) -> C2 {
    let dx = [x[0] - v[0], x[1] - v[1]];
    let r = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
    if r < 1e-300 {
        return C2::constant(0.0);
    }
    let g = [dx[0] / r, dx[1] / r];
    C2 {
        v: r,
        g,
        h: [
            (1.0 - g[0] * g[0]) / r,
            -g[0] * g[1] / r,
            (1.0 - g[1] * g[1]) / r,
        ],
    }
}

fn normalize([x, y]: [f64; 2]) -> [f64; 2] {
    let n = (x * x + y * y).sqrt();
    [x / n, y / n]
}

pub fn smooth(
    u: PointFn,
    field: Arc<LengthScaleField>,
    params: SmoothingParams,
) -> Result<SmoothedFunction> {
    build(u, field, params, false)
}

/// Zero-boundary-condition variant: boundary shifts point outward and u is
/// extended by zero, so the result vanishes on a collar of width λ·ε.
pub fn smooth_with_zero_bc(
    u: PointFn,
    field: Arc<LengthScaleField>,
    params: SmoothingParams,
) -> Result<SmoothedFunction> {
    build(u, field, params, true)
}

fn build(
    u: PointFn,
    field: Arc<LengthScaleField>,
    params: SmoothingParams,
    zero_bc: bool,
) -> Result<SmoothedFunction> {
    let domain = field.mesh.domain.clone();
    let d = field.mesh.d;
    let moll = Mollifier::standard_bump(d)?.raise_order(params.k_max)?;
    let (nodes, weights) = ball_nodes(d);
    // Strip widths scale with the largest ε value.
    let lam0 = crate::length_scale::audit_admissibility(&field, 1, 2)?.lambda[0];
    let width = 2.0 * params.beta * lam0;
    let angles = domain.corner_angles();
    let theta_min = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let sides = domain.sides();

    let mut charts = Vec::new();
    charts.push(Chart {
        geom: ChartGeom::Interior,
        shift: [0.0, 0.0],
        l: 0.0,
        tables: build_kernel_tables(&moll, d, &nodes, &weights, 0.0, [0.0, 0.0], params.k_max),
    });
    let orient = if zero_bc { -1.0 } else { 1.0 };
    let mut collar: Option<f64> = zero_bc.then_some(f64::INFINITY);
    if d == 2 {
        let r1 = 1.05 * (width + (params.l_cone + 1.0) * params.delta * lam0) / theta_min.sin();
        if let Domain::Polygon { vertices } = &domain {
            for (i, v) in vertices.iter().enumerate() {
                let n = vertices.len();
                let prev = vertices[(i + n - 1) % n];
                let next = vertices[(i + 1) % n];
                let bis = normalize([
                    normalize([prev[0] - v[0], prev[1] - v[1]])[0]
                        + normalize([next[0] - v[0], next[1] - v[1]])[0],
                    normalize([prev[0] - v[0], prev[1] - v[1]])[1]
                        + normalize([next[0] - v[0], next[1] - v[1]])[1],
                ]);
                let l_c = params.l_cone.max(1.2 / (0.5 * angles[i]).sin());
                charts.push(Chart {
                    geom: ChartGeom::Corner { vertex: *v, radius: 2.0 * r1 },
                    shift: [orient * bis[0], orient * bis[1]],
                    l: l_c,
                    tables: build_kernel_tables(
                        &moll,
                        d,
                        &nodes,
                        &weights,
                        l_c,
                        [orient * bis[0], orient * bis[1]],
                        params.k_max,
                    ),
                });
                if let Some(c) = collar.as_mut() {
                    *c = c.min(params.delta * (l_c * (0.5 * angles[i]).sin() - 1.0));
                }
            }
        }
    }
    for (a, _b, n_in, _len) in &sides {
        charts.push(Chart {
            geom: ChartGeom::Edge { anchor: *a, n_in: *n_in, width },
            shift: [orient * n_in[0], orient * n_in[1]],
            l: params.l_cone,
            tables: build_kernel_tables(
                &moll,
                d,
                &nodes,
                &weights,
                params.l_cone,
                [orient * n_in[0], orient * n_in[1]],
                params.k_max,
            ),
        });
        if let Some(c) = collar.as_mut() {
            *c = c.min(params.delta * (params.l_cone - 1.0));
        }
    }
    Ok(SmoothedFunction {
        u,
        field,
        params,
        domain,
        charts,
        nodes,
        weights,
        zero_bc,
        collar_lambda: collar.map(|c| 0.95 * c),
    })
}

impl SmoothedFunction {
    /// ψ_j as a C2 quantity for boundary chart j (1-based into `charts`).
    fn psi(&self, j: usize, x: [f64; 2]) -> C2 {
        match &self.charts[j].geom {
            ChartGeom::Interior => C2::constant(0.0),
            ChartGeom::Edge { anchor, n_in, width } => {
                let t = n_in[0] * (x[0] - anchor[0]) + n_in[1] * (x[1] - anchor[1]);
                prof_c2(C2 {
                    v: t / width,
                    g: [n_in[0] / width, n_in[1] / width],
                    h: [0.0; 3],
                })
            }
            ChartGeom::Corner { vertex, radius } => {
                let r = radius_c2(x, *vertex);
                prof_c2(C2 {
                    v: r.v / radius,
                    g: [r.g[0] / radius, r.g[1] / radius],
                    h: [r.h[0] / radius, r.h[1] / radius, r.h[2] / radius],
                })
            }
        }
    }

    /// Telescoping partition of unity over all charts (interior first):
    /// η_j = ψ_j Π_{j' < j} (1 - ψ_{j'}), η_0 = Π (1 - ψ).
    fn partition(&self, x: [f64; 2]) -> Vec<C2> {
        let mut etas = vec![C2::constant(0.0); self.charts.len()];
        let mut carry = C2::constant(1.0);
        for j in 1..self.charts.len() {
            let psi = self.psi(j, x);
            etas[j] = carry.mul(psi);
            carry = carry.mul(psi.one_minus());
        }
        etas[0] = carry;
        etas
    }

    fn sample_u(&self, y: [f64; 2]) -> f64 {
        if self.zero_bc && self.domain.signed_distance(y) < 0.0 {
            return 0.0;
        }
        (self.u)(y)
    }

    /// Chart operator value and (optionally) first/second derivatives.
    /// `eps_jet` must cover order 0, 1 or 2 matching `up_to`.
    fn op_jet(&self, j: usize, x: [f64; 2], eps_jet: &[f64], up_to: usize) -> Result<C2> {
        let chart = &self.charts[j];
        let d = self.field.mesh.d;
        let s = self.params.delta * eps_jet[0];
        let y = [
            x[0] + chart.l * s * chart.shift[0],
            x[1] + chart.l * s * chart.shift[1],
        ];
        let sd = self.domain.signed_distance(y);
        if self.zero_bc && !matches!(chart.geom, ChartGeom::Interior) {
            // Outward shift: if the ball cannot touch Ω the value is exactly 0.
            if sd <= -s {
                return Ok(C2::constant(0.0));
            }
        } else if sd < s * (1.0 - 1e-9) - 1e-13 {
            return Err(Error::Geometry(format!(
                "averaging ball exits the domain at {x:?} (chart {j}); \
                 parameters do not fit this geometry"
            )));
        }
        let us: Vec<f64> = self
            .nodes
            .iter()
            .map(|xi| self.sample_u([y[0] - s * xi[0], y[1] - s * xi[1]]))
            .collect();
        let dot = |table: &dyn Fn(usize) -> f64| -> f64 {
            self.weights
                .iter()
                .zip(&us)
                .enumerate()
                .map(|(q, (w, uv))| w * uv * table(q))
                .sum()
        };
        let t = &chart.tables;
        let val = dot(&|q| t.k[q]);
        let mut out = C2::constant(val);
        if up_to == 0 {
            return Ok(out);
        }
        let dd = d as f64;
        let s_i = match d {
            1 => [self.params.delta * eps_jet[1], 0.0],
            _ => [
                self.params.delta * eps_jet[1],
                self.params.delta * eps_jet[2],
            ],
        };
        // J_mi = δ_mi + L n̂_m s_i.
        let jac = |m: usize, i: usize| -> f64 {
            (if m == i { 1.0 } else { 0.0 }) + chart.l * chart.shift[m] * s_i[i]
        };
        let a_dk = [dot(&|q| t.dk[q][0]), dot(&|q| t.dk[q][1])];
        // K~ = d K + ξ·∇K.
        let a_kt = dot(&|q| {
            dd * t.k[q] + self.nodes[q][0] * t.dk[q][0] + self.nodes[q][1] * t.dk[q][1]
        });
        for i in 0..d {
            let mut v = -a_kt * s_i[i];
            for m in 0..d {
                v += a_dk[m] * jac(m, i);
            }
            out.g[i] = v / s;
        }
        if up_to == 1 {
            return Ok(out);
        }
        let s_ij = match d {
            1 => [self.params.delta * eps_jet[2], 0.0, 0.0],
            _ => [
                self.params.delta * eps_jet[3],
                self.params.delta * eps_jet[4],
                self.params.delta * eps_jet[5],
            ],
        };
        let sym = |i: usize, jx: usize| -> usize { i + jx }; // (0,0)->0 (0,1)->1 (1,1)->2
        let a_ddk = [
            [dot(&|q| t.ddk[q][0][0]), dot(&|q| t.ddk[q][0][1])],
            [dot(&|q| t.ddk[q][1][0]), dot(&|q| t.ddk[q][1][1])],
        ];
        // (∂_m K)~ = d ∂_m K + ξ·∇∂_m K.
        let a_dkt = [
            dot(&|q| {
                dd * t.dk[q][0]
                    + self.nodes[q][0] * t.ddk[q][0][0]
                    + self.nodes[q][1] * t.ddk[q][0][1]
            }),
            dot(&|q| {
                dd * t.dk[q][1]
                    + self.nodes[q][0] * t.ddk[q][1][0]
                    + self.nodes[q][1] * t.ddk[q][1][1]
            }),
        ];
        // ∂_n K~ = (d+1) ∂_n K + ξ·∇∂_n K.
        let a_d_of_kt = [
            dot(&|q| {
                (dd + 1.0) * t.dk[q][0]
                    + self.nodes[q][0] * t.ddk[q][0][0]
                    + self.nodes[q][1] * t.ddk[q][0][1]
            }),
            dot(&|q| {
                (dd + 1.0) * t.dk[q][1]
                    + self.nodes[q][0] * t.ddk[q][1][0]
                    + self.nodes[q][1] * t.ddk[q][1][1]
            }),
        ];
        // K~~ = d K~ + Σ_n ξ_n ((d+1) ∂_n K + Σ_i ξ_i ∂_i ∂_n K).
        let a_ktt = dot(&|q| {
            let xi = self.nodes[q];
            let kt = dd * t.k[q] + xi[0] * t.dk[q][0] + xi[1] * t.dk[q][1];
            let mut v = dd * kt;
            for n in 0..2 {
                let mut inner = (dd + 1.0) * t.dk[q][n];
                for i in 0..2 {
                    inner += xi[i] * t.ddk[q][i][n];
                }
                v += xi[n] * inner;
            }
            v
        });
        for i in 0..d {
            for jx in i..d {
                let first_i: f64 = {
                    let mut v = -a_kt * s_i[i];
                    for m in 0..d {
                        v += a_dk[m] * jac(m, i);
                    }
                    v
                };
                let mut acc = -s_i[jx] / (s * s) * first_i;
                let mut inner = 0.0;
                for m in 0..d {
                    let mut dm = -a_dkt[m] * s_i[jx];
                    for n in 0..d {
                        dm += a_ddk[n][m] * jac(n, jx);
                    }
                    inner += dm / s * jac(m, i);
                    inner += a_dk[m] * chart.l * chart.shift[m] * s_ij[sym(i, jx)];
                }
                let mut d_kt = -a_ktt * s_i[jx];
                for n in 0..d {
                    d_kt += a_d_of_kt[n] * jac(n, jx);
                }
                inner -= d_kt / s * s_i[i];
                inner -= a_kt * s_ij[sym(i, jx)];
                acc += inner / s;
                out.h[sym(i, jx)] = acc;
            }
        }
        Ok(out)
    }

    pub fn eval(&self, x: [f64; 2]) -> Result<f64> {
        let etas = self.partition(x);
        let eps = self.field.jet(x, 0);
        let mut total = 0.0;
        for j in 0..self.charts.len() {
            if etas[j].v == 0.0 {
                continue;
            }
            total += etas[j].v * self.op_jet(j, x, &eps, 0)?.v;
        }
        Ok(total)
    }

    /// Analytic derivative D^r I_ε u(x) for |r| <= 2.
    pub fn eval_derivative(&self, x: [f64; 2], r: MultiIndex) -> Result<f64> {
        let n = order(r);
        if n > 2 {
            return Err(Error::InvalidInput("derivatives above order 2 unsupported".into()));
        }
        if n == 0 {
            return self.eval(x);
        }
        let etas = self.partition(x);
        let eps = self.field.jet(x, 2.min(n));
        let mut total = C2::constant(0.0);
        for j in 0..self.charts.len() {
            if etas[j].is_zero() {
                continue;
            }
            let op = self.op_jet(j, x, &eps, n)?;
            let prod = etas[j].mul(op);
            total.v += prod.v;
            for i in 0..2 {
                total.g[i] += prod.g[i];
            }
            for i in 0..3 {
                total.h[i] += prod.h[i];
            }
        }
        Ok(match (r[0], r[1]) {
            (1, 0) => total.g[0],
            (0, 1) => total.g[1],
            (2, 0) => total.h[0],
            (1, 1) => total.h[1],
            (0, 2) => total.h[2],
            _ => unreachable!(),
        })
    }
}

/// Standalone interior rule E u(x) = ∫ u(y) ρ_{δε(x)}(x - y) dy.
pub fn interior_smooth(
    u: &dyn Fn([f64; 2]) -> f64,
    field: &LengthScaleField,
    params: &SmoothingParams,
    x: [f64; 2],
) -> Result<f64> {
    let d = field.mesh.d;
    let s = params.delta * field.eval(x);
    if field.mesh.domain.signed_distance(x) < s * (1.0 - 1e-9) - 1e-13 {
        return Err(Error::Geometry(
            "averaging ball exits the domain; use the boundary rule".into(),
        ));
    }
    let moll = Mollifier::standard_bump(d)?.raise_order(params.k_max)?;
    let (nodes, weights) = ball_nodes(d);
    let tables = build_kernel_tables(&moll, d, &nodes, &weights, 0.0, [0.0, 0.0], params.k_max);
    Ok(nodes
        .iter()
        .zip(&weights)
        .zip(&tables.k)
        .map(|((xi, w), k)| w * k * u([x[0] - s * xi[0], x[1] - s * xi[1]]))
        .sum())
}

/// Standalone boundary rule G at x0 with shift direction `n_hat`.
pub fn boundary_smooth(
    u: &dyn Fn([f64; 2]) -> f64,
    field: &LengthScaleField,
    params: &SmoothingParams,
    x0: [f64; 2],
    n_hat: [f64; 2],
) -> Result<f64> {
    let d = field.mesh.d;
    let n_hat = normalize(n_hat);
    let s = params.delta * field.eval(x0);
    let l = params.l_cone;
    let y = [x0[0] + l * s * n_hat[0], x0[1] + l * s * n_hat[1]];
    if field.mesh.domain.signed_distance(y) < s * (1.0 - 1e-9) - 1e-13 {
        return Err(Error::Geometry(
            "shifted averaging ball exits the domain; parameters invalid here".into(),
        ));
    }
    let moll = Mollifier::standard_bump(d)?.raise_order(params.k_max)?;
    let (nodes, weights) = ball_nodes(d);
    let tables = build_kernel_tables(&moll, d, &nodes, &weights, l, n_hat, params.k_max);
    Ok(nodes
        .iter()
        .zip(&weights)
        .zip(&tables.k)
        .map(|((xi, w), k)| w * k * u([y[0] - s * xi[0], y[1] - s * xi[1]]))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::length_scale::{
        audit_admissibility, default_c_reg, piecewise_target, smooth_length_scale,
    };
    use crate::mesh::{build_uniform_mesh, DegreeDistribution, Domain};
    use approx::assert_relative_eq;

    fn make_field(domain: &Domain, n: usize, p: usize) -> Arc<LengthScaleField> {
        let mesh = Arc::new(build_uniform_mesh(domain, n).unwrap());
        let deg = DegreeDistribution::uniform(&mesh, p).unwrap();
        let targets = piecewise_target(&mesh, &deg.p).unwrap();
        let c = default_c_reg(&mesh, &targets).unwrap();
        Arc::new(smooth_length_scale(mesh, targets, c).unwrap())
    }

    fn setup(domain: &Domain, n: usize, p: usize, k_max: usize) -> (Arc<LengthScaleField>, SmoothingParams) {
        let field = make_field(domain, n, p);
        let audit = audit_admissibility(&field, 2, 4).unwrap();
        let params = choose_parameters(&audit, 0.0, domain, k_max).unwrap();
        (field, params)
    }

    #[test]
    fn parameter_search_postconditions() {
        // Constant ε: 𝓛 = 0 → β = 0.25.
        let rep = AdmissibilityReport { lambda: vec![0.3, 0.0, 0.0], lipschitz: 0.0 };
        let p = choose_parameters(&rep, 0.0, &Domain::unit_interval(), 1).unwrap();
        assert_relative_eq!(p.beta, 0.25);
        assert!(2.0 * p.delta + p.alpha < p.beta);
        assert!(p.beta > p.tau * p.alpha + p.delta);
        assert!(p.tau > (p.l_boundary + 1.0) * (1.0 + p.delta / p.alpha) * 0.999);
        // 𝓛 = 1 → β < 0.5.
        let rep = AdmissibilityReport { lambda: vec![0.3, 1.0, 1.0], lipschitz: 1.0 };
        let p = choose_parameters(&rep, 0.0, &Domain::unit_square(), 2).unwrap();
        assert!(p.beta < 0.5);
        let cap = ((p.l_boundary + 1.0) * (p.delta + p.alpha) + p.delta)
            .max(p.alpha + p.delta * (p.l_cone + 1.0) * (1.0 + 1.0 * p.alpha));
        assert!(cap < p.beta);
    }

    #[test]
    fn interior_rule_exactness() {
        let (field, params) = setup(&Domain::unit_interval(), 4, 1, 1);
        let x = [0.5, 0.0];
        assert_relative_eq!(
            interior_smooth(&|_| 1.0, &field, &params, x).unwrap(),
            1.0,
            epsilon = 1e-14
        );
        let lin = |y: [f64; 2]| 2.0 - 3.0 * y[0];
        assert_relative_eq!(
            interior_smooth(&lin, &field, &params, x).unwrap(),
            lin(x),
            max_relative = 1e-12
        );
    }

    #[test]
    fn interior_rule_x_squared_bias() {
        // E x² = x² + (δε)² m₂ with m₂ the kernel second moment.
        let (field, params) = setup(&Domain::unit_interval(), 2, 1, 1);
        let x = [0.5, 0.0];
        let s = params.delta * field.eval(x);
        let moll = Mollifier::standard_bump(1).unwrap().raise_order(1).unwrap();
        let m2 = crate::quad::adaptive_1d(&|t| t * t * moll.eval([t, 0.0]), -1.0, 1.0, 1e-13);
        let got = interior_smooth(&|y| y[0] * y[0], &field, &params, x).unwrap();
        assert_relative_eq!(got, 0.25 + s * s * m2, max_relative = 1e-10);
    }

    #[test]
    fn interior_rule_rejects_boundary_point() {
        let (field, params) = setup(&Domain::unit_interval(), 4, 1, 1);
        assert!(interior_smooth(&|_| 1.0, &field, &params, [1e-6, 0.0]).is_err());
    }

    #[test]
    fn boundary_rule_polynomial_exactness() {
        let (field, params) = setup(&Domain::unit_interval(), 4, 1, 3);
        let x0 = [0.01, 0.0];
        assert_relative_eq!(
            boundary_smooth(&|_| 1.0, &field, &params, x0, [1.0, 0.0]).unwrap(),
            1.0,
            epsilon = 1e-13
        );
        let cubic = |y: [f64; 2]| y[0] * y[0] * y[0] - 2.0 * y[0] + 0.7;
        assert_relative_eq!(
            boundary_smooth(&cubic, &field, &params, x0, [1.0, 0.0]).unwrap(),
            cubic(x0),
            max_relative = 1e-8,
            epsilon = 1e-10
        );
    }

    #[test]
    fn boundary_rule_matches_direct_formula() {
        // k_max = 1, u = x³: evaluate the defining Taylor-shift formula with
        // an independent adaptive quadrature.
        let (field, params) = setup(&Domain::unit_interval(), 4, 1, 1);
        let x0 = [0.01, 0.0];
        let got = boundary_smooth(&|y| y[0] * y[0] * y[0], &field, &params, x0, [1.0, 0.0])
            .unwrap();
        let s = params.delta * field.eval(x0);
        let a = s * params.l_cone;
        let moll = Mollifier::standard_bump(1).unwrap().raise_order(1).unwrap();
        let conv = |z: f64, deriv: usize| -> f64 {
            // D^deriv (u ⋆ ρ_s)(z) = s^{-deriv} ∫ u(z - sw) (D^deriv ρ)(w) dw.
            crate::quad::adaptive_1d(
                &|w| {
                    let uv = (z - s * w).powi(3);
                    uv * moll.deriv([w, 0.0], [deriv, 0])
                },
                -1.0,
                1.0,
                1e-13,
            ) * s.powi(-(deriv as i32))
        };
        let want = conv(x0[0] + a, 0) - a * conv(x0[0] + a, 1);
        assert_relative_eq!(got, want, max_relative = 1e-9);
    }

    #[test]
    fn assembled_constant_reproduction() {
        for domain in [Domain::unit_interval(), Domain::unit_square()] {
            let n = if domain.dim() == 1 { 6 } else { 3 };
            let (field, params) = setup(&domain, n, 1, 1);
            let sf = smooth(Arc::new(|_| 3.5), field, params).unwrap();
            let pts: Vec<[f64; 2]> = if domain.dim() == 1 {
                vec![[0.001, 0.0], [0.3, 0.0], [0.5, 0.0], [0.999, 0.0]]
            } else {
                vec![[0.001, 0.001], [0.5, 0.5], [0.02, 0.5], [0.97, 0.97], [0.5, 0.0001]]
            };
            for x in pts {
                assert_relative_eq!(sf.eval(x).unwrap(), 3.5, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn assembled_polynomial_reproduction() {
        // P_{k_max} reproduction at interior and collar points, k_max = 2.
        let (field, params) = setup(&Domain::unit_square(), 3, 1, 2);
        let poly = |x: [f64; 2]| 0.3 + x[0] - 2.0 * x[1] + 0.5 * x[0] * x[1] - x[1] * x[1];
        let sf = smooth(Arc::new(poly), field, params).unwrap();
        for x in [
            [0.5, 0.5],
            [0.001, 0.001],
            [0.0005, 0.5],
            [0.98, 0.02],
            [0.5, 0.9995],
            [0.25, 0.75],
        ] {
            let got = sf.eval(x).unwrap();
            assert_relative_eq!(got, poly(x), max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn partition_sums_to_one() {
        let (field, params) = setup(&Domain::unit_square(), 3, 1, 1);
        let sf = smooth(Arc::new(|_| 0.0), field, params).unwrap();
        for x in [[0.5, 0.5], [0.01, 0.01], [0.001, 0.4], [0.2, 0.2], [0.95, 0.5]] {
            let etas = sf.partition(x);
            let sum: f64 = etas.iter().map(|e| e.v).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-14);
            let gx: f64 = etas.iter().map(|e| e.g[0]).sum();
            let gy: f64 = etas.iter().map(|e| e.g[1]).sum();
            assert!(gx.abs() < 1e-12 && gy.abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_constant_and_linear() {
        let (field, params) = setup(&Domain::unit_interval(), 4, 1, 1);
        let sf = smooth(Arc::new(|_| 2.0), field.clone(), params).unwrap();
        // The discrete parts identity carries a 1/s amplification of the
        // quadrature floor, so exact zero is out of reach.
        for x in [[0.5, 0.0], [0.02, 0.0]] {
            assert!(sf.eval_derivative(x, [1, 0]).unwrap().abs() < 5e-9);
        }
        let sf = smooth(Arc::new(|y| 3.0 * y[0] - 1.0), field, params).unwrap();
        for x in [[0.5, 0.0], [0.03, 0.0], [0.97, 0.0]] {
            assert_relative_eq!(
                sf.eval_derivative(x, [1, 0]).unwrap(),
                3.0,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn derivative_matches_fd_1d() {
        let (field, params) = setup(&Domain::unit_interval(), 4, 2, 2);
        let sf = smooth(
            Arc::new(|y: [f64; 2]| (2.0 * y[0]).sin() + 0.3 * (y[0] * 3.0).exp()),
            field,
            params,
        )
        .unwrap();
        let fd4 = |f: &dyn Fn(f64) -> f64, x: f64, h: f64| {
            (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
        };
        for x in [0.3, 0.5, 0.74, 0.05] {
            let g = |t: f64| sf.eval([t, 0.0]).unwrap();
            let d1 = sf.eval_derivative([x, 0.0], [1, 0]).unwrap();
            assert_relative_eq!(d1, fd4(&g, x, 2e-4), max_relative = 1e-6);
            let gd = |t: f64| sf.eval_derivative([t, 0.0], [1, 0]).unwrap();
            let d2 = sf.eval_derivative([x, 0.0], [2, 0]).unwrap();
            assert_relative_eq!(d2, fd4(&gd, x, 2e-4), max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn derivative_matches_fd_2d() {
        let (field, params) = setup(&Domain::unit_square(), 2, 1, 1);
        let sf = smooth(
            Arc::new(|y: [f64; 2]| (y[0] * 2.0).sin() * (1.3 * y[1]).cos()),
            field,
            params,
        )
        .unwrap();
        let fd4 = |f: &dyn Fn(f64) -> f64, x: f64, h: f64| {
            (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
        };
        for x in [[0.5, 0.5], [0.3, 0.62], [0.06, 0.5]] {
            let dx = sf.eval_derivative(x, [1, 0]).unwrap();
            let fx = fd4(&|t| sf.eval([t, x[1]]).unwrap(), x[0], 1e-3);
            assert_relative_eq!(dx, fx, max_relative = 1e-6, epsilon = 1e-9);
            let dy = sf.eval_derivative(x, [0, 1]).unwrap();
            let fy = fd4(&|t| sf.eval([x[0], t]).unwrap(), x[1], 1e-3);
            assert_relative_eq!(dy, fy, max_relative = 1e-6, epsilon = 1e-9);
            let dxy = sf.eval_derivative(x, [1, 1]).unwrap();
            let fxy = fd4(&|t| sf.eval_derivative([t, x[1]], [0, 1]).unwrap(), x[0], 1e-3);
            assert_relative_eq!(dxy, fxy, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn locality() {
        // Perturbing u far from x leaves the value unchanged exactly.
        let (field, params) = setup(&Domain::unit_interval(), 6, 1, 1);
        let x = [0.5, 0.0];
        let eps = field.eval(x);
        let cut = params.beta * eps;
        let sf1 = smooth(Arc::new(|y: [f64; 2]| y[0].sin()), field.clone(), params).unwrap();
        let bump = move |y: [f64; 2]| {
            y[0].sin() + if (y[0] - 0.5).abs() > 3.0 * cut { 10.0 } else { 0.0 }
        };
        let sf2 = smooth(Arc::new(bump), field, params).unwrap();
        assert_eq!(sf1.eval(x).unwrap(), sf2.eval(x).unwrap());
    }

    #[test]
    fn zero_bc_collar_and_interior() {
        for domain in [Domain::unit_interval(), Domain::unit_square()] {
            let n = if domain.dim() == 1 { 6 } else { 3 };
            let (field, params) = setup(&domain, n, 1, 1);
            let sf = smooth_with_zero_bc(Arc::new(|_| 1.0), field.clone(), params).unwrap();
            let lam = sf.collar_lambda.unwrap();
            assert!(lam > 0.0, "collar width must be positive, got {lam}");
            // Collar points: exactly zero.
            let collar_pts: Vec<[f64; 2]> = if domain.dim() == 1 {
                let e = field.eval([0.0, 0.0]);
                vec![[0.5 * lam * e, 0.0], [1.0 - 0.5 * lam * e, 0.0]]
            } else {
                let e = field.eval([0.5, 0.0]);
                vec![
                    [0.5, 0.25 * lam * e],
                    [0.25 * lam * e, 0.5],
                    [1.0 - 0.25 * lam * e, 0.3],
                    [0.3, 1.0 - 0.25 * lam * e],
                ]
            };
            for x in collar_pts {
                let v = sf.eval(x).unwrap();
                assert!(v.abs() < 1e-14, "collar value {v} at {x:?}");
            }
            // Deep interior: 1.
            let mid = if domain.dim() == 1 { [0.5, 0.0] } else { [0.5, 0.5] };
            assert_relative_eq!(sf.eval(mid).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_bc_smooth_transition() {
        let (field, params) = setup(&Domain::unit_interval(), 6, 1, 1);
        let sf = smooth_with_zero_bc(Arc::new(|_| 1.0), field, params).unwrap();
        // FD of the analytic derivative near the transition region.
        let fd4 = |f: &dyn Fn(f64) -> f64, x: f64, h: f64| {
            (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
        };
        for x in [0.01, 0.02, 0.05, 0.1] {
            let d1 = sf.eval_derivative([x, 0.0], [1, 0]).unwrap();
            let f = |t: f64| sf.eval([t, 0.0]).unwrap();
            let fd = fd4(&f, x, 2e-4);
            assert_relative_eq!(d1, fd, max_relative = 1e-5, epsilon = 1e-7);
        }
    }
}
