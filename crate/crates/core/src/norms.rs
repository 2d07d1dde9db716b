//! Integer and fractional Sobolev (semi)norms.
//!
//! The fractional seminorm |f|_{σ,p} is a double integral with a
//! non-integrable pointwise kernel |f(x)−f(y)|^p / |x−y|^{σp+d} whose
//! difference structure keeps it finite. It is evaluated panel-by-panel on
//! a 1D partition (a mesh, or an arclength parametrization of a curve):
//! same-panel integrals substitute y = x+h and absorb the h^{p−1−σp}
//! endpoint behavior into a Gauss-Jacobi weight; panels touching at one
//! point are geometrically graded toward it; separated panels use plain
//! Gauss rules. Every value is computed at two quadrature levels and must
//! agree to 1e-4 relative, otherwise the input is too rough for the rule
//! and an error is returned.

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::multi_index::MultiIndex;
use crate::poly::simplex_quadrature;
use crate::quad::{gauss_jacobi01, gauss_on};
use rayon::prelude::*;

/// Smoothness and integrability indices with the split s = ⌊s⌋ + σ.
#[derive(Debug, Clone, Copy)]
pub struct SobolevIndex {
    pub s: f64,
    pub p: f64,
}

impl SobolevIndex {
    pub fn new(s: f64, p: f64) -> Result<Self> {
        if s < 0.0 || !(p >= 1.0) {
            return Err(Error::InvalidInput(format!("invalid indices s={s}, p={p}")));
        }
        Ok(SobolevIndex { s, p })
    }

    pub fn integer_part(&self) -> usize {
        self.s.floor() as usize
    }

    pub fn sigma(&self) -> f64 {
        self.s - self.s.floor()
    }
}

fn indices_of_order(d: usize, j: usize) -> Vec<MultiIndex> {
    if d == 1 {
        return vec![[j, 0]];
    }
    (0..=j).map(|a| [j - a, a]).collect()
}

/// |f|_{j,p,ω} for ω a set of mesh elements (all elements when `elems` is
/// None). `f(x, α)` must return D^α f(x); p = ∞ takes a dense-sample max.
pub fn integer_seminorm(
    mesh: &Mesh,
    elems: Option<&[usize]>,
    f: &dyn Fn([f64; 2], MultiIndex) -> f64,
    j: usize,
    p: f64,
) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidInput("integrability must satisfy p >= 1".into()));
    }
    let all: Vec<usize>;
    let ks = match elems {
        Some(e) => e,
        None => {
            all = (0..mesh.n_elements()).collect();
            &all
        }
    };
    let alphas = indices_of_order(mesh.d, j);
    if p.is_infinite() {
        let mut sup = 0.0f64;
        let (pts, _) = simplex_quadrature(mesh.d, 24);
        for &k in ks {
            for x in &pts {
                let xp = mesh.maps[k].apply(*x);
                for a in &alphas {
                    sup = sup.max(f(xp, *a).abs());
                }
            }
        }
        return Ok(sup);
    }
    let (pts, wts) = simplex_quadrature(mesh.d, 14);
    let mut total = 0.0;
    for &k in ks {
        let jac = mesh.reference_jacobian(k);
        for (x, w) in pts.iter().zip(&wts) {
            let xp = mesh.maps[k].apply(*x);
            for a in &alphas {
                total += w * jac * f(xp, *a).abs().powf(p);
            }
        }
    }
    Ok(total.powf(1.0 / p))
}

/// One panel of a 1D parametrized curve.
#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
}

/// |f|^p contribution of one ordered panel pair, counted once per unordered
/// pair ({K,K'} contributes both (x,y) orders; the same-panel formula has
/// the factor 2 built in).
fn pair_contribution(
    k1: Panel,
    k2: Panel,
    touch: Option<f64>,
    embed: &dyn Fn(f64) -> [f64; 2],
    f: &dyn Fn(f64) -> f64,
    sigma: f64,
    p: f64,
    level: usize,
) -> f64 {
    let nq = 10 + 6 * level;
    let kernel = |x: f64, y: f64| -> f64 {
        let (ex, ey) = (embed(x), embed(y));
        let dist = ((ex[0] - ey[0]).powi(2) + (ex[1] - ey[1]).powi(2)).sqrt();
        (f(x) - f(y)).abs().powf(p) / dist.powf(sigma * p + 1.0)
    };
    if (k1.a, k1.b) == (k2.a, k2.b) {
        // Same panel: y = x + h, weight h^{p-1-σp}, difference quotient
        // |Δf/h|^p stays bounded for piecewise-smooth f.
        let gamma = p - 1.0 - sigma * p;
        let big_h = k1.b - k1.a;
        let (hs, hw) = gauss_jacobi01(nq, gamma);
        let mut total = 0.0;
        for (t, wh) in hs.iter().zip(&hw) {
            let h = big_h * t;
            let (xs, xw) = gauss_on(k1.a, k1.b - h, nq);
            let mut inner = 0.0;
            for (x, wx) in xs.iter().zip(&xw) {
                let (e1, e2) = (embed(*x), embed(x + h));
                let dist =
                    ((e1[0] - e2[0]).powi(2) + (e1[1] - e2[1]).powi(2)).sqrt();
                // dist = h on straight runs; keep the ratio for safety.
                let quot = (f(x + h) - f(*x)).abs() / h;
                inner += wx * quot.powf(p) * (h / dist).powf(sigma * p + 1.0);
            }
            total += wh * inner * big_h.powf(gamma + 1.0);
        }
        return 2.0 * total;
    }
    if let Some(c) = touch {
        // Panels sharing the parameter point c: geometric grading toward c
        // on both sides; the innermost sliver pair contributes O(2^{-m p(1-σ)}).
        let m = 30 + 4 * level;
        let sub = |pan: Panel| -> Vec<(f64, f64)> {
            let toward_b = (pan.b - c).abs() < (pan.a - c).abs();
            let len = pan.b - pan.a;
            let mut out = Vec::with_capacity(m + 1);
            let mut lo = 0.0f64;
            for i in (0..m).rev() {
                let hi = if i == 0 { 1.0 } else { 2.0f64.powi(-(i as i32)) };
                out.push(if toward_b {
                    (pan.b - len * hi, pan.b - len * lo)
                } else {
                    (pan.a + len * lo, pan.a + len * hi)
                });
                lo = hi;
            }
            out
        };
        let s1 = sub(k1);
        let s2 = sub(k2);
        let g = 5 + 2 * level;
        // The outermost subpanels are half the panel; they see a smooth
        // kernel but possibly oscillatory f and get the full order.
        let order = |a: f64, b: f64, pan: Panel| {
            if b - a >= 0.2 * (pan.b - pan.a) {
                nq
            } else {
                g
            }
        };
        let mut total = 0.0;
        for (a1, b1) in &s1 {
            let (xs, xw) = gauss_on(*a1, *b1, order(*a1, *b1, k1));
            for (a2, b2) in &s2 {
                let (ys, yw) = gauss_on(*a2, *b2, order(*a2, *b2, k2));
                for (x, wx) in xs.iter().zip(&xw) {
                    for (y, wy) in ys.iter().zip(&yw) {
                        total += wx * wy * kernel(*x, *y);
                    }
                }
            }
        }
        return 2.0 * total;
    }
    // Separated pair: composite Gauss, subdivided more aggressively when
    // the gap is small relative to the panel sizes (steep kernel).
    let gap = (k2.a - k1.b).max(k1.a - k2.b).max(0.0);
    let size = (k1.b - k1.a).max(k2.b - k2.a);
    let nsub = if gap < 0.3 * size {
        4
    } else if gap < 1.5 * size {
        2
    } else {
        1
    };
    let split = |pan: Panel| -> Vec<(f64, f64)> {
        (0..nsub)
            .map(|i| {
                let len = (pan.b - pan.a) / nsub as f64;
                (pan.a + i as f64 * len, pan.a + (i + 1) as f64 * len)
            })
            .collect()
    };
    let mut total = 0.0;
    for (a1, b1) in split(k1) {
        let (xs, xw) = gauss_on(a1, b1, nq);
        for (a2, b2) in split(k2) {
            let (ys, yw) = gauss_on(a2, b2, nq);
            for (x, wx) in xs.iter().zip(&xw) {
                for (y, wy) in ys.iter().zip(&yw) {
                    total += wx * wy * kernel(*x, *y);
                }
            }
        }
    }
    2.0 * total
}

/// Fractional seminorm of f over a 1D partition given by `breaks`
/// (parameter breakpoints). `embed` maps the parameter into the plane and
/// defines the kernel distance (identity embedding for an interval,
/// chordal for a polygon boundary); `periodic` closes the curve.
pub fn fractional_core(
    breaks: &[f64],
    periodic: bool,
    embed: &(dyn Fn(f64) -> [f64; 2] + Sync),
    f: &(dyn Fn(f64) -> f64 + Sync),
    sigma: f64,
    p: f64,
) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::InvalidInput(format!("sigma must be in (0,1), got {sigma}")));
    }
    if !(p >= 1.0) || p.is_infinite() {
        return Err(Error::InvalidInput(
            "fractional seminorms support finite p >= 1 only".into(),
        ));
    }
    if breaks.len() < 2 || breaks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("breakpoints must be increasing".into()));
    }
    let n = breaks.len() - 1;
    if periodic && n < 3 {
        return Err(Error::InvalidInput("periodic partition needs >= 3 panels".into()));
    }
    let panels: Vec<Panel> = (0..n)
        .map(|i| Panel { a: breaks[i], b: breaks[i + 1] })
        .collect();
    let eval_level = |level: usize| -> f64 {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i..n).map(move |j| (i, j)))
            .collect();
        // Collect in pair order and sum sequentially so results do not
        // depend on the parallel reduction order.
        let parts: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let touch = if i == j {
                    None
                } else if j == i + 1 {
                    Some(panels[j].a)
                } else if periodic && i == 0 && j == n - 1 {
                    Some(panels[0].a)
                } else {
                    None
                };
                if periodic && i == 0 && j == n - 1 {
                    // Wrap pair: shift the last panel below the period start
                    // so the shared point sits between them, and fold the
                    // parameter back before evaluating f and embed.
                    let period = breaks[n] - breaks[0];
                    let lo = breaks[0];
                    let k2 = Panel {
                        a: panels[j].a - period,
                        b: panels[j].b - period,
                    };
                    let fold = move |t: f64| if t < lo { t + period } else { t };
                    return pair_contribution(
                        k2,
                        panels[i],
                        touch,
                        &|t| embed(fold(t)),
                        &|t| f(fold(t)),
                        sigma,
                        p,
                        level,
                    );
                }
                pair_contribution(panels[i], panels[j], touch, embed, f, sigma, p, level)
            })
            .collect();
        parts.iter().sum()
    };
    let lo = eval_level(0);
    let hi = eval_level(1);
    let scale = hi.abs().max(1e-300);
    if (hi - lo).abs() / scale > 1e-4 && hi > 1e-28 {
        return Err(Error::Numerical(format!(
            "fractional seminorm quadrature did not converge: {lo} vs {hi}"
        )));
    }
    Ok(hi.powf(1.0 / p))
}

/// |f|_{σ,p,ω} on a 1D mesh (element subset optional).
pub fn fractional_seminorm(
    mesh: &Mesh,
    elems: Option<&[usize]>,
    f: &(dyn Fn([f64; 2]) -> f64 + Sync),
    sigma: f64,
    p: f64,
) -> Result<f64> {
    if mesh.d != 1 {
        return Err(Error::InvalidInput(
            "fractional seminorms are provided on 1D partitions (meshes or curve parametrizations)".into(),
        ));
    }
    let mut breaks: Vec<f64> = Vec::new();
    let all: Vec<usize> = (0..mesh.n_elements()).collect();
    let ks = elems.unwrap_or(&all);
    let mut ivs: Vec<(f64, f64)> = ks
        .iter()
        .map(|&k| {
            let a = mesh.vertices[mesh.elements[k][0]][0];
            let b = mesh.vertices[mesh.elements[k][1]][0];
            (a.min(b), a.max(b))
        })
        .collect();
    ivs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    for (i, (a, b)) in ivs.iter().enumerate() {
        if i > 0 && (a - ivs[i - 1].1).abs() > 1e-13 {
            return Err(Error::InvalidInput(
                "element subset must form a contiguous interval".into(),
            ));
        }
        if i == 0 {
            breaks.push(*a);
        }
        breaks.push(*b);
    }
    fractional_core(&breaks, false, &|t| [t, 0.0], &|t| f([t, 0.0]), sigma, p)
}

/// Full W^{s,p} norm: (‖f‖^p_{⌊s⌋,p} + |f|^p_{s,p})^{1/p}, the fractional
/// part taken of the ⌊s⌋-order derivatives.
pub fn sobolev_norm(
    mesh: &Mesh,
    elems: Option<&[usize]>,
    f: &(dyn Fn([f64; 2], MultiIndex) -> f64 + Sync),
    idx: SobolevIndex,
) -> Result<f64> {
    let m = idx.integer_part();
    let sigma = idx.sigma();
    let p = idx.p;
    let mut total = 0.0f64;
    for j in 0..=m {
        total += integer_seminorm(mesh, elems, f, j, p)?.powf(p);
    }
    if sigma > 0.0 {
        for alpha in indices_of_order(mesh.d, m) {
            total += fractional_seminorm(mesh, elems, &|x| f(x, alpha), sigma, p)?.powf(p);
        }
    }
    Ok(total.powf(1.0 / p))
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub s: f64,
    pub q: f64,
    pub lambda: f64,
    pub measured_ratio: f64,
    pub expected_ratio: f64,
}

/// Dilation identity |f_λ|_{s,q,(0,λ)} = λ^{1/q − s} |f|_{s,q,(0,1)} with
/// f_λ(x) = f(x/λ), checked numerically on uniform partitions (d = 1).
/// `f(t, j)` returns the j-th derivative on (0,1).
pub fn scaling_check(
    f: &(dyn Fn(f64, usize) -> f64 + Sync),
    s: f64,
    q: f64,
    lambda: f64,
) -> Result<ScalingReport> {
    if lambda <= 0.0 {
        return Err(Error::InvalidInput("dilation factor must be positive".into()));
    }
    let idx = SobolevIndex::new(s, q)?;
    let m = idx.integer_part();
    let sigma = idx.sigma();
    let n = 12usize;
    let seminorm_on = |len: f64, g: &(dyn Fn(f64, usize) -> f64 + Sync)| -> Result<f64> {
        let breaks: Vec<f64> = (0..=n).map(|i| len * i as f64 / n as f64).collect();
        if sigma == 0.0 {
            // Integer seminorm by composite Gauss.
            let mut total = 0.0;
            for w in breaks.windows(2) {
                let (xs, ws) = gauss_on(w[0], w[1], 16);
                for (x, wq) in xs.iter().zip(&ws) {
                    total += wq * g(*x, m).abs().powf(q);
                }
            }
            Ok(total.powf(1.0 / q))
        } else {
            fractional_core(&breaks, false, &|t| [t, 0.0], &|t| g(t, m), sigma, q)
        }
    };
    let base = seminorm_on(1.0, f)?;
    let dil = move |x: f64, j: usize| f(x / lambda, j) / lambda.powi(j as i32);
    let dilated = seminorm_on(lambda, &dil)?;
    Ok(ScalingReport {
        s,
        q,
        lambda,
        measured_ratio: dilated / base,
        expected_ratio: lambda.powf(1.0 / q - s),
    })
}
