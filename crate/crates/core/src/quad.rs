//! Quadrature rules: Gauss-Legendre and Gauss-Jacobi lines, Duffy-mapped
//! triangles, polar unit-disk rules, and adaptive refinement wrappers.

use nalgebra::{DMatrix, SymmetricEigen};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return r.clone();
    }
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev initial guess, Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        ws[i] = w;
        xs[n - 1 - i] = x;
        ws[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        xs[n / 2] = 0.0;
    }
    cache.lock().unwrap().insert(n, (xs.clone(), ws.clone()));
    (xs, ws)
}

fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_on(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        xs.iter().map(|x| mid + half * x).collect(),
        ws.iter().map(|w| w * half).collect(),
    )
}

/// Gauss-Jacobi rule for ∫₀¹ t^γ f(t) dt (γ > -1), via Golub-Welsch on the
/// Jacobi recurrence for the weight (1+x)^γ on [-1, 1].
pub fn gauss_jacobi01(n: usize, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(gamma > -1.0);
    // Recurrence coefficients for weight (1-x)^a (1+x)^b with a = 0, b = gamma.
    let (a, b) = (0.0f64, gamma);
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let ab = a + b;
    alpha[0] = (b - a) / (ab + 2.0);
    // beta[0] holds the total mass of the weight on [-1,1]:
    // 2^(a+b+1) B(a+1, b+1).
    beta[0] = 2f64.powf(ab + 1.0) * beta_fn(a + 1.0, b + 1.0);
    for k in 1..n {
        let kf = k as f64;
        let denom = (2.0 * kf + ab) * (2.0 * kf + ab + 2.0);
        alpha[k] = (b * b - a * a) / denom;
        let num = 4.0 * kf * (kf + a) * (kf + b) * (kf + ab);
        let den = (2.0 * kf + ab).powi(2) * (2.0 * kf + ab + 1.0) * (2.0 * kf + ab - 1.0);
        beta[k] = num / den;
    }
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n {
        j[(k, k)] = alpha[k];
        if k + 1 < n {
            let s = beta[k + 1].sqrt();
            j[(k, k + 1)] = s;
            j[(k + 1, k)] = s;
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let w = beta[0] * eig.eigenvectors[(0, i)].powi(2);
            // Map [-1,1] with weight (1+x)^gamma to [0,1] with weight t^gamma:
            // t = (1+x)/2, dt = dx/2, (1+x)^gamma = (2t)^gamma.
            ((1.0 + x) / 2.0, w / 2f64.powf(gamma + 1.0))
        })
        .collect();
    pairs.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    )
}

fn beta_fn(x: f64, y: f64) -> f64 {
    (ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y)).exp()
}

/// Lanczos approximation of ln Γ.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Integrate f on [a, b] by composite Gauss panels, doubling the panel count
/// until two successive estimates agree to `rel_tol` (relative, with an
/// absolute floor).
pub fn adaptive_1d(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let mut panels = 1usize;
    let mut prev = composite(f, a, b, panels);
    for _ in 0..22 {
        panels *= 2;
        let cur = composite(f, a, b, panels);
        // Absolute floor so integrals that are genuinely ~0 (odd moments)
        // terminate instead of chasing a relative target forever.
        if (cur - prev).abs() <= rel_tol * cur.abs().max(prev.abs()) + 1e-15 {
            return cur;
        }
        prev = cur;
    }
    prev
}

fn composite(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let mut s = 0.0;
    let h = (b - a) / panels as f64;
    for k in 0..panels {
        let (xs, ws) = gauss_on(a + k as f64 * h, a + (k + 1) as f64 * h, 12);
        s += xs.iter().zip(&ws).map(|(x, w)| w * f(*x)).sum::<f64>();
    }
    s
}

/// Tensor rule on the reference triangle {(x,y): x,y >= 0, x+y <= 1} via the
/// Duffy map (u, v) -> (u, v(1-u)) with Jacobian (1-u). Exact for
/// polynomials of total degree <= n-1 (n Gauss points per direction, the
/// Jacobian absorbing one degree).
pub fn triangle_rule(n: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let map = |t: f64| 0.5 * (t + 1.0);
    let mut pts = Vec::with_capacity(n * n);
    let mut wts = Vec::with_capacity(n * n);
    for (i, &u) in xs.iter().enumerate() {
        let u = map(u);
        for (j, &v) in xs.iter().enumerate() {
            let v = map(v);
            pts.push([u, v * (1.0 - u)]);
            wts.push(0.25 * ws[i] * ws[j] * (1.0 - u));
        }
    }
    (pts, wts)
}

/// Tensor rule on the closed unit ball of dimension d (d = 1: [-1,1] Gauss;
/// d = 2: polar Gauss x Gauss with the radial weight r absorbed).
pub fn ball_rule(d: usize, n: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    match d {
        1 => {
            let (xs, ws) = gauss_legendre(n);
            (xs.iter().map(|&x| [x, 0.0]).collect(), ws)
        }
        2 => {
            let (rs, rw) = gauss_on(0.0, 1.0, n);
            let (ts, tw) = gauss_on(0.0, 2.0 * std::f64::consts::PI, n);
            let mut pts = Vec::with_capacity(n * n);
            let mut wts = Vec::with_capacity(n * n);
            for (i, &r) in rs.iter().enumerate() {
                for (j, &t) in ts.iter().enumerate() {
                    pts.push([r * t.cos(), r * t.sin()]);
                    wts.push(rw[i] * tw[j] * r);
                }
            }
            (pts, wts)
        }
        _ => panic!("dimension {d} unsupported"),
    }
}
