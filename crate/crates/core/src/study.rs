//! Batch experiment driver: configured refinement studies, log-log rate
//! fits, and deterministic reports.
//!
//! Each experiment kind exercises one family of estimates end to end on
//! unit domains. Reports are deterministic for a given config and seed:
//! quadrature orders are fixed and parallel partial results are merged
//! in a fixed order.

use crate::bem::{
    boundary_mesh, continuous_residual, fine_space, hypersingular_ratio, orthogonalize,
    single_layer_ratio, CurveFn, RatioOutcome, SpaceOrder,
};
use crate::error::{Error, Result};
use crate::faa::expand;
use crate::hp_interp::{basis_deriv, quasi_interpolate, quasi_interpolate_zero_bc};
use crate::jet::{Jet1, Jet2};
use crate::length_scale::{
    audit_admissibility, default_c_reg, piecewise_target, rescale_for_patch_containment,
    smooth_length_scale, AdmissibilityReport, LengthScaleField,
};
use crate::mesh::{build_uniform_mesh, DegreeDistribution, Domain, Mesh};
use crate::mollifier::Mollifier;
use crate::multi_index::{indices_up_to, order, MultiIndex};
use crate::norms::{fractional_seminorm, scaling_check};
use crate::poly::{reference_basis, simplex_quadrature, PiecewisePolynomial};
use crate::smoothing::{
    choose_parameters, smooth, smooth_with_zero_bc, PointFn, SmoothingParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Reproduction,
    Stability,
    Approximation,
    ZeroBc,
    BemSingleLayer,
    BemHypersingular,
    EmbeddingScaling,
    FaaCheck,
    MollifierAudit,
}

pub const ALL_KINDS: [ExperimentKind; 9] = [
    ExperimentKind::Reproduction,
    ExperimentKind::Stability,
    ExperimentKind::Approximation,
    ExperimentKind::ZeroBc,
    ExperimentKind::BemSingleLayer,
    ExperimentKind::BemHypersingular,
    ExperimentKind::EmbeddingScaling,
    ExperimentKind::FaaCheck,
    ExperimentKind::MollifierAudit,
];

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Reproduction => "reproduction",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Approximation => "approximation",
            ExperimentKind::ZeroBc => "zero_bc",
            ExperimentKind::BemSingleLayer => "bem_single_layer",
            ExperimentKind::BemHypersingular => "bem_hypersingular",
            ExperimentKind::EmbeddingScaling => "embedding_scaling",
            ExperimentKind::FaaCheck => "faa_check",
            ExperimentKind::MollifierAudit => "mollifier_audit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

/// Target indices (s, p, q, r) plus the shift μ of the inverse estimate.
#[derive(Debug, Clone, Copy)]
pub struct SobolevTargets {
    pub s: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub mu: f64,
}

impl Default for SobolevTargets {
    fn default() -> Self {
        SobolevTargets { s: 0.0, p: 2.0, q: 2.0, r: 2.0, mu: 0.0 }
    }
}

/// Which operator an approximation study drives: the smoothing operator
/// alone, or the full quasi-interpolant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorChoice {
    Smoothing,
    QuasiInterpolant,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// 1 = unit interval, 2 = unit square.
    pub dim: usize,
    pub levels: Vec<usize>,
    pub degrees: Vec<usize>,
    pub k_max: usize,
    pub targets: SobolevTargets,
    pub seed: u64,
    pub operator: OperatorChoice,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            dim: 1,
            levels: vec![2, 3],
            degrees: vec![1],
            k_max: 1,
            targets: SobolevTargets::default(),
            seed: 0,
            operator: OperatorChoice::Smoothing,
        }
    }

    fn domain(&self) -> Domain {
        if self.dim == 1 {
            Domain::unit_interval()
        } else {
            Domain::unit_square()
        }
    }
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.dim != 1 && cfg.dim != 2 {
        return Err(Error::Config(format!("dimension must be 1 or 2, got {}", cfg.dim)));
    }
    if cfg.k_max > 4 {
        return Err(Error::Config("k_max must be at most 4".into()));
    }
    if cfg.levels.is_empty() {
        return Err(Error::Config("at least one level required".into()));
    }
    let t = &cfg.targets;
    match cfg.kind {
        ExperimentKind::Approximation => {
            if cfg.levels.len() < 2 {
                return Err(Error::Config("rate fits need at least 2 levels".into()));
            }
            // Simultaneous-approximation admissibility: (r = s + μ and
            // p > 1) or r > s + μ.
            let ok = (t.r == t.s + t.mu && t.p > 1.0) || t.r > t.s + t.mu;
            if !ok {
                return Err(Error::Config(format!(
                    "indices violate the admissibility assumption '(r = s+mu and p > 1) or r > s+mu': s={}, p={}, r={}, mu={}",
                    t.s, t.p, t.r, t.mu
                )));
            }
            if cfg.operator == OperatorChoice::Smoothing && t.r > cfg.k_max as f64 + 1.0 {
                return Err(Error::Config(format!(
                    "target order r={} exceeds k_max+1={}; the mollifier order caps the rate",
                    t.r,
                    cfg.k_max + 1
                )));
            }
        }
        ExperimentKind::BemHypersingular => {
            if cfg.degrees.iter().any(|&p| p < 1) {
                return Err(Error::Config("hypersingular studies need p >= 1".into()));
            }
        }
        ExperimentKind::EmbeddingScaling => {
            if !(t.q >= 1.0) || t.s < 0.0 {
                return Err(Error::Config("scaling check needs q >= 1 and s >= 0".into()));
            }
        }
        _ => {}
    }
    if cfg.kind == ExperimentKind::Stability && cfg.levels.len() < 2 {
        return Err(Error::Config("stability bands need at least 2 levels".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateFit {
    /// All errors at rounding level; nothing to fit.
    Exact,
    Fit { slope: f64, residual: f64 },
}

/// Least-squares slope of log(error) against log(h); residual is the max
/// absolute deviation of the fit.
pub fn fit_rate(errors: &[f64], hs: &[f64]) -> Result<RateFit> {
    if errors.len() != hs.len() || errors.len() < 2 {
        return Err(Error::InvalidInput("need matching error/h lists of length >= 2".into()));
    }
    if errors.iter().any(|e| *e <= 0.0) {
        return Ok(RateFit::Exact);
    }
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).abs())
        .fold(0.0f64, f64::max);
    Ok(RateFit::Fit { slope, residual })
}

/// Continuous piecewise-linear noise with nodal values in [-1, 1], drawn
/// from a seeded generator; the standard rough input of stability tests.
pub fn noise_fn(mesh: Arc<Mesh>, seed: u64) -> PointFn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..mesh.vertices.len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Arc::new(move |x: [f64; 2]| {
        let k = match mesh.locate(x) {
            Ok(k) => k,
            Err(_) => return 0.0,
        };
        let r = mesh.maps[k].apply_inverse(x);
        let el = &mesh.elements[k];
        if mesh.d == 1 {
            vals[el[0]] * (1.0 - r[0]) + vals[el[1]] * r[0]
        } else {
            vals[el[0]] * (1.0 - r[0] - r[1]) + vals[el[1]] * r[0] + vals[el[2]] * r[1]
        }
    })
}

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub level: usize,
    pub p: usize,
    pub h: f64,
    pub label: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub kind: ExperimentKind,
    pub rows: Vec<ReportRow>,
    pub rate: Option<RateFit>,
    pub expected_slope: Option<f64>,
    pub slope_tolerance: f64,
    pub pass: bool,
    /// Parameter and quadrature stamp for reproducibility.
    pub environment: String,
    pub notes: Vec<String>,
}

impl ConvergenceReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("level,p,h,label,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.16e},{},{:.16e}\n",
                r.level, r.p, r.h, r.label, r.value
            ));
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = format!("# {}\n\n", self.kind.name());
        out.push_str("| level | p | h | quantity | value |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.4e} | {} | {:.6e} |\n",
                r.level, r.p, r.h, r.label, r.value
            ));
        }
        match (&self.rate, self.expected_slope) {
            (Some(RateFit::Fit { slope, residual }), Some(exp)) => {
                out.push_str(&format!(
                    "\nfitted slope {slope:.4} (expected {exp} +- {}), fit residual {residual:.3e}\n",
                    self.slope_tolerance
                ));
            }
            (Some(RateFit::Exact), _) => out.push_str("\nexact reproduction, no rate fit\n"),
            _ => {}
        }
        for n in &self.notes {
            out.push_str(&format!("\n- {n}\n"));
        }
        out.push_str(&format!("\nresult: {}\n", if self.pass { "pass" } else { "FAIL" }));
        out.push_str(&format!("\nenvironment: {}\n", self.environment));
        out
    }
}

/// The length-scale / smoothing parameter pipeline shared by the
/// smoothing-based experiments. The field and its admissibility audit
/// depend only on (mesh, p), not on k_max, so they are memoized per
/// process; repeated studies on the same mesh family skip the audit.
fn pipeline(
    mesh: &Arc<Mesh>,
    p: usize,
    k_max: usize,
) -> Result<(Arc<LengthScaleField>, SmoothingParams)> {
    use std::collections::HashMap;
    use std::sync::Mutex;
    static CACHE: Mutex<
        Option<HashMap<(usize, usize, usize), (Arc<LengthScaleField>, AdmissibilityReport)>>,
    > = Mutex::new(None);
    let key = (mesh.d, mesh.n_elements(), p);
    if let Some((field, audit)) = CACHE
        .lock()
        .unwrap()
        .as_ref()
        .and_then(|m| m.get(&key).cloned())
    {
        let params = choose_parameters(&audit, 0.0, &mesh.domain, k_max)?;
        return Ok((field, params));
    }
    let degrees = DegreeDistribution::uniform(mesh, p)?;
    let targets = piecewise_target(mesh, &degrees.p)?;
    let c_reg = default_c_reg(mesh, &targets)?;
    let field = smooth_length_scale(mesh.clone(), targets, c_reg)?;
    let field = Arc::new(rescale_for_patch_containment(field)?);
    let audit = audit_admissibility(&field, 2, 4)?;
    let params = choose_parameters(&audit, 0.0, &mesh.domain, k_max)?;
    CACHE
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .insert(key, (field.clone(), audit));
    Ok((field, params))
}

fn stamp(params: &SmoothingParams) -> String {
    format!(
        "alpha={:.6e} beta={:.6e} delta={:.6e} tau={:.6e} L={:.6e} k_max={}; ball rule tanh-sinh(240) 1d / tanh-sinh(160)x16 2d; error quadrature degree 10",
        params.alpha, params.beta, params.delta, params.tau, params.l_cone, params.k_max
    )
}

/// Smooth reference function with exact derivatives: sin(pi x) in 1D,
/// sin(pi x) sin(pi y) in 2D. Vanishes on the unit-domain boundary.
fn test_fn(dim: usize) -> (PointFn, Arc<dyn Fn([f64; 2], MultiIndex) -> f64 + Send + Sync>) {
    let sin_d = |x: f64, m: usize| PI.powi(m as i32) * (PI * x + m as f64 * PI / 2.0).sin();
    if dim == 1 {
        (
            Arc::new(|x: [f64; 2]| (PI * x[0]).sin()),
            Arc::new(move |x: [f64; 2], m: MultiIndex| sin_d(x[0], m[0])),
        )
    } else {
        (
            Arc::new(|x: [f64; 2]| (PI * x[0]).sin() * (PI * x[1]).sin()),
            Arc::new(move |x: [f64; 2], m: MultiIndex| sin_d(x[0], m[0]) * sin_d(x[1], m[1])),
        )
    }
}

/// Physical derivative of a piecewise polynomial on element k, |m| <= 2,
/// via the affine pullback of reference derivatives.
pub fn pp_derivative(pp: &PiecewisePolynomial, k: usize, x: [f64; 2], m: MultiIndex) -> f64 {
    let mesh = &pp.mesh;
    let basis = reference_basis(pp.degrees[k], mesh.d).unwrap();
    let xr = mesh.maps[k].apply_inverse(x);
    let ref_d = |mm: MultiIndex| -> f64 {
        pp.coefs[k]
            .iter()
            .enumerate()
            .map(|(i, c)| c * basis_deriv(&basis, i, xr, mm))
            .sum()
    };
    // Linear part B of the inverse map, exact for affine charts.
    let b0 = mesh.maps[k].apply_inverse([x[0] + 1.0, x[1]]);
    let b1 = mesh.maps[k].apply_inverse([x[0], x[1] + 1.0]);
    let b = [
        [b0[0] - xr[0], b1[0] - xr[0]],
        [b0[1] - xr[1], b1[1] - xr[1]],
    ];
    let axes: Vec<usize> = (0..m[0]).map(|_| 0).chain((0..m[1]).map(|_| 1)).collect();
    match axes.len() {
        0 => ref_d([0, 0]),
        1 => {
            let i = axes[0];
            (0..mesh.d)
                .map(|a| {
                    let mut mm = [0, 0];
                    mm[a] = 1;
                    b[a][i] * ref_d(mm)
                })
                .sum()
        }
        2 => {
            let (i, j) = (axes[0], axes[1]);
            let mut total = 0.0;
            for a in 0..mesh.d {
                for c in 0..mesh.d {
                    let mut mm = [0, 0];
                    mm[a] += 1;
                    mm[c] += 1;
                    total += b[a][i] * b[c][j] * ref_d(mm);
                }
            }
            total
        }
        _ => panic!("pp_derivative supports orders <= 2"),
    }
}

/// Broken seminorm of order ell of (u - P), u given by a derivative
/// closure.
fn broken_error(
    pp: &PiecewisePolynomial,
    du: &(dyn Fn([f64; 2], MultiIndex) -> f64 + Sync),
    ell: usize,
) -> f64 {
    let mesh = &pp.mesh;
    let (qx, qw) = simplex_quadrature(mesh.d, 10);
    let alphas: Vec<MultiIndex> = indices_up_to(mesh.d, ell)
        .into_iter()
        .filter(|a| order(*a) == ell)
        .collect();
    let parts: Vec<f64> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|k| {
            let jac = mesh.reference_jacobian(k);
            let mut cell = 0.0;
            for (xr, w) in qx.iter().zip(&qw) {
                let x = mesh.maps[k].apply(*xr);
                for a in &alphas {
                    cell += w * jac * (du(x, *a) - pp_derivative(pp, k, x, *a)).powi(2);
                }
            }
            cell
        })
        .collect();
    parts.iter().sum::<f64>().sqrt()
}

fn band(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    hi / lo
}

pub fn run(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    validate(cfg)?;
    match cfg.kind {
        ExperimentKind::MollifierAudit => run_mollifier(cfg),
        ExperimentKind::FaaCheck => run_faa(cfg),
        ExperimentKind::Reproduction => run_reproduction(cfg),
        ExperimentKind::Approximation => run_approximation(cfg),
        ExperimentKind::Stability => run_stability(cfg),
        ExperimentKind::ZeroBc => run_zero_bc(cfg),
        ExperimentKind::BemSingleLayer => run_bem(cfg, false),
        ExperimentKind::BemHypersingular => run_bem(cfg, true),
        ExperimentKind::EmbeddingScaling => run_scaling(cfg),
    }
}

fn run_mollifier(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for k in 0..=cfg.k_max {
        let moll = Mollifier::standard_bump(cfg.dim)?.raise_order(k)?;
        let mut defect = 0.0f64;
        for (s, m) in moll.moments(k) {
            let target = if order(s) == 0 { 1.0 } else { 0.0 };
            defect = defect.max((m - target).abs());
        }
        worst = worst.max(defect);
        rows.push(ReportRow { level: k, p: 0, h: 0.0, label: "moment_defect", value: defect });
    }
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows,
        rate: None,
        expected_slope: None,
        slope_tolerance: 0.0,
        pass: worst <= 1e-10,
        environment: format!("d={}, orders 0..={}, moment quadrature: mollifier ball rule", cfg.dim, cfg.k_max),
        notes: vec![format!("max moment defect {worst:.3e} (tolerance 1e-10)")],
    })
}

fn run_faa(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let n_samples = 100;
    if cfg.dim == 1 {
        let e1 = expand([1, 0], 1)?;
        let e2 = expand([2, 0], 1)?;
        for _ in 0..n_samples {
            let x = rng.gen_range(0.2..0.8);
            let z = rng.gen_range(-0.9..0.9);
            let ord = 3;
            let xv = Jet1::variable(x, ord);
            let eps = Jet1::constant(1.0, ord)
                .add(&xv.mul(&xv).scale(0.1))
                .add(&xv.mul(&xv).mul(&xv).scale(0.03));
            let inner = Jet1::variable(x, ord).add(&eps.scale(z));
            let u_comp = inner.mul(&inner).mul(&inner);
            let xp = x + z * eps.value();
            let du = |k: usize| match k {
                0 => xp.powi(3),
                1 => 3.0 * xp * xp,
                2 => 6.0 * xp,
                _ => 6.0,
            };
            let eps_jet: Vec<f64> = (0..=2).map(|k| eps.derivative(k)).collect();
            for (s, exp) in [(1usize, &e1), (2, &e2)] {
                let exact = u_comp.derivative(s);
                let mut total = du(s);
                for (r, v) in exp.evaluate([z, 0.0], &eps_jet)? {
                    total += v * du(r[0]);
                }
                worst = worst.max((total - exact).abs() / exact.abs().max(1e-10));
            }
        }
    } else {
        let orders = [[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]];
        let exps: Vec<_> = orders.iter().map(|s| expand(*s, 2)).collect::<Result<_>>()?;
        for _ in 0..n_samples {
            let x = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            let z = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)];
            let ord = 3;
            let x1 = Jet2::variable(0, x[0], ord);
            let x2 = Jet2::variable(1, x[1], ord);
            let eps = Jet2::constant(1.0, ord)
                .add(&x1.mul(&x1).scale(0.1))
                .add(&x1.mul(&x2).scale(0.2));
            let y1 = x1.add(&eps.scale(z[0]));
            let y2 = x2.add(&eps.scale(z[1]));
            let u_comp = y1.mul(&y1).mul(&y1).mul(&y2).add(&y1.mul(&y2).mul(&y2));
            let yp = [
                x[0] + z[0] * eps.value(),
                x[1] + z[1] * eps.value(),
            ];
            let du = |m: MultiIndex| -> f64 {
                // u(y) = y1^3 y2 + y1 y2^2 differentiated directly.
                let (a, b) = (yp[0], yp[1]);
                match m {
                    [0, 0] => a.powi(3) * b + a * b * b,
                    [1, 0] => 3.0 * a * a * b + b * b,
                    [0, 1] => a.powi(3) + 2.0 * a * b,
                    [2, 0] => 6.0 * a * b,
                    [1, 1] => 3.0 * a * a + 2.0 * b,
                    [0, 2] => 2.0 * a,
                    [3, 0] => 6.0 * b,
                    [2, 1] => 6.0 * a,
                    [1, 2] => 2.0,
                    _ => 0.0,
                }
            };
            let eps_jet: Vec<f64> = indices_up_to(2, 2)
                .iter()
                .map(|m| eps.derivative(m[0], m[1]))
                .collect();
            for (s, exp) in orders.iter().zip(&exps) {
                let exact = u_comp.derivative(s[0], s[1]);
                let mut total = du(*s);
                for (r, v) in exp.evaluate(z, &eps_jet)? {
                    total += v * du(r);
                }
                worst = worst.max((total - exact).abs() / exact.abs().max(1e-10));
            }
        }
    }
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows: vec![ReportRow { level: 0, p: 0, h: 0.0, label: "max_rel_error", value: worst }],
        rate: None,
        expected_slope: None,
        slope_tolerance: 0.0,
        pass: worst <= 1e-6,
        environment: format!("d={}, {n_samples} seeded samples, |s| <= 2, jet oracle order 3", cfg.dim),
        notes: vec![format!("max relative deviation {worst:.3e} (tolerance 1e-6)")],
    })
}

fn run_reproduction(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let p = cfg.degrees.first().copied().unwrap_or(1);
    let mut rows = Vec::new();
    let mut env = String::new();
    let mut worst = 0.0f64;
    for &level in &cfg.levels {
        let n = 1usize << level;
        let mesh = Arc::new(build_uniform_mesh(&cfg.domain(), n)?);
        let (field, params) = pipeline(&mesh, p, cfg.k_max)?;
        env = stamp(&params);
        let (qx, _) = simplex_quadrature(cfg.dim, 6);
        let mut level_err = 0.0f64;
        for mono in indices_up_to(cfg.dim, cfg.k_max) {
            let pi: PointFn = Arc::new(move |x: [f64; 2]| {
                x[0].powi(mono[0] as i32) * x[1].powi(mono[1] as i32)
            });
            let sf = smooth(pi.clone(), field.clone(), params)?;
            let errs: Vec<f64> = (0..mesh.n_elements())
                .into_par_iter()
                .map(|k| {
                    let mut worst = 0.0f64;
                    for xr in &qx {
                        let x = mesh.maps[k].apply(*xr);
                        if let Ok(v) = sf.eval(x) {
                            worst = worst.max((v - pi(x)).abs());
                        } else {
                            worst = f64::INFINITY;
                        }
                    }
                    worst
                })
                .collect();
            level_err = errs.iter().fold(level_err, |a, b| a.max(*b));
        }
        worst = worst.max(level_err);
        rows.push(ReportRow { level, p, h: 1.0 / n as f64, label: "max_error", value: level_err });
    }
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows,
        rate: None,
        expected_slope: None,
        slope_tolerance: 0.0,
        pass: worst <= 1e-8,
        environment: env,
        notes: vec![format!(
            "P_{} reproduction, max sampled error {worst:.3e} (tolerance 1e-8)",
            cfg.k_max
        )],
    })
}

fn run_approximation(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let p = cfg.degrees.first().copied().unwrap_or(1);
    let (u, du) = test_fn(cfg.dim);
    let ell = cfg.targets.s;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut hs = Vec::new();
    let mut env = String::new();
    let expected = match cfg.operator {
        OperatorChoice::Smoothing => cfg.targets.r - ell,
        OperatorChoice::QuasiInterpolant => {
            ((p + 1).min(cfg.k_max + 1) as f64 - ell).max(0.0)
        }
    };
    for &level in &cfg.levels {
        let n = 1usize << level;
        let mesh = Arc::new(build_uniform_mesh(&cfg.domain(), n)?);
        let h = 1.0 / n as f64;
        let err = match cfg.operator {
            OperatorChoice::Smoothing => {
                let (field, params) = pipeline(&mesh, p, cfg.k_max)?;
                env = stamp(&params);
                let sf = smooth(u.clone(), field, params)?;
                if ell == 0.0 {
                    let (qx, qw) = simplex_quadrature(cfg.dim, 10);
                    let parts: Vec<f64> = (0..mesh.n_elements())
                        .into_par_iter()
                        .map(|k| {
                            let jac = mesh.reference_jacobian(k);
                            let mut cell = 0.0;
                            for (xr, w) in qx.iter().zip(&qw) {
                                let x = mesh.maps[k].apply(*xr);
                                let v = sf.eval(x).unwrap_or(f64::NAN);
                                cell += w * jac * (u(x) - v).powi(2);
                            }
                            cell
                        })
                        .collect();
                    parts.iter().sum::<f64>().sqrt()
                } else if (ell - 0.5).abs() < 1e-12 && cfg.dim == 1 {
                    // The smoothing error is globally smooth, so the
                    // quadrature panels need not follow the mesh; 4x
                    // refined panels resolve the length-scale features
                    // the smoother imprints at the element scale. Point
                    // evaluations are memoized: panel-pair rules revisit
                    // the same nodes many times and each eval costs a
                    // full averaging integral.
                    let uf = u.clone();
                    let cache: std::sync::Mutex<std::collections::HashMap<u64, f64>> =
                        std::sync::Mutex::new(std::collections::HashMap::new());
                    let f = move |t: f64| {
                        if let Some(v) = cache.lock().unwrap().get(&t.to_bits()) {
                            return *v;
                        }
                        let v = uf([t, 0.0])
                            - sf.eval([t, 0.0]).expect("smoothing evaluation failed");
                        cache.lock().unwrap().insert(t.to_bits(), v);
                        v
                    };
                    let nref = 8 * n;
                    let breaks: Vec<f64> =
                        (0..=nref).map(|i| i as f64 / nref as f64).collect();
                    crate::norms::fractional_core(&breaks, false, &|t| [t, 0.0], &f, 0.5, 2.0)?
                } else {
                    return Err(Error::Config(
                        "smoothing approximation supports s = 0, or s = 1/2 in 1D".into(),
                    ));
                }
            }
            OperatorChoice::QuasiInterpolant => {
                env = format!("quasi-interpolant pipeline, p={p}, k_max={}", cfg.k_max);
                let degrees = DegreeDistribution::uniform(&mesh, p)?;
                let pp = quasi_interpolate(u.clone(), mesh.clone(), &degrees, cfg.k_max)?;
                broken_error(&pp, &*du, ell as usize)
            }
        };
        errors.push(err);
        hs.push(h);
        rows.push(ReportRow { level, p, h, label: "error", value: err });
    }
    let rate = fit_rate(&errors, &hs)?;
    let tol = if (cfg.targets.r - cfg.targets.r.round()).abs() < 1e-12
        && (ell - ell.round()).abs() < 1e-12
    {
        0.25
    } else {
        0.3
    };
    let pass = match &rate {
        RateFit::Exact => true,
        RateFit::Fit { slope, .. } => (slope - expected).abs() <= tol,
    };
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows,
        rate: Some(rate),
        expected_slope: Some(expected),
        slope_tolerance: tol,
        pass,
        environment: env,
        notes: Vec::new(),
    })
}

fn run_stability(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let p = cfg.degrees.first().copied().unwrap_or(1);
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    let mut env = String::new();
    for &level in &cfg.levels {
        let n = 1usize << level;
        let mesh = Arc::new(build_uniform_mesh(&cfg.domain(), n)?);
        let (field, params) = pipeline(&mesh, p, cfg.k_max)?;
        env = stamp(&params);
        let u = noise_fn(mesh.clone(), cfg.seed.wrapping_add(level as u64));
        let sf = smooth(u.clone(), field.clone(), params)?;
        let (qx, qw) = simplex_quadrature(cfg.dim, 8);
        let dirs: &[MultiIndex] = if cfg.dim == 1 { &[[1, 0]] } else { &[[1, 0], [0, 1]] };
        let parts: Vec<(f64, f64)> = (0..mesh.n_elements())
            .into_par_iter()
            .map(|k| {
                let jac = mesh.reference_jacobian(k);
                let (mut num2, mut den2) = (0.0, 0.0);
                for (xr, w) in qx.iter().zip(&qw) {
                    let x = mesh.maps[k].apply(*xr);
                    for m in dirs {
                        num2 += w * jac * sf.eval_derivative(x, *m).unwrap_or(f64::NAN).powi(2);
                    }
                    den2 += w * jac * (u(x) / field.eval(x)).powi(2);
                }
                (num2, den2)
            })
            .collect();
        let (num2, den2) = parts
            .iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let ratio = (num2 / den2).sqrt();
        ratios.push(ratio);
        rows.push(ReportRow { level, p, h: 1.0 / n as f64, label: "inverse_ratio", value: ratio });
    }
    let b = band(&ratios);
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows,
        rate: None,
        expected_slope: None,
        slope_tolerance: 0.0,
        pass: b <= 10.0,
        environment: env,
        notes: vec![format!("ratio band {b:.3} across levels (tolerance 10)")],
    })
}

fn run_zero_bc(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let p = cfg.degrees.first().copied().unwrap_or(1);
    let (u, du) = test_fn(cfg.dim);
    let domain = cfg.domain();
    let mut rows = Vec::new();
    let mut env = String::new();
    let mut stab = Vec::new();
    let mut appr = Vec::new();
    let mut collar_worst = 0.0f64;
    let mut trace_worst = 0.0f64;
    // H1 norm of u for the stability constant.
    let u_h1 = {
        let mesh = Arc::new(build_uniform_mesh(&domain, 8)?);
        let (qx, qw) = simplex_quadrature(cfg.dim, 10);
        let mut total = 0.0;
        for k in 0..mesh.n_elements() {
            let jac = mesh.reference_jacobian(k);
            for (xr, w) in qx.iter().zip(&qw) {
                let x = mesh.maps[k].apply(*xr);
                total += w * jac * du(x, [0, 0]).powi(2);
                total += w * jac * du(x, [1, 0]).powi(2);
                if cfg.dim == 2 {
                    total += w * jac * du(x, [0, 1]).powi(2);
                }
            }
        }
        total.sqrt()
    };
    for &level in &cfg.levels {
        let n = 1usize << level;
        let h = 1.0 / n as f64;
        let mesh = Arc::new(build_uniform_mesh(&domain, n)?);
        let (field, params) = pipeline(&mesh, p, cfg.k_max)?;
        env = stamp(&params);
        let sf = smooth_with_zero_bc(u.clone(), field.clone(), params)?;
        let lam = sf
            .collar_lambda
            .ok_or_else(|| Error::Numerical("zero-BC smoother reported no collar".into()))?;
        // Sample the collar: points at 30% of the collar depth.
        let mut collar_max = 0.0f64;
        for (a, bpt, n_in, len) in domain.sides() {
            for i in 0..7 {
                let t = (i as f64 + 0.5) / 7.0;
                let x0 = [a[0] + t * (bpt[0] - a[0]), a[1] + t * (bpt[1] - a[1])];
                let eps0 = field.eval(x0);
                let depth = 0.3 * lam * eps0;
                let x = [x0[0] + depth * n_in[0], x0[1] + depth * n_in[1]];
                collar_max = collar_max.max(sf.eval(x)?.abs());
                let _ = len;
            }
        }
        collar_worst = collar_worst.max(collar_max);
        let degrees = DegreeDistribution::uniform(&mesh, p)?;
        let pp = quasi_interpolate_zero_bc(u.clone(), mesh.clone(), &degrees, cfg.k_max)?;
        // Boundary trace must vanish identically.
        let mut trace_max = 0.0f64;
        for (a, bpt, n_in, _) in domain.sides() {
            for i in 0..=8 {
                let t = i as f64 / 8.0;
                let xb = [a[0] + t * (bpt[0] - a[0]), a[1] + t * (bpt[1] - a[1])];
                let xin = [xb[0] + 1e-9 * n_in[0], xb[1] + 1e-9 * n_in[1]];
                let k = mesh.locate(xin)?;
                trace_max = trace_max.max(pp.eval_on(k, xb).abs());
            }
        }
        trace_worst = trace_worst.max(trace_max);
        let h1 = broken_error(
            &PiecewisePolynomial::zero(mesh.clone(), pp.degrees.clone(), 1)?,
            &|x, m| pp_derivative(&pp, pp.mesh.locate(x).unwrap(), x, m),
            1,
        );
        let c_stab = h1 / u_h1;
        let l2_err = broken_error(&pp, &|x, m| du(x, m), 0);
        let c_appr = l2_err / h.powi(p as i32 + 1);
        stab.push(c_stab);
        appr.push(c_appr);
        rows.push(ReportRow { level, p, h, label: "collar_max", value: collar_max });
        rows.push(ReportRow { level, p, h, label: "trace_max", value: trace_max });
        rows.push(ReportRow { level, p, h, label: "h1_stability", value: c_stab });
        rows.push(ReportRow { level, p, h, label: "approx_constant", value: c_appr });
    }
    let (bs, ba) = (band(&stab), band(&appr));
    let pass = collar_worst <= 1e-14 && trace_worst <= 1e-12 && bs <= 3.0 && ba <= 3.0;
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows,
        rate: None,
        expected_slope: None,
        slope_tolerance: 0.0,
        pass,
        environment: env,
        notes: vec![
            format!("collar max {collar_worst:.3e} (tolerance 1e-14)"),
            format!("boundary trace max {trace_worst:.3e} (tolerance 1e-12)"),
            format!("H1-stability band {bs:.3}, approximation-constant band {ba:.3} (tolerance 3)"),
        ],
    })
}

fn run_bem(cfg: &ExperimentConfig, hypersingular: bool) -> Result<ConvergenceReport> {
    let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let g: CurveFn = Arc::new(|t: f64| {
        (2.0 * PI * t / 4.0).sin() + 0.4 * (4.0 * PI * t / 4.0).cos()
    });
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for &level in &cfg.levels {
        let n = 1usize << level;
        // Fine spaces depend only on the break pattern; share them
        // across degrees at this level.
        let mesh0 = boundary_mesh(&square, n, &[1])?;
        let (fine, doubled) = if hypersingular {
            (Some(fine_space(&mesh0, 8)?), Some(fine_space(&mesh0, 16)?))
        } else {
            (None, None)
        };
        for &p in &cfg.degrees {
            let mesh = boundary_mesh(&square, n, &[p])?;
            let outcome = if hypersingular {
                let u = orthogonalize(&mesh, g.clone(), SpaceOrder::Continuous)?;
                hypersingular_ratio(
                    &mesh,
                    &u,
                    fine.as_ref().unwrap(),
                    doubled.as_ref().unwrap(),
                )?
                .outcome
            } else {
                let u = continuous_residual(&mesh, g.clone())?;
                single_layer_ratio(&mesh, &u)?
            };
            match outcome {
                RatioOutcome::Degenerate => {
                    return Err(Error::Numerical(
                        "degenerate residual in a ratio study".into(),
                    ))
                }
                RatioOutcome::Ratio { ratio, .. } => {
                    ratios.push(ratio);
                    rows.push(ReportRow {
                        level,
                        p,
                        h: mesh.h_max(),
                        label: "ratio",
                        value: ratio,
                    });
                }
            }
        }
    }
    let b = band(&ratios);
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows,
        rate: None,
        expected_slope: None,
        slope_tolerance: 0.0,
        pass: b <= 3.0,
        environment: format!(
            "unit square boundary, g = sin(pi t/2) + 0.4 cos(pi t), {}",
            if hypersingular {
                "fine space 8x refined, doubling gate 5%"
            } else {
                "H^{1/2} via periodic chordal fractional seminorm"
            }
        ),
        notes: vec![format!("ratio band {b:.3} (tolerance 3)")],
    })
}

fn run_scaling(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let f = |t: f64, j: usize| match j {
        0 => (1.3 * t).sin() + t * t,
        1 => 1.3 * (1.3 * t).cos() + 2.0 * t,
        _ => -(1.3f64).powi(j as i32) * (1.3 * t + (j as f64 - 1.0) * PI / 2.0).cos()
            + if j == 2 { 2.0 } else { 0.0 },
    };
    let rep = scaling_check(&f, cfg.targets.s, cfg.targets.q, 2.0)?;
    let dev = (rep.measured_ratio / rep.expected_ratio - 1.0).abs();
    Ok(ConvergenceReport {
        kind: cfg.kind,
        rows: vec![
            ReportRow { level: 0, p: 0, h: 0.0, label: "measured_ratio", value: rep.measured_ratio },
            ReportRow { level: 0, p: 0, h: 0.0, label: "expected_ratio", value: rep.expected_ratio },
        ],
        rate: None,
        expected_slope: None,
        slope_tolerance: 0.0,
        pass: dev <= 1e-4,
        environment: format!("s={}, q={}, lambda=2, 12-panel partitions", cfg.targets.s, cfg.targets.q),
        notes: vec![format!("relative deviation {dev:.3e} (tolerance 1e-4)")],
    })
}
