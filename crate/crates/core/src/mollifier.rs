//! Compactly supported smooth kernels with vanishing moments.
//!
//! The base kernel is the standard bump C·exp(-1/(1-|x|²)) on the unit ball.
//! Higher orders multiply the bump by an even polynomial q(|x|²) whose
//! coefficients solve the radial moment system; odd moments vanish by
//! symmetry, so vanishing radial moments of even orders 2..k_max give all of
//! ∫ y^s ρ = 0 for 1 <= |s| <= k_max.

use crate::error::{Error, Result};
use crate::jet::{Jet1, Jet2};
use crate::multi_index::{indices_up_to, MultiIndex};
use crate::quad::adaptive_1d;
use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct Mollifier {
    pub d: usize,
    pub k_max: usize,
    /// Overall normalization constant (C_rho for the plain bump).
    pub c: f64,
    /// Coefficients of the even correction polynomial q(t) = sum q_i t^i,
    /// t = |x|²; q = [1] for the plain bump.
    pub q: Vec<f64>,
    /// Condition number of the moment system solved for `q` (1 for order 0).
    pub moment_condition: f64,
}

/// exp(-1/(1-t)) for t < 1.
fn bump_profile(t: f64) -> f64 {
    if t < 1.0 {
        (-1.0 / (1.0 - t)).exp()
    } else {
        0.0
    }
}

impl Mollifier {
    /// The standard order-0 bump, normalized to unit mass by adaptive
    /// quadrature.
    pub fn standard_bump(d: usize) -> Result<Mollifier> {
        if d != 1 && d != 2 {
            return Err(Error::InvalidInput(format!("dimension {d} unsupported")));
        }
        let mass = match d {
            1 => adaptive_1d(&|x| bump_profile(x * x), -1.0, 1.0, 1e-13),
            _ => {
                2.0 * std::f64::consts::PI
                    * adaptive_1d(&|r| r * bump_profile(r * r), 0.0, 1.0, 1e-13)
            }
        };
        Ok(Mollifier {
            d,
            k_max: 0,
            c: 1.0 / mass,
            q: vec![1.0],
            moment_condition: 1.0,
        })
    }

    /// Raise the order to `k_max` by solving the linear moment system for the
    /// even correction polynomial.
    pub fn raise_order(&self, k_max: usize) -> Result<Mollifier> {
        if k_max > 6 {
            return Err(Error::InvalidInput(
                "k_max > 6 is outside the supported (well-conditioned) range".into(),
            ));
        }
        let m = k_max / 2;
        if m == 0 {
            // Orders 0 and 1 need no correction: odd moments vanish by
            // symmetry already.
            let mut out = self.clone();
            out.k_max = k_max;
            out.q = vec![1.0];
            out.moment_condition = 1.0;
            return self.renormalize(out);
        }
        // Radial base integrals I_j: 1D ∫ y^(2j) e(y²) dy over (-1,1),
        // 2D ∫ r^(2j+1) e(r²) dr over (0,1).
        let base_int = |j: usize| -> f64 {
            match self.d {
                1 => adaptive_1d(
                    &|y: f64| y.powi(2 * j as i32) * bump_profile(y * y),
                    -1.0,
                    1.0,
                    1e-13,
                ),
                _ => adaptive_1d(
                    &|r: f64| r.powi(2 * j as i32 + 1) * bump_profile(r * r),
                    0.0,
                    1.0,
                    1e-13,
                ),
            }
        };
        let ints: Vec<f64> = (0..=2 * m).map(base_int).collect();
        let mut a = DMatrix::zeros(m, m);
        let mut rhs = nalgebra::DVector::zeros(m);
        for row in 0..m {
            // Moment condition of even order 2(row+1).
            for col in 0..m {
                a[(row, col)] = ints[row + 1 + col + 1];
            }
            rhs[row] = -ints[row + 1];
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = smax / smin.max(1e-300);
        if cond > 1e12 {
            return Err(Error::Numerical(format!(
                "moment system is singular (condition number {cond:.3e})"
            )));
        }
        let sol = svd
            .solve(&rhs, 0.0)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let mut q = vec![1.0];
        q.extend(sol.iter().cloned());
        let out = Mollifier {
            d: self.d,
            k_max,
            c: 1.0,
            q,
            moment_condition: cond,
        };
        self.renormalize(out)
    }

    fn renormalize(&self, mut out: Mollifier) -> Result<Mollifier> {
        let q = out.q.clone();
        let poly = move |t: f64| -> f64 {
            q.iter()
                .rev()
                .fold(0.0, |acc, &coef| acc * t + coef)
        };
        let mass = match out.d {
            1 => adaptive_1d(&|y| poly(y * y) * bump_profile(y * y), -1.0, 1.0, 1e-13),
            _ => {
                2.0 * std::f64::consts::PI
                    * adaptive_1d(&|r| r * poly(r * r) * bump_profile(r * r), 0.0, 1.0, 1e-13)
            }
        };
        if mass.abs() < 1e-10 {
            return Err(Error::Numerical("corrected kernel has near-zero mass".into()));
        }
        out.c = 1.0 / mass;
        Ok(out)
    }

    fn q_at(&self, t: f64) -> f64 {
        self.q.iter().rev().fold(0.0, |acc, &coef| acc * t + coef)
    }

    /// Kernel value at x.
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let t = match self.d {
            1 => x[0] * x[0],
            _ => x[0] * x[0] + x[1] * x[1],
        };
        if t >= 1.0 {
            return 0.0;
        }
        self.c * self.q_at(t) * bump_profile(t)
    }

    /// ρ_δ(x) = ρ(x/δ) δ^{-d}.
    pub fn scaled_eval(&self, delta: f64, x: [f64; 2]) -> Result<f64> {
        if delta <= 0.0 {
            return Err(Error::InvalidInput("scale must be positive".into()));
        }
        let y = [x[0] / delta, x[1] / delta];
        Ok(self.eval(y) / delta.powi(self.d as i32))
    }

    /// Jet of the radial profile c·q(t)·exp(-1/(1-t)) at t0 < 1.
    fn profile_jet(&self, t0: f64, order: usize) -> Jet1 {
        let t = Jet1::variable(t0, order);
        let mut qj = Jet1::constant(0.0, order);
        for &coef in self.q.iter().rev() {
            qj = qj.mul(&t);
            qj.c[0] += coef;
        }
        let one_minus = Jet1::constant(1.0, order).sub(&t);
        let expo = one_minus.recip().scale(-1.0).exp();
        qj.mul(&expo).scale(self.c)
    }

    /// All partial derivatives D^m ρ(x) for |m| <= up_to, in the order of
    /// `indices_up_to(d, up_to)`.
    pub fn deriv_table(&self, x: [f64; 2], up_to: usize) -> Vec<f64> {
        let idx = indices_up_to(self.d, up_to);
        let t0 = match self.d {
            1 => x[0] * x[0],
            _ => x[0] * x[0] + x[1] * x[1],
        };
        if t0 >= 1.0 {
            return vec![0.0; idx.len()];
        }
        let g = self.profile_jet(t0, up_to);
        match self.d {
            1 => {
                let xv = Jet1::variable(x[0], up_to);
                let t = xv.mul(&xv);
                let f = Jet1::compose(&g, &t);
                idx.iter().map(|m| f.derivative(m[0])).collect()
            }
            _ => {
                let xv = Jet2::variable(0, x[0], up_to);
                let yv = Jet2::variable(1, x[1], up_to);
                let t = xv.mul(&xv).add(&yv.mul(&yv));
                let f = Jet2::compose1(&g, &t);
                idx.iter().map(|&m| f.derivative_mi(m)).collect()
            }
        }
    }

    /// Single partial derivative D^m ρ(x).
    pub fn deriv(&self, x: [f64; 2], m: MultiIndex) -> f64 {
        let up_to = m[0] + m[1];
        let idx = indices_up_to(self.d, up_to);
        let table = self.deriv_table(x, up_to);
        let pos = idx.iter().position(|&i| i == m).unwrap();
        table[pos]
    }

    /// Moment table ∫ y^s ρ(y) dy for all |s| <= up_to, by adaptive
    /// quadrature (radial x angular factorization in 2D).
    pub fn moments(&self, up_to: usize) -> Vec<(MultiIndex, f64)> {
        indices_up_to(self.d, up_to)
            .into_iter()
            .map(|s| {
                let v = match self.d {
                    1 => adaptive_1d(
                        &|y: f64| y.powi(s[0] as i32) * self.eval([y, 0.0]),
                        -1.0,
                        1.0,
                        1e-13,
                    ),
                    _ => {
                        let angular = adaptive_1d(
                            &|th: f64| {
                                th.cos().powi(s[0] as i32) * th.sin().powi(s[1] as i32)
                            },
                            0.0,
                            2.0 * std::f64::consts::PI,
                            1e-13,
                        );
                        let radial = adaptive_1d(
                            &|r: f64| {
                                r.powi((s[0] + s[1]) as i32 + 1) * self.eval([r, 0.0])
                            },
                            0.0,
                            1.0,
                            1e-13,
                        );
                        angular * radial
                    }
                };
                (s, v)
            })
            .collect()
    }
}
