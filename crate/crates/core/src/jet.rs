//! Truncated Taylor series (jet) arithmetic.
//!
//! Jets carry a function value together with derivatives at a point, stored as
//! Taylor coefficients (`c[k] = f^(k)(x0)/k!`). They serve two purposes: exact
//! derivatives of the radial kernel profiles (which are compositions of
//! rational functions and `exp`), and an independent automatic-differentiation
//! oracle for chain-rule tests.

use crate::multi_index::{idx2_list, MultiIndex};

/// Univariate jet of fixed truncation order (`c.len() - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Jet1 {
    pub c: Vec<f64>,
}

impl Jet1 {
    pub fn constant(v: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = v;
        Jet1 { c }
    }

    /// The identity function `x` expanded at `x0`.
    pub fn variable(x0: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = x0;
        if order >= 1 {
            c[1] = 1.0;
        }
        Jet1 { c }
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// k-th derivative (not Taylor coefficient).
    pub fn derivative(&self, k: usize) -> f64 {
        let mut fact = 1.0;
        for i in 1..=k {
            fact *= i as f64;
        }
        self.c[k] * fact
    }

    pub fn add(&self, o: &Jet1) -> Jet1 {
        let c = self.c.iter().zip(&o.c).map(|(a, b)| a + b).collect();
        Jet1 { c }
    }

    pub fn sub(&self, o: &Jet1) -> Jet1 {
        let c = self.c.iter().zip(&o.c).map(|(a, b)| a - b).collect();
        Jet1 { c }
    }

    pub fn scale(&self, s: f64) -> Jet1 {
        Jet1 {
            c: self.c.iter().map(|a| a * s).collect(),
        }
    }

    pub fn mul(&self, o: &Jet1) -> Jet1 {
        let n = self.c.len();
        let mut c = vec![0.0; n];
        for i in 0..n {
            if self.c[i] == 0.0 {
                continue;
            }
            for j in 0..n - i {
                c[i + j] += self.c[i] * o.c[j];
            }
        }
        Jet1 { c }
    }

    pub fn recip(&self) -> Jet1 {
        // Power series of 1/f via the recurrence b0 = 1/a0,
        // bk = -(sum_{i=1..k} a_i b_{k-i}) / a0.
        let n = self.c.len();
        let mut b = vec![0.0; n];
        b[0] = 1.0 / self.c[0];
        for k in 1..n {
            let mut s = 0.0;
            for i in 1..=k {
                s += self.c[i] * b[k - i];
            }
            b[k] = -s / self.c[0];
        }
        Jet1 { c: b }
    }

    pub fn div(&self, o: &Jet1) -> Jet1 {
        self.mul(&o.recip())
    }

    pub fn exp(&self) -> Jet1 {
        // b0 = exp(a0), bk = (1/k) sum_{i=1..k} i*a_i*b_{k-i}.
        let n = self.c.len();
        let mut b = vec![0.0; n];
        b[0] = self.c[0].exp();
        for k in 1..n {
            let mut s = 0.0;
            for i in 1..=k {
                s += (i as f64) * self.c[i] * b[k - i];
            }
            b[k] = s / (k as f64);
        }
        Jet1 { c: b }
    }

    pub fn powi(&self, mut e: usize) -> Jet1 {
        let mut acc = Jet1::constant(1.0, self.order());
        let mut base = self.clone();
        loop {
            if e & 1 == 1 {
                acc = acc.mul(&base);
            }
            e >>= 1;
            if e == 0 {
                return acc;
            }
            base = base.mul(&base);
        }
    }

    pub fn sin(&self) -> Jet1 {
        self.sin_cos().0
    }

    pub fn cos(&self) -> Jet1 {
        self.sin_cos().1
    }

    fn sin_cos(&self) -> (Jet1, Jet1) {
        // s' = a' c, c' = -a' s in Taylor-coefficient form.
        let n = self.c.len();
        let mut s = vec![0.0; n];
        let mut c = vec![0.0; n];
        s[0] = self.c[0].sin();
        c[0] = self.c[0].cos();
        for k in 1..n {
            let mut ds = 0.0;
            let mut dc = 0.0;
            for i in 1..=k {
                ds += (i as f64) * self.c[i] * c[k - i];
                dc -= (i as f64) * self.c[i] * s[k - i];
            }
            s[k] = ds / (k as f64);
            c[k] = dc / (k as f64);
        }
        (Jet1 { c: s }, Jet1 { c })
    }

    /// Compose a univariate function (given as a jet at `inner.value()`) with
    /// `inner`: returns the jet of `g ∘ inner` at the expansion point of
    /// `inner`. `g` must be expanded at `inner.value()`.
    pub fn compose(g: &Jet1, inner: &Jet1) -> Jet1 {
        let n = inner.c.len();
        let mut shifted = inner.clone();
        shifted.c[0] = 0.0;
        // Horner evaluation of the series of g in powers of (inner - inner0).
        let m = g.c.len().min(n);
        let mut acc = Jet1::constant(g.c[m - 1], inner.order());
        for k in (0..m - 1).rev() {
            acc = acc.mul(&shifted);
            acc.c[0] += g.c[k];
        }
        acc
    }
}

/// Bivariate jet truncated at a total order: coefficients `c[(i,j)]` are
/// Taylor coefficients of `f` for the monomial `x^i y^j`, `i + j <= order`.
#[derive(Debug, Clone)]
pub struct Jet2 {
    pub order: usize,
    pub c: Vec<f64>,
    idx: &'static [(usize, usize)],
}

fn pos(order: usize, i: usize, j: usize) -> usize {
    // Graded-lexicographic position of (i, j) among pairs with i + j <= order.
    let n = i + j;
    debug_assert!(n <= order);
    n * (n + 1) / 2 + j
}

impl Jet2 {
    pub fn constant(v: f64, order: usize) -> Self {
        let idx = idx2_list(order);
        let mut c = vec![0.0; idx.len()];
        c[0] = v;
        Jet2 { order, c, idx }
    }

    pub fn variable(axis: usize, x0: f64, order: usize) -> Self {
        let mut j = Jet2::constant(x0, order);
        if order >= 1 {
            let (a, b) = if axis == 0 { (1, 0) } else { (0, 1) };
            j.c[pos(order, a, b)] = 1.0;
        }
        j
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// Mixed partial derivative `D^(i,j) f` (with factorials restored).
    pub fn derivative(&self, i: usize, j: usize) -> f64 {
        let mut f = 1.0;
        for k in 2..=i {
            f *= k as f64;
        }
        for k in 2..=j {
            f *= k as f64;
        }
        self.c[pos(self.order, i, j)] * f
    }

    pub fn derivative_mi(&self, m: MultiIndex) -> f64 {
        self.derivative(m[0], m[1])
    }

    pub fn add(&self, o: &Jet2) -> Jet2 {
        let mut r = self.clone();
        for (a, b) in r.c.iter_mut().zip(&o.c) {
            *a += b;
        }
        r
    }

    pub fn sub(&self, o: &Jet2) -> Jet2 {
        let mut r = self.clone();
        for (a, b) in r.c.iter_mut().zip(&o.c) {
            *a -= b;
        }
        r
    }

    pub fn scale(&self, s: f64) -> Jet2 {
        let mut r = self.clone();
        for a in r.c.iter_mut() {
            *a *= s;
        }
        r
    }

    pub fn mul(&self, o: &Jet2) -> Jet2 {
        let mut r = Jet2::constant(0.0, self.order);
        for (a, &(i1, j1)) in self.c.iter().zip(self.idx) {
            if *a == 0.0 {
                continue;
            }
            for (b, &(i2, j2)) in o.c.iter().zip(o.idx) {
                if i1 + i2 + j1 + j2 <= self.order {
                    r.c[pos(self.order, i1 + i2, j1 + j2)] += a * b;
                }
            }
        }
        r
    }

    pub fn powi(&self, mut e: usize) -> Jet2 {
        let mut acc = Jet2::constant(1.0, self.order);
        let mut base = self.clone();
        loop {
            if e & 1 == 1 {
                acc = acc.mul(&base);
            }
            e >>= 1;
            if e == 0 {
                return acc;
            }
            base = base.mul(&base);
        }
    }

    /// Compose a univariate jet `g` (expanded at `inner.value()`) with a
    /// bivariate inner function.
    pub fn compose1(g: &Jet1, inner: &Jet2) -> Jet2 {
        let mut shifted = inner.clone();
        shifted.c[0] = 0.0;
        let m = g.c.len().min(inner.order + 1);
        let mut acc = Jet2::constant(g.c[m - 1], inner.order);
        for k in (0..m - 1).rev() {
            acc = acc.mul(&shifted);
            acc.c[0] += g.c[k];
        }
        acc
    }

    pub fn sin(&self) -> Jet2 {
        let g = Jet1::variable(self.value(), self.order).sin();
        Jet2::compose1(&g, self)
    }

    pub fn cos(&self) -> Jet2 {
        let g = Jet1::variable(self.value(), self.order).cos();
        Jet2::compose1(&g, self)
    }

    pub fn exp(&self) -> Jet2 {
        let g = Jet1::variable(self.value(), self.order).exp();
        Jet2::compose1(&g, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn jet1_exp_derivatives() {
        // f(x) = exp(2x) at x0 = 0.3: f^(k) = 2^k exp(0.6).
        let x = Jet1::variable(0.3, 5);
        let f = x.scale(2.0).exp();
        for k in 0..=5 {
            assert_relative_eq!(
                f.derivative(k),
                2f64.powi(k as i32) * 0.6f64.exp(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn jet1_rational() {
        // f(x) = 1/(1-x) at 0.25: f^(k) = k!/(1-x)^(k+1).
        let x = Jet1::variable(0.25, 6);
        let f = Jet1::constant(1.0, 6).sub(&x).recip();
        let mut fact = 1.0;
        for k in 0..=6 {
            if k > 0 {
                fact *= k as f64;
            }
            assert_relative_eq!(
                f.derivative(k),
                fact / 0.75f64.powi(k as i32 + 1),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn jet1_compose() {
        // exp(x^2) at x0 = 0.4 via composition, checked against direct arithmetic.
        let x = Jet1::variable(0.4, 6);
        let t = x.mul(&x);
        let g = Jet1::variable(t.value(), 6).exp();
        let composed = Jet1::compose(&g, &t);
        let direct = t.exp();
        for k in 0..=6 {
            assert_relative_eq!(composed.c[k], direct.c[k], max_relative = 1e-11);
        }
    }

    #[test]
    fn jet1_trig() {
        let x = Jet1::variable(0.7, 5);
        let s = x.scale(3.0).sin();
        assert_relative_eq!(s.derivative(0), (2.1f64).sin(), max_relative = 1e-12);
        assert_relative_eq!(s.derivative(1), 3.0 * (2.1f64).cos(), max_relative = 1e-12);
        assert_relative_eq!(s.derivative(2), -9.0 * (2.1f64).sin(), max_relative = 1e-12);
    }

    #[test]
    fn jet2_polynomial_partials() {
        // f(x,y) = x^3 y + 2 x y^2 at (1.5, -0.5).
        let (x0, y0) = (1.5, -0.5);
        let x = Jet2::variable(0, x0, 4);
        let y = Jet2::variable(1, y0, 4);
        let f = x.powi(3).mul(&y).add(&x.mul(&y.powi(2)).scale(2.0));
        assert_relative_eq!(f.derivative(0, 0), x0.powi(3) * y0 + 2.0 * x0 * y0 * y0);
        assert_relative_eq!(f.derivative(1, 0), 3.0 * x0 * x0 * y0 + 2.0 * y0 * y0);
        assert_relative_eq!(f.derivative(1, 1), 3.0 * x0 * x0 + 4.0 * y0);
        assert_relative_eq!(f.derivative(2, 1), 6.0 * x0);
        assert_relative_eq!(f.derivative(3, 1), 6.0);
        assert_relative_eq!(f.derivative(0, 2), 4.0 * x0);
    }

    #[test]
    fn jet2_radial_exp() {
        // f(x,y) = exp(-(x^2+y^2)) partials vs closed form at (0.3, 0.2).
        let (x0, y0) = (0.3, 0.2);
        let x = Jet2::variable(0, x0, 3);
        let y = Jet2::variable(1, y0, 3);
        let f = x.mul(&x).add(&y.mul(&y)).scale(-1.0).exp();
        let v = (-(x0 * x0 + y0 * y0) as f64).exp();
        assert_relative_eq!(f.derivative(0, 0), v, max_relative = 1e-12);
        assert_relative_eq!(f.derivative(1, 0), -2.0 * x0 * v, max_relative = 1e-12);
        assert_relative_eq!(
            f.derivative(2, 0),
            (4.0 * x0 * x0 - 2.0) * v,
            max_relative = 1e-12
        );
        assert_relative_eq!(f.derivative(1, 1), 4.0 * x0 * y0 * v, max_relative = 1e-12);
    }
}
