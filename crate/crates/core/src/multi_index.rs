//! Multi-index bookkeeping shared by the kernel, chain-rule, and basis code.
//!
//! Multi-indices are stored as `[usize; 2]`; in one dimension the second
//! component is identically zero.

use std::sync::OnceLock;

pub type MultiIndex = [usize; 2];

pub fn order(m: MultiIndex) -> usize {
    m[0] + m[1]
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// α! = α₁!·α₂!
pub fn mi_factorial(m: MultiIndex) -> f64 {
    factorial(m[0]) * factorial(m[1])
}

/// x^α
pub fn mi_pow(x: [f64; 2], m: MultiIndex) -> f64 {
    x[0].powi(m[0] as i32) * x[1].powi(m[1] as i32)
}

pub fn add(a: MultiIndex, b: MultiIndex) -> MultiIndex {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn unit(axis: usize) -> MultiIndex {
    if axis == 0 {
        [1, 0]
    } else {
        [0, 1]
    }
}

/// All multi-indices in `d` variables with |α| = n, graded-lex order.
pub fn indices_of_order(d: usize, n: usize) -> Vec<MultiIndex> {
    match d {
        1 => vec![[n, 0]],
        2 => (0..=n).map(|j| [n - j, j]).collect(),
        _ => panic!("dimension {d} unsupported"),
    }
}

/// All multi-indices with |α| <= n, graded-lex order.
pub fn indices_up_to(d: usize, n: usize) -> Vec<MultiIndex> {
    (0..=n).flat_map(|k| indices_of_order(d, k)).collect()
}

/// Shared `(i, j)` index list for bivariate jets of a given truncation order.
pub fn idx2_list(order: usize) -> &'static [(usize, usize)] {
    static CACHE: OnceLock<Vec<&'static [(usize, usize)]>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| {
        (0..=12)
            .map(|n| {
                let v: Vec<(usize, usize)> = (0..=n)
                    .flat_map(|k| (0..=k).map(move |j| (k - j, j)))
                    .collect();
                &*v.leak()
            })
            .collect()
    });
    cache[order]
}
