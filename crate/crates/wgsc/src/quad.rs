//! One-dimensional Gauss quadrature rules via Golub–Welsch.
//!
//! Nodes are the eigenvalues of the symmetric tridiagonal Jacobi matrix of
//! the orthogonal-polynomial recurrence; the weight attached to a node is
//! the squared first component of its (normalized) eigenvector, scaled by
//! the total mass of the weight function. Two rules are provided:
//!
//! * [`gauss_hermite`] — weight `exp(-y^2/2)/sqrt(2*pi)` on the whole line
//!   (the standard normal; total mass 1). The recurrence is the
//!   probabilists' Hermite one, off-diagonal `sqrt(k)`. An `n`-point rule
//!   integrates polynomials up to degree `2n - 1` exactly.
//! * [`gauss_legendre`] — weight 1 on `[-1, 1]` (total mass 2),
//!   off-diagonal `k / sqrt(4k^2 - 1)`. Used for truncated half-line
//!   factors in sub-level-set quadrature, where the Gaussian density is
//!   folded into the integrand.

use crate::error::{EngineError, Result};
use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Apply the rule to a 1D integrand.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Affine image of the rule on `[a, b]` (only meaningful for rules whose
    /// natural domain is `[-1, 1]`).
    pub fn mapped_to(&self, a: f64, b: f64) -> QuadratureRule {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        QuadratureRule {
            nodes: self.nodes.iter().map(|x| mid + half * x).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }
}

/// Eigenvalues of the symmetric tridiagonal Jacobi matrix — the node seeds.
/// The dense eigensolver is accurate to ~1e-8 in the extreme-node *weights*,
/// so callers refine nodes by Newton on the defining recurrence and recompute
/// weights from the analytic Christoffel formulas.
fn jacobi_eigenvalues(off_diagonal: &[f64]) -> Vec<f64> {
    let n = off_diagonal.len() + 1;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for (k, &b) in off_diagonal.iter().enumerate() {
        jacobi[(k, k + 1)] = b;
        jacobi[(k + 1, k)] = b;
    }
    let eigen = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    nodes
}

/// `(He_n(x), He_{n-1}(x))` by the probabilists' recurrence
/// `He_{k+1} = x He_k - k He_{k-1}`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    debug_assert!(n >= 1);
    let (mut prev, mut cur) = (1.0_f64, x); // He_0, He_1
    for k in 1..n {
        let next = x * cur - (k as f64) * prev;
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// `(P_n(x), P_{n-1}(x))` by Bonnet's recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    debug_assert!(n >= 1);
    let (mut prev, mut cur) = (1.0_f64, x); // P_0, P_1
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * cur - kf * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// `n`-point Gauss rule for the standard normal weight.
///
/// # Errors
///
/// `n` must be at least 1.
pub fn gauss_hermite(n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(EngineError::InvalidParameter {
            name: "nodes_per_dim",
            reason: "must be at least 1".into(),
        });
    }
    if n == 1 {
        return Ok(QuadratureRule {
            nodes: vec![0.0],
            weights: vec![1.0],
        });
    }
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let mut nodes = jacobi_eigenvalues(&off);
    // Newton on He_n (derivative He_n' = n He_{n-1}), then the Christoffel
    // weight (n-1)! / (n * He_{n-1}(x)^2); total mass of the normal weight
    // is 1.
    let fact_nm1: f64 = (1..n).map(|k| k as f64).product();
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (hn, hnm1) = hermite_pair(n, *x);
            *x -= hn / ((n as f64) * hnm1);
        }
        let (_, hnm1) = hermite_pair(n, *x);
        weights.push(fact_nm1 / ((n as f64) * hnm1 * hnm1));
    }
    Ok(QuadratureRule { nodes, weights })
}

/// `n`-point Gauss–Legendre rule on `[-1, 1]`.
///
/// # Errors
///
/// `n` must be at least 1.
pub fn gauss_legendre(n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(EngineError::InvalidParameter {
            name: "nodes",
            reason: "must be at least 1".into(),
        });
    }
    if n == 1 {
        return Ok(QuadratureRule {
            nodes: vec![0.0],
            weights: vec![2.0],
        });
    }
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let kf = k as f64;
            kf / (4.0 * kf * kf - 1.0).sqrt()
        })
        .collect();
    let mut nodes = jacobi_eigenvalues(&off);
    // Newton on P_n with P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1), then the
    // classical weight 2 / ((1 - x^2) P_n'(x)^2).
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (pn, pnm1) = legendre_pair(n, *x);
            let deriv = (n as f64) * (*x * pn - pnm1) / (*x * *x - 1.0);
            *x -= pn / deriv;
        }
        let (pn, pnm1) = legendre_pair(n, *x);
        let deriv = (n as f64) * (*x * pn - pnm1) / (*x * *x - 1.0);
        weights.push(2.0 / ((1.0 - *x * *x) * deriv * deriv));
    }
    Ok(QuadratureRule { nodes, weights })
}
