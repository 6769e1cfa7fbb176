//! Shared helpers for the integration suites.
//!
//! The production crate applies the weight matrix blockwise to `n x d`
//! row-stacked states and never materializes the lifted system. These
//! helpers build that lifted system explicitly for quadratic problems,
//! giving the tests a structurally independent reference: the whole
//! recursion becomes one big matrix acting on a column-major stacked
//! vector, so trajectories and stability margins can be cross-checked
//! against plain dense linear algebra.

#![allow(dead_code)]

use gtlab::problems::{LocalData, ProblemSet};
use nalgebra::{DMatrix, DVector};

/// Column-major stacking of an `n x d` state into a length-`n d`
/// vector: entry `c * n + i` is `x[(i, c)]`.
pub fn stack_to_vec(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// Inverse of [`stack_to_vec`].
pub fn vec_to_stack(v: &DVector<f64>, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, d, v.as_slice())
}

/// The weight matrix acting on a stacked state: block diagonal with
/// `d` copies of `w`, matching the column-major stacking.
pub fn lifted_weights(w: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let n = w.nrows();
    let mut big = DMatrix::zeros(n * d, n * d);
    for c in 0..d {
        big.view_mut((c * n, c * n), (n, n)).copy_from(w);
    }
    big
}

/// Every agent's quadratic curvature as one lifted matrix: entry
/// `(c n + i, c' n + i)` is `Q_i[(c, c')]`, so multiplying a stacked
/// state applies each agent's Hessian to its own row. Panics when the
/// problem is not quadratic.
pub fn lifted_curvature(p: &ProblemSet) -> DMatrix<f64> {
    let LocalData::Quadratic { q, .. } = &p.data else {
        panic!("lifted curvature is only defined for quadratic problems");
    };
    let (n, d) = (p.n, p.d);
    let mut big = DMatrix::zeros(n * d, n * d);
    for (i, qi) in q.iter().enumerate() {
        for c in 0..d {
            for c2 in 0..d {
                big[(c * n + i, c2 * n + i)] = qi[(c, c2)];
            }
        }
    }
    big
}

/// The stacked linear offsets of a quadratic problem: entry
/// `c n + i` is `b_i[c]`, so the stacked gradient at `v` is
/// `lifted_curvature * v - lifted_offsets`.
pub fn lifted_offsets(p: &ProblemSet) -> DVector<f64> {
    let LocalData::Quadratic { b, .. } = &p.data else {
        panic!("lifted offsets are only defined for quadratic problems");
    };
    let (n, d) = (p.n, p.d);
    let mut v = DVector::zeros(n * d);
    for (i, bi) in b.iter().enumerate() {
        for c in 0..d {
            v[c * n + i] = bi[c];
        }
    }
    v
}

/// One-step matrix of the noise-free tracking recursion on a quadratic
/// problem, acting on the concatenated stacked state `[x; g]`.
///
/// The update
///   `x' = W (x - alpha g)`,
///   `g' = W (g + grad(x') - grad(x))`
/// is linear in `(x, g)` because the gradient difference cancels the
/// offsets, giving the block matrix
///   `[[ Wb, -alpha Wb ], [ Wb Qb (Wb - I), Wb - alpha Wb Qb Wb ]]`
/// with `Wb` the lifted weights and `Qb` the lifted curvature.
pub fn tracking_step_matrix(w: &DMatrix<f64>, p: &ProblemSet, alpha: f64) -> DMatrix<f64> {
    let nd = p.n * p.d;
    let wb = lifted_weights(w, p.d);
    let qb = lifted_curvature(p);
    let eye = DMatrix::<f64>::identity(nd, nd);

    let mut m = DMatrix::zeros(2 * nd, 2 * nd);
    m.view_mut((0, 0), (nd, nd)).copy_from(&wb);
    m.view_mut((0, nd), (nd, nd)).copy_from(&(-alpha * &wb));
    m.view_mut((nd, 0), (nd, nd))
        .copy_from(&(&wb * &qb * (&wb - &eye)));
    m.view_mut((nd, nd), (nd, nd))
        .copy_from(&(&wb - alpha * &wb * &qb * &wb));
    m
}

/// Asymptotic per-step contraction factor of the tracking recursion on
/// a quadratic problem.
///
/// Consensual states with a zero tracker are fixed points of the step
/// matrix, so it always carries `d` eigenvalues at exactly 1; those
/// are structural, not a divergence. The factor that decides
/// convergence is the largest magnitude among the remaining
/// eigenvalues. Panics if the structural eigenvalues cannot be
/// identified, which would make the reading meaningless.
pub fn tracking_convergence_factor(w: &DMatrix<f64>, p: &ProblemSet, alpha: f64) -> f64 {
    let m = tracking_step_matrix(w, p, alpha);
    let mut eigs: Vec<nalgebra::Complex<f64>> =
        m.complex_eigenvalues().iter().cloned().collect();
    // Sort by distance to 1 so the structural eigenvalues come first.
    eigs.sort_by(|a, b| {
        let da = (a - nalgebra::Complex::new(1.0, 0.0)).norm();
        let db = (b - nalgebra::Complex::new(1.0, 0.0)).norm();
        da.partial_cmp(&db).unwrap()
    });
    for e in &eigs[..p.d] {
        let dist = (e - nalgebra::Complex::new(1.0, 0.0)).norm();
        assert!(
            dist <= 1e-7,
            "expected {} structural unit eigenvalues, found one at distance {dist:.3e}",
            p.d
        );
    }
    eigs[p.d..]
        .iter()
        .map(|e| e.norm())
        .fold(0.0f64, f64::max)
}
