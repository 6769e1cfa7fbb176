//! Verification machinery for the tracking recursions.
//!
//! This module turns the convergence theory into executable checks:
//!
//! - [`error_coords`] splits an iterate into the mean error, the
//!   consensus error, and the norm of the transformed network error.
//! - [`solve_fixed_point`] computes the stationary pair of the
//!   primal–dual recursion in closed form through the spectral basis
//!   and reports plug-in residuals.
//! - [`decompose_g`] block-diagonalizes the error dynamics: each
//!   eigenvalue of the combination matrix away from the consensus
//!   direction yields a 2x2 block that a fixed similarity transform
//!   brings to scaled-Jordan form.
//! - [`check_coupled_inequalities`] and [`check_transformed_recursion`]
//!   replay a recorded noise-free run and verify, iteration by
//!   iteration, the descent/contraction inequalities and the exact
//!   transformed recursion the rate proofs rest on.
//! - [`convex_constants`] / [`sc_constants`] evaluate the rate
//!   constants, stepsize caps, and horizon-dependent stepsize rules for
//!   the convex and strongly convex regimes, and [`spectral_check`]
//!   certifies the contraction of the 2x2 mean/network error recursion
//!   matrix.
//!
//! Everything here is a pure function of its inputs and safe to call
//! concurrently.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::algorithms::{check_alpha, PdState};
use crate::problems::{GradientSource, ProblemSet};
use crate::topology::{spectral_norm, CombinationMatrix, PropertyCheck};
use crate::{Error, Result};

/// Largest singular value of a 2x2 matrix, in closed form.
fn spectral_norm_2x2(m: &Matrix2<f64>) -> f64 {
    // Singular values satisfy s^4 - t s^2 + det^2 = 0 with t the
    // squared Frobenius norm.
    let t = m.norm_squared();
    let det = m.determinant();
    let disc = (t * t / 4.0 - det * det).max(0.0);
    (t / 2.0 + disc.sqrt()).sqrt()
}

/// Stack identical 2x2 blocks along the diagonal (interleaved layout:
/// block `i` occupies rows and columns `2i, 2i+1`).
fn assemble_blocks(blocks: &[Matrix2<f64>]) -> DMatrix<f64> {
    let m = 2 * blocks.len();
    let mut out = DMatrix::zeros(m, m);
    for (i, blk) in blocks.iter().enumerate() {
        out.view_mut((2 * i, 2 * i), (2, 2)).copy_from(blk);
    }
    out
}

/// The error dynamics block for one eigenvalue away from consensus.
fn block_g(li: f64) -> Matrix2<f64> {
    Matrix2::new(2.0 * li - 1.0, -(1.0 - li), 1.0 - li, 1.0)
}

/// Similarity transform shared by every block.
fn block_v() -> Matrix2<f64> {
    Matrix2::new(1.0, -0.25, -1.0, -0.25)
}

/// Exact inverse of [`block_v`].
fn block_v_inv() -> Matrix2<f64> {
    Matrix2::new(0.5, -0.5, -2.0, -2.0)
}

/// Scaled-Jordan form of [`block_g`]: a double eigenvalue at `li` with
/// off-diagonal coupling `(1 - li) / 2`.
fn block_gamma(li: f64) -> Matrix2<f64> {
    Matrix2::new(li, (1.0 - li) / 2.0, 0.0, li)
}

/// Block-diagonalization of the network error dynamics.
///
/// Produced by [`decompose_g`]. All matrices use the interleaved
/// layout: the rows `2i, 2i+1` belong to the `i`-th eigenvalue of the
/// combination matrix away from the consensus direction.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Eigenvalues away from the consensus direction.
    pub lambda_sub: Vec<f64>,
    /// Mixing rate: max of `|lambda_sub|` (passed in, checked).
    pub lambda: f64,
    /// Error dynamics matrix, one 2x2 block per eigenvalue.
    pub g: DMatrix<f64>,
    /// Block-diagonal similarity transform.
    pub v_hat: DMatrix<f64>,
    /// Exact inverse of `v_hat`.
    pub v_hat_inv: DMatrix<f64>,
    /// Scaled-Jordan form: `g = v_hat * gamma_mat * v_hat_inv`.
    pub gamma_mat: DMatrix<f64>,
    /// Spectral norm of `gamma_mat`.
    pub gamma: f64,
    /// Spectral norm of `v_hat`.
    pub c1: f64,
    /// Spectral norm of `v_hat_inv`.
    pub c2: f64,
}

impl Decomposition {
    /// Number of agents the decomposition describes.
    pub fn n(&self) -> usize {
        self.lambda_sub.len() + 1
    }

    /// Spectral norm of `g - v_hat * gamma_mat * v_hat_inv`; zero up
    /// to rounding when the decomposition is exact.
    pub fn reconstruction_error(&self) -> f64 {
        if self.lambda_sub.is_empty() {
            return 0.0;
        }
        spectral_norm(&(&self.g - &self.v_hat * &self.gamma_mat * &self.v_hat_inv))
    }
}

/// Block-diagonalize the error dynamics for the given spectrum.
///
/// `lambda_sub` holds the eigenvalues of the combination matrix away
/// from the consensus direction; `lambda` is the mixing rate (their
/// largest magnitude). Each eigenvalue must lie strictly inside the
/// unit interval in magnitude. An empty spectrum (single agent) yields
/// the empty decomposition with `gamma = 0`.
///
/// The per-block transform is fixed, so `c1` and `c2` are spectrum
/// independent; `gamma` is measured as the largest block norm.
pub fn decompose_g(lambda_sub: &[f64], lambda: f64) -> Result<Decomposition> {
    for (i, li) in lambda_sub.iter().enumerate() {
        if !li.is_finite() || li.abs() >= 1.0 {
            return Err(Error::InvalidSpectrum(format!(
                "eigenvalue {i} is {li}; every eigenvalue away from consensus must lie in (-1, 1)"
            )));
        }
    }
    let max_mag = lambda_sub.iter().fold(0.0f64, |m, li| m.max(li.abs()));
    if !lambda.is_finite() || lambda >= 1.0 || lambda + 1e-12 < max_mag {
        return Err(Error::InvalidSpectrum(format!(
            "mixing rate {lambda} is inconsistent with a spectrum of largest magnitude {max_mag}"
        )));
    }

    let g_blocks: Vec<Matrix2<f64>> = lambda_sub.iter().map(|&li| block_g(li)).collect();
    let gamma_blocks: Vec<Matrix2<f64>> = lambda_sub.iter().map(|&li| block_gamma(li)).collect();
    let v_blocks: Vec<Matrix2<f64>> = lambda_sub.iter().map(|_| block_v()).collect();
    let v_inv_blocks: Vec<Matrix2<f64>> = lambda_sub.iter().map(|_| block_v_inv()).collect();

    let gamma = gamma_blocks
        .iter()
        .fold(0.0f64, |m, blk| m.max(spectral_norm_2x2(blk)));

    Ok(Decomposition {
        lambda_sub: lambda_sub.to_vec(),
        lambda,
        g: assemble_blocks(&g_blocks),
        v_hat: assemble_blocks(&v_blocks),
        v_hat_inv: assemble_blocks(&v_inv_blocks),
        gamma_mat: assemble_blocks(&gamma_blocks),
        gamma,
        c1: spectral_norm_2x2(&block_v()),
        c2: spectral_norm_2x2(&block_v_inv()),
    })
}

/// [`decompose_g`] applied to a certified combination matrix.
pub fn decompose_from(w: &CombinationMatrix) -> Result<Decomposition> {
    decompose_g(w.lambda_sub.as_slice(), w.lambda)
}

/// Stationary pair of the primal–dual recursion with plug-in
/// residuals, from [`solve_fixed_point`].
#[derive(Debug, Clone)]
pub struct FixedPoint {
    /// Stepsize the pair is stationary for.
    pub alpha: f64,
    /// Consensual optimum: every row equals the minimizer.
    pub x_star_stack: DMatrix<f64>,
    /// Minimum-norm dual variable; mean-zero across agents.
    pub z_star: DMatrix<f64>,
    /// Exact local gradients at the optimum, row per agent.
    pub grad_star: DMatrix<f64>,
    /// `||(I - W) x_star_stack||` (Frobenius); zero up to rounding.
    pub residual_primal: f64,
    /// `||alpha W^2 grad_star + (I - W) z_star||` (Frobenius).
    pub residual_dual: f64,
}

/// Compute the stationary pair of the primal–dual recursion.
///
/// The primal part is the consensual optimum. The dual part is the
/// minimum-norm (mean-zero) solution of `(I - W) z = -alpha W^2
/// grad_star`, obtained in closed form through the spectral basis:
/// the component along the eigenvector with eigenvalue `l` equals
/// `-alpha l^2 / (1 - l)` times the matching component of the stacked
/// gradients at the optimum. Eigenvalues at 1 away from the consensus
/// direction make the system singular.
pub fn solve_fixed_point(
    p: &ProblemSet,
    w: &CombinationMatrix,
    alpha: f64,
) -> Result<FixedPoint> {
    check_alpha(alpha)?;
    if w.n() != p.n {
        return Err(Error::Dimension(format!(
            "combination matrix has {} agents, problem has {}",
            w.n(),
            p.n
        )));
    }
    for (i, li) in w.lambda_sub.iter().enumerate() {
        if *li >= 1.0 - 1e-12 {
            return Err(Error::SingularSystem(format!(
                "eigenvalue {} away from consensus is {li}; the dual system has no solution",
                i + 1
            )));
        }
    }

    let x_star_stack = DMatrix::from_fn(p.n, p.d, |_, c| p.x_star[c]);
    let grad_star = p.gradient_stack(&x_star_stack);

    // (n-1) x d spectral coefficients of the stacked gradients.
    let ug = w.u_hat.transpose() * &grad_star;
    let mut uz = ug.clone();
    for (i, li) in w.lambda_sub.iter().enumerate() {
        let scale = -alpha * li * li / (1.0 - li);
        uz.row_mut(i).scale_mut(scale);
    }
    let z_star = &w.u_hat * uz;

    let residual_primal = (&x_star_stack - &w.w * &x_star_stack).norm();
    let residual_dual =
        (alpha * (&w.w * (&w.w * &grad_star)) + (&z_star - &w.w * &z_star)).norm();
    if !(residual_primal <= 1e-8 && residual_dual <= 1e-8) {
        return Err(Error::SingularSystem(format!(
            "stationarity residuals {residual_primal:.3e} / {residual_dual:.3e} exceed 1e-8; \
             the combination matrix is too close to singular"
        )));
    }

    Ok(FixedPoint {
        alpha,
        x_star_stack,
        z_star,
        grad_star,
        residual_primal,
        residual_dual,
    })
}

/// Error coordinates of one primal–dual state, from [`error_coords`].
#[derive(Debug, Clone)]
pub struct ErrorCoords {
    /// Mean iterate across agents.
    pub x_bar: DVector<f64>,
    /// Mean error: `x_bar` minus the minimizer.
    pub e_bar: DVector<f64>,
    /// Squared norm of `e_bar`.
    pub e_bar_norm2: f64,
    /// Squared distance of the stacked iterates from consensus.
    pub consensus_err: f64,
    /// Squared norm of the transformed network error (primal and dual
    /// deviations mapped through the block transform).
    pub x_hat_norm2: f64,
    /// Mean objective at `x_bar` minus the optimal value.
    pub f_gap: f64,
    /// Mean squared per-agent distance to the minimizer, relative to
    /// the minimizer's squared norm.
    pub rel_error: f64,
}

/// Transformed coordinates of a primal/dual deviation pair: for each
/// eigenvalue away from consensus, the two rows of the inverse block
/// transform applied to the spectral coefficients.
///
/// Returns `(p_hat, q_hat)`, each `(n-1) x d`.
fn hat_coords(
    w: &CombinationMatrix,
    x_tilde: &DMatrix<f64>,
    z_tilde: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = w.u_hat.transpose() * x_tilde;
    let b = w.u_hat.transpose() * z_tilde;
    let p_hat = 0.5 * (&a - &b);
    let q_hat = -2.0 * (a + b);
    (p_hat, q_hat)
}

/// Split a primal–dual state into the error coordinates the rate
/// bounds are stated in.
///
/// `x` and `z` are stacked `n x d` states; the fixed point supplies
/// the reference pair, so the transformed network error is measured
/// against the stationary dual variable for the trace's stepsize.
pub fn error_coords(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    p: &ProblemSet,
    w: &CombinationMatrix,
    dec: &Decomposition,
    fp: &FixedPoint,
) -> Result<ErrorCoords> {
    if x.nrows() != p.n || x.ncols() != p.d || z.nrows() != p.n || z.ncols() != p.d {
        return Err(Error::Dimension(format!(
            "state is {}x{} / {}x{}, problem needs {}x{}",
            x.nrows(),
            x.ncols(),
            z.nrows(),
            z.ncols(),
            p.n,
            p.d
        )));
    }
    if w.n() != p.n || dec.n() != p.n {
        return Err(Error::Dimension(format!(
            "combination matrix ({} agents) or decomposition ({}) does not match the problem ({})",
            w.n(),
            dec.n(),
            p.n
        )));
    }

    let x_bar = x.row_mean().transpose();
    let e_bar = &x_bar - &p.x_star;
    let e_bar_norm2 = e_bar.norm_squared();

    let mut consensus_err = 0.0;
    let mut dist2_sum = 0.0;
    for i in 0..p.n {
        let row = x.row(i);
        let mut c = 0.0;
        let mut d2 = 0.0;
        for j in 0..p.d {
            let dc = row[j] - x_bar[j];
            c += dc * dc;
            let ds = row[j] - p.x_star[j];
            d2 += ds * ds;
        }
        consensus_err += c;
        dist2_sum += d2;
    }

    let x_tilde = x - &fp.x_star_stack;
    let z_tilde = z - &fp.z_star;
    let (p_hat, q_hat) = hat_coords(w, &x_tilde, &z_tilde);
    let x_hat_norm2 = p_hat.norm_squared() + q_hat.norm_squared();

    let f_gap = p.f_mean(&x_bar) - p.f_star();
    let x_star_norm2 = p.x_star.norm_squared();
    let denom = if x_star_norm2 > 0.0 { x_star_norm2 } else { 1.0 };
    let rel_error = dist2_sum / (p.n as f64) / denom;

    Ok(ErrorCoords {
        x_bar,
        e_bar,
        e_bar_norm2,
        consensus_err,
        x_hat_norm2,
        f_gap,
        rel_error,
    })
}

/// Per-iterate summary metrics that need no fixed point or dual state:
/// `(rel_error, consensus_err, f_gap)`.
///
/// Works for any stacked iterate with `d` columns — the row count may
/// differ from `p.n` (a centralized method contributes a single row).
pub fn iterate_metrics(x: &DMatrix<f64>, p: &ProblemSet) -> Result<(f64, f64, f64)> {
    if x.ncols() != p.d || x.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "iterate is {}x{}, expected d = {} and at least one row",
            x.nrows(),
            x.ncols(),
            p.d
        )));
    }
    let rows = x.nrows() as f64;
    let x_bar = x.row_mean().transpose();
    let mut consensus_err = 0.0;
    let mut dist2_sum = 0.0;
    for i in 0..x.nrows() {
        let row = x.row(i);
        for j in 0..p.d {
            let dc = row[j] - x_bar[j];
            consensus_err += dc * dc;
            let ds = row[j] - p.x_star[j];
            dist2_sum += ds * ds;
        }
    }
    let x_star_norm2 = p.x_star.norm_squared();
    let denom = if x_star_norm2 > 0.0 { x_star_norm2 } else { 1.0 };
    let f_gap = p.f_mean(&x_bar) - p.f_star();
    Ok((dist2_sum / rows / denom, consensus_err, f_gap))
}

/// A recorded primal–dual run: the sequence of `(x, z)` states
/// starting from the state right after initialization.
#[derive(Debug, Clone)]
pub struct PdTrace {
    /// Stepsize the run used.
    pub alpha: f64,
    /// True when the gradients carried no sampling noise.
    pub deterministic: bool,
    /// Iteration index of `states[0]`.
    pub k0: u64,
    /// Consecutive `(x, z)` pairs; `states.len() = iters + 1`.
    pub states: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Run the primal–dual recursion from `x0` for `iters` updates,
/// recording every state.
pub fn record_pd_run<S: GradientSource>(
    w: &CombinationMatrix,
    source: &S,
    x0: DMatrix<f64>,
    alpha: f64,
    iters: usize,
) -> Result<PdTrace> {
    let st = PdState::init(x0, w, source, alpha)?;
    record_pd_from(st, w, source, iters)
}

/// Continue an existing primal–dual state for `iters` updates,
/// recording every state including the starting one.
pub fn record_pd_from<S: GradientSource>(
    mut st: PdState,
    w: &CombinationMatrix,
    source: &S,
    iters: usize,
) -> Result<PdTrace> {
    let alpha = st.alpha();
    let k0 = st.k();
    let mut states = Vec::with_capacity(iters + 1);
    states.push((st.x().clone(), st.z().clone()));
    for _ in 0..iters {
        st.step(w, source)?;
        states.push((st.x().clone(), st.z().clone()));
    }
    Ok(PdTrace {
        alpha,
        deterministic: !source.is_stochastic(),
        k0,
        states,
    })
}

/// One inequality or recursion failure found while replaying a trace.
#[derive(Debug, Clone)]
pub struct InequalityViolation {
    /// Iteration index the failing step started from.
    pub k: u64,
    /// Which check failed.
    pub which: &'static str,
    /// Measured left side (or deviation).
    pub lhs: f64,
    /// Allowed right side (or tolerance).
    pub rhs: f64,
    /// `lhs - rhs`.
    pub excess: f64,
}

/// Outcome of replaying a trace against the per-iteration theory.
#[derive(Debug, Clone)]
pub struct ViolationReport {
    /// Number of consecutive state pairs examined.
    pub steps_checked: usize,
    /// Violations beyond the pinned slack, in iteration order.
    pub violations: Vec<InequalityViolation>,
    /// Largest `lhs - rhs` seen across all steps and checks (may be
    /// negative when every check held with margin).
    pub max_excess: f64,
}

impl ViolationReport {
    /// True when no check failed.
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    /// One summary line per failing step, or a single pass line.
    pub fn lines(&self) -> Vec<String> {
        if self.is_clean() {
            return vec![format!(
                "PASS trace-checks steps={} max_excess={:.3e}",
                self.steps_checked, self.max_excess
            )];
        }
        self.violations
            .iter()
            .map(|v| {
                format!(
                    "FAIL {} k={} lhs={:.6e} rhs={:.6e} excess={:.3e}",
                    v.which, v.k, v.lhs, v.rhs, v.excess
                )
            })
            .collect()
    }
}

/// Slack allowed when comparing both sides of an inequality: absolute
/// floor plus a tiny relative component for large magnitudes.
const INEQ_SLACK_ABS: f64 = 1e-9;
const INEQ_SLACK_REL: f64 = 1e-12;

fn slack_for(rhs: f64) -> f64 {
    INEQ_SLACK_ABS + INEQ_SLACK_REL * rhs.abs()
}

/// Verify the two coupled per-iteration inequalities on a noise-free
/// trace: the mean-error descent inequality and the transformed
/// network-error contraction inequality.
///
/// Both are stated in expectation; with noise-free gradients they hold
/// pathwise, so the check requires a deterministic trace and a
/// stepsize below `1 / (4 L)` (the regime the inequalities are proved
/// in) and refuses otherwise with a mode error. `alpha` must match
/// the trace's stepsize.
pub fn check_coupled_inequalities(
    trace: &PdTrace,
    p: &ProblemSet,
    w: &CombinationMatrix,
    dec: &Decomposition,
    alpha: f64,
) -> Result<ViolationReport> {
    if !trace.deterministic {
        return Err(Error::Mode(
            "coupled-inequality checks need a noise-free trace; expectations are not pathwise \
             under sampling noise"
                .into(),
        ));
    }
    if alpha != trace.alpha {
        return Err(Error::Config(format!(
            "stepsize {alpha} does not match the trace's stepsize {}",
            trace.alpha
        )));
    }
    if !(alpha < 0.25 / p.l_smooth) {
        return Err(Error::Mode(format!(
            "stepsize {alpha} is not below 1/(4L) = {}; the inequalities are not guaranteed there",
            0.25 / p.l_smooth
        )));
    }
    if !(dec.gamma < 1.0) {
        return Err(Error::InvalidSpectrum(format!(
            "transformed dynamics norm is {}; the contraction inequality needs it below 1",
            dec.gamma
        )));
    }

    let fp = solve_fixed_point(p, w, alpha)?;
    let n = p.n as f64;
    let (c1, c2, lam, gamma) = (dec.c1, dec.c2, dec.lambda, dec.gamma);
    let mu = p.mu;
    let l = p.l_smooth;

    let mut violations = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    let mut push = |k: u64, which: &'static str, lhs: f64, rhs: f64| -> f64 {
        if lhs > rhs + slack_for(rhs) {
            violations.push(InequalityViolation {
                k,
                which,
                lhs,
                rhs,
                excess: lhs - rhs,
            });
        }
        lhs - rhs
    };

    let mut prev = error_coords(&trace.states[0].0, &trace.states[0].1, p, w, dec, &fp)?;
    let mut prev_drive = (p.gradient_stack(&trace.states[0].0) - &fp.grad_star).norm_squared();
    for (step, pair) in trace.states.iter().enumerate().skip(1) {
        let k = trace.k0 + (step as u64) - 1;
        let cur = error_coords(&pair.0, &pair.1, p, w, dec, &fp)?;

        let descent_rhs = (1.0 - mu * alpha) * prev.e_bar_norm2 - alpha * prev.f_gap
            + 1.5 * alpha * c1 * c1 * l / n * prev.x_hat_norm2;
        let e1 = push(k, "mean-descent", cur.e_bar_norm2, descent_rhs);

        let contraction_rhs = gamma * prev.x_hat_norm2
            + alpha * alpha * c2 * c2 * lam.powi(4) / (1.0 - gamma) * prev_drive;
        let e2 = push(k, "network-contraction", cur.x_hat_norm2, contraction_rhs);

        max_excess = max_excess.max(e1).max(e2);
        prev = cur;
        prev_drive = (p.gradient_stack(&pair.0) - &fp.grad_star).norm_squared();
    }

    Ok(ViolationReport {
        steps_checked: trace.states.len() - 1,
        violations,
        max_excess,
    })
}

/// Verify that a noise-free trace follows the transformed error
/// recursion exactly: recomputing iterate `k+1`'s mean error and
/// transformed network error from iterate `k` must reproduce the
/// recorded values within 1e-9.
pub fn check_transformed_recursion(
    trace: &PdTrace,
    p: &ProblemSet,
    w: &CombinationMatrix,
    dec: &Decomposition,
) -> Result<ViolationReport> {
    if !trace.deterministic {
        return Err(Error::Mode(
            "recursion replay needs a noise-free trace; sampled gradients are not reproducible \
             from the recorded states alone"
                .into(),
        ));
    }
    if w.n() != p.n || dec.n() != p.n {
        return Err(Error::Dimension(format!(
            "combination matrix ({} agents) or decomposition ({}) does not match the problem ({})",
            w.n(),
            dec.n(),
            p.n
        )));
    }
    let alpha = trace.alpha;
    let fp = solve_fixed_point(p, w, alpha)?;

    let mut violations = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    let tol = 1e-9;

    for step in 1..trace.states.len() {
        let k = trace.k0 + (step as u64) - 1;
        let (x_prev, z_prev) = &trace.states[step - 1];
        let (x_cur, z_cur) = &trace.states[step];

        let gs = p.gradient_stack(x_prev);
        let g_bar = gs.row_mean().transpose();

        // Mean error: e^{k+1} = e^k - alpha * mean gradient.
        let e_prev = x_prev.row_mean().transpose() - &p.x_star;
        let e_cur = x_cur.row_mean().transpose() - &p.x_star;
        let e_pred = e_prev - alpha * g_bar;
        let dev_mean = (e_cur - e_pred).norm();
        let excess = dev_mean - tol;
        if excess > 0.0 {
            violations.push(InequalityViolation {
                k,
                which: "mean-recursion",
                lhs: dev_mean,
                rhs: tol,
                excess,
            });
        }
        max_excess = max_excess.max(excess);

        // Transformed network error, block by block:
        //   p' = l p + (1-l)/2 q - (alpha/2) l^2 h
        //   q' = l q + 2 alpha l^2 h
        // with h the spectral coefficients of the gradient deviation.
        let (p_prev, q_prev) = hat_coords(w, &(x_prev - &fp.x_star_stack), &(z_prev - &fp.z_star));
        let (p_cur, q_cur) = hat_coords(w, &(x_cur - &fp.x_star_stack), &(z_cur - &fp.z_star));
        let h = w.u_hat.transpose() * (&gs - &fp.grad_star);

        let mut dev_hat = 0.0f64;
        for (i, &li) in dec.lambda_sub.iter().enumerate() {
            let li2 = li * li;
            let p_pred = li * p_prev.row(i) + (1.0 - li) / 2.0 * q_prev.row(i)
                - alpha / 2.0 * li2 * h.row(i);
            let q_pred = li * q_prev.row(i) + 2.0 * alpha * li2 * h.row(i);
            dev_hat = dev_hat
                .max((p_cur.row(i) - p_pred).norm())
                .max((q_cur.row(i) - q_pred).norm());
        }
        let excess = dev_hat - tol;
        if excess > 0.0 {
            violations.push(InequalityViolation {
                k,
                which: "transformed-recursion",
                lhs: dev_hat,
                rhs: tol,
                excess,
            });
        }
        max_excess = max_excess.max(excess);
    }

    Ok(ViolationReport {
        steps_checked: trace.states.len() - 1,
        violations,
        max_excess,
    })
}

/// Regime a set of rate constants was computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Merely convex objective (`mu = 0` allowed).
    Convex,
    /// Strongly convex objective (`mu > 0` required).
    StronglyConvex,
}

/// Rate constants, stepsize cap, and (once selected) the stepsize and
/// horizon for one regime.
///
/// In the convex regime `a0` and `a3` are unused and zero. `alpha_cap`
/// is the largest stepsize the rate derivation admits; the selected
/// `alpha` never exceeds it.
#[derive(Debug, Clone)]
pub struct TheoryConstants {
    /// Which regime's formulas produced the constants.
    pub regime: Regime,
    /// Initial mean-error term (strongly convex only): squared
    /// distance of the initial mean iterate from the minimizer, under
    /// the zero-initialization convention.
    pub a0: f64,
    /// Weight of the heterogeneity-at-optimum term.
    pub a_star: f64,
    /// Coefficient of the O(alpha) noise term.
    pub a1: f64,
    /// Coefficient of the O(alpha^2) noise term.
    pub a2: f64,
    /// Coefficient of the O(alpha^3) noise term (strongly convex
    /// only).
    pub a3: f64,
    /// Largest admissible stepsize.
    pub alpha_cap: f64,
    /// Stepsize selected by the horizon rule, when one was selected.
    pub alpha: Option<f64>,
    /// Horizon the stepsize was selected for.
    pub k_horizon: Option<usize>,
    /// Number of agents.
    pub n: usize,
    /// Strong-convexity modulus.
    pub mu: f64,
    /// Smoothness constant.
    pub l_smooth: f64,
    /// Gradient-noise variance bound.
    pub sigma2: f64,
    /// Mean squared local-gradient norm at the optimum.
    pub varsigma_star2: f64,
    /// Mixing rate of the combination matrix.
    pub lambda: f64,
    /// Norm of the transformed dynamics.
    pub gamma: f64,
    /// Norm of the block transform.
    pub c1: f64,
    /// Norm of the inverse block transform.
    pub c2: f64,
}

fn check_constants_inputs(p: &ProblemSet, w: &CombinationMatrix, dec: &Decomposition) -> Result<()> {
    if w.n() != p.n || dec.n() != p.n {
        return Err(Error::Dimension(format!(
            "combination matrix ({} agents) or decomposition ({}) does not match the problem ({})",
            w.n(),
            dec.n(),
            p.n
        )));
    }
    if (dec.lambda - w.lambda).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "decomposition mixing rate {} does not match the combination matrix's {}",
            dec.lambda, w.lambda
        )));
    }
    if !(dec.gamma < 1.0) {
        return Err(Error::InvalidSpectrum(format!(
            "transformed dynamics norm is {}; the rate constants need it below 1",
            dec.gamma
        )));
    }
    Ok(())
}

/// Rate constants for the convex regime with explicit transform norms,
/// so measured values and analytic caps can be compared side by side.
pub fn convex_constants_with(
    p: &ProblemSet,
    w: &CombinationMatrix,
    dec: &Decomposition,
    c1: f64,
    c2: f64,
) -> Result<TheoryConstants> {
    check_constants_inputs(p, w, dec)?;
    let n = p.n as f64;
    let l = p.l_smooth;
    let lam = dec.lambda;
    let lam4 = lam.powi(4);
    let cc = c1 * c1 * c2 * c2;

    let a_star = 18.0 * cc * l * lam4 * p.varsigma_star2 / (1.0 - lam).powi(3);
    let a1 = p.sigma2 / n;
    let a2 = 12.0 * cc * l * lam4 * p.sigma2 / (1.0 - lam);
    let mut alpha_cap = 0.25 / l;
    if lam > 0.0 {
        alpha_cap = alpha_cap.min((1.0 - lam) / (4.0 * 6.0f64.sqrt() * c1 * c2 * l * lam * lam));
    }

    Ok(TheoryConstants {
        regime: Regime::Convex,
        a0: 0.0,
        a_star,
        a1,
        a2,
        a3: 0.0,
        alpha_cap,
        alpha: None,
        k_horizon: None,
        n: p.n,
        mu: p.mu,
        l_smooth: l,
        sigma2: p.sigma2,
        varsigma_star2: p.varsigma_star2,
        lambda: lam,
        gamma: dec.gamma,
        c1,
        c2,
    })
}

/// Rate constants for the convex regime using the decomposition's
/// measured transform norms.
pub fn convex_constants(
    p: &ProblemSet,
    w: &CombinationMatrix,
    dec: &Decomposition,
) -> Result<TheoryConstants> {
    convex_constants_with(p, w, dec, dec.c1, dec.c2)
}

/// Select the horizon-dependent stepsize for the convex regime:
/// the smallest of the two noise-balancing terms and the cap.
///
/// `e0_norm2` is the squared initial mean error. Stores the selection
/// in `tc` and returns it.
pub fn convex_stepsize(
    tc: &mut TheoryConstants,
    big_k: usize,
    e0_norm2: f64,
) -> Result<f64> {
    if tc.regime != Regime::Convex {
        return Err(Error::WrongRegime(
            "convex stepsize rule applied to strongly convex constants".into(),
        ));
    }
    if big_k == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if !(e0_norm2 >= 0.0 && e0_norm2.is_finite()) {
        return Err(Error::Config(format!(
            "initial error must be finite and nonnegative, got {e0_norm2}"
        )));
    }
    let kf = big_k as f64;
    let mut alpha = tc.alpha_cap;
    if tc.a1 > 0.0 {
        alpha = alpha.min((e0_norm2 / (tc.a1 * kf)).sqrt());
    }
    if tc.a2 > 0.0 {
        alpha = alpha.min((e0_norm2 / (tc.a2 * kf)).cbrt());
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(
            "noise is present but the initial error is zero; no balancing stepsize exists".into(),
        ));
    }
    tc.alpha = Some(alpha);
    tc.k_horizon = Some(big_k);
    Ok(alpha)
}

/// Averaged-suboptimality bound for the convex regime at an explicit
/// stepsize: `e0^2/(alpha K) + a1 alpha + a2 alpha^2 + a_star alpha^2 / K`.
pub fn convex_bound_at(tc: &TheoryConstants, alpha: f64, big_k: usize, e0_norm2: f64) -> f64 {
    let kf = big_k as f64;
    e0_norm2 / (alpha * kf) + tc.a1 * alpha + tc.a2 * alpha * alpha
        + tc.a_star * alpha * alpha / kf
}

/// Closed-form version of the convex bound after optimizing the
/// stepsize over the three cases.
pub fn convex_bound(tc: &TheoryConstants, big_k: usize, e0_norm2: f64) -> f64 {
    let kf = big_k as f64;
    2.0 * (tc.a1 * e0_norm2 / kf).sqrt()
        + 2.0 * tc.a2.cbrt() * (e0_norm2 / kf).powf(2.0 / 3.0)
        + (e0_norm2 / tc.alpha_cap + tc.a_star * tc.alpha_cap * tc.alpha_cap) / kf
}

/// Convex-regime rate bound as stated in terms of problem and network
/// quantities alone, scaled by the absolute constant `c_scale`.
pub fn convex_rate_bound(
    tc: &TheoryConstants,
    big_k: usize,
    e0_norm2: f64,
    c_scale: f64,
) -> f64 {
    let kf = big_k as f64;
    let n = tc.n as f64;
    let l = tc.l_smooth;
    let lam = tc.lambda;
    let sigma = tc.sigma2.sqrt();
    sigma * e0_norm2.sqrt() / (n * kf).sqrt()
        + (l * lam.powi(4) * tc.sigma2 / (1.0 - lam)).cbrt() * (e0_norm2 / kf).powf(2.0 / 3.0)
        + (l * lam * lam * e0_norm2 / (1.0 - lam)
            + tc.varsigma_star2 / (l * (1.0 - lam)))
            * c_scale
            / kf
}

/// Rate constants for the strongly convex regime with explicit
/// transform norms.
///
/// `a0` uses the zero-initialization convention (initial mean iterate
/// at the origin), so it equals the squared norm of the minimizer;
/// assign the field directly for other initializations.
pub fn sc_constants_with(
    p: &ProblemSet,
    w: &CombinationMatrix,
    dec: &Decomposition,
    c1: f64,
    c2: f64,
) -> Result<TheoryConstants> {
    check_constants_inputs(p, w, dec)?;
    if !(p.mu > 0.0) {
        return Err(Error::WrongRegime(format!(
            "strongly convex constants need mu > 0, problem has mu = {}",
            p.mu
        )));
    }
    let n = p.n as f64;
    let l = p.l_smooth;
    let mu = p.mu;
    let lam = dec.lambda;
    let lam4 = lam.powi(4);
    let gamma = dec.gamma;
    let cc = c1 * c1 * c2 * c2;

    let a0 = p.x_star.norm_squared();
    let a_star = cc * lam4 * p.varsigma_star2 / (1.0 - lam).powi(2);
    let a1 = 2.0 * p.sigma2 / (mu * n);
    let a2 = 10.0 * cc * l * lam4 * p.sigma2 / (mu * (1.0 - gamma));
    let a3 = 8.0 * cc * l * l * lam4 * p.sigma2 / (mu * n * (1.0 - gamma).powi(2));

    let mut alpha_cap = (1.0 - lam) / (8.0 * l);
    if lam > 0.0 {
        alpha_cap = alpha_cap
            .min(mu * (1.0 - lam) / (8.0 * cc * l * l * lam4))
            .min(mu.sqrt() * (1.0 - lam) / (4.0 * 3.0f64.sqrt() * c1 * c2 * l.powf(1.5) * lam * lam));
    }

    Ok(TheoryConstants {
        regime: Regime::StronglyConvex,
        a0,
        a_star,
        a1,
        a2,
        a3,
        alpha_cap,
        alpha: None,
        k_horizon: None,
        n: p.n,
        mu,
        l_smooth: l,
        sigma2: p.sigma2,
        varsigma_star2: p.varsigma_star2,
        lambda: lam,
        gamma,
        c1,
        c2,
    })
}

/// Rate constants for the strongly convex regime using the
/// decomposition's measured transform norms.
pub fn sc_constants(
    p: &ProblemSet,
    w: &CombinationMatrix,
    dec: &Decomposition,
) -> Result<TheoryConstants> {
    sc_constants_with(p, w, dec, dec.c1, dec.c2)
}

/// Select the horizon-dependent stepsize for the strongly convex
/// regime: the logarithmic rule capped at the admissible maximum.
///
/// With no noise the rule degenerates to the cap. Stores the
/// selection in `tc` and returns it.
pub fn sc_stepsize(tc: &mut TheoryConstants, big_k: usize) -> Result<f64> {
    if tc.regime != Regime::StronglyConvex {
        return Err(Error::WrongRegime(
            "strongly convex stepsize rule applied to convex constants".into(),
        ));
    }
    if big_k == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let alpha = if tc.a1 > 0.0 {
        let kf = big_k as f64;
        let cap2 = tc.alpha_cap * tc.alpha_cap;
        let arg = (tc.mu * tc.mu * (tc.a0 + tc.a_star * cap2) * kf / tc.a1).max(2.0);
        (arg.ln() / (tc.mu * kf)).min(tc.alpha_cap)
    } else {
        tc.alpha_cap
    };
    tc.alpha = Some(alpha);
    tc.k_horizon = Some(big_k);
    Ok(alpha)
}

/// Final-iterate bound for the strongly convex regime at an explicit
/// stepsize: `exp(-alpha mu K / 2)(a0 + alpha^2 a_star) + a1 alpha +
/// a2 alpha^2 + a3 alpha^3`.
pub fn sc_bound_at(tc: &TheoryConstants, alpha: f64, big_k: usize) -> f64 {
    let kf = big_k as f64;
    (-alpha * tc.mu * kf / 2.0).exp() * (tc.a0 + alpha * alpha * tc.a_star)
        + tc.a1 * alpha
        + tc.a2 * alpha * alpha
        + tc.a3 * alpha * alpha * alpha
}

/// Strongly-convex-regime rate bound in terms of problem and network
/// quantities alone (logarithmic factors absorbed into `c_scale`).
pub fn sc_rate_bound(tc: &TheoryConstants, big_k: usize, c_scale: f64) -> f64 {
    let kf = big_k as f64;
    let n = tc.n as f64;
    let lam = tc.lambda;
    c_scale
        * (tc.sigma2 / (n * kf)
            + tc.sigma2 / ((1.0 - lam) * kf * kf)
            + tc.sigma2 / ((1.0 - lam).powi(2) * n * kf * kf * kf)
            + (tc.a0 + tc.varsigma_star2) * (-(1.0 - lam) * kf).exp())
}

/// The 2x2 recursion matrix and noise drive that couple the mean error
/// and the scaled transformed network error at stepsize `alpha`.
pub fn recursion_matrix(tc: &TheoryConstants, alpha: f64) -> Result<(Matrix2<f64>, Vector2<f64>)> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "stepsize must be finite and nonnegative, got {alpha}"
        )));
    }
    let n = tc.n as f64;
    let l = tc.l_smooth;
    let lam4 = tc.lambda.powi(4);
    let cc = tc.c1 * tc.c1 * tc.c2 * tc.c2;
    let a = Matrix2::new(
        1.0 - tc.mu * alpha,
        1.5 * alpha * l,
        2.0 * alpha * alpha * cc * l * l * lam4 / (1.0 - tc.gamma),
        (1.0 + tc.gamma) / 2.0,
    );
    let b = Vector2::new(
        alpha * alpha * tc.sigma2 / n,
        alpha * alpha * cc * lam4 * tc.sigma2,
    );
    Ok((a, b))
}

/// Largest stepsize for which the contraction of the error recursion
/// matrix is guaranteed.
pub fn contraction_stepsize_cap(tc: &TheoryConstants) -> f64 {
    let l = tc.l_smooth;
    let lam4 = tc.lambda.powi(4);
    let cc = tc.c1 * tc.c1 * tc.c2 * tc.c2;
    let mut cap = (1.0 - tc.gamma) / (3.0 * l + tc.mu);
    if tc.lambda > 0.0 && tc.mu > 0.0 {
        cap = cap.min(tc.mu * (1.0 - tc.gamma) / (4.0 * cc * l * l * lam4));
    }
    cap
}

/// Contraction certificate for the error recursion matrix at one
/// stepsize, from [`spectral_check`].
#[derive(Debug, Clone)]
pub struct SpectralCheck {
    /// Stepsize examined.
    pub alpha: f64,
    /// Whether `alpha` is below the contraction stepsize cap.
    pub admissible: bool,
    /// Spectral radius of the recursion matrix.
    pub rho: f64,
    /// Induced 1-norm (max absolute column sum) of the recursion
    /// matrix; an upper bound on the spectral radius.
    pub one_norm: f64,
    /// Claimed contraction factor `1 - mu alpha / 2`.
    pub contraction_bound: f64,
    /// True when the 1-norm stays below the claimed factor (within
    /// 1e-12).
    pub pass: bool,
}

impl SpectralCheck {
    /// Structured report lines in the shared check format.
    pub fn checks(&self) -> Vec<PropertyCheck> {
        vec![
            PropertyCheck {
                name: "recursion-contraction",
                pass: self.pass,
                measured: self.one_norm,
                bound: self.contraction_bound,
                required: true,
                detail: format!(
                    "spectral radius {:.6e}, stepsize {:.3e} ({})",
                    self.rho,
                    self.alpha,
                    if self.admissible { "admissible" } else { "beyond cap" }
                ),
            },
        ]
    }
}

/// Evaluate the error recursion matrix at `alpha` and certify its
/// contraction: the spectral radius is bounded by the induced 1-norm,
/// which must stay below `1 - mu alpha / 2` for every admissible
/// stepsize.
pub fn spectral_check(tc: &TheoryConstants, alpha: f64) -> Result<SpectralCheck> {
    if tc.regime != Regime::StronglyConvex || !(tc.mu > 0.0) {
        return Err(Error::WrongRegime(
            "the contraction certificate needs strong convexity".into(),
        ));
    }
    let (a, _) = recursion_matrix(tc, alpha)?;

    let tr = a.trace();
    let det = a.determinant();
    let disc = tr * tr - 4.0 * det;
    let rho = if disc >= 0.0 {
        let root = disc.sqrt();
        ((tr + root) / 2.0).abs().max(((tr - root) / 2.0).abs())
    } else {
        det.sqrt()
    };
    let one_norm = (a[(0, 0)].abs() + a[(1, 0)].abs()).max(a[(0, 1)].abs() + a[(1, 1)].abs());
    let contraction_bound = 1.0 - tc.mu * alpha / 2.0;
    let admissible = alpha <= contraction_stepsize_cap(tc);
    let pass = one_norm <= contraction_bound + 1e-12;

    Ok(SpectralCheck {
        alpha,
        admissible,
        rho,
        one_norm,
        contraction_bound,
        pass,
    })
}
