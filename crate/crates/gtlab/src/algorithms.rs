//! Steppers for gradient tracking (tracking form and primal–dual
//! form), decentralized SGD, and centralized SGD.
//!
//! All steppers are pure state transitions over stacked `n x d`
//! iterates and pull gradients through a [`GradientSource`], so two
//! algorithms fed the same source see identical samples. The network
//! matrix is applied blockwise (`W * X`); the `nd x nd` Kronecker lift
//! is never materialized.
//!
//! Sample indexing convention: the gradient at iterate `x^k` always
//! uses sample index `k`, whichever algorithm asks for it and in
//! whatever order. This is what makes the tracking form and the
//! primal–dual form produce identical iterates under noise.

use nalgebra::{DMatrix, DVector};

use crate::problems::GradientSource;
use crate::topology::CombinationMatrix;
use crate::{Error, Result};

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("stepsize must be positive, got {alpha}")));
    }
    Ok(())
}

fn check_state_dims(x: &DMatrix<f64>, n: usize, d: usize) -> Result<()> {
    if x.nrows() != n || x.ncols() != d {
        return Err(Error::Dimension(format!(
            "state is {}x{}, expected {n}x{d}",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

fn check_matrix(w: &CombinationMatrix, n: usize) -> Result<()> {
    if w.n() != n {
        return Err(Error::Dimension(format!(
            "combination matrix is {}x{}, state has {n} agents",
            w.n(),
            w.n()
        )));
    }
    Ok(())
}

/// Evaluate the source for every agent at its own row of `x`.
fn gradient_stack<S: GradientSource>(source: &S, x: &DMatrix<f64>, sample_idx: u64) -> DMatrix<f64> {
    let (n, d) = (source.n(), source.d());
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let xi = x.row(i).transpose();
        out.set_row(i, &source.gradient(i, &xi, sample_idx).transpose());
    }
    out
}

/// Gradient-tracking state (tracking form).
///
/// The tracker is seeded with the gradients at the initial point, and
/// every step reuses the stored sample from the previous iterate — one
/// fresh oracle call per agent per iteration.
#[derive(Debug, Clone)]
pub struct GtState {
    /// Stacked iterates, row per agent.
    pub x: DMatrix<f64>,
    /// Stacked trackers, row per agent.
    pub g: DMatrix<f64>,
    /// Cached gradient stack at the current iterate and sample index.
    pub last_grad: DMatrix<f64>,
    /// Iteration counter.
    pub k: u64,
}

impl GtState {
    /// Start at `x0`, seeding the tracker with the sample-0 gradients.
    pub fn init<S: GradientSource>(x0: DMatrix<f64>, source: &S) -> Result<Self> {
        check_state_dims(&x0, source.n(), source.d())?;
        let g0 = gradient_stack(source, &x0, 0);
        Ok(GtState {
            x: x0,
            g: g0.clone(),
            last_grad: g0,
            k: 0,
        })
    }

    /// One update: combine-after-adapt on the iterates, then refresh
    /// the tracker with the gradient difference at the new point.
    pub fn step<S: GradientSource>(
        &mut self,
        w: &CombinationMatrix,
        source: &S,
        alpha: f64,
    ) -> Result<()> {
        check_alpha(alpha)?;
        check_matrix(w, self.x.nrows())?;
        let x_new = &w.w * (&self.x - alpha * &self.g);
        let new_grad = gradient_stack(source, &x_new, self.k + 1);
        self.g = &w.w * (&self.g + &new_grad - &self.last_grad);
        self.x = x_new;
        self.last_grad = new_grad;
        self.k += 1;
        Ok(())
    }
}

/// Gradient-tracking state in primal–dual form.
///
/// Construction runs the mandatory first update `x^1 = W(x^0 - alpha
/// grad^0)` and seeds the dual variable with the mean-zero solution of
/// `(I - W) z^1 = -(I - W) x^1`; that pair is what makes the
/// primal–dual iterates reproduce the tracking form exactly. A state
/// at `k = 0` with an unset dual variable is unrepresentable.
#[derive(Debug, Clone)]
pub struct PdState {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    k: u64,
    alpha: f64,
}

impl PdState {
    /// Initialize from `x0`, performing the first update.
    pub fn init<S: GradientSource>(
        x0: DMatrix<f64>,
        w: &CombinationMatrix,
        source: &S,
        alpha: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        check_state_dims(&x0, source.n(), source.d())?;
        check_matrix(w, x0.nrows())?;
        let grad0 = gradient_stack(source, &x0, 0);
        let x1 = &w.w * (&x0 - alpha * grad0);
        // z^1 = -(x^1 - mean(x^1)) : mean-zero, and (I-W) z^1 = -(I-W) x^1.
        let x1_mean = x1.row_mean();
        let mut z1 = -&x1;
        for i in 0..x1.nrows() {
            for c in 0..x1.ncols() {
                z1[(i, c)] += x1_mean[c];
            }
        }
        Ok(PdState {
            x: x1,
            z: z1,
            k: 1,
            alpha,
        })
    }

    /// Resume from explicit iterates, e.g. a state saved earlier or a
    /// fixed point of the recursion.
    ///
    /// `z` must be mean-zero across agents (within 1e-8 per column),
    /// the invariant every reachable state satisfies, and `k >= 1`
    /// because the dual variable only exists after the first update.
    pub fn from_parts(x: DMatrix<f64>, z: DMatrix<f64>, k: u64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if x.nrows() != z.nrows() || x.ncols() != z.ncols() {
            return Err(Error::Dimension(format!(
                "iterates are {}x{} but dual variables are {}x{}",
                x.nrows(),
                x.ncols(),
                z.nrows(),
                z.ncols()
            )));
        }
        if k == 0 {
            return Err(Error::Config(
                "primal-dual states start at k = 1; there is no dual variable at k = 0".into(),
            ));
        }
        let scale = 1.0 + z.norm();
        for (c, mean) in z.row_mean().iter().enumerate() {
            if mean.abs() > 1e-8 * scale {
                return Err(Error::Config(format!(
                    "dual variables must be mean-zero across agents; column {c} has mean {mean:.3e}"
                )));
            }
        }
        Ok(PdState { x, z, k, alpha })
    }

    /// Current iterates.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Current dual variables; always mean-zero across agents.
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Iteration counter (starts at 1 after initialization).
    pub fn k(&self) -> u64 {
        self.k
    }

    /// Stepsize fixed at initialization.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// One primal–dual update:
    /// `x <- (2W - I) x - alpha W^2 grad - (I - W) z`,
    /// `z <- z + (I - W) x`.
    pub fn step<S: GradientSource>(&mut self, w: &CombinationMatrix, source: &S) -> Result<()> {
        check_matrix(w, self.x.nrows())?;
        let grad = gradient_stack(source, &self.x, self.k);
        let wx = &w.w * &self.x;
        let w2grad = &w.w * (&w.w * grad);
        let bz = &self.z - &w.w * &self.z;
        let x_new = 2.0 * &wx - &self.x - self.alpha * w2grad - bz;
        self.z += &self.x - wx;
        self.x = x_new;
        self.k += 1;
        Ok(())
    }
}

/// Decentralized SGD state (adapt-then-combine form, same
/// communication pattern as gradient tracking).
#[derive(Debug, Clone)]
pub struct DsgdState {
    /// Stacked iterates, row per agent.
    pub x: DMatrix<f64>,
    /// Iteration counter.
    pub k: u64,
}

impl DsgdState {
    /// Start at `x0`.
    pub fn init<S: GradientSource>(x0: DMatrix<f64>, source: &S) -> Result<Self> {
        check_state_dims(&x0, source.n(), source.d())?;
        Ok(DsgdState { x: x0, k: 0 })
    }

    /// One update: `x <- W (x - alpha grad)`.
    pub fn step<S: GradientSource>(
        &mut self,
        w: &CombinationMatrix,
        source: &S,
        alpha: f64,
    ) -> Result<()> {
        check_alpha(alpha)?;
        check_matrix(w, self.x.nrows())?;
        let grad = gradient_stack(source, &self.x, self.k);
        self.x = &w.w * (&self.x - alpha * grad);
        self.k += 1;
        Ok(())
    }
}

/// Centralized SGD: one shared iterate, every agent contributes a
/// stochastic gradient at it each iteration.
#[derive(Debug, Clone)]
pub struct CsgdState {
    /// The shared iterate.
    pub x: DVector<f64>,
    /// Iteration counter.
    pub k: u64,
}

impl CsgdState {
    /// Start at `x0`.
    pub fn init<S: GradientSource>(x0: DVector<f64>, source: &S) -> Result<Self> {
        if x0.len() != source.d() {
            return Err(Error::Dimension(format!(
                "state has dimension {}, problem has {}",
                x0.len(),
                source.d()
            )));
        }
        Ok(CsgdState { x: x0, k: 0 })
    }

    /// One update: `x <- x - (alpha/n) sum_i grad_i`.
    pub fn step<S: GradientSource>(&mut self, source: &S, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        let n = source.n();
        let mut mean = DVector::zeros(self.x.len());
        for i in 0..n {
            mean += source.gradient(i, &self.x, self.k);
        }
        mean /= n as f64;
        self.x -= alpha * mean;
        self.k += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{
        make_linreg, make_quadratic, make_random_quadratic, DeterministicSource, SampleStream,
        StochasticSource,
    };
    use crate::topology::{build_topology, combination_matrix, GraphKind, WeightRule};
    use nalgebra::{DMatrix, DVector};

    fn ring(n: usize) -> CombinationMatrix {
        let t = build_topology(GraphKind::Ring, n).unwrap();
        combination_matrix(&t, &WeightRule::Uniform).unwrap()
    }

    /// Hand-built identity "network": valid shape, lambda set manually.
    fn identity_matrix(n: usize) -> CombinationMatrix {
        CombinationMatrix {
            w: DMatrix::identity(n, n),
            lambda: 1.0,
            eigvals: DVector::from_element(n, 1.0),
            u_hat: DMatrix::zeros(n, n - 1),
            lambda_sub: DVector::from_element(n - 1, 1.0),
        }
    }

    #[test]
    fn single_agent_reduces_to_sgd() {
        let p = make_random_quadratic(1, 3, 5).unwrap();
        let src = DeterministicSource(&p);
        let t = build_topology(GraphKind::Complete, 1).unwrap();
        let w = combination_matrix(&t, &WeightRule::Uniform).unwrap();
        let x0 = DMatrix::zeros(1, 3);
        let mut gt = GtState::init(x0.clone(), &src).unwrap();
        let mut plain = DVector::zeros(3);
        let alpha = 0.1;
        for _ in 0..25 {
            gt.step(&w, &src, alpha).unwrap();
            plain = &plain - alpha * p.full_gradient(0, &plain);
        }
        assert!((gt.x.row(0).transpose() - plain).norm() < 1e-13);
    }

    #[test]
    fn consensual_optimum_is_stationary() {
        // Homogeneous problem, x0 = optimum on every row: nothing moves.
        let p = make_linreg(6, 4, 0.0, 0.0, 3).unwrap();
        let src = DeterministicSource(&p);
        let w = ring(6);
        let mut x0 = DMatrix::zeros(6, 4);
        for i in 0..6 {
            x0.set_row(i, &p.x_star.transpose());
        }
        let mut gt = GtState::init(x0.clone(), &src).unwrap();
        for _ in 0..10 {
            gt.step(&w, &src, 0.05).unwrap();
        }
        assert!((&gt.x - &x0).abs().max() < 1e-13);
    }

    #[test]
    fn tracker_mean_equals_gradient_mean() {
        let p = make_random_quadratic(8, 3, 11).unwrap();
        let src = DeterministicSource(&p);
        let w = ring(8);
        let mut gt = GtState::init(DMatrix::zeros(8, 3), &src).unwrap();
        for _ in 0..50 {
            gt.step(&w, &src, 0.05).unwrap();
            let tracker_mean = gt.g.row_mean();
            let grad_mean = p.gradient_stack(&gt.x).row_mean();
            assert!((tracker_mean - grad_mean).abs().max() < 1e-10);
        }
    }

    #[test]
    fn pd_matches_gt_deterministic() {
        let p = make_random_quadratic(8, 4, 17).unwrap();
        let src = DeterministicSource(&p);
        let w = ring(8);
        let alpha = 0.05;
        let x0 = DMatrix::zeros(8, 4);
        let mut gt = GtState::init(x0.clone(), &src).unwrap();
        let mut pd = PdState::init(x0, &w, &src, alpha).unwrap();
        gt.step(&w, &src, alpha).unwrap();
        for _ in 0..100 {
            assert!((&gt.x - pd.x()).abs().max() < 1e-10);
            gt.step(&w, &src, alpha).unwrap();
            pd.step(&w, &src).unwrap();
        }
    }

    #[test]
    fn pd_matches_gt_stochastic_shared_stream() {
        let p = make_linreg(6, 3, 1.0, 0.1, 23).unwrap();
        let stream = SampleStream::new(404);
        let src = StochasticSource {
            problem: &p,
            stream,
        };
        let w = ring(6);
        let alpha = 0.02;
        let x0 = DMatrix::zeros(6, 3);
        let mut gt = GtState::init(x0.clone(), &src).unwrap();
        let mut pd = PdState::init(x0, &w, &src, alpha).unwrap();
        gt.step(&w, &src, alpha).unwrap();
        for _ in 0..100 {
            assert!((&gt.x - pd.x()).abs().max() < 1e-10);
            gt.step(&w, &src, alpha).unwrap();
            pd.step(&w, &src).unwrap();
        }
    }

    #[test]
    fn pd_dual_stays_mean_zero() {
        let p = make_linreg(7, 3, 1.0, 0.1, 29).unwrap();
        let stream = SampleStream::new(7);
        let src = StochasticSource {
            problem: &p,
            stream,
        };
        let w = ring(7);
        let mut pd = PdState::init(DMatrix::zeros(7, 3), &w, &src, 0.03).unwrap();
        for _ in 0..100 {
            pd.step(&w, &src).unwrap();
            assert!(pd.z().row_sum().abs().max() < 1e-10);
        }
    }

    #[test]
    fn pd_with_identity_network_is_parallel_sgd() {
        let p = make_random_quadratic(4, 3, 31).unwrap();
        let src = DeterministicSource(&p);
        let w = identity_matrix(4);
        let alpha = 0.1;
        let x0 = DMatrix::zeros(4, 3);
        let mut pd = PdState::init(x0.clone(), &w, &src, alpha).unwrap();
        // Independent per-agent gradient descent.
        let mut seq = x0.clone();
        for _ in 0..20 {
            seq -= alpha * p.gradient_stack(&seq);
        }
        let z_at_init = pd.z().clone();
        for _ in 0..19 {
            pd.step(&w, &src).unwrap();
        }
        assert!((pd.x() - seq).abs().max() < 1e-12);
        // With no coupling the dual variable never moves.
        assert_eq!(pd.z(), &z_at_init);
    }

    #[test]
    fn dsgd_on_averaging_matrix_tracks_csgd_mean() {
        let p = make_random_quadratic(5, 3, 37).unwrap();
        let src = DeterministicSource(&p);
        let t = build_topology(GraphKind::Complete, 5).unwrap();
        let w = combination_matrix(&t, &WeightRule::Uniform).unwrap();
        let alpha = 0.08;
        let mut ds = DsgdState::init(DMatrix::zeros(5, 3), &src).unwrap();
        let mut cs = CsgdState::init(DVector::zeros(3), &src).unwrap();
        for _ in 0..30 {
            ds.step(&w, &src, alpha).unwrap();
            cs.step(&src, alpha).unwrap();
            // With exact averaging every row of DSGD equals the
            // centralized iterate.
            for i in 0..5 {
                assert!((ds.x.row(i).transpose() - &cs.x).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn dsgd_homogeneous_converges_exactly() {
        let q: Vec<DMatrix<f64>> = (0..6).map(|_| DMatrix::identity(3, 3) * 1.5).collect();
        let b: Vec<DVector<f64>> = (0..6)
            .map(|_| DVector::from_vec(vec![0.3, -0.6, 0.9]))
            .collect();
        let p = make_quadratic(q, b).unwrap();
        let src = DeterministicSource(&p);
        let w = ring(6);
        let mut ds = DsgdState::init(DMatrix::zeros(6, 3), &src).unwrap();
        for _ in 0..400 {
            ds.step(&w, &src, 0.2).unwrap();
        }
        for i in 0..6 {
            assert!((ds.x.row(i).transpose() - &p.x_star).norm() < 1e-9);
        }
    }

    #[test]
    fn gt_converges_dsgd_biased_on_heterogeneous_data() {
        let p = make_random_quadratic(10, 3, 41).unwrap();
        let src = DeterministicSource(&p);
        let w = ring(10);
        let alpha = 0.05;
        let x0 = DMatrix::zeros(10, 3);
        let mut gt = GtState::init(x0.clone(), &src).unwrap();
        let mut ds = DsgdState::init(x0, &src).unwrap();
        for _ in 0..3000 {
            gt.step(&w, &src, alpha).unwrap();
            ds.step(&w, &src, alpha).unwrap();
        }
        let dist = |x: &DMatrix<f64>| -> f64 {
            (0..10)
                .map(|i| (x.row(i).transpose() - &p.x_star).norm_squared())
                .sum::<f64>()
                .sqrt()
        };
        assert!(dist(&gt.x) < 1e-9, "gt residual {}", dist(&gt.x));
        assert!(dist(&ds.x) > 1e-4, "dsgd residual {}", dist(&ds.x));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let p = make_random_quadratic(4, 3, 43).unwrap();
        let src = DeterministicSource(&p);
        let w = ring(4);
        assert!(matches!(
            GtState::init(DMatrix::zeros(3, 3), &src),
            Err(Error::Dimension(_))
        ));
        let mut gt = GtState::init(DMatrix::zeros(4, 3), &src).unwrap();
        assert!(matches!(gt.step(&w, &src, 0.0), Err(Error::Config(_))));
        assert!(matches!(gt.step(&w, &src, f64::NAN), Err(Error::Config(_))));
        let w5 = ring(5);
        assert!(matches!(gt.step(&w5, &src, 0.1), Err(Error::Dimension(_))));
        assert!(matches!(
            PdState::init(DMatrix::zeros(4, 3), &w, &src, -1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CsgdState::init(DVector::zeros(2), &src),
            Err(Error::Dimension(_))
        ));
    }
}
