//! Synthetic problem generators and gradient oracles.
//!
//! Every problem is an average of `n` local objectives `f_i` over a
//! common d-dimensional variable, built from a seed so runs replay
//! bit-exactly. Each [`ProblemSet`] carries certified constants: the
//! smoothness bound `L`, the strong-convexity modulus `mu`, the global
//! optimum `x_star`, the heterogeneity `varsigma_star2`, and a measured
//! gradient-noise bound `sigma2`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Problem families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Least squares against noisy linear measurements; `L = mu = 1`.
    LinReg,
    /// Logistic regression on a finite per-agent sample pool; `mu = 0`.
    LogReg,
    /// Explicit quadratics `f_i(x) = x' Q_i x / 2 - b_i' x`; noiseless.
    Quadratic,
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::LinReg => "linreg",
            ProblemKind::LogReg => "logreg",
            ProblemKind::Quadratic => "quadratic",
        })
    }
}

/// Per-agent sample pool for logistic regression.
#[derive(Debug, Clone)]
pub struct LogRegPool {
    /// Feature rows, `samples x d`.
    pub h: DMatrix<f64>,
    /// Labels in {0, 1}.
    pub y: Vec<f64>,
}

/// Per-kind local data.
#[derive(Debug, Clone)]
pub enum LocalData {
    /// Local optima `x_i*` of the unit quadratics.
    LinReg { x_loc: Vec<DVector<f64>> },
    /// Generative parameters and the sampled pools.
    LogReg {
        x_loc: Vec<DVector<f64>>,
        pools: Vec<LogRegPool>,
    },
    /// Explicit quadratic data.
    Quadratic {
        q: Vec<DMatrix<f64>>,
        b: Vec<DVector<f64>>,
    },
}

/// How a problem was generated; serialized into snapshots so the exact
/// problem can be rebuilt from scratch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Recipe {
    Linreg {
        n: usize,
        d: usize,
        sigma_v2: f64,
        sigma_n2: f64,
        seed: u64,
    },
    Logreg {
        n: usize,
        d: usize,
        sigma_v2: f64,
        samples_per_agent: usize,
        seed: u64,
    },
    QuadraticRandom {
        n: usize,
        d: usize,
        seed: u64,
    },
    QuadraticExplicit {
        n: usize,
        d: usize,
        /// Row-major `d x d` matrices, one per agent.
        q: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
    },
}

/// A fully constructed problem instance with certified constants.
#[derive(Debug, Clone)]
pub struct ProblemSet {
    /// Number of agents.
    pub n: usize,
    /// Dimension of the shared variable.
    pub d: usize,
    /// Problem family.
    pub kind: ProblemKind,
    /// Per-agent data.
    pub data: LocalData,
    /// Heterogeneity variance used at generation time.
    pub sigma_v2: f64,
    /// Label-noise variance used at generation time.
    pub sigma_n2: f64,
    /// Smoothness constant: every `f_i` is `l_smooth`-smooth.
    pub l_smooth: f64,
    /// Strong-convexity modulus (0 when merely convex).
    pub mu: f64,
    /// Gradient-noise variance bound near the optimum (measured for
    /// linreg, exact over the pool for logreg, 0 for quadratics).
    pub sigma2: f64,
    /// Minimizer of the average objective.
    pub x_star: DVector<f64>,
    /// `(1/n) sum_i ||grad f_i(x_star)||^2`.
    pub varsigma_star2: f64,
    /// Seed the problem was generated from (0 for explicit data).
    pub seed: u64,
    /// Pool size per agent (logreg only, 0 otherwise).
    pub samples_per_agent: usize,
    recipe: Recipe,
}

/// One gradient oracle call.
#[derive(Debug, Clone)]
pub struct GradientSample {
    /// Agent the sample belongs to.
    pub agent: usize,
    /// The (possibly stochastic) gradient.
    pub value: DVector<f64>,
    /// False when the value is the exact local gradient.
    pub is_stochastic: bool,
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 mixing step; used to derive independent RNG streams from
/// one base seed.
pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn chacha_from(words: u64) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    let mut s = words;
    for chunk in seed.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

/// Stateless per-(iteration, agent) random stream.
///
/// Keying by sample index rather than by draw order means two
/// algorithms that consume samples in different orders still see
/// identical randomness for the same `(sample_idx, agent)` pair.
#[derive(Debug, Clone, Copy)]
pub struct SampleStream {
    base: u64,
}

impl SampleStream {
    /// Create a stream rooted at `seed`.
    pub fn new(seed: u64) -> Self {
        SampleStream {
            base: splitmix64(seed),
        }
    }

    /// RNG for one oracle call.
    pub fn rng(&self, sample_idx: u64, agent: usize) -> ChaCha12Rng {
        let h = splitmix64(self.base ^ sample_idx);
        chacha_from(splitmix64(h ^ agent as u64))
    }
}

fn normal_vector(rng: &mut impl Rng, d: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Numerically stable `ln(1 + exp(t))`.
fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn local_optima(n: usize, d: usize, sigma_v2: f64, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let truth = normal_vector(rng, d, 1.0);
    (0..n)
        .map(|_| &truth + normal_vector(rng, d, sigma_v2.sqrt()))
        .collect()
}

fn check_dims(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidSize(format!(
            "problem needs n >= 1 agents and d >= 1 dimensions, got n={n}, d={d}"
        )));
    }
    Ok(())
}

/// Least-squares problem: `f_i(x) = ||x - x_i*||^2 / 2 + sigma_n2 / 2`,
/// with `x_i* = truth + v_i`, `v_i ~ N(0, sigma_v2 I)`. The stochastic
/// oracle draws a fresh measurement row per call. `L = mu = 1`.
pub fn make_linreg(n: usize, d: usize, sigma_v2: f64, sigma_n2: f64, seed: u64) -> Result<ProblemSet> {
    check_dims(n, d)?;
    if sigma_v2 < 0.0 || sigma_n2 < 0.0 {
        return Err(Error::Config("variances must be nonnegative".into()));
    }
    let mut rng = chacha_from(splitmix64(seed) ^ 0x11);
    let x_loc = local_optima(n, d, sigma_v2, &mut rng);
    let mut x_star = DVector::zeros(d);
    for xi in &x_loc {
        x_star += xi;
    }
    x_star /= n as f64;
    let varsigma_star2 =
        x_loc.iter().map(|xi| (&x_star - xi).norm_squared()).sum::<f64>() / n as f64;

    let mut p = ProblemSet {
        n,
        d,
        kind: ProblemKind::LinReg,
        data: LocalData::LinReg { x_loc },
        sigma_v2,
        sigma_n2,
        l_smooth: 1.0,
        mu: 1.0,
        sigma2: 0.0,
        x_star,
        varsigma_star2,
        seed,
        samples_per_agent: 0,
        recipe: Recipe::Linreg {
            n,
            d,
            sigma_v2,
            sigma_n2,
            seed,
        },
    };
    p.sigma2 = p.measure_sigma2(100_000);
    p.check_optimality()?;
    Ok(p)
}

/// Logistic-regression problem on finite per-agent pools. Features are
/// standard normal; labels are Bernoulli with success probability
/// `sigmoid(h' x_i*)`. `L` is the trace bound `max_i mean ||h||^2 / 4`;
/// `x_star` is found by damped Newton on the pooled objective.
pub fn make_logreg(
    n: usize,
    d: usize,
    sigma_v2: f64,
    samples_per_agent: usize,
    seed: u64,
) -> Result<ProblemSet> {
    check_dims(n, d)?;
    if sigma_v2 < 0.0 {
        return Err(Error::Config("variances must be nonnegative".into()));
    }
    if samples_per_agent == 0 {
        return Err(Error::InvalidSize("logreg needs at least one sample per agent".into()));
    }
    let mut rng = chacha_from(splitmix64(seed) ^ 0x22);
    let x_loc = local_optima(n, d, sigma_v2, &mut rng);
    let m = samples_per_agent;
    let pools: Vec<LogRegPool> = x_loc
        .iter()
        .map(|xi| {
            let h = DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng));
            let y = (0..m)
                .map(|s| {
                    let p = sigmoid(h.row(s).transpose().dot(xi));
                    if rng.gen::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            LogRegPool { h, y }
        })
        .collect();

    let l_smooth = pools
        .iter()
        .map(|pool| pool.h.row_iter().map(|r| r.norm_squared()).sum::<f64>() / m as f64)
        .fold(0.0f64, f64::max)
        / 4.0;

    let mut p = ProblemSet {
        n,
        d,
        kind: ProblemKind::LogReg,
        data: LocalData::LogReg { x_loc, pools },
        sigma_v2,
        sigma_n2: 0.0,
        l_smooth,
        mu: 0.0,
        sigma2: 0.0,
        x_star: DVector::zeros(d),
        varsigma_star2: 0.0,
        seed,
        samples_per_agent: m,
        recipe: Recipe::Logreg {
            n,
            d,
            sigma_v2,
            samples_per_agent: m,
            seed,
        },
    };
    p.x_star = p.solve_logreg_optimum()?;
    p.varsigma_star2 = (0..n)
        .map(|i| p.full_gradient(i, &p.x_star).norm_squared())
        .sum::<f64>()
        / n as f64;
    p.sigma2 = p.logreg_pool_variance();
    p.check_optimality()?;
    Ok(p)
}

/// Explicit quadratic problem from per-agent `(Q_i, b_i)` pairs. All
/// matrices must be symmetric positive definite for the certified
/// constants to make sense; symmetry is enforced, definiteness is
/// reflected in `mu`.
pub fn make_quadratic(q: Vec<DMatrix<f64>>, b: Vec<DVector<f64>>) -> Result<ProblemSet> {
    if q.is_empty() || q.len() != b.len() {
        return Err(Error::InvalidSize(format!(
            "need matching nonempty Q/b lists, got {} and {}",
            q.len(),
            b.len()
        )));
    }
    let n = q.len();
    let d = b[0].len();
    check_dims(n, d)?;
    for (i, (qi, bi)) in q.iter().zip(&b).enumerate() {
        if qi.nrows() != d || qi.ncols() != d || bi.len() != d {
            return Err(Error::Dimension(format!(
                "agent {i}: expected {d}x{d} matrix and {d}-vector"
            )));
        }
        if (qi - qi.transpose()).abs().max() > 1e-12 {
            return Err(Error::Config(format!("agent {i}: Q must be symmetric")));
        }
    }

    let recipe = Recipe::QuadraticExplicit {
        n,
        d,
        q: q.iter().map(|qi| qi.iter().cloned().collect()).collect(),
        b: b.iter().map(|bi| bi.iter().cloned().collect()).collect(),
    };
    finish_quadratic(q, b, 0, recipe)
}

/// Random heterogeneous strongly convex quadratics: each `Q_i` has
/// eigenvalues drawn uniformly from `[0.5, 2]` under a random
/// orthogonal conjugation, and `b_i` has independent `N(0, 4)` entries.
pub fn make_random_quadratic(n: usize, d: usize, seed: u64) -> Result<ProblemSet> {
    check_dims(n, d)?;
    let mut rng = chacha_from(splitmix64(seed) ^ 0x33);
    let mut q = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let gauss: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let rot = gauss.qr().q();
        let eigs = DVector::from_fn(d, |_, _| rng.gen_range(0.5..2.0));
        let qi: DMatrix<f64> = &rot * DMatrix::from_diagonal(&eigs) * rot.transpose();
        // Symmetrize away the last bits of rounding noise.
        q.push((&qi + qi.transpose()) * 0.5);
        b.push(normal_vector(&mut rng, d, 2.0));
    }
    let recipe = Recipe::QuadraticRandom { n, d, seed };
    finish_quadratic(q, b, seed, recipe)
}

fn finish_quadratic(
    q: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    seed: u64,
    recipe: Recipe,
) -> Result<ProblemSet> {
    let n = q.len();
    let d = b[0].len();
    let mut q_sum = DMatrix::zeros(d, d);
    let mut b_sum = DVector::zeros(d);
    for (qi, bi) in q.iter().zip(&b) {
        q_sum += qi;
        b_sum += bi;
    }
    let x_star = q_sum
        .clone()
        .lu()
        .solve(&b_sum)
        .ok_or_else(|| Error::OracleConstruction("sum of Q matrices is singular".into()))?;

    let mut l_smooth = 0.0f64;
    let mut mu = f64::INFINITY;
    for qi in &q {
        let eig = nalgebra::SymmetricEigen::new(qi.clone()).eigenvalues;
        l_smooth = l_smooth.max(eig.max());
        mu = mu.min(eig.min());
    }
    if mu < 0.0 {
        return Err(Error::OracleConstruction(format!(
            "quadratic data is not convex (min eigenvalue {mu:.3e})"
        )));
    }

    let varsigma_star2 = q
        .iter()
        .zip(&b)
        .map(|(qi, bi)| (qi * &x_star - bi).norm_squared())
        .sum::<f64>()
        / n as f64;

    let p = ProblemSet {
        n,
        d,
        kind: ProblemKind::Quadratic,
        data: LocalData::Quadratic { q, b },
        sigma_v2: 0.0,
        sigma_n2: 0.0,
        l_smooth,
        mu,
        sigma2: 0.0,
        x_star,
        varsigma_star2,
        seed,
        samples_per_agent: 0,
        recipe,
    };
    p.check_optimality()?;
    Ok(p)
}

impl ProblemSet {
    fn check_optimality(&self) -> Result<()> {
        let g = self.mean_gradient(&self.x_star);
        if g.norm() > 1e-7 {
            return Err(Error::OracleConstruction(format!(
                "computed optimum is not stationary (gradient norm {:.3e})",
                g.norm()
            )));
        }
        Ok(())
    }

    /// Exact local gradient of `f_i` at `x`.
    pub fn full_gradient(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        match &self.data {
            LocalData::LinReg { x_loc } => x - &x_loc[i],
            LocalData::LogReg { pools, .. } => {
                let pool = &pools[i];
                let m = pool.y.len();
                let mut g = DVector::zeros(self.d);
                for s in 0..m {
                    let h = pool.h.row(s).transpose();
                    let margin = sigmoid(h.dot(x)) - pool.y[s];
                    g.axpy(margin, &h, 1.0);
                }
                g / m as f64
            }
            LocalData::Quadratic { q, b } => &q[i] * x - &b[i],
        }
    }

    /// Average of the local gradients evaluated at a common point.
    pub fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.d);
        for i in 0..self.n {
            g += self.full_gradient(i, x);
        }
        g / self.n as f64
    }

    /// Stack of local gradients: row `i` of the result is the gradient
    /// of `f_i` at row `i` of `x`.
    pub fn gradient_stack(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.d);
        for i in 0..self.n {
            let xi = x.row(i).transpose();
            out.set_row(i, &self.full_gradient(i, &xi).transpose());
        }
        out
    }

    /// Local objective value.
    pub fn f_local(&self, i: usize, x: &DVector<f64>) -> f64 {
        match &self.data {
            LocalData::LinReg { x_loc } => 0.5 * (x - &x_loc[i]).norm_squared() + 0.5 * self.sigma_n2,
            LocalData::LogReg { pools, .. } => {
                let pool = &pools[i];
                let m = pool.y.len();
                (0..m)
                    .map(|s| {
                        let t = pool.h.row(s).transpose().dot(x);
                        log1p_exp(t) - pool.y[s] * t
                    })
                    .sum::<f64>()
                    / m as f64
            }
            LocalData::Quadratic { q, b } => 0.5 * x.dot(&(&q[i] * x)) - b[i].dot(x),
        }
    }

    /// Average objective at a common point.
    pub fn f_mean(&self, x: &DVector<f64>) -> f64 {
        (0..self.n).map(|i| self.f_local(i, x)).sum::<f64>() / self.n as f64
    }

    /// Optimal average objective value.
    pub fn f_star(&self) -> f64 {
        self.f_mean(&self.x_star)
    }

    /// `varsigma_star2`: average squared local-gradient norm at the
    /// optimum — zero exactly when all local optima coincide.
    pub fn heterogeneity(&self) -> f64 {
        self.varsigma_star2
    }

    /// One stochastic oracle call for agent `i` at `x`.
    ///
    /// Linreg draws a fresh measurement row, logreg resamples uniformly
    /// from the agent's pool, and quadratics return the exact gradient.
    pub fn stochastic_gradient(
        &self,
        i: usize,
        x: &DVector<f64>,
        rng: &mut impl Rng,
    ) -> GradientSample {
        match &self.data {
            LocalData::LinReg { x_loc } => {
                let a = normal_vector(rng, self.d, 1.0);
                let noise: f64 = StandardNormal.sample(rng);
                let b = a.dot(&x_loc[i]) + noise * self.sigma_n2.sqrt();
                let value = &a * (a.dot(x) - b);
                GradientSample {
                    agent: i,
                    value,
                    is_stochastic: true,
                }
            }
            LocalData::LogReg { pools, .. } => {
                let pool = &pools[i];
                let s = rng.gen_range(0..pool.y.len());
                let h = pool.h.row(s).transpose();
                let margin = sigmoid(h.dot(x)) - pool.y[s];
                GradientSample {
                    agent: i,
                    value: h * margin,
                    is_stochastic: true,
                }
            }
            LocalData::Quadratic { .. } => GradientSample {
                agent: i,
                value: self.full_gradient(i, x),
                is_stochastic: false,
            },
        }
    }

    /// Empirical gradient-noise variance at the stored optimum:
    /// `max_i mean ||sample - full_gradient||^2` over `draws` samples.
    fn measure_sigma2(&self, draws: usize) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let exact = self.full_gradient(i, &self.x_star);
            let mut rng = chacha_from(splitmix64(self.seed) ^ 0x5151 ^ i as u64);
            let total: f64 = (0..draws)
                .map(|_| {
                    (self.stochastic_gradient(i, &self.x_star, &mut rng).value - &exact)
                        .norm_squared()
                })
                .sum();
            worst = worst.max(total / draws as f64);
        }
        worst
    }

    /// Exact single-sample gradient variance at the optimum for pooled
    /// logistic regression.
    fn logreg_pool_variance(&self) -> f64 {
        let LocalData::LogReg { pools, .. } = &self.data else {
            return 0.0;
        };
        let mut worst = 0.0f64;
        for (i, pool) in pools.iter().enumerate() {
            let exact = self.full_gradient(i, &self.x_star);
            let m = pool.y.len();
            let total: f64 = (0..m)
                .map(|s| {
                    let h = pool.h.row(s).transpose();
                    let g = &h * (sigmoid(h.dot(&self.x_star)) - pool.y[s]);
                    (g - &exact).norm_squared()
                })
                .sum();
            worst = worst.max(total / m as f64);
        }
        worst
    }

    fn logreg_mean_hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let LocalData::LogReg { pools, .. } = &self.data else {
            unreachable!("hessian is only used for logreg");
        };
        let mut hess = DMatrix::zeros(self.d, self.d);
        let mut count = 0usize;
        for pool in pools {
            for s in 0..pool.y.len() {
                let h = pool.h.row(s).transpose();
                let p = sigmoid(h.dot(x));
                hess.ger(p * (1.0 - p), &h, &h, 1.0);
                count += 1;
            }
        }
        hess / count as f64
    }

    fn solve_logreg_optimum(&self) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.d);
        let mut fx = self.f_mean(&x);
        for _ in 0..200 {
            let g = self.mean_gradient(&x);
            if g.norm() <= 1e-10 {
                return Ok(x);
            }
            let mut hess = self.logreg_mean_hessian(&x);
            let step = loop {
                match hess.clone().cholesky() {
                    Some(chol) => break chol.solve(&g),
                    None => {
                        for r in 0..self.d {
                            hess[(r, r)] += 1e-10;
                        }
                    }
                }
            };
            let slope = g.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &x - &step * t;
                let fc = self.f_mean(&cand);
                // The absolute slack keeps the search from stalling once
                // the true decrease falls below the resolution of f.
                if fc <= fx - 1e-4 * t * slope + 1e-14 * (1.0 + fx.abs()) {
                    x = cand;
                    fx = fc;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return Err(Error::OracleConstruction(
                        "logreg line search stalled before reaching the optimum".into(),
                    ));
                }
            }
        }
        Err(Error::OracleConstruction(
            "logreg optimum not reached within 200 Newton iterations".into(),
        ))
    }

    /// Serialize the generation recipe plus certified constants to a
    /// self-describing text snapshot.
    pub fn snapshot(&self) -> String {
        let snap = Snapshot {
            recipe: self.recipe.clone(),
            l_smooth: self.l_smooth,
            mu: self.mu,
            sigma2: self.sigma2,
            varsigma_star2: self.varsigma_star2,
            x_star: self.x_star.iter().cloned().collect(),
        };
        toml::to_string(&snap).expect("snapshot serialization cannot fail")
    }

    /// Rebuild a problem from a snapshot and verify the regenerated
    /// constants match the recorded ones.
    pub fn from_snapshot(text: &str) -> Result<ProblemSet> {
        let snap: Snapshot =
            toml::from_str(text).map_err(|e| Error::Parse(format!("bad snapshot: {e}")))?;
        let p = match &snap.recipe {
            Recipe::Linreg {
                n,
                d,
                sigma_v2,
                sigma_n2,
                seed,
            } => make_linreg(*n, *d, *sigma_v2, *sigma_n2, *seed)?,
            Recipe::Logreg {
                n,
                d,
                sigma_v2,
                samples_per_agent,
                seed,
            } => make_logreg(*n, *d, *sigma_v2, *samples_per_agent, *seed)?,
            Recipe::QuadraticRandom { n, d, seed } => make_random_quadratic(*n, *d, *seed)?,
            Recipe::QuadraticExplicit { n, d, q, b } => {
                let qs = q
                    .iter()
                    .map(|flat| {
                        if flat.len() != d * d {
                            return Err(Error::Parse("snapshot Q has wrong length".into()));
                        }
                        Ok(DMatrix::from_iterator(*d, *d, flat.iter().cloned()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let bs = b.iter().map(|v| DVector::from_vec(v.clone())).collect();
                if qs.len() != *n {
                    return Err(Error::Parse("snapshot agent count mismatch".into()));
                }
                make_quadratic(qs, bs)?
            }
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        let x_ok = snap.x_star.len() == p.d
            && p.x_star.iter().zip(&snap.x_star).all(|(a, b)| close(*a, *b));
        if !(close(p.l_smooth, snap.l_smooth)
            && close(p.mu, snap.mu)
            && close(p.sigma2, snap.sigma2)
            && close(p.varsigma_star2, snap.varsigma_star2)
            && x_ok)
        {
            return Err(Error::OracleConstruction(
                "regenerated problem does not match snapshot constants".into(),
            ));
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    recipe: Recipe,
    l_smooth: f64,
    mu: f64,
    sigma2: f64,
    varsigma_star2: f64,
    x_star: Vec<f64>,
}

/// Uniform interface the steppers pull gradients through.
///
/// `sample_idx` identifies the random draw: calls with the same
/// `(agent, sample_idx)` return the same value, so algorithms that
/// revisit a sample index see consistent randomness.
pub trait GradientSource {
    /// Number of agents.
    fn n(&self) -> usize;
    /// Problem dimension.
    fn d(&self) -> usize;
    /// Gradient for `agent` at `x` under sample `sample_idx`.
    fn gradient(&self, agent: usize, x: &DVector<f64>, sample_idx: u64) -> DVector<f64>;
    /// Whether gradients carry sampling noise.
    fn is_stochastic(&self) -> bool;
}

/// Noise-free oracle: always returns the exact local gradient.
pub struct DeterministicSource<'a>(pub &'a ProblemSet);

impl GradientSource for DeterministicSource<'_> {
    fn n(&self) -> usize {
        self.0.n
    }
    fn d(&self) -> usize {
        self.0.d
    }
    fn gradient(&self, agent: usize, x: &DVector<f64>, _sample_idx: u64) -> DVector<f64> {
        self.0.full_gradient(agent, x)
    }
    fn is_stochastic(&self) -> bool {
        false
    }
}

/// Stochastic oracle driven by a [`SampleStream`].
pub struct StochasticSource<'a> {
    /// Problem the gradients come from.
    pub problem: &'a ProblemSet,
    /// Stream supplying the per-call RNGs.
    pub stream: SampleStream,
}

impl GradientSource for StochasticSource<'_> {
    fn n(&self) -> usize {
        self.problem.n
    }
    fn d(&self) -> usize {
        self.problem.d
    }
    fn gradient(&self, agent: usize, x: &DVector<f64>, sample_idx: u64) -> DVector<f64> {
        let mut rng = self.stream.rng(sample_idx, agent);
        self.problem.stochastic_gradient(agent, x, &mut rng).value
    }
    fn is_stochastic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linreg_gradient_and_optimum_closed_form() {
        let p = make_linreg(6, 4, 1.0, 0.01, 7).unwrap();
        let LocalData::LinReg { x_loc } = &p.data else { panic!() };
        let mut mean = DVector::zeros(4);
        for xi in x_loc {
            mean += xi;
        }
        mean /= 6.0;
        assert_abs_diff_eq!((mean - &p.x_star).norm(), 0.0, epsilon = 1e-14);

        let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let g = p.full_gradient(2, &x);
        assert_abs_diff_eq!((g - (&x - &x_loc[2])).norm(), 0.0, epsilon = 1e-15);
        assert_eq!(p.l_smooth, 1.0);
        assert_eq!(p.mu, 1.0);
    }

    #[test]
    fn linreg_heterogeneity_matches_direct_sum() {
        let p = make_linreg(10, 3, 2.0, 0.0, 11).unwrap();
        let LocalData::LinReg { x_loc } = &p.data else { panic!() };
        let direct = x_loc
            .iter()
            .map(|xi| (&p.x_star - xi).norm_squared())
            .sum::<f64>()
            / 10.0;
        assert_abs_diff_eq!(p.varsigma_star2, direct, epsilon = 1e-14);
    }

    #[test]
    fn linreg_homogeneous_has_zero_heterogeneity() {
        let p = make_linreg(5, 3, 0.0, 0.5, 3).unwrap();
        assert!(p.varsigma_star2 < 1e-28);
        assert!(p.heterogeneity() < 1e-28);
    }

    #[test]
    fn linreg_sigma2_matches_analytic_form() {
        // Fresh-draw oracle at the optimum: variance for agent i is
        // (d+1) ||x_star - x_i*||^2 + d sigma_n2.
        let p = make_linreg(4, 5, 1.0, 0.01, 19).unwrap();
        let LocalData::LinReg { x_loc } = &p.data else { panic!() };
        let analytic = x_loc
            .iter()
            .map(|xi| 6.0 * (&p.x_star - xi).norm_squared() + 5.0 * 0.01)
            .fold(0.0f64, f64::max);
        assert!(
            (p.sigma2 - analytic).abs() / analytic < 0.05,
            "measured {} vs analytic {}",
            p.sigma2,
            analytic
        );
    }

    #[test]
    fn linreg_stochastic_gradient_unbiased() {
        let p = make_linreg(3, 4, 1.0, 0.1, 23).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
        let exact = p.full_gradient(1, &x);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let draws = 200_000;
        let mut mean = DVector::zeros(4);
        for _ in 0..draws {
            mean += p.stochastic_gradient(1, &x, &mut rng).value;
        }
        mean /= draws as f64;
        // Componentwise std is a few units; 5 sigma over sqrt(draws).
        assert!((mean - exact).norm() < 0.1);
    }

    #[test]
    fn linreg_deterministic_at_local_optimum_is_zero() {
        let p = make_linreg(3, 4, 1.0, 0.0, 29).unwrap();
        let LocalData::LinReg { x_loc } = &p.data else { panic!() };
        let g = p.full_gradient(0, &x_loc[0]);
        assert_abs_diff_eq!(g.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn logreg_single_sample_gradient_finite_difference() {
        let p = make_logreg(2, 3, 1.0, 50, 41).unwrap();
        let LocalData::LogReg { pools, .. } = &p.data else { panic!() };
        let pool = &pools[0];
        let x = DVector::from_vec(vec![0.4, -0.2, 0.7]);
        let s = 17usize;
        let h = pool.h.row(s).transpose();
        let loss = |x: &DVector<f64>| {
            let t = h.dot(x);
            log1p_exp(t) - pool.y[s] * t
        };
        let g = &h * (sigmoid(h.dot(&x)) - pool.y[s]);
        let eps = 1e-6;
        for c in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += eps;
            xm[c] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - g[c]).abs() < 1e-6, "component {c}: {fd} vs {}", g[c]);
        }
    }

    #[test]
    fn logreg_centered_truth_gives_fair_labels() {
        // sigma_v2 = 0 with the shared truth forced to zero makes every
        // label a fair coin flip.
        let mut p = make_logreg(1, 3, 0.0, 4000, 57).unwrap();
        let LocalData::LogReg { x_loc, pools } = &mut p.data else { panic!() };
        // Regenerate labels at truth = 0 using a fixed stream.
        x_loc[0].fill(0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pool = &mut pools[0];
        for s in 0..pool.y.len() {
            let prob = sigmoid(pool.h.row(s).transpose().dot(&x_loc[0]));
            assert_abs_diff_eq!(prob, 0.5, epsilon = 1e-15);
            pool.y[s] = if rng.gen::<f64>() < prob { 1.0 } else { 0.0 };
        }
        let frac = pool.y.iter().sum::<f64>() / pool.y.len() as f64;
        assert!((frac - 0.5).abs() < 0.04, "label fraction {frac}");
    }

    #[test]
    fn logreg_optimum_is_stationary_and_constants_checked() {
        let p = make_logreg(5, 4, 1.0, 500, 61).unwrap();
        assert!(p.mean_gradient(&p.x_star).norm() <= 1e-10);
        assert_eq!(p.mu, 0.0);
        let LocalData::LogReg { pools, .. } = &p.data else { panic!() };
        let trace_bound = pools
            .iter()
            .map(|pool| pool.h.row_iter().map(|r| r.norm_squared()).sum::<f64>() / 500.0)
            .fold(0.0f64, f64::max)
            / 4.0;
        assert_abs_diff_eq!(p.l_smooth, trace_bound, epsilon = 1e-14);

        // Heterogeneity against brute-force pool summation.
        let direct = (0..5)
            .map(|i| p.full_gradient(i, &p.x_star).norm_squared())
            .sum::<f64>()
            / 5.0;
        assert_abs_diff_eq!(p.varsigma_star2, direct, epsilon = 1e-14);
    }

    #[test]
    fn logreg_pool_variance_is_exact() {
        let p = make_logreg(3, 3, 0.5, 200, 67).unwrap();
        let LocalData::LogReg { pools, .. } = &p.data else { panic!() };
        let mut worst = 0.0f64;
        for (i, pool) in pools.iter().enumerate() {
            let exact = p.full_gradient(i, &p.x_star);
            let var = (0..200)
                .map(|s| {
                    let h = pool.h.row(s).transpose();
                    ((&h * (sigmoid(h.dot(&p.x_star)) - pool.y[s])) - &exact).norm_squared()
                })
                .sum::<f64>()
                / 200.0;
            worst = worst.max(var);
        }
        assert_abs_diff_eq!(p.sigma2, worst, epsilon = 1e-14);
    }

    #[test]
    fn quadratic_optimum_solves_normal_equations() {
        let p = make_random_quadratic(6, 4, 71).unwrap();
        let LocalData::Quadratic { q, b } = &p.data else { panic!() };
        let mut qs = DMatrix::zeros(4, 4);
        let mut bs = DVector::zeros(4);
        for (qi, bi) in q.iter().zip(b) {
            qs += qi;
            bs += bi;
        }
        assert!((qs * &p.x_star - bs).norm() < 1e-10);
        assert!(p.mu >= 0.5 - 1e-9 && p.l_smooth <= 2.0 + 1e-9);
        assert!(p.mu < p.l_smooth);
        assert_eq!(p.sigma2, 0.0);
        // Stochastic oracle degenerates to the exact gradient.
        let x = DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s = p.stochastic_gradient(2, &x, &mut rng);
        assert!(!s.is_stochastic);
        assert_abs_diff_eq!((s.value - p.full_gradient(2, &x)).norm(), 0.0, epsilon = 0.0);
    }

    #[test]
    fn quadratic_rejects_bad_input() {
        let q = vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])];
        let b = vec![DVector::zeros(2)];
        assert!(matches!(make_quadratic(q, b), Err(Error::Config(_))));
        assert!(matches!(
            make_quadratic(vec![], vec![]),
            Err(Error::InvalidSize(_))
        ));
    }

    #[test]
    fn same_seed_same_problem() {
        let a = make_linreg(8, 5, 1.0, 0.01, 123).unwrap();
        let b = make_linreg(8, 5, 1.0, 0.01, 123).unwrap();
        assert_eq!(a.x_star, b.x_star);
        assert_eq!(a.sigma2, b.sigma2);
        let c = make_linreg(8, 5, 1.0, 0.01, 124).unwrap();
        assert_ne!(a.x_star, c.x_star);
    }

    #[test]
    fn sample_stream_is_keyed_not_ordered() {
        let p = make_linreg(4, 3, 1.0, 0.1, 9).unwrap();
        let stream = SampleStream::new(77);
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let src = StochasticSource {
            problem: &p,
            stream,
        };
        // Same key twice, interleaved with other keys.
        let g1 = src.gradient(2, &x, 5);
        let _ = src.gradient(0, &x, 6);
        let g2 = src.gradient(2, &x, 5);
        assert_eq!(g1, g2);
        assert_ne!(g1, src.gradient(2, &x, 6));
        assert_ne!(g1, src.gradient(3, &x, 5));
    }

    #[test]
    fn snapshot_roundtrip_all_kinds() {
        let problems = vec![
            make_linreg(4, 3, 1.0, 0.01, 5).unwrap(),
            make_logreg(3, 2, 0.5, 100, 6).unwrap(),
            make_random_quadratic(3, 3, 7).unwrap(),
            make_quadratic(
                vec![DMatrix::identity(2, 2) * 2.0, DMatrix::identity(2, 2)],
                vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])],
            )
            .unwrap(),
        ];
        for p in problems {
            let text = p.snapshot();
            let q = ProblemSet::from_snapshot(&text).unwrap();
            assert_eq!(p.x_star, q.x_star);
            assert_eq!(p.sigma2, q.sigma2);
            assert_eq!(p.l_smooth, q.l_smooth);
        }
    }

    #[test]
    fn snapshot_detects_tampering() {
        let p = make_linreg(4, 3, 1.0, 0.01, 5).unwrap();
        let text = p.snapshot().replace("mu = 1.0", "mu = 0.5");
        assert!(matches!(
            ProblemSet::from_snapshot(&text),
            Err(Error::OracleConstruction(_))
        ));
    }

    #[test]
    fn smoothness_and_strong_convexity_hold() {
        let p = make_linreg(4, 5, 1.0, 0.01, 31).unwrap();
        let q = make_logreg(3, 4, 1.0, 300, 37).unwrap();
        let r = make_random_quadratic(4, 4, 43).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for p in [&p, &q, &r] {
            for _ in 0..100 {
                let y = normal_vector(&mut rng, p.d, 2.0);
                let z = normal_vector(&mut rng, p.d, 2.0);
                for i in 0..p.n {
                    let dg = p.full_gradient(i, &y) - p.full_gradient(i, &z);
                    let dx = (&y - &z).norm();
                    assert!(dg.norm() <= p.l_smooth * dx * (1.0 + 1e-9));
                    let inner = dg.dot(&(&y - &z));
                    assert!(inner >= p.mu * dx * dx * (1.0 - 1e-9) - 1e-12);
                }
            }
        }
    }
}
