//! Experiment runner: run configurations, repeated seeded runs with
//! bounded parallelism, CSV traces, stepsize tuning, and the
//! end-to-end verification suite.
//!
//! The runner is deterministic by construction: repetition `r` draws
//! its samples from the stream seeded with `seed + r`, repetitions are
//! reduced in repetition order regardless of scheduling, and the CSV
//! writer emits the same bytes for the same configuration and seed.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::algorithms::{CsgdState, DsgdState, GtState, PdState};
use crate::analysis;
use crate::problems::{
    make_linreg, make_logreg, make_random_quadratic, DeterministicSource, GradientSource,
    ProblemKind, ProblemSet, SampleStream, StochasticSource,
};
use crate::topology::{
    build_topology, certify, combination_matrix, Certification, CombinationMatrix, GraphKind,
    PropertyCheck, Topology, WeightRule,
};
use crate::{Error, Result};

/// Bit-exact header of the per-run CSV.
pub const CSV_HEADER: &str = "k,run_id,algo,graph,n,alpha,rel_error,consensus_error,f_gap";

/// Header of the aggregated plot-data CSV.
pub const PLOT_HEADER: &str = "k,rel_mean,rel_std,consensus_mean,consensus_std,f_gap_mean,f_gap_std";

/// Algorithms the runner can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    /// Gradient tracking, tracking form.
    Gt,
    /// Gradient tracking, primal–dual form.
    GtPd,
    /// Decentralized SGD (adapt-then-combine).
    Dsgd,
    /// Centralized SGD over the pooled agents.
    Csgd,
}

impl Algo {
    fn needs_network(self) -> bool {
        !matches!(self, Algo::Csgd)
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Algo::Gt => "gt",
            Algo::GtPd => "gt_pd",
            Algo::Dsgd => "dsgd",
            Algo::Csgd => "csgd",
        };
        f.write_str(s)
    }
}

/// Parse an algorithm name as written on the command line.
pub fn parse_algo(s: &str) -> Result<Algo> {
    match s {
        "gt" => Ok(Algo::Gt),
        "gt_pd" | "gt-pd" => Ok(Algo::GtPd),
        "dsgd" => Ok(Algo::Dsgd),
        "csgd" => Ok(Algo::Csgd),
        _ => Err(Error::Parse(format!(
            "unknown algorithm {s:?}; expected gt, gt_pd, dsgd, or csgd"
        ))),
    }
}

/// Parse a graph family name.
pub fn parse_graph(s: &str) -> Result<GraphKind> {
    match s {
        "ring" => Ok(GraphKind::Ring),
        "exponential" => Ok(GraphKind::Exponential),
        "complete" => Ok(GraphKind::Complete),
        _ => Err(Error::Parse(format!(
            "unknown graph {s:?}; expected ring, exponential, or complete (custom graphs come from an edge list)"
        ))),
    }
}

/// Parse a problem family name.
pub fn parse_problem(s: &str) -> Result<ProblemKind> {
    match s {
        "linreg" => Ok(ProblemKind::LinReg),
        "logreg" => Ok(ProblemKind::LogReg),
        "quadratic" => Ok(ProblemKind::Quadratic),
        _ => Err(Error::Parse(format!(
            "unknown problem {s:?}; expected linreg, logreg, or quadratic"
        ))),
    }
}

/// Parse a weight-rule name (the lazy wrapper is a separate flag).
pub fn parse_rule(s: &str) -> Result<WeightRule> {
    match s {
        "uniform" => Ok(WeightRule::Uniform),
        "metropolis" => Ok(WeightRule::Metropolis),
        _ => Err(Error::Parse(format!(
            "unknown weight rule {s:?}; expected uniform or metropolis"
        ))),
    }
}

/// How the runner picks the stepsize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepsizeRule {
    /// Use this value as-is.
    Fixed(f64),
    /// Derive it from the rate theory for the configured horizon.
    Auto,
    /// Grid-search the largest stepsize whose aggregated final
    /// relative error reaches this target.
    TuneTo(f64),
}

/// Full description of one experiment.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Algorithm to run.
    pub algo: Algo,
    /// Graph family. `None` for the centralized baseline (which has no
    /// network) or when `custom_topology` supplies the graph.
    pub graph: Option<GraphKind>,
    /// Number of agents.
    pub n: usize,
    /// Weight rule for the combination matrix.
    pub rule: WeightRule,
    /// Problem family.
    pub problem: ProblemKind,
    /// Dimension of the shared variable.
    pub d: usize,
    /// Heterogeneity variance of the local optima.
    pub sigma_v2: f64,
    /// Label-noise variance (linreg only).
    pub sigma_n2: f64,
    /// Sample-pool size per agent (logreg only).
    pub samples_per_agent: usize,
    /// Stepsize rule.
    pub alpha: StepsizeRule,
    /// Iterations per repetition.
    pub iters: usize,
    /// Number of repetitions.
    pub reps: usize,
    /// Base seed; repetition `r` draws samples from `seed + r`.
    pub seed: u64,
    /// Use exact gradients (the sigma = 0 mode).
    pub deterministic: bool,
    /// Record metrics every this many iterations; iterations 0 and
    /// `iters` are always recorded.
    pub record_every: usize,
    /// Cap on concurrently running repetitions (0 = one per CPU,
    /// 1 = sequential).
    pub max_par: usize,
    /// Explicit topology from an edge list, instead of `graph`.
    pub custom_topology: Option<Topology>,
    /// Write the per-run CSV here after the run.
    pub out: Option<PathBuf>,
    /// Write the aggregated mean/std CSV here after the run.
    pub plot_out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algo: Algo::Gt,
            graph: Some(GraphKind::Ring),
            n: 30,
            rule: WeightRule::Uniform,
            problem: ProblemKind::LinReg,
            d: 5,
            sigma_v2: 1.0,
            sigma_n2: 0.01,
            samples_per_agent: 2000,
            alpha: StepsizeRule::Fixed(0.01),
            iters: 10_000,
            reps: 30,
            seed: 17,
            deterministic: false,
            record_every: 1,
            max_par: 0,
            custom_topology: None,
            out: None,
            plot_out: None,
        }
    }
}

impl RunConfig {
    /// Check cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("at least one repetition is required".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record-every must be at least 1".into()));
        }
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config(
                "agent count and dimension must be at least 1".into(),
            ));
        }
        if let Some(t) = &self.custom_topology {
            if t.n != self.n {
                return Err(Error::Config(format!(
                    "edge list describes {} nodes but the config asks for n = {}",
                    t.n, self.n
                )));
            }
            if self.graph.is_some() {
                return Err(Error::Config(
                    "give either a named graph or an edge list, not both".into(),
                ));
            }
        }
        if self.algo.needs_network() {
            if self.graph.is_none() && self.custom_topology.is_none() {
                return Err(Error::Config(
                    "decentralized algorithms need a graph or an edge list".into(),
                ));
            }
        } else if self.graph.is_some() || self.custom_topology.is_some() {
            return Err(Error::Config(
                "the centralized baseline has no network; drop the graph options".into(),
            ));
        }
        Ok(())
    }
}

/// Construct the problem instance a config describes.
pub fn build_problem(cfg: &RunConfig) -> Result<ProblemSet> {
    match cfg.problem {
        ProblemKind::LinReg => make_linreg(cfg.n, cfg.d, cfg.sigma_v2, cfg.sigma_n2, cfg.seed),
        ProblemKind::LogReg => {
            make_logreg(cfg.n, cfg.d, cfg.sigma_v2, cfg.samples_per_agent, cfg.seed)
        }
        ProblemKind::Quadratic => make_random_quadratic(cfg.n, cfg.d, cfg.seed),
    }
}

/// Build the topology and combination matrix a config asks for
/// (`None` for the centralized baseline).
pub fn build_network(cfg: &RunConfig) -> Result<Option<(Topology, CombinationMatrix)>> {
    if !cfg.algo.needs_network() {
        return Ok(None);
    }
    let topo = match (&cfg.custom_topology, cfg.graph) {
        (Some(t), _) => t.clone(),
        (None, Some(kind)) => build_topology(kind, cfg.n)?,
        (None, None) => {
            return Err(Error::Config(
                "decentralized algorithms need a graph or an edge list".into(),
            ))
        }
    };
    let w = combination_matrix(&topo, &cfg.rule)?;
    Ok(Some((topo, w)))
}

/// One recorded metric row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    /// Iteration index.
    pub k: usize,
    /// Mean squared distance of the agents from the optimum, relative
    /// to the squared optimum norm.
    pub rel_error: f64,
    /// Total squared deviation of the stacked iterates from their
    /// network average.
    pub consensus_error: f64,
    /// Objective gap of the average iterate.
    pub f_gap: f64,
}

/// Everything a run produced: per-repetition metric traces plus the
/// metadata that identifies them in the CSV.
#[derive(Debug, Clone)]
pub struct RunTrace {
    /// Algorithm that produced the trace.
    pub algo: Algo,
    /// Graph label for the CSV (`none` for the centralized baseline).
    pub graph_label: String,
    /// Number of agents.
    pub n: usize,
    /// Stepsize actually used, after auto/tuning resolution.
    pub alpha: f64,
    /// Base seed.
    pub seed: u64,
    /// Recording stride.
    pub record_every: usize,
    /// One metric trace per repetition, in repetition order; all
    /// repetitions record the same iteration grid.
    pub runs: Vec<Vec<Record>>,
    /// Wall-clock duration of each repetition in milliseconds.
    /// Reported on request, never written into the CSV.
    pub wall_ms: Vec<f64>,
}

/// Mean and population standard deviation of each metric across
/// repetitions at one recorded iteration.
#[derive(Debug, Clone, Copy)]
pub struct AggRecord {
    /// Iteration index.
    pub k: usize,
    /// Mean relative error.
    pub rel_mean: f64,
    /// Standard deviation of the relative error.
    pub rel_std: f64,
    /// Mean consensus error.
    pub consensus_mean: f64,
    /// Standard deviation of the consensus error.
    pub consensus_std: f64,
    /// Mean objective gap.
    pub f_gap_mean: f64,
    /// Standard deviation of the objective gap.
    pub f_gap_std: f64,
}

impl RunTrace {
    /// CSV with one row per repetition per recorded iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (1 + self.runs.iter().map(Vec::len).sum::<usize>()));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for (run_id, run) in self.runs.iter().enumerate() {
            for rec in run {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    rec.k,
                    run_id,
                    self.algo,
                    self.graph_label,
                    self.n,
                    self.alpha,
                    rec.rel_error,
                    rec.consensus_error,
                    rec.f_gap
                );
            }
        }
        out
    }

    /// Per-iteration mean and population standard deviation across
    /// repetitions, reduced in repetition order.
    pub fn aggregate(&self) -> Result<Vec<AggRecord>> {
        let first = self
            .runs
            .first()
            .ok_or_else(|| Error::Config("trace holds no repetitions".into()))?;
        for run in &self.runs[1..] {
            if run.len() != first.len() || run.iter().zip(first).any(|(a, b)| a.k != b.k) {
                return Err(Error::Dimension(
                    "repetitions recorded different iteration grids".into(),
                ));
            }
        }
        let r = self.runs.len() as f64;
        let agg = (0..first.len())
            .map(|j| {
                let mean_std = |get: &dyn Fn(&Record) -> f64| {
                    let mean = self.runs.iter().map(|run| get(&run[j])).sum::<f64>() / r;
                    let var = self
                        .runs
                        .iter()
                        .map(|run| {
                            let dev = get(&run[j]) - mean;
                            dev * dev
                        })
                        .sum::<f64>()
                        / r;
                    (mean, var.sqrt())
                };
                let (rel_mean, rel_std) = mean_std(&|x: &Record| x.rel_error);
                let (consensus_mean, consensus_std) = mean_std(&|x: &Record| x.consensus_error);
                let (f_gap_mean, f_gap_std) = mean_std(&|x: &Record| x.f_gap);
                AggRecord {
                    k: first[j].k,
                    rel_mean,
                    rel_std,
                    consensus_mean,
                    consensus_std,
                    f_gap_mean,
                    f_gap_std,
                }
            })
            .collect();
        Ok(agg)
    }

    /// Pre-binned plot data: one aggregated row per recorded
    /// iteration, ready for any plotting tool.
    pub fn plot_csv(&self) -> Result<String> {
        let agg = self.aggregate()?;
        let mut out = String::with_capacity(64 * (agg.len() + 1));
        out.push_str(PLOT_HEADER);
        out.push('\n');
        for a in agg {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                a.k, a.rel_mean, a.rel_std, a.consensus_mean, a.consensus_std, a.f_gap_mean, a.f_gap_std
            );
        }
        Ok(out)
    }
}

/// Run a configured experiment.
///
/// Repetitions execute with parallelism bounded by `max_par` and are
/// reduced in repetition order, so the result is independent of
/// scheduling. When `out`/`plot_out` are set the CSVs are written
/// before returning.
pub fn run(cfg: &RunConfig) -> Result<RunTrace> {
    cfg.validate()?;
    let p = build_problem(cfg)?;
    let net = build_network(cfg)?;
    let alpha = resolve_alpha(cfg, &p, net.as_ref().map(|(_, w)| w))?;
    let graph_label = net
        .as_ref()
        .map_or_else(|| "none".to_string(), |(t, _)| t.kind.to_string());
    let w = net.map(|(_, w)| w);

    let results = map_reps(cfg.max_par, cfg.reps, |rep| {
        single_run(cfg, &p, w.as_ref(), alpha, rep)
    })?;
    let mut runs = Vec::with_capacity(results.len());
    let mut wall_ms = Vec::with_capacity(results.len());
    for (records, ms) in results {
        runs.push(records);
        wall_ms.push(ms);
    }

    let trace = RunTrace {
        algo: cfg.algo,
        graph_label,
        n: cfg.n,
        alpha,
        seed: cfg.seed,
        record_every: cfg.record_every,
        runs,
        wall_ms,
    };
    if let Some(path) = &cfg.out {
        std::fs::write(path, trace.to_csv())?;
    }
    if let Some(path) = &cfg.plot_out {
        std::fs::write(path, trace.plot_csv()?)?;
    }
    Ok(trace)
}

fn resolve_alpha(
    cfg: &RunConfig,
    p: &ProblemSet,
    w: Option<&CombinationMatrix>,
) -> Result<f64> {
    match cfg.alpha {
        StepsizeRule::Fixed(a) => {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::Config(format!(
                    "stepsize must be positive and finite, got {a}"
                )));
            }
            Ok(a)
        }
        StepsizeRule::Auto => {
            let w = w.ok_or_else(|| {
                Error::Config(
                    "the automatic stepsize comes from the network error dynamics; \
                     the centralized baseline needs an explicit stepsize"
                        .into(),
                )
            })?;
            let dec = analysis::decompose_from(w)?;
            if p.mu > 0.0 {
                let mut tc = analysis::sc_constants(p, w, &dec)?;
                analysis::sc_stepsize(&mut tc, cfg.iters)
            } else {
                let mut tc = analysis::convex_constants(p, w, &dec)?;
                analysis::convex_stepsize(&mut tc, cfg.iters, p.x_star.norm_squared())
            }
        }
        StepsizeRule::TuneTo(target) => Ok(tune_stepsize(cfg, target)?.alpha),
    }
}

fn single_run(
    cfg: &RunConfig,
    p: &ProblemSet,
    w: Option<&CombinationMatrix>,
    alpha: f64,
    rep: usize,
) -> Result<(Vec<Record>, f64)> {
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.iters / cfg.record_every + 2);
    {
        let mut record = |k: usize, x: &DMatrix<f64>| -> Result<()> {
            let (rel_error, consensus_error, f_gap) = analysis::iterate_metrics(x, p)?;
            records.push(Record {
                k,
                rel_error,
                consensus_error,
                f_gap,
            });
            Ok(())
        };
        if cfg.deterministic {
            drive(cfg, w, alpha, &DeterministicSource(p), &mut record)?;
        } else {
            let source = StochasticSource {
                problem: p,
                stream: SampleStream::new(cfg.seed.wrapping_add(rep as u64)),
            };
            drive(cfg, w, alpha, &source, &mut record)?;
        }
    }
    Ok((records, start.elapsed().as_secs_f64() * 1e3))
}

fn drive<S, F>(
    cfg: &RunConfig,
    w: Option<&CombinationMatrix>,
    alpha: f64,
    source: &S,
    record: &mut F,
) -> Result<()>
where
    S: GradientSource,
    F: FnMut(usize, &DMatrix<f64>) -> Result<()>,
{
    let iters = cfg.iters;
    let every = cfg.record_every;
    let should = |k: usize| k.is_multiple_of(every) || k == iters;
    let need_w = || {
        w.ok_or_else(|| Error::Config("decentralized algorithms need a combination matrix".into()))
    };
    match cfg.algo {
        Algo::Gt => {
            let w = need_w()?;
            let mut st = GtState::init(DMatrix::zeros(source.n(), source.d()), source)?;
            record(0, &st.x)?;
            for k in 1..=iters {
                st.step(w, source, alpha)?;
                if should(k) {
                    record(k, &st.x)?;
                }
            }
        }
        Algo::GtPd => {
            let w = need_w()?;
            let x0 = DMatrix::zeros(source.n(), source.d());
            record(0, &x0)?;
            let mut st = PdState::init(x0, w, source, alpha)?;
            if should(1) {
                record(1, st.x())?;
            }
            while (st.k() as usize) < iters {
                st.step(w, source)?;
                if should(st.k() as usize) {
                    record(st.k() as usize, st.x())?;
                }
            }
        }
        Algo::Dsgd => {
            let w = need_w()?;
            let mut st = DsgdState::init(DMatrix::zeros(source.n(), source.d()), source)?;
            record(0, &st.x)?;
            for k in 1..=iters {
                st.step(w, source, alpha)?;
                if should(k) {
                    record(k, &st.x)?;
                }
            }
        }
        Algo::Csgd => {
            let lift = |x: &DVector<f64>| DMatrix::from_row_slice(1, x.len(), x.as_slice());
            let mut st = CsgdState::init(DVector::zeros(source.d()), source)?;
            record(0, &lift(&st.x))?;
            for k in 1..=iters {
                st.step(source, alpha)?;
                if should(k) {
                    record(k, &lift(&st.x))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn map_reps<T, F>(max_par: usize, reps: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    match max_par {
        1 => (0..reps).map(job).collect(),
        0 => (0..reps).into_par_iter().map(job).collect(),
        cap => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cap.min(reps))
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {cap}-thread pool: {e}")))?;
            pool.install(|| (0..reps).into_par_iter().map(job).collect())
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn map_reps<T, F>(_max_par: usize, reps: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..reps).map(job).collect()
}

/// One stepsize examined by [`tune_stepsize`].
#[derive(Debug, Clone, Copy)]
pub struct TuneCandidate {
    /// The stepsize.
    pub alpha: f64,
    /// Mean aggregated relative error over the trailing 5% of the
    /// horizon; infinite when the run blew up.
    pub final_error: f64,
    /// First recorded iteration with aggregated relative error at or
    /// under the target.
    pub iters_to_target: Option<usize>,
    /// Iterations the candidate was run for.
    pub horizon: usize,
    /// Whether the run left the finite range.
    pub diverged: bool,
}

/// Outcome of a stepsize grid search.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    /// Largest stepsize whose aggregated final error reached the
    /// target.
    pub alpha: f64,
    /// First recorded iteration at which the selected stepsize's
    /// aggregated relative error crossed the target.
    pub iterations_to_target: usize,
    /// Aggregated tail error of the selected stepsize.
    pub final_error: f64,
    /// Every candidate examined, largest stepsize first.
    pub candidates: Vec<TuneCandidate>,
}

/// Horizon a tuning candidate is judged on.
///
/// For strongly convex problems the transient decays at least
/// geometrically with time constant `1/(mu alpha)`, so sixteen time
/// constants leave a residual factor near 1e-7 — far below any sane
/// target. The floor keeps slow network mixing covered, and the
/// configured budget is never exceeded.
fn candidate_horizon(iters: usize, mu: f64, alpha: f64) -> usize {
    if mu <= 0.0 {
        return iters.max(1);
    }
    let tau = 16.0 / (mu * alpha);
    let k = if tau.is_finite() && tau < 1e18 {
        tau.ceil() as usize
    } else {
        usize::MAX / 2
    };
    k.max(4000).min(iters).max(1)
}

/// Grid-search the largest stepsize whose aggregated final relative
/// error reaches `target`.
///
/// Candidates descend from `1/L` with 2x spacing down to 1e-4, so the
/// scan can stop at the first feasible candidate — by construction the
/// largest feasible stepsize. Each candidate runs for a horizon chosen
/// by [`candidate_horizon`] and is judged on the mean aggregated
/// relative error over the trailing 5% of that horizon.
pub fn tune_stepsize(cfg: &RunConfig, target: f64) -> Result<TuneOutcome> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::Config(format!(
            "tuning target must be positive and finite, got {target}"
        )));
    }
    cfg.validate()?;
    let p = build_problem(cfg)?;

    let mut grid = Vec::new();
    let mut a = 1.0 / p.l_smooth;
    while a >= 1e-4 {
        grid.push(a);
        a *= 0.5;
    }
    if grid.is_empty() {
        grid.push(1.0 / p.l_smooth);
    }

    let mut candidates: Vec<TuneCandidate> = Vec::new();
    for &alpha in &grid {
        let horizon = candidate_horizon(cfg.iters, p.mu, alpha);
        let mut sub = cfg.clone();
        sub.alpha = StepsizeRule::Fixed(alpha);
        sub.iters = horizon;
        sub.out = None;
        sub.plot_out = None;
        let agg = run(&sub)?.aggregate()?;

        let cutoff = horizon - horizon / 20;
        let tail: Vec<f64> = agg
            .iter()
            .filter(|a| a.k >= cutoff)
            .map(|a| a.rel_mean)
            .collect();
        let final_error = if tail.iter().any(|v| !v.is_finite()) {
            f64::INFINITY
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        };
        let diverged = !final_error.is_finite() || final_error > 1e9;
        let iters_to_target = agg.iter().find(|a| a.rel_mean <= target).map(|a| a.k);
        candidates.push(TuneCandidate {
            alpha,
            final_error,
            iters_to_target,
            horizon,
            diverged,
        });

        if !diverged && final_error <= target {
            if let Some(iterations_to_target) = iters_to_target {
                return Ok(TuneOutcome {
                    alpha,
                    iterations_to_target,
                    final_error,
                    candidates,
                });
            }
        }
    }

    let mut msg = format!(
        "no stepsize in [{:.3e}, {:.3e}] reached relative error {:.3e}; candidates:",
        grid.last().unwrap(),
        grid.first().unwrap(),
        target
    );
    for c in &candidates {
        let _ = write!(
            msg,
            "\n  alpha = {:.6e}: final error {:.6e} over {} iterations{}",
            c.alpha,
            c.final_error,
            c.horizon,
            if c.diverged { " (diverged)" } else { "" }
        );
    }
    Err(Error::TuningFailed(msg))
}

/// What [`verify_all`] should exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyScope {
    /// Every section below.
    All,
    /// Combination-matrix contracts on the stock graphs.
    Topology,
    /// Tracking vs primal–dual trajectory equivalence.
    Equivalence,
    /// Stationarity residuals of the primal–dual recursion.
    FixedPoint,
    /// Block decomposition of the error dynamics.
    Decomposition,
    /// Pathwise descent/contraction inequalities on noiseless runs.
    Inequalities,
    /// Contraction of the 2x2 error-recursion matrix.
    Spectral,
}

/// Parse a verification scope name.
pub fn parse_scope(s: &str) -> Result<VerifyScope> {
    match s {
        "all" => Ok(VerifyScope::All),
        "topology" => Ok(VerifyScope::Topology),
        "equivalence" => Ok(VerifyScope::Equivalence),
        "fixed-point" => Ok(VerifyScope::FixedPoint),
        "decomposition" => Ok(VerifyScope::Decomposition),
        "inequalities" => Ok(VerifyScope::Inequalities),
        "spectral" => Ok(VerifyScope::Spectral),
        _ => Err(Error::Parse(format!(
            "unknown verification scope {s:?}; expected all, topology, equivalence, \
             fixed-point, decomposition, inequalities, or spectral"
        ))),
    }
}

/// Printable result of a verification suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    /// One line per check, grouped under section headers.
    pub lines: Vec<String>,
    /// Required checks that passed.
    pub passed: usize,
    /// Required checks that failed.
    pub failed: usize,
}

impl SuiteReport {
    /// True when no required check failed.
    pub fn all_pass(&self) -> bool {
        self.failed == 0
    }

    /// One-line summary suitable for the end of the report.
    pub fn summary(&self) -> String {
        format!(
            "{}: {} passed, {} failed",
            if self.all_pass() { "OK" } else { "FAILED" },
            self.passed,
            self.failed
        )
    }
}

fn push_section(report: &mut SuiteReport, title: &str, checks: Vec<PropertyCheck>) {
    report.lines.push(format!("== {title} =="));
    for c in &checks {
        if c.required {
            if c.pass {
                report.passed += 1;
            } else {
                report.failed += 1;
            }
        }
    }
    let cert = Certification { checks };
    report.lines.extend(cert.lines());
}

/// Run the verification suite: combination-matrix certification,
/// tracking/primal–dual equivalence, fixed-point residuals, the block
/// decomposition, the pathwise descent/contraction inequalities, and
/// the recursion-matrix contraction certificate.
pub fn verify_all(scope: VerifyScope) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        lines: Vec::new(),
        passed: 0,
        failed: 0,
    };
    let want = |s: VerifyScope| scope == VerifyScope::All || scope == s;
    if want(VerifyScope::Topology) {
        push_section(&mut report, "combination-matrix contracts", topology_checks()?);
    }
    if want(VerifyScope::Equivalence) {
        push_section(
            &mut report,
            "tracking vs primal-dual equivalence",
            equivalence_checks()?,
        );
    }
    if want(VerifyScope::FixedPoint) {
        push_section(&mut report, "fixed-point residuals", fixed_point_checks()?);
    }
    if want(VerifyScope::Decomposition) {
        push_section(
            &mut report,
            "error-dynamics decomposition",
            decomposition_checks()?,
        );
    }
    if want(VerifyScope::Inequalities) {
        push_section(
            &mut report,
            "noiseless descent and contraction inequalities",
            inequality_checks()?,
        );
    }
    if want(VerifyScope::Spectral) {
        push_section(
            &mut report,
            "error-recursion contraction certificate",
            spectral_checks()?,
        );
    }
    report.lines.push(report.summary());
    Ok(report)
}

fn topology_checks() -> Result<Vec<PropertyCheck>> {
    let cases: [(GraphKind, usize, WeightRule, bool); 3] = [
        (GraphKind::Ring, 10, WeightRule::Metropolis, false),
        (GraphKind::Exponential, 16, WeightRule::Uniform, false),
        (
            GraphKind::Ring,
            30,
            WeightRule::Lazy(Box::new(WeightRule::Uniform)),
            true,
        ),
    ];
    let mut checks = Vec::new();
    for (kind, n, rule, require_psd) in cases {
        let t = build_topology(kind, n)?;
        let w = combination_matrix(&t, &rule)?;
        for mut c in certify(&w.w, require_psd).checks {
            let tag = format!("{kind}-{n} {rule}");
            c.detail = if c.detail.is_empty() {
                tag
            } else {
                format!("{tag}; {}", c.detail)
            };
            checks.push(c);
        }
    }
    Ok(checks)
}

fn equivalence_checks() -> Result<Vec<PropertyCheck>> {
    let mut checks = Vec::new();
    let alpha = 0.01;
    for (kind, n) in [(GraphKind::Ring, 10usize), (GraphKind::Exponential, 16)] {
        let p = make_linreg(n, 5, 1.0, 0.01, 7 + n as u64)?;
        let t = build_topology(kind, n)?;
        let w = combination_matrix(&t, &WeightRule::Metropolis)?;
        let mut max_dev = 0.0f64;
        for seed in 0..3u64 {
            let source = StochasticSource {
                problem: &p,
                stream: SampleStream::new(100 + seed),
            };
            let x0 = DMatrix::zeros(n, p.d);
            let mut gt = GtState::init(x0.clone(), &source)?;
            let mut pd = PdState::init(x0, &w, &source, alpha)?;
            for _ in 0..50 {
                gt.step(&w, &source, alpha)?;
                max_dev = max_dev.max((&gt.x - pd.x()).amax());
                if gt.k < 50 {
                    pd.step(&w, &source)?;
                }
            }
        }
        checks.push(PropertyCheck {
            name: "gt-pd-equivalence",
            pass: max_dev <= 1e-10,
            measured: max_dev,
            bound: 1e-10,
            required: true,
            detail: format!("{kind}-{n}, 3 seeds x 50 iterations, shared sample streams"),
        });
    }
    Ok(checks)
}

fn fixed_point_checks() -> Result<Vec<PropertyCheck>> {
    let p = make_linreg(30, 5, 1.0, 0.01, 11)?;
    let t = build_topology(GraphKind::Ring, 30)?;
    let w = combination_matrix(&t, &WeightRule::Uniform)?;
    let mut checks = Vec::new();
    for alpha in [1e-3, 1e-2] {
        let fp = analysis::solve_fixed_point(&p, &w, alpha)?;
        let residual = fp.residual_primal.max(fp.residual_dual);
        checks.push(PropertyCheck {
            name: "fixed-point-residuals",
            pass: residual <= 1e-8,
            measured: residual,
            bound: 1e-8,
            required: true,
            detail: format!("linreg-30 on ring-30, alpha = {alpha}"),
        });
    }
    Ok(checks)
}

fn decomposition_checks() -> Result<Vec<PropertyCheck>> {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let mut max_recon = 0.0f64;
    let mut max_norm_excess = f64::NEG_INFINITY;
    for _ in 0..50 {
        let m = rng.gen_range(2..=12);
        let eigs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..0.999)).collect();
        let lambda = eigs.iter().fold(0.0f64, |a, &e| a.max(e));
        let dec = analysis::decompose_g(&eigs, lambda)?;
        max_recon = max_recon.max(dec.reconstruction_error());
        max_norm_excess = max_norm_excess.max(dec.gamma - (1.0 + lambda) / 2.0);
    }
    Ok(vec![
        PropertyCheck {
            name: "block-reconstruction",
            pass: max_recon <= 1e-10,
            measured: max_recon,
            bound: 1e-10,
            required: true,
            detail: "50 random spectra, worst reconstruction error".into(),
        },
        PropertyCheck {
            name: "transformed-norm-bound",
            pass: max_norm_excess <= 1e-12,
            measured: max_norm_excess,
            bound: 1e-12,
            required: true,
            detail: "50 random spectra, worst excess of the dynamics norm over (1+lambda)/2".into(),
        },
    ])
}

fn inequality_checks() -> Result<Vec<PropertyCheck>> {
    let t = build_topology(GraphKind::Ring, 10)?;
    let w = combination_matrix(&t, &WeightRule::Uniform)?;
    let dec = analysis::decompose_from(&w)?;
    let mut checks = Vec::new();
    for seed in [1u64, 2, 3] {
        let p = make_random_quadratic(10, 3, seed)?;
        let alpha = 1.0 / (8.0 * p.l_smooth);
        let source = DeterministicSource(&p);
        let trace =
            analysis::record_pd_run(&w, &source, DMatrix::zeros(10, 3), alpha, 200)?;
        let rep = analysis::check_coupled_inequalities(&trace, &p, &w, &dec, alpha)?;
        checks.push(PropertyCheck {
            name: "coupled-inequalities",
            pass: rep.is_clean(),
            measured: rep.max_excess,
            bound: 0.0,
            required: true,
            detail: format!(
                "quadratic seed {seed} on ring-10, 200 iterations at alpha = 1/(8L); {} violations",
                rep.violations.len()
            ),
        });
    }

    // The inequalities are only claimed below 1/(4L); a stepsize of 1/L
    // must be turned away by the precondition gate, not checked.
    let p = make_random_quadratic(10, 3, 1)?;
    let alpha = 1.0 / p.l_smooth;
    let source = DeterministicSource(&p);
    let trace = analysis::record_pd_run(&w, &source, DMatrix::zeros(10, 3), alpha, 1)?;
    let gated = matches!(
        analysis::check_coupled_inequalities(&trace, &p, &w, &dec, alpha),
        Err(Error::Mode(_))
    );
    checks.push(PropertyCheck {
        name: "stepsize-gate",
        pass: gated,
        measured: alpha,
        bound: 0.25 / p.l_smooth,
        required: true,
        detail: "alpha = 1/L is rejected by the stepsize precondition".into(),
    });
    Ok(checks)
}

fn spectral_checks() -> Result<Vec<PropertyCheck>> {
    let cases: [(&str, ProblemSet, Topology, WeightRule); 3] = [
        (
            "quadratic-8 on ring-8 uniform",
            make_random_quadratic(8, 3, 3)?,
            build_topology(GraphKind::Ring, 8)?,
            WeightRule::Uniform,
        ),
        (
            "quadratic-12 on exponential-12 uniform",
            make_random_quadratic(12, 4, 4)?,
            build_topology(GraphKind::Exponential, 12)?,
            WeightRule::Uniform,
        ),
        (
            "linreg-10 on ring-10 metropolis",
            make_linreg(10, 5, 1.0, 0.01, 5)?,
            build_topology(GraphKind::Ring, 10)?,
            WeightRule::Metropolis,
        ),
    ];
    let mut checks = Vec::new();
    for (label, p, t, rule) in cases {
        let w = combination_matrix(&t, &rule)?;
        let dec = analysis::decompose_from(&w)?;
        let tc = analysis::sc_constants(&p, &w, &dec)?;
        let cap = analysis::contraction_stepsize_cap(&tc);
        let mut max_excess = f64::NEG_INFINITY;
        let mut all_admissible = true;
        for j in 1..=20 {
            // Scale by the exact fraction so the endpoint lands on the
            // cap itself instead of one rounding above it.
            let alpha = cap * (j as f64 / 20.0);
            let sc = analysis::spectral_check(&tc, alpha)?;
            all_admissible &= sc.admissible;
            max_excess = max_excess.max(sc.one_norm - sc.contraction_bound);
        }
        checks.push(PropertyCheck {
            name: "recursion-contraction",
            pass: all_admissible && max_excess <= 1e-12,
            measured: max_excess,
            bound: 1e-12,
            required: true,
            detail: format!("{label}, 20 stepsizes up to the admissibility cap"),
        });
    }
    Ok(checks)
}

/// Text lines for the `spectral` subcommand: mixing data plus the
/// certification of the combination matrix.
pub fn spectral_report(label: &str, w: &CombinationMatrix) -> Vec<String> {
    let n = w.n();
    let mut lines = vec![
        format!("graph {label}: n = {n}"),
        format!("  mixing rate lambda     = {:.6}", w.lambda),
        format!("  spectral gap 1-lambda  = {:.6}", w.gap()),
        format!(
            "  eigenvalues in [{:.6}, {:.6}]",
            w.eigvals[n - 1],
            w.eigvals[0]
        ),
    ];
    match analysis::decompose_from(w) {
        Ok(dec) => lines.push(format!(
            "  transformed dynamics: gamma = {:.6}, c1 = {:.4}, c2 = {:.4}",
            dec.gamma, dec.c1, dec.c2
        )),
        Err(e) => lines.push(format!("  transformed dynamics unavailable: {e}")),
    }
    lines.push("  certification:".into());
    for l in certify(&w.w, false).lines() {
        lines.push(format!("    {l}"));
    }
    lines
}

/// Text lines for the `fixed-point` subcommand.
pub fn fixed_point_report(
    p: &ProblemSet,
    w: &CombinationMatrix,
    alpha: f64,
) -> Result<Vec<String>> {
    let fp = analysis::solve_fixed_point(p, w, alpha)?;
    Ok(vec![
        format!("fixed point of the primal-dual recursion at alpha = {alpha}"),
        format!("  primal residual  = {:.6e}", fp.residual_primal),
        format!("  dual residual    = {:.6e}", fp.residual_dual),
        format!("  ||z*||           = {:.6e}", fp.z_star.norm()),
        format!("  ||grad*||        = {:.6e}", fp.grad_star.norm()),
    ])
}

/// A config fragment: every field optional, mirroring the CLI flags.
/// Fragments from a config file and from the command line are merged
/// with [`PartialConfig::overlay`] (later fragments win) and resolved
/// into a [`RunConfig`] at the end.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialConfig {
    /// `algo = "gt" | "gt_pd" | "dsgd" | "csgd"`.
    pub algo: Option<Algo>,
    /// `graph = "ring" | "exponential" | "complete"`.
    pub graph: Option<GraphKind>,
    /// `n = <agents>`.
    pub n: Option<usize>,
    /// `rule = "uniform" | "metropolis"`.
    pub rule: Option<WeightRule>,
    /// `lazy = true` wraps the rule in the PSD-shifting form.
    pub lazy: Option<bool>,
    /// `problem = "linreg" | "logreg" | "quadratic"`.
    pub problem: Option<ProblemKind>,
    /// `d = <dimension>`.
    pub d: Option<usize>,
    /// `sigma-v2 = <heterogeneity variance>`.
    pub sigma_v2: Option<f64>,
    /// `sigma-n2 = <label-noise variance>`.
    pub sigma_n2: Option<f64>,
    /// `samples-per-agent = <pool size>`.
    pub samples_per_agent: Option<usize>,
    /// `alpha = <stepsize>`.
    pub alpha: Option<f64>,
    /// `auto = true` selects the theory stepsize.
    pub auto: Option<bool>,
    /// `tune-to = <target relative error>`.
    pub tune_to: Option<f64>,
    /// `iters = <iterations>`.
    pub iters: Option<usize>,
    /// `reps = <repetitions>`.
    pub reps: Option<usize>,
    /// `seed = <base seed>`.
    pub seed: Option<u64>,
    /// `deterministic = true` for exact gradients.
    pub deterministic: Option<bool>,
    /// `record-every = <stride>`.
    pub record_every: Option<usize>,
    /// `max-par = <cap>`.
    pub max_par: Option<usize>,
    /// `edge-list = <path>`; read and parsed by the caller.
    pub edge_list: Option<String>,
    /// `out = <path>` for the per-run CSV.
    pub out: Option<String>,
    /// `plot-out = <path>` for the aggregated CSV.
    pub plot_out: Option<String>,
}

impl PartialConfig {
    /// Merge two fragments; fields set in `over` take precedence.
    pub fn overlay(base: PartialConfig, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            algo: over.algo.or(base.algo),
            graph: over.graph.or(base.graph),
            n: over.n.or(base.n),
            rule: over.rule.or(base.rule),
            lazy: over.lazy.or(base.lazy),
            problem: over.problem.or(base.problem),
            d: over.d.or(base.d),
            sigma_v2: over.sigma_v2.or(base.sigma_v2),
            sigma_n2: over.sigma_n2.or(base.sigma_n2),
            samples_per_agent: over.samples_per_agent.or(base.samples_per_agent),
            alpha: over.alpha.or(base.alpha),
            auto: over.auto.or(base.auto),
            tune_to: over.tune_to.or(base.tune_to),
            iters: over.iters.or(base.iters),
            reps: over.reps.or(base.reps),
            seed: over.seed.or(base.seed),
            deterministic: over.deterministic.or(base.deterministic),
            record_every: over.record_every.or(base.record_every),
            max_par: over.max_par.or(base.max_par),
            edge_list: over.edge_list.or(base.edge_list),
            out: over.out.or(base.out),
            plot_out: over.plot_out.or(base.plot_out),
        }
    }

    /// Resolve the fragment into a runnable config on top of the
    /// defaults. `custom` carries a topology parsed from the
    /// `edge-list` path when the caller read one.
    pub fn run_config(&self, custom: Option<Topology>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(a) = self.algo {
            cfg.algo = a;
        }
        if let Some(n) = self.n {
            cfg.n = n;
        } else if let Some(t) = &custom {
            cfg.n = t.n;
        }
        if let Some(p) = self.problem {
            cfg.problem = p;
        }
        if let Some(d) = self.d {
            cfg.d = d;
        }
        if let Some(v) = self.sigma_v2 {
            cfg.sigma_v2 = v;
        }
        if let Some(v) = self.sigma_n2 {
            cfg.sigma_n2 = v;
        }
        if let Some(m) = self.samples_per_agent {
            cfg.samples_per_agent = m;
        }
        if let Some(k) = self.iters {
            cfg.iters = k;
        }
        if let Some(r) = self.reps {
            cfg.reps = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.deterministic {
            cfg.deterministic = f;
        }
        if let Some(e) = self.record_every {
            cfg.record_every = e;
        }
        if let Some(m) = self.max_par {
            cfg.max_par = m;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(PathBuf::from(o));
        }
        if let Some(o) = &self.plot_out {
            cfg.plot_out = Some(PathBuf::from(o));
        }

        if self.graph.is_some() && custom.is_some() {
            return Err(Error::Config(
                "give either a named graph or an edge list, not both".into(),
            ));
        }
        if cfg.algo.needs_network() {
            if let Some(g) = self.graph {
                cfg.graph = Some(g);
            }
            if custom.is_some() {
                cfg.graph = None;
            }
            cfg.custom_topology = custom;
        } else {
            if self.graph.is_some()
                || custom.is_some()
                || self.rule.is_some()
                || self.lazy == Some(true)
            {
                return Err(Error::Config(
                    "the centralized baseline has no network; drop the graph, rule, lazy, \
                     and edge-list options"
                        .into(),
                ));
            }
            cfg.graph = None;
        }
        if let Some(r) = &self.rule {
            cfg.rule = r.clone();
        }
        if self.lazy == Some(true) {
            cfg.rule = WeightRule::Lazy(Box::new(cfg.rule.clone()));
        }

        let picked = usize::from(self.alpha.is_some())
            + usize::from(self.auto == Some(true))
            + usize::from(self.tune_to.is_some());
        if picked > 1 {
            return Err(Error::Config(
                "choose exactly one of alpha, auto, and tune-to".into(),
            ));
        }
        if let Some(a) = self.alpha {
            cfg.alpha = StepsizeRule::Fixed(a);
        }
        if self.auto == Some(true) {
            cfg.alpha = StepsizeRule::Auto;
        }
        if let Some(t) = self.tune_to {
            cfg.alpha = StepsizeRule::TuneTo(t);
        }

        cfg.validate()?;
        Ok(cfg)
    }
}

fn str_val(key: &str, v: &toml::Value) -> Result<String> {
    v.as_str().map(str::to_string).ok_or_else(|| {
        Error::Parse(format!("config key {key:?} must be a string, got {v}"))
    })
}

fn usize_val(key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| {
            Error::Parse(format!(
                "config key {key:?} must be a nonnegative integer, got {v}"
            ))
        })
}

fn u64_val(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| {
            Error::Parse(format!(
                "config key {key:?} must be a nonnegative integer, got {v}"
            ))
        })
}

fn f64_val(key: &str, v: &toml::Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| Error::Parse(format!("config key {key:?} must be a number, got {v}")))
}

fn bool_val(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Parse(format!("config key {key:?} must be true or false, got {v}")))
}

/// Parse a flat key-value config file. Keys are spelled exactly like
/// the command-line flags (`sigma-v2 = 1.0`); unknown keys are
/// rejected so typos cannot silently fall back to defaults.
pub fn config_from_text(text: &str) -> Result<PartialConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Parse(format!("config file: {e}")))?;
    let mut pc = PartialConfig::default();
    for (key, value) in &table {
        match key.as_str() {
            "algo" => pc.algo = Some(parse_algo(&str_val(key, value)?)?),
            "graph" => pc.graph = Some(parse_graph(&str_val(key, value)?)?),
            "n" => pc.n = Some(usize_val(key, value)?),
            "rule" => pc.rule = Some(parse_rule(&str_val(key, value)?)?),
            "lazy" => pc.lazy = Some(bool_val(key, value)?),
            "problem" => pc.problem = Some(parse_problem(&str_val(key, value)?)?),
            "d" => pc.d = Some(usize_val(key, value)?),
            "sigma-v2" => pc.sigma_v2 = Some(f64_val(key, value)?),
            "sigma-n2" => pc.sigma_n2 = Some(f64_val(key, value)?),
            "samples-per-agent" => pc.samples_per_agent = Some(usize_val(key, value)?),
            "alpha" => pc.alpha = Some(f64_val(key, value)?),
            "auto" => pc.auto = Some(bool_val(key, value)?),
            "tune-to" => pc.tune_to = Some(f64_val(key, value)?),
            "iters" => pc.iters = Some(usize_val(key, value)?),
            "reps" => pc.reps = Some(usize_val(key, value)?),
            "seed" => pc.seed = Some(u64_val(key, value)?),
            "deterministic" => pc.deterministic = Some(bool_val(key, value)?),
            "record-every" => pc.record_every = Some(usize_val(key, value)?),
            "max-par" => pc.max_par = Some(usize_val(key, value)?),
            "edge-list" => pc.edge_list = Some(str_val(key, value)?),
            "out" => pc.out = Some(str_val(key, value)?),
            "plot-out" => pc.plot_out = Some(str_val(key, value)?),
            _ => {
                return Err(Error::Parse(format!(
                    "unknown config key {key:?}"
                )))
            }
        }
    }
    Ok(pc)
}
