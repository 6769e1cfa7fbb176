//! Command-line interface: experiment runs, graph diagnostics, the
//! verification suite, stepsize tuning, and fixed-point reports.
//!
//! Status text goes to stderr; machine-readable output (CSV, report
//! lines) goes to stdout so it can be piped or redirected.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gtlab::harness::{
    self, build_network, build_problem, config_from_text, parse_algo, parse_graph, parse_problem,
    parse_rule, parse_scope, tune_stepsize, verify_all, PartialConfig, RunConfig, StepsizeRule,
};
use gtlab::topology::{build_topology, combination_matrix, parse_edge_list, Topology, WeightRule};
use gtlab::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "gtlab",
    version,
    about = "Simulation lab for gradient-tracking methods on static networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run an experiment and emit a CSV trace (stdout unless --out).
    Run(RunFlags),
    /// Print mixing diagnostics and the certification for a graph.
    Spectral(SpectralFlags),
    /// Run the verification suite; exits nonzero on any failure.
    Verify {
        /// all, topology, equivalence, fixed-point, decomposition,
        /// inequalities, or spectral.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Grid-search the largest stepsize reaching a target error.
    Tune(TuneFlags),
    /// Solve the primal-dual fixed point and report its residuals.
    FixedPoint(RunFlags),
}

/// Flags shared by `run`, `tune`, and `fixed-point`. Every flag is
/// optional; unset values fall back to the config file (--config) and
/// then to the built-in defaults.
#[derive(Debug, Args)]
struct RunFlags {
    /// Algorithm: gt, gt_pd, dsgd, or csgd.
    #[arg(long)]
    algo: Option<String>,
    /// Graph family: ring, exponential, or complete.
    #[arg(long)]
    graph: Option<String>,
    /// Number of agents.
    #[arg(long)]
    n: Option<usize>,
    /// Weight rule: uniform or metropolis.
    #[arg(long)]
    rule: Option<String>,
    /// Wrap the weight rule in the PSD-shifting lazy form.
    #[arg(long)]
    lazy: bool,
    /// Problem family: linreg, logreg, or quadratic.
    #[arg(long)]
    problem: Option<String>,
    /// Dimension of the shared variable.
    #[arg(long)]
    d: Option<usize>,
    /// Heterogeneity variance of the local optima.
    #[arg(long = "sigma-v2")]
    sigma_v2: Option<f64>,
    /// Label-noise variance (linreg).
    #[arg(long = "sigma-n2")]
    sigma_n2: Option<f64>,
    /// Sample-pool size per agent (logreg).
    #[arg(long = "samples-per-agent")]
    samples_per_agent: Option<usize>,
    /// Fixed stepsize.
    #[arg(long, conflicts_with_all = ["auto", "tune_to"])]
    alpha: Option<f64>,
    /// Let the rate theory pick the stepsize for the horizon.
    #[arg(long, conflicts_with = "tune_to")]
    auto: bool,
    /// Tune the stepsize to reach this final relative error.
    #[arg(long = "tune-to")]
    tune_to: Option<f64>,
    /// Iterations per repetition.
    #[arg(long)]
    iters: Option<usize>,
    /// Number of repetitions (repetition r draws samples from seed + r).
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use exact gradients (the sigma = 0 mode).
    #[arg(long)]
    deterministic: bool,
    /// Record metrics every this many iterations.
    #[arg(long = "record-every")]
    record_every: Option<usize>,
    /// Cap on concurrently running repetitions (0 = one per CPU).
    #[arg(long = "max-par")]
    max_par: Option<usize>,
    /// Topology from an edge-list file: one "i j" pair per line,
    /// 0-indexed, '#' comments allowed.
    #[arg(long = "edge-list")]
    edge_list: Option<PathBuf>,
    /// Write the per-run CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the aggregated mean/std CSV here.
    #[arg(long = "plot-out")]
    plot_out: Option<PathBuf>,
    /// Flat key-value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TuneFlags {
    #[command(flatten)]
    run: RunFlags,
    /// Target final relative error the tuned stepsize must reach.
    #[arg(long)]
    target: f64,
}

#[derive(Debug, Args)]
struct SpectralFlags {
    /// Graph family: ring, exponential, or complete.
    #[arg(long, default_value = "ring", conflicts_with = "edge_list")]
    graph: String,
    /// Number of nodes.
    #[arg(long, default_value_t = 30)]
    n: usize,
    /// Weight rule: uniform or metropolis.
    #[arg(long, default_value = "uniform")]
    rule: String,
    /// Wrap the weight rule in the PSD-shifting lazy form.
    #[arg(long)]
    lazy: bool,
    /// Topology from an edge-list file instead of a named family.
    #[arg(long = "edge-list")]
    edge_list: Option<PathBuf>,
}

impl RunFlags {
    fn to_partial(&self) -> Result<PartialConfig> {
        let mut pc = PartialConfig {
            n: self.n,
            d: self.d,
            sigma_v2: self.sigma_v2,
            sigma_n2: self.sigma_n2,
            samples_per_agent: self.samples_per_agent,
            alpha: self.alpha,
            tune_to: self.tune_to,
            iters: self.iters,
            reps: self.reps,
            seed: self.seed,
            record_every: self.record_every,
            max_par: self.max_par,
            ..PartialConfig::default()
        };
        if let Some(s) = &self.algo {
            pc.algo = Some(parse_algo(s)?);
        }
        if let Some(s) = &self.graph {
            pc.graph = Some(parse_graph(s)?);
        }
        if let Some(s) = &self.rule {
            pc.rule = Some(parse_rule(s)?);
        }
        if let Some(s) = &self.problem {
            pc.problem = Some(parse_problem(s)?);
        }
        // A boolean flag can only be switched on here; leaving it out
        // keeps whatever the config file says.
        if self.lazy {
            pc.lazy = Some(true);
        }
        if self.auto {
            pc.auto = Some(true);
        }
        if self.deterministic {
            pc.deterministic = Some(true);
        }
        if let Some(p) = &self.edge_list {
            pc.edge_list = Some(p.to_string_lossy().into_owned());
        }
        if let Some(p) = &self.out {
            pc.out = Some(p.to_string_lossy().into_owned());
        }
        if let Some(p) = &self.plot_out {
            pc.plot_out = Some(p.to_string_lossy().into_owned());
        }
        Ok(pc)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file_pc = match &self.config {
            Some(path) => config_from_text(&std::fs::read_to_string(path)?)?,
            None => PartialConfig::default(),
        };
        let merged = PartialConfig::overlay(file_pc, self.to_partial()?);
        let custom: Option<Topology> = match &merged.edge_list {
            Some(path) => Some(parse_edge_list(&std::fs::read_to_string(path)?)?),
            None => None,
        };
        merged.run_config(custom)
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Write to stdout, tolerating a closed pipe (`gtlab ... | head`).
/// Returns false once the reader is gone so callers can stop early.
fn emit(text: &str) -> bool {
    use std::io::Write;
    std::io::stdout().lock().write_all(text.as_bytes()).is_ok()
}

fn emit_lines<'a>(lines: impl IntoIterator<Item = &'a String>) {
    for line in lines {
        if !emit(line) || !emit("\n") {
            return;
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run(flags) => cmd_run(&flags),
        Cmd::Spectral(flags) => cmd_spectral(&flags),
        Cmd::Verify { scope } => cmd_verify(&scope),
        Cmd::Tune(flags) => cmd_tune(&flags),
        Cmd::FixedPoint(flags) => cmd_fixed_point(&flags),
    }
}

fn cmd_run(flags: &RunFlags) -> Result<ExitCode> {
    let cfg = flags.resolve()?;
    let trace = harness::run(&cfg)?;
    let mean_ms = trace.wall_ms.iter().sum::<f64>() / trace.wall_ms.len() as f64;
    eprintln!(
        "{} on {} (n = {}): alpha = {}, {} repetitions x {} iterations, {:.1} ms/run",
        trace.algo, trace.graph_label, trace.n, trace.alpha, cfg.reps, cfg.iters, mean_ms
    );
    match &cfg.out {
        Some(path) => eprintln!("trace written to {}", path.display()),
        None => {
            emit(&trace.to_csv());
        }
    }
    if let Some(path) = &cfg.plot_out {
        eprintln!("plot data written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_spectral(flags: &SpectralFlags) -> Result<ExitCode> {
    let (topo, label) = match &flags.edge_list {
        Some(path) => {
            let t = parse_edge_list(&std::fs::read_to_string(path)?)?;
            let label = format!("custom-{}", t.n);
            (t, label)
        }
        None => {
            let kind = parse_graph(&flags.graph)?;
            (build_topology(kind, flags.n)?, format!("{kind}-{}", flags.n))
        }
    };
    let mut rule = parse_rule(&flags.rule)?;
    if flags.lazy {
        rule = WeightRule::Lazy(Box::new(rule));
    }
    let w = combination_matrix(&topo, &rule)?;
    emit_lines(&harness::spectral_report(&format!("{label} ({rule})"), &w));
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(scope: &str) -> Result<ExitCode> {
    let report = verify_all(parse_scope(scope)?)?;
    emit_lines(&report.lines);
    Ok(if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_tune(flags: &TuneFlags) -> Result<ExitCode> {
    let cfg = flags.run.resolve()?;
    let outcome = tune_stepsize(&cfg, flags.target)?;
    let mut lines = vec![
        format!("tuned alpha = {}", outcome.alpha),
        format!("iterations to target = {}", outcome.iterations_to_target),
        format!("final error = {:.6e}", outcome.final_error),
        "candidates (largest stepsize first):".to_string(),
    ];
    for c in &outcome.candidates {
        let reached = match c.iters_to_target {
            Some(k) => format!("target at k = {k}"),
            None => "target not reached".to_string(),
        };
        lines.push(format!(
            "  alpha = {:.6e}: final error {:.6e} over {} iterations, {}{}",
            c.alpha,
            c.final_error,
            c.horizon,
            reached,
            if c.diverged { " (diverged)" } else { "" }
        ));
    }
    emit_lines(&lines);
    Ok(ExitCode::SUCCESS)
}

fn cmd_fixed_point(flags: &RunFlags) -> Result<ExitCode> {
    let cfg = flags.resolve()?;
    let alpha = match cfg.alpha {
        StepsizeRule::Fixed(a) => a,
        _ => {
            return Err(Error::Config(
                "the fixed point is defined for one explicit stepsize; pass --alpha".into(),
            ))
        }
    };
    let p = build_problem(&cfg)?;
    let (_, w) = build_network(&cfg)?.ok_or_else(|| {
        Error::Config("the fixed point lives on a network; the centralized baseline has none".into())
    })?;
    emit_lines(&harness::fixed_point_report(&p, &w, alpha)?);
    Ok(ExitCode::SUCCESS)
}
