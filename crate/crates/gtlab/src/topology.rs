//! Network graphs, combination matrices, and their spectral objects.
//!
//! A [`Topology`] is an undirected connected graph with self-loops. A
//! [`CombinationMatrix`] is a symmetric doubly-stochastic weight matrix
//! built on top of it, together with the spectral data used by the
//! analysis module: the mixing rate, the sorted eigenvalues, and an
//! orthonormal basis of the mean-zero subspace.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Supported graph families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    /// Cycle: node `i` is adjacent to `i ± 1 (mod n)`.
    Ring,
    /// Circulant with hop set `{2^j : 2^j <= n/2}`: node `i` is adjacent
    /// to `i ± 2^j (mod n)` for every hop in the set.
    Exponential,
    /// Every pair of nodes adjacent.
    Complete,
    /// Graph ingested from an edge list.
    Custom,
}

impl std::fmt::Display for GraphKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GraphKind::Ring => "ring",
            GraphKind::Exponential => "exponential",
            GraphKind::Complete => "complete",
            GraphKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Undirected connected graph with self-loops on every node.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Number of nodes.
    pub n: usize,
    /// Family this graph was built from.
    pub kind: GraphKind,
    /// Symmetric boolean adjacency; `adjacency[(i, i)]` is always true.
    pub adjacency: DMatrix<bool>,
}

impl Topology {
    /// Nodes adjacent to `i`, including `i` itself.
    pub fn closed_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.adjacency[(i, j)]).collect()
    }

    /// Degree of `i` counting the self-loop.
    pub fn closed_degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.adjacency[(i, j)]).count()
    }

    /// Degree of `i` excluding the self-loop.
    pub fn open_degree(&self, i: usize) -> usize {
        self.closed_degree(i) - 1
    }

    /// True when all closed degrees are equal.
    pub fn is_regular(&self) -> bool {
        let d0 = self.closed_degree(0);
        (1..self.n).all(|i| self.closed_degree(i) == d0)
    }

    /// Breadth-first reachability of every node from node 0.
    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for (j, seen_j) in seen.iter_mut().enumerate() {
                if self.adjacency[(i, j)] && !*seen_j {
                    *seen_j = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Build one of the named graph families.
///
/// The exponential family uses hop distances `2^0, 2^1, ...` capped at
/// `n/2`, applied in both directions so adjacency stays symmetric.
pub fn build_topology(kind: GraphKind, n: usize) -> Result<Topology> {
    if n == 0 {
        return Err(Error::InvalidSize("graph needs at least one node".into()));
    }
    let mut adj = DMatrix::from_element(n, n, false);
    for i in 0..n {
        adj[(i, i)] = true;
    }
    match kind {
        GraphKind::Ring => {
            for i in 0..n {
                adj[(i, (i + 1) % n)] = true;
                adj[((i + 1) % n, i)] = true;
            }
        }
        GraphKind::Exponential => {
            let mut hop = 1usize;
            while hop <= n / 2 {
                for i in 0..n {
                    let j = (i + hop) % n;
                    adj[(i, j)] = true;
                    adj[(j, i)] = true;
                }
                hop *= 2;
            }
        }
        GraphKind::Complete => {
            adj.fill(true);
        }
        GraphKind::Custom => {
            return Err(Error::Config(
                "custom topologies are built from an edge list, not by name".into(),
            ));
        }
    }
    Ok(Topology {
        n,
        kind,
        adjacency: adj,
    })
}

/// Parse an edge-list text: one `i j` pair per line, 0-indexed,
/// undirected. Blank lines and lines starting with `#` are skipped;
/// self-loops are implicit. The node count is `max index + 1`.
pub fn parse_edge_list(text: &str) -> Result<Topology> {
    let mut edges = Vec::new();
    let mut max_node = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Parse(format!(
                    "edge list line {}: expected exactly two node indices, got {line:?}",
                    lineno + 1
                )))
            }
        };
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::Parse(format!(
                    "edge list line {}: invalid node index {s:?}",
                    lineno + 1
                ))
            })
        };
        let (i, j) = (parse(a)?, parse(b)?);
        max_node = max_node.max(i).max(j);
        edges.push((i, j));
    }
    if edges.is_empty() {
        return Err(Error::InvalidSize("edge list has no edges".into()));
    }
    let n = max_node + 1;
    let mut adj = DMatrix::from_element(n, n, false);
    for i in 0..n {
        adj[(i, i)] = true;
    }
    for (i, j) in edges {
        adj[(i, j)] = true;
        adj[(j, i)] = true;
    }
    let t = Topology {
        n,
        kind: GraphKind::Custom,
        adjacency: adj,
    };
    if !t.is_connected() {
        return Err(Error::NotPrimitive(
            "edge list describes a disconnected graph".into(),
        ));
    }
    Ok(t)
}

/// Weight assignment rules for a topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightRule {
    /// `w_ij = 1 / |closed neighborhood|`; requires a regular graph.
    Uniform,
    /// `w_ij = 1 / (1 + max(deg_i, deg_j))` off-diagonal, diagonal takes
    /// the slack; works on irregular graphs.
    Metropolis,
    /// `(I + W)/2` on top of an inner rule; shifts the spectrum into
    /// `[0, 1]` so the matrix is positive semidefinite.
    Lazy(Box<WeightRule>),
}

impl std::fmt::Display for WeightRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightRule::Uniform => f.write_str("uniform"),
            WeightRule::Metropolis => f.write_str("metropolis"),
            WeightRule::Lazy(inner) => write!(f, "lazy({inner})"),
        }
    }
}

fn raw_weights(t: &Topology, rule: &WeightRule) -> Result<DMatrix<f64>> {
    let n = t.n;
    match rule {
        WeightRule::Uniform => {
            if !t.is_regular() {
                return Err(Error::WeightRule(
                    "uniform weights need a regular graph; use the metropolis rule".into(),
                ));
            }
            let k = t.closed_degree(0) as f64;
            let mut w = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if t.adjacency[(i, j)] {
                        w[(i, j)] = 1.0 / k;
                    }
                }
            }
            Ok(w)
        }
        WeightRule::Metropolis => {
            let deg: Vec<usize> = (0..n).map(|i| t.open_degree(i)).collect();
            let mut w = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut off_sum = 0.0;
                for j in 0..n {
                    if i != j && t.adjacency[(i, j)] {
                        let wij = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
                        w[(i, j)] = wij;
                        off_sum += wij;
                    }
                }
                w[(i, i)] = 1.0 - off_sum;
            }
            Ok(w)
        }
        WeightRule::Lazy(inner) => {
            let mut w = raw_weights(t, inner)?;
            w *= 0.5;
            for i in 0..n {
                w[(i, i)] += 0.5;
            }
            Ok(w)
        }
    }
}

/// Symmetric doubly-stochastic weight matrix with its spectral data.
///
/// Invariants for matrices produced by [`combination_matrix`] and
/// [`CombinationMatrix::from_matrix`]: row and column sums are 1 within
/// 1e-12, the matrix is symmetric within 1e-12, `eigvals` is sorted
/// descending with `eigvals[0] = 1`, `u_hat` has orthonormal columns
/// spanning the mean-zero subspace, and `lambda < 1`.
#[derive(Debug, Clone)]
pub struct CombinationMatrix {
    /// The weight matrix itself.
    pub w: DMatrix<f64>,
    /// Mixing rate: spectral norm of `W - (1/n) 1 1^T`, i.e. the largest
    /// eigenvalue magnitude away from the consensus direction.
    pub lambda: f64,
    /// All eigenvalues, sorted descending.
    pub eigvals: DVector<f64>,
    /// `n x (n-1)` orthonormal basis of the mean-zero subspace, column
    /// `i` paired with `lambda_sub[i]`.
    pub u_hat: DMatrix<f64>,
    /// Eigenvalues away from the consensus direction (`eigvals[1..]`).
    pub lambda_sub: DVector<f64>,
}

impl CombinationMatrix {
    /// Number of agents.
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Spectral gap `1 - lambda`.
    pub fn gap(&self) -> f64 {
        1.0 - self.lambda
    }

    /// Build the spectral data for an explicitly supplied matrix.
    ///
    /// The matrix must be square, symmetric within 1e-12, and doubly
    /// stochastic within 1e-12, and its support must be connected with a
    /// positive spectral gap — the same contract [`combination_matrix`]
    /// guarantees by construction.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::Dimension(format!(
                "weight matrix must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        let n = w.nrows();
        if n == 0 {
            return Err(Error::InvalidSize("weight matrix is empty".into()));
        }
        let sym_dev = symmetry_deviation(&w);
        if sym_dev > 1e-12 {
            return Err(Error::WeightRule(format!(
                "matrix is not symmetric (max |w_ij - w_ji| = {sym_dev:.3e})"
            )));
        }
        let ds_dev = stochasticity_deviation(&w);
        if ds_dev > 1e-12 {
            return Err(Error::WeightRule(format!(
                "matrix is not doubly stochastic (max row/col sum deviation = {ds_dev:.3e})"
            )));
        }
        if !support_connected(&w) {
            return Err(Error::NotPrimitive("weight-matrix support is disconnected".into()));
        }

        let (eigvals, vecs) = sorted_symmetric_eigen(&w);
        if (eigvals[0] - 1.0).abs() > 1e-10 {
            return Err(Error::NotPrimitive(format!(
                "leading eigenvalue is {} instead of 1",
                eigvals[0]
            )));
        }
        let lambda = if n == 1 {
            0.0
        } else {
            eigvals[1].abs().max(eigvals[n - 1].abs())
        };
        if lambda >= 1.0 - 1e-12 {
            return Err(Error::NotPrimitive(format!(
                "no spectral gap (mixing rate = {lambda})"
            )));
        }
        let u_hat = vecs.columns(1, n - 1).into_owned();
        let lambda_sub = DVector::from_fn(n - 1, |i, _| eigvals[i + 1]);
        Ok(CombinationMatrix {
            w,
            lambda,
            eigvals,
            u_hat,
            lambda_sub,
        })
    }
}

/// Build the weight matrix for a topology under a rule and compute its
/// spectral data.
pub fn combination_matrix(t: &Topology, rule: &WeightRule) -> Result<CombinationMatrix> {
    if !t.is_connected() {
        return Err(Error::NotPrimitive("topology is disconnected".into()));
    }
    CombinationMatrix::from_matrix(raw_weights(t, rule)?)
}

/// Spectral norm of `W - (1/n) 1 1^T` for a square matrix.
///
/// For a symmetric doubly stochastic `W` this equals the largest
/// eigenvalue magnitude among the non-consensus eigenvalues.
pub fn mixing_rate(w: &DMatrix<f64>) -> Result<f64> {
    if w.nrows() != w.ncols() {
        return Err(Error::Dimension(format!(
            "mixing rate needs a square matrix, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let n = w.nrows();
    if n == 0 {
        return Err(Error::InvalidSize("matrix is empty".into()));
    }
    let deflated = w - DMatrix::from_element(n, n, 1.0 / n as f64);
    Ok(spectral_norm(&deflated))
}

/// Largest singular value.
pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(0.0f64, |a, &s| a.max(s))
}

fn symmetry_deviation(w: &DMatrix<f64>) -> f64 {
    let mut dev = 0.0f64;
    for i in 0..w.nrows() {
        for j in (i + 1)..w.ncols() {
            dev = dev.max((w[(i, j)] - w[(j, i)]).abs());
        }
    }
    dev
}

fn stochasticity_deviation(w: &DMatrix<f64>) -> f64 {
    let mut dev = 0.0f64;
    for i in 0..w.nrows() {
        dev = dev.max((w.row(i).sum() - 1.0).abs());
        dev = dev.max((w.column(i).sum() - 1.0).abs());
    }
    dev
}

fn support_connected(w: &DMatrix<f64>) -> bool {
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if !seen[j] && (w[(i, j)] != 0.0 || w[(j, i)] != 0.0) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Symmetric eigendecomposition with a deterministic ordering: sorted by
/// descending eigenvalue, exact ties broken by ascending lexicographic
/// order of the (sign-normalized) eigenvectors. Each eigenvector's first
/// component larger than 1e-8 in magnitude is made positive.
fn sorted_symmetric_eigen(w: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(w.clone());
    let n = w.nrows();
    let mut pairs: Vec<(f64, DVector<f64>)> = (0..n)
        .map(|i| {
            let mut v = eig.eigenvectors.column(i).into_owned();
            if let Some(lead) = v.iter().find(|x| x.abs() > 1e-8) {
                if *lead < 0.0 {
                    v.neg_mut();
                }
            }
            (eig.eigenvalues[i], v)
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| lex_cmp(&a.1, &b.1))
    });
    let vals = DVector::from_fn(n, |i, _| pairs[i].0);
    let mut vecs = DMatrix::zeros(n, n);
    for (i, (_, v)) in pairs.iter().enumerate() {
        vecs.set_column(i, v);
    }
    (vals, vecs)
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y).unwrap() {
            std::cmp::Ordering::Equal => continue,
            ord => return ord,
        }
    }
    std::cmp::Ordering::Equal
}

/// One named property check inside a [`Certification`].
#[derive(Debug, Clone)]
pub struct PropertyCheck {
    /// Property name.
    pub name: &'static str,
    /// Whether the property holds.
    pub pass: bool,
    /// Measured violation or witness value.
    pub measured: f64,
    /// Threshold the measurement was compared against.
    pub bound: f64,
    /// Whether this property counts toward [`Certification::all_pass`].
    pub required: bool,
    /// Human-readable context.
    pub detail: String,
}

/// Report-only certification of the combination-matrix contract:
/// symmetry, double stochasticity, primitivity, and (optionally
/// required) positive semidefiniteness.
#[derive(Debug, Clone)]
pub struct Certification {
    /// Individual property checks.
    pub checks: Vec<PropertyCheck>,
}

impl Certification {
    /// True when every required property holds.
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| !c.required || c.pass)
    }

    /// One line per property: `PASS/FAIL name measured=... bound=...`.
    /// Non-required properties that do not hold are labeled `info`
    /// instead of `FAIL`, since they carry no verdict.
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<22} measured={:>12.5e} bound={:>12.5e}{}{}",
                    if c.pass {
                        "PASS"
                    } else if c.required {
                        "FAIL"
                    } else {
                        "info"
                    },
                    c.name,
                    c.measured,
                    c.bound,
                    if c.required { "" } else { " (informational)" },
                    if c.detail.is_empty() {
                        String::new()
                    } else {
                        format!(" — {}", c.detail)
                    }
                )
            })
            .collect()
    }
}

/// Certify a raw weight matrix against the mixing-matrix contract.
///
/// Takes the matrix rather than a [`CombinationMatrix`] so that broken
/// or hand-corrupted matrices can be diagnosed. `require_psd` controls
/// whether the positive-semidefinite property counts toward the overall
/// verdict; it is always measured and reported.
pub fn certify(w: &DMatrix<f64>, require_psd: bool) -> Certification {
    let n = w.nrows();
    let mut checks = Vec::new();

    let sym_dev = symmetry_deviation(w);
    checks.push(PropertyCheck {
        name: "symmetric",
        pass: sym_dev <= 1e-12,
        measured: sym_dev,
        bound: 1e-12,
        required: true,
        detail: String::new(),
    });

    let ds_dev = stochasticity_deviation(w);
    checks.push(PropertyCheck {
        name: "doubly-stochastic",
        pass: ds_dev <= 1e-12,
        measured: ds_dev,
        bound: 1e-12,
        required: true,
        detail: String::new(),
    });

    let connected = support_connected(w);
    let rate = mixing_rate(w).unwrap_or(f64::INFINITY);
    checks.push(PropertyCheck {
        name: "primitive",
        pass: connected && rate < 1.0 - 1e-12,
        measured: rate,
        bound: 1.0,
        required: true,
        detail: if connected {
            String::new()
        } else {
            "support is disconnected".into()
        },
    });

    let symmetrized = (w + w.transpose()) * 0.5;
    let min_eig = nalgebra::SymmetricEigen::new(symmetrized)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &e| a.min(e));
    let min_eig = if n == 0 { 0.0 } else { min_eig };
    checks.push(PropertyCheck {
        name: "positive-semidefinite",
        pass: min_eig >= -1e-12,
        measured: min_eig,
        bound: -1e-12,
        required: require_psd,
        detail: String::new(),
    });

    Certification { checks }
}
