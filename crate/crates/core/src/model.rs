//! Domain types for the BSDE system and empirical validators for its
//! structural assumptions.
//!
//! A system of `n` scalar equations is described by per-component drivers
//! split as `H^i(t, y, z) = H1^i(t, y) + H2^i(t, y_i, z_i)` where the
//! coupling `H1^i` is nonnegative, of linear growth and Lipschitz in the
//! full vector `y`, and the diagonal part `H2^i` is nonnegative, convex and
//! dominated by `alpha + beta y + (delta / 2y) |z|^2` for `y > 0`.
//!
//! The assumptions are almost-sure statements over processes; here they are
//! checked empirically on finite probe grids and Monte Carlo batches, which
//! is enough to catch implementation bugs in concrete drivers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scenario::ScenarioBatch;

/// Absolute floating-point slack used when comparing probe evaluations.
const FP_SLACK: f64 = 1e-12;

/// Uniform partition `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    dt: f64,
    horizon: f64,
}

impl TimeGrid {
    /// Builds the uniform grid with `steps` intervals on `[0, horizon]`.
    ///
    /// The last node is pinned to `horizon` exactly so that accumulated
    /// rounding in `i * dt` never shifts the terminal date.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(CoreError::Config(format!(
                "time grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(CoreError::Config("time grid needs at least one step".into()));
        }
        let dt = horizon / steps as f64;
        let mut nodes: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        nodes[steps] = horizon;
        Ok(Self { nodes, dt, horizon })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of intervals `N`.
    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Number of nodes `N + 1`.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
}

/// A nonnegative coefficient process restricted to the shapes the artifact
/// supports: constant, deterministic in time, or indexed by the regime of
/// the driving chain.
#[derive(Clone)]
pub enum CoeffProcess {
    Constant(f64),
    TimeFn(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    PerRegime(Vec<f64>),
}

impl CoeffProcess {
    pub fn zero() -> Self {
        CoeffProcess::Constant(0.0)
    }

    pub fn eval(&self, t: f64, regime: usize) -> f64 {
        match self {
            CoeffProcess::Constant(c) => *c,
            CoeffProcess::TimeFn(f) => f(t),
            CoeffProcess::PerRegime(v) => v[regime],
        }
    }
}

impl fmt::Debug for CoeffProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoeffProcess::Constant(c) => write!(f, "Constant({c})"),
            CoeffProcess::TimeFn(_) => write!(f, "TimeFn(..)"),
            CoeffProcess::PerRegime(v) => write!(f, "PerRegime({v:?})"),
        }
    }
}

/// Growth parameters `(A, delta, alpha, beta)` bounding a generator system:
/// `0 <= H1 <= A (1 + |y|)` with Lipschitz constant `A`, and
/// `0 <= H2 <= alpha + beta y + (delta / 2y) |z|^2`.
#[derive(Debug, Clone)]
pub struct GrowthEnvelope {
    pub lipschitz: f64,
    pub delta: f64,
    pub alpha: CoeffProcess,
    pub beta: CoeffProcess,
}

impl GrowthEnvelope {
    pub fn new(lipschitz: f64, delta: f64, alpha: CoeffProcess, beta: CoeffProcess) -> Result<Self> {
        if !lipschitz.is_finite() || lipschitz < 0.0 {
            return Err(CoreError::Config(format!(
                "envelope constant A must be finite and >= 0, got {lipschitz}"
            )));
        }
        if !delta.is_finite() || delta < 0.0 {
            return Err(CoreError::Config(format!(
                "envelope delta must be finite and >= 0, got {delta}"
            )));
        }
        if delta == 1.0 {
            return Err(CoreError::Config(
                "envelope delta = 1 is not supported (delta != 1 is required)".into(),
            ));
        }
        Ok(Self { lipschitz, delta, alpha, beta })
    }
}

/// Coupling part of one component: `(t, regime, y) -> H1^i`.
pub type CouplingFn = Arc<dyn Fn(f64, usize, &[f64]) -> f64 + Send + Sync>;
/// Diagonal part of one component: `(t, regime, y_i, z_i) -> H2^i`, defined
/// for `y_i > 0` only.
pub type DiagonalFn = Arc<dyn Fn(f64, usize, f64, &[f64]) -> f64 + Send + Sync>;

/// One component of the generator system.
#[derive(Clone)]
pub struct ComponentGenerator {
    pub coupling: CouplingFn,
    pub diagonal: DiagonalFn,
}

/// An `n`-component generator system with its declared growth envelope.
///
/// Components may read the current regime of the driving chain; any other
/// randomness must enter through the terminal condition.
#[derive(Clone)]
pub struct GeneratorSystemSpec {
    n: usize,
    d: usize,
    components: Vec<ComponentGenerator>,
    envelope: GrowthEnvelope,
}

impl GeneratorSystemSpec {
    pub fn new(d: usize, components: Vec<ComponentGenerator>, envelope: GrowthEnvelope) -> Result<Self> {
        if components.is_empty() {
            return Err(CoreError::Config("generator system needs at least one component".into()));
        }
        if d == 0 {
            return Err(CoreError::Config("brownian dimension d must be >= 1".into()));
        }
        Ok(Self { n: components.len(), d, components, envelope })
    }

    pub fn n_components(&self) -> usize {
        self.n
    }

    pub fn brownian_dim(&self) -> usize {
        self.d
    }

    pub fn envelope(&self) -> &GrowthEnvelope {
        &self.envelope
    }

    pub fn coupling(&self, i: usize, t: f64, regime: usize, y: &[f64]) -> f64 {
        (self.components[i].coupling)(t, regime, y)
    }

    /// Evaluates the diagonal part; the driver is only defined for `y_i > 0`.
    pub fn diagonal(&self, i: usize, t: f64, regime: usize, y_i: f64, z_i: &[f64]) -> Result<f64> {
        if y_i <= 0.0 {
            return Err(CoreError::Domain(format!(
                "diagonal driver of component {i} evaluated at y = {y_i} <= 0"
            )));
        }
        Ok((self.components[i].diagonal)(t, regime, y_i, z_i))
    }

    /// Diagonal part without the domain check; callers must guarantee
    /// `y_i > 0` (the positivity-preserving solver does).
    pub fn diagonal_unchecked(&self, i: usize, t: f64, regime: usize, y_i: f64, z_i: &[f64]) -> f64 {
        (self.components[i].diagonal)(t, regime, y_i, z_i)
    }

    /// Full component value `H^i = H1^i + H2^i`.
    pub fn component(&self, i: usize, t: f64, regime: usize, y: &[f64], z_i: &[f64]) -> Result<f64> {
        Ok(self.coupling(i, t, regime, y) + self.diagonal(i, t, regime, y[i], z_i)?)
    }
}

impl fmt::Debug for GeneratorSystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSystemSpec")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("envelope", &self.envelope)
            .finish()
    }
}

/// State of one simulated path at a fixed time, as seen by terminal samplers.
#[derive(Debug, Clone)]
pub struct PathState<'a> {
    pub t: f64,
    /// Brownian level `W_t` (d entries).
    pub w: &'a [f64],
    pub regime: usize,
}

/// Terminal condition `xi` with the integrability exponents `(p, q)` under
/// which the solution theory applies.
#[derive(Clone)]
pub struct TerminalSpec {
    sampler: Arc<dyn Fn(&PathState<'_>) -> Vec<f64> + Send + Sync>,
    pub p: f64,
    pub q: f64,
}

impl TerminalSpec {
    pub fn new(
        sampler: Arc<dyn Fn(&PathState<'_>) -> Vec<f64> + Send + Sync>,
        p: f64,
        q: f64,
    ) -> Result<Self> {
        if !(p >= 2.0) {
            return Err(CoreError::Config(format!("terminal exponent p must be >= 2, got {p}")));
        }
        if !(q > 1.0) {
            return Err(CoreError::Config(format!("terminal exponent q must be > 1, got {q}")));
        }
        Ok(Self { sampler, p, q })
    }

    /// Deterministic per-component terminal values.
    pub fn constant(values: Vec<f64>, p: f64, q: f64) -> Result<Self> {
        Self::new(Arc::new(move |_state| values.clone()), p, q)
    }

    pub fn sample(&self, state: &PathState<'_>) -> Vec<f64> {
        (self.sampler)(state)
    }

    /// Samples `xi` on every path of a batch; returns an `M x n` matrix.
    pub fn sample_batch(&self, batch: &ScenarioBatch, n: usize) -> Result<ndarray::Array2<f64>> {
        let m = batch.n_paths();
        let last = batch.grid().n_steps();
        let t = batch.grid().horizon();
        let mut out = ndarray::Array2::<f64>::zeros((m, n));
        for path in 0..m {
            let w = batch.brownian_level(path, last);
            let state = PathState { t, w: w.as_slice().unwrap(), regime: batch.regime(path, last) };
            let xi = self.sample(&state);
            if xi.len() != n {
                return Err(CoreError::Internal(format!(
                    "terminal sampler returned {} components, expected {n}",
                    xi.len()
                )));
            }
            for (i, v) in xi.iter().enumerate() {
                out[(path, i)] = *v;
            }
        }
        Ok(out)
    }
}

impl fmt::Debug for TerminalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalSpec").field("p", &self.p).field("q", &self.q).finish()
    }
}

/// One probe point for the generator validators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Probe {
    pub t: f64,
    pub regime: usize,
    pub y: Vec<f64>,
    /// Row `z^i` applied to each component's diagonal part.
    pub z_row: Vec<f64>,
}

/// Default probe grid: tensor grid over `y_i in {0.1, 0.5, 1, 2, 10}`,
/// `z` entries in `{-2, 0, 2}`, five uniformly spaced times, and every
/// regime. For `n > 3` the full tensor explodes; a seeded subsample of the
/// y-grid is taken instead.
pub fn default_probe_grid(n: usize, d: usize, k: usize, horizon: f64) -> Vec<Probe> {
    let y_levels = [0.1, 0.5, 1.0, 2.0, 10.0];
    let z_levels = [-2.0, 0.0, 2.0];
    let times: Vec<f64> = (0..5).map(|i| horizon * i as f64 / 4.0).collect();

    let mut y_points: Vec<Vec<f64>> = Vec::new();
    if n <= 3 {
        let total = y_levels.len().pow(n as u32);
        for mut idx in 0..total {
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                y.push(y_levels[idx % y_levels.len()]);
                idx /= y_levels.len();
            }
            y_points.push(y);
        }
    } else {
        // Deterministic low-discrepancy style subsample of the tensor grid.
        let mut state: u64 = 0x9e3779b97f4a7c15;
        for _ in 0..500 {
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                y.push(y_levels[(state >> 33) as usize % y_levels.len()]);
            }
            y_points.push(y);
        }
    }

    let mut z_points: Vec<Vec<f64>> = Vec::new();
    let total_z = z_levels.len().pow(d as u32);
    for mut idx in 0..total_z {
        let mut z = Vec::with_capacity(d);
        for _ in 0..d {
            z.push(z_levels[idx % z_levels.len()]);
            idx /= z_levels.len();
        }
        z_points.push(z);
    }

    let mut probes = Vec::new();
    for &t in &times {
        for regime in 0..k {
            for y in &y_points {
                for z in &z_points {
                    probes.push(Probe { t, regime, y: y.clone(), z_row: z.clone() });
                }
            }
        }
    }
    probes
}

/// One recorded check instance; only violations are retained in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub check: String,
    pub probe: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Machine-readable validation outcome: the violation list plus summary
/// metrics (minima, empirical moments).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<ValidationEntry>,
    pub metrics: BTreeMap<String, f64>,
    pub checks_run: usize,
    pub pass: bool,
}

impl ValidationReport {
    fn new(violations: Vec<ValidationEntry>, metrics: BTreeMap<String, f64>, checks_run: usize) -> Self {
        let pass = violations.is_empty();
        Self { violations, metrics, checks_run, pass }
    }
}

fn probe_label(p: &Probe) -> String {
    format!("t={:.6}, regime={}, y={:?}, z={:?}", p.t, p.regime + 1, p.y, p.z_row)
}

fn pair_label(a: &Probe, b: &Probe) -> String {
    format!("{} | {}", probe_label(a), probe_label(b))
}

/// Checks the structural assumptions of a generator system on a finite
/// probe set: nonnegativity and linear growth of the coupling, its
/// Lipschitz bound on probe pairs, the diagonal envelope
/// `0 <= H2 <= alpha + beta y + (delta / 2y) |z|^2`, and midpoint convexity
/// of the diagonal part.
pub fn validate_h1(system: &GeneratorSystemSpec, probes: &[Probe]) -> Result<ValidationReport> {
    if probes.is_empty() {
        return Err(CoreError::Config("validate_h1 requires a nonempty probe set".into()));
    }
    for p in probes {
        if p.y.len() != system.n_components() {
            return Err(CoreError::Config(format!(
                "probe y has {} entries, system has {} components",
                p.y.len(),
                system.n_components()
            )));
        }
        if p.z_row.len() != system.brownian_dim() {
            return Err(CoreError::Config(format!(
                "probe z has {} entries, system has d = {}",
                p.z_row.len(),
                system.brownian_dim()
            )));
        }
        if p.y.iter().any(|&v| v <= 0.0) {
            return Err(CoreError::Domain(format!(
                "diagonal driver probed at nonpositive y: {}",
                probe_label(p)
            )));
        }
    }

    let env = system.envelope();
    let a_const = env.lipschitz;
    let mut violations = Vec::new();
    let mut checks_run = 0usize;

    let norm = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>().sqrt();

    // Pointwise checks.
    for p in probes {
        for i in 0..system.n_components() {
            let h1 = system.coupling(i, p.t, p.regime, &p.y);
            let bound = a_const * (1.0 + norm(&p.y));
            checks_run += 2;
            if h1 < -FP_SLACK {
                violations.push(ValidationEntry {
                    check: format!("h1_nonnegative[{i}]"),
                    probe: probe_label(p),
                    lhs: 0.0,
                    rhs: h1,
                    pass: false,
                });
            }
            if h1 > bound + FP_SLACK * (1.0 + bound.abs()) {
                violations.push(ValidationEntry {
                    check: format!("h1_linear_growth[{i}]"),
                    probe: probe_label(p),
                    lhs: h1,
                    rhs: bound,
                    pass: false,
                });
            }

            let h2 = system.diagonal(i, p.t, p.regime, p.y[i], &p.z_row)?;
            let z_sq = p.z_row.iter().map(|v| v * v).sum::<f64>();
            let h2_bound = env.alpha.eval(p.t, p.regime)
                + env.beta.eval(p.t, p.regime) * p.y[i]
                + env.delta / (2.0 * p.y[i]) * z_sq;
            checks_run += 2;
            if h2 < -FP_SLACK {
                violations.push(ValidationEntry {
                    check: format!("h2_nonnegative[{i}]"),
                    probe: probe_label(p),
                    lhs: 0.0,
                    rhs: h2,
                    pass: false,
                });
            }
            if h2 > h2_bound + FP_SLACK * (1.0 + h2_bound.abs()) {
                violations.push(ValidationEntry {
                    check: format!("h2_envelope[{i}]"),
                    probe: probe_label(p),
                    lhs: h2,
                    rhs: h2_bound,
                    pass: false,
                });
            }
        }
    }

    // Pair checks share a time and regime; group probe indices accordingly.
    let mut groups: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (idx, p) in probes.iter().enumerate() {
        groups.entry((p.t.to_bits(), p.regime)).or_default().push(idx);
    }

    for indices in groups.values() {
        // Lipschitz bound of the coupling over distinct y points. The
        // coupling ignores z, so dedup on y to avoid quadratic blowup over
        // the z grid.
        let mut y_reps: Vec<usize> = Vec::new();
        for &idx in indices {
            if !y_reps.iter().any(|&r| probes[r].y == probes[idx].y) {
                y_reps.push(idx);
            }
        }
        for (ai, &ia) in y_reps.iter().enumerate() {
            for &ib in y_reps.iter().skip(ai + 1) {
                let (pa, pb) = (&probes[ia], &probes[ib]);
                let dist = pa
                    .y
                    .iter()
                    .zip(&pb.y)
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                for i in 0..system.n_components() {
                    let va = system.coupling(i, pa.t, pa.regime, &pa.y);
                    let vb = system.coupling(i, pb.t, pb.regime, &pb.y);
                    let lhs = (va - vb).abs();
                    let rhs = a_const * dist;
                    checks_run += 1;
                    if lhs > rhs + FP_SLACK * (1.0 + rhs.abs()) {
                        violations.push(ValidationEntry {
                            check: format!("h1_lipschitz[{i}]"),
                            probe: pair_label(pa, pb),
                            lhs,
                            rhs,
                            pass: false,
                        });
                    }
                }
            }
        }

        // Midpoint convexity of the diagonal part in (y_i, z_i). Dedup on
        // the (y_i, z) pair per component.
        for i in 0..system.n_components() {
            let mut reps: Vec<usize> = Vec::new();
            for &idx in indices {
                if !reps
                    .iter()
                    .any(|&r| probes[r].y[i] == probes[idx].y[i] && probes[r].z_row == probes[idx].z_row)
                {
                    reps.push(idx);
                }
            }
            for (ai, &ia) in reps.iter().enumerate() {
                for &ib in reps.iter().skip(ai + 1) {
                    let (pa, pb) = (&probes[ia], &probes[ib]);
                    let ym = 0.5 * (pa.y[i] + pb.y[i]);
                    let zm: Vec<f64> =
                        pa.z_row.iter().zip(&pb.z_row).map(|(u, v)| 0.5 * (u + v)).collect();
                    let fa = system.diagonal(i, pa.t, pa.regime, pa.y[i], &pa.z_row)?;
                    let fb = system.diagonal(i, pb.t, pb.regime, pb.y[i], &pb.z_row)?;
                    let fm = system.diagonal(i, pa.t, pa.regime, ym, &zm)?;
                    let rhs = 0.5 * (fa + fb);
                    checks_run += 1;
                    if fm > rhs + FP_SLACK * (1.0 + rhs.abs()) {
                        violations.push(ValidationEntry {
                            check: format!("h2_midpoint_convexity[{i}]"),
                            probe: pair_label(pa, pb),
                            lhs: fm,
                            rhs,
                            pass: false,
                        });
                    }
                }
            }
        }
    }

    Ok(ValidationReport::new(violations, BTreeMap::new(), checks_run))
}

/// Validates the terminal condition on a simulated batch: strict positivity
/// of every sample and finiteness of the empirical moments
/// `E[(1/xi^i)^q]` and `E[(1 + |xi|^{2+delta} + int alpha^{2+delta})^p
/// exp(p (2+delta) int beta)]`.
///
/// Any nonpositive sample is a hard failure.
pub fn validate_terminal(
    terminal: &TerminalSpec,
    envelope: &GrowthEnvelope,
    n: usize,
    batch: &ScenarioBatch,
) -> Result<ValidationReport> {
    let m = batch.n_paths();
    if m == 0 {
        return Err(CoreError::Config("terminal validation requires a nonempty batch".into()));
    }
    let xi = terminal.sample_batch(batch, n)?;
    for path in 0..m {
        for i in 0..n {
            let v = xi[(path, i)];
            if !(v > 0.0) {
                return Err(CoreError::Domain(format!(
                    "terminal sample xi^{} = {v} on path {path} is not strictly positive",
                    i + 1
                )));
            }
        }
    }

    let delta = envelope.delta;
    let p = terminal.p;
    let q = terminal.q;
    let grid = batch.grid();
    let dt = grid.dt();

    let mut metrics = BTreeMap::new();
    for i in 0..n {
        let col = xi.column(i);
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let inv: Vec<f64> = col.iter().map(|&v| v.powf(-q)).collect();
        let mean = inv.iter().sum::<f64>() / m as f64;
        let var = inv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        metrics.insert(format!("min_xi_{}", i + 1), min);
        metrics.insert(format!("inverse_moment_q_{}", i + 1), mean);
        metrics.insert(format!("inverse_moment_q_stderr_{}", i + 1), (var / m as f64).sqrt());
    }

    // Growth moment of (H2): alpha and beta integrated pathwise along the
    // recorded regimes with left-endpoint sums.
    let mut growth = Vec::with_capacity(m);
    for path in 0..m {
        let mut int_alpha = 0.0;
        let mut int_beta = 0.0;
        for i in 0..grid.n_steps() {
            let t = grid.node(i);
            let regime = batch.regime(path, i);
            int_alpha += envelope.alpha.eval(t, regime).powf(2.0 + delta) * dt;
            int_beta += envelope.beta.eval(t, regime) * dt;
        }
        let xi_norm =
            (0..n).map(|i| xi[(path, i)] * xi[(path, i)]).sum::<f64>().sqrt();
        let base = 1.0 + xi_norm.powf(2.0 + delta) + int_alpha;
        growth.push(base.powf(p) * (p * (2.0 + delta) * int_beta).exp());
    }
    let g_mean = growth.iter().sum::<f64>() / m as f64;
    metrics.insert("growth_moment".into(), g_mean);

    let mut violations = Vec::new();
    if !g_mean.is_finite() {
        violations.push(ValidationEntry {
            check: "growth_moment_finite".into(),
            probe: "batch".into(),
            lhs: g_mean,
            rhs: f64::MAX,
            pass: false,
        });
    }
    for i in 0..n {
        let v = metrics[&format!("inverse_moment_q_{}", i + 1)];
        if !v.is_finite() {
            violations.push(ValidationEntry {
                check: format!("inverse_moment_finite[{}]", i + 1),
                probe: "batch".into(),
                lhs: v,
                rhs: f64::MAX,
                pass: false,
            });
        }
    }

    Ok(ValidationReport::new(violations, metrics, m * n + 1))
}
