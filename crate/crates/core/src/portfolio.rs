//! Regime-switching optimal-investment application.
//!
//! A market with `m` stocks switches coefficients `b(t, l)`, `sigma(t, l)`
//! with the regime `l` of an independent Markov chain. An agent with power
//! utility `x^gamma / gamma` maximizes expected terminal utility
//! `E[(X_T zeta(alpha_T))^gamma / gamma]`. The value function is
//! `V(x, l) = (x^gamma / gamma) Y_0^l` where `Y` solves the coupled BSDE
//! system with components
//!
//! ```text
//! H^l(t, y, z) = (gamma y^l / (2 (1 - gamma))) |lambda(t,l)' + z^l / y^l|^2
//!              + sum_j q^{lj} y^j
//! ```
//!
//! The diagonal part of `H^l` carries the signed term `q^{ll} y^l`, so the
//! system is first rescaled by `y^l = Y^l e^{q^{ll} t}`, which moves the
//! diagonal rate into the terminal condition and turns the coupling into
//! the nonnegative Lipschitz form required by the solver; the solved grid
//! is mapped back afterwards.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{
    CoeffProcess, ComponentGenerator, GeneratorSystemSpec, GrowthEnvelope, TerminalSpec, TimeGrid,
};
use crate::picard::{picard_solve, PicardOptions, PicardReport};
use crate::regression::RegressionBasis;
use crate::scenario::{check_nondegeneracy, market_price_of_risk, ChainGenerator, ScenarioBatch};
use crate::solver::BsdeSolutionGrid;

/// Polynomial in `t`: `c_0 + c_1 t + c_2 t^2 + ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyCoeffs(pub Vec<f64>);

impl PolyCoeffs {
    pub fn constant(c: f64) -> Self {
        Self(vec![c])
    }

    pub fn eval(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for c in self.0.iter().rev() {
            acc = acc * t + c;
        }
        acc
    }

    pub fn is_constant(&self) -> bool {
        self.0.len() <= 1
    }
}

/// Appreciation vector and volatility matrix of one regime, entries
/// polynomial in `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCoefficients {
    /// `m` entries.
    pub b: Vec<PolyCoeffs>,
    /// `m x d` entries.
    pub sigma: Vec<Vec<PolyCoeffs>>,
}

impl RegimeCoefficients {
    /// Constant coefficients.
    pub fn constant(b: Vec<f64>, sigma: Vec<Vec<f64>>) -> Self {
        Self {
            b: b.into_iter().map(PolyCoeffs::constant).collect(),
            sigma: sigma
                .into_iter()
                .map(|row| row.into_iter().map(PolyCoeffs::constant).collect())
                .collect(),
        }
    }

    pub fn eval_b(&self, t: f64) -> Vec<f64> {
        self.b.iter().map(|p| p.eval(t)).collect()
    }

    pub fn eval_sigma(&self, t: f64) -> Array2<f64> {
        let m = self.sigma.len();
        let d = self.sigma[0].len();
        Array2::from_shape_fn((m, d), |(i, j)| self.sigma[i][j].eval(t))
    }

    pub fn is_constant(&self) -> bool {
        self.b.iter().all(PolyCoeffs::is_constant)
            && self.sigma.iter().flatten().all(PolyCoeffs::is_constant)
    }
}

/// Full market description.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    chain: ChainGenerator,
    coefficients: Vec<RegimeCoefficients>,
    zeta: Vec<f64>,
    pub gamma: f64,
    pub initial_wealth: f64,
    /// Zero-based initial regime.
    pub initial_regime: usize,
    /// Non-degeneracy level: `sigma sigma' >= mu I`.
    pub mu: f64,
    /// Optional bound `D` with `1/D <= zeta(l) <= D`.
    pub zeta_bound: Option<f64>,
    /// Optional uniform bound on coefficient magnitudes, enforced at probes.
    pub coeff_bound: Option<f64>,
    n_stocks: usize,
    d: usize,
}

impl MarketSpec {
    pub fn new(
        chain: ChainGenerator,
        coefficients: Vec<RegimeCoefficients>,
        zeta: Vec<f64>,
        gamma: f64,
        initial_wealth: f64,
        initial_regime: usize,
        mu: f64,
        zeta_bound: Option<f64>,
        coeff_bound: Option<f64>,
    ) -> Result<Self> {
        let k = chain.n_states();
        if coefficients.len() != k {
            return Err(CoreError::Config(format!(
                "{} coefficient sets supplied for {k} regimes",
                coefficients.len()
            )));
        }
        if zeta.len() != k {
            return Err(CoreError::Config(format!(
                "{} terminal factors supplied for {k} regimes",
                zeta.len()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(CoreError::Config(format!(
                "risk aversion gamma must lie in (0, 1), got {gamma}"
            )));
        }
        if gamma == 1.0 / 3.0 {
            return Err(CoreError::Config(
                "gamma = 1/3 implies delta = 2 gamma / (1 - gamma) = 1, which is rejected \
                 (delta != 1 is required)"
                    .into(),
            ));
        }
        if !(initial_wealth > 0.0) {
            return Err(CoreError::Config(format!(
                "initial wealth must be > 0, got {initial_wealth}"
            )));
        }
        if initial_regime >= k {
            return Err(CoreError::Config(format!(
                "initial regime {} out of range 1..{k}",
                initial_regime + 1
            )));
        }
        if !(mu > 0.0) {
            return Err(CoreError::Config(format!("non-degeneracy mu must be > 0, got {mu}")));
        }
        for (l, z) in zeta.iter().enumerate() {
            if !(*z > 0.0) {
                return Err(CoreError::Config(format!(
                    "terminal factor zeta({}) = {z} must be > 0",
                    l + 1
                )));
            }
            if let Some(d_bound) = zeta_bound {
                if *z < 1.0 / d_bound - 1e-12 || *z > d_bound + 1e-12 {
                    return Err(CoreError::Config(format!(
                        "terminal factor zeta({}) = {z} violates 1/D <= zeta <= D with D = {d_bound}",
                        l + 1
                    )));
                }
            }
        }
        let n_stocks = coefficients[0].b.len();
        let d = coefficients[0].sigma.first().map(|r| r.len()).unwrap_or(0);
        for (l, c) in coefficients.iter().enumerate() {
            if c.b.len() != n_stocks
                || c.sigma.len() != n_stocks
                || c.sigma.iter().any(|row| row.len() != d)
            {
                return Err(CoreError::Config(format!(
                    "regime {} coefficients have inconsistent dimensions",
                    l + 1
                )));
            }
        }
        if n_stocks == 0 || d == 0 {
            return Err(CoreError::Config("market needs at least one stock and one factor".into()));
        }
        Ok(Self {
            chain,
            coefficients,
            zeta,
            gamma,
            initial_wealth,
            initial_regime,
            mu,
            zeta_bound,
            coeff_bound,
            n_stocks,
            d,
        })
    }

    pub fn n_regimes(&self) -> usize {
        self.chain.n_states()
    }

    pub fn n_stocks(&self) -> usize {
        self.n_stocks
    }

    pub fn brownian_dim(&self) -> usize {
        self.d
    }

    pub fn chain(&self) -> &ChainGenerator {
        &self.chain
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// Singularity weight `delta = 2 gamma / (1 - gamma)`.
    pub fn delta(&self) -> f64 {
        2.0 * self.gamma / (1.0 - self.gamma)
    }

    /// Terminal condition `xi^l = zeta(l)^gamma`.
    pub fn xi(&self) -> Vec<f64> {
        self.zeta.iter().map(|z| z.powf(self.gamma)).collect()
    }

    pub fn coefficients(&self, regime: usize) -> &RegimeCoefficients {
        &self.coefficients[regime]
    }

    /// Market price of risk `lambda(t, l)`.
    pub fn lambda(&self, t: f64, regime: usize) -> Result<Vec<f64>> {
        let c = &self.coefficients[regime];
        market_price_of_risk(&c.eval_b(t), &c.eval_sigma(t))
    }

    /// Checks `sigma sigma' >= mu I` and the optional coefficient bound at
    /// evenly spaced probe times over `[0, horizon]`.
    pub fn validate_coefficients(&self, horizon: f64) -> Result<()> {
        let probes: Vec<f64> = (0..=8).map(|i| horizon * i as f64 / 8.0).collect();
        let report = check_nondegeneracy(
            |t, l| self.coefficients[l].eval_sigma(t),
            &probes,
            self.n_regimes(),
            self.mu,
        )?;
        if !report.pass {
            return Err(CoreError::Degenerate(format!(
                "sigma sigma' drops {:.3e} below mu = {} at t = {}, regime {}",
                -report.worst_margin,
                self.mu,
                report.worst_time,
                report.worst_regime + 1
            )));
        }
        if let Some(bound) = self.coeff_bound {
            for &t in &probes {
                for l in 0..self.n_regimes() {
                    let c = &self.coefficients[l];
                    let b_max = c.eval_b(t).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
                    let s_max = c.eval_sigma(t).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
                    if b_max > bound || s_max > bound {
                        return Err(CoreError::Config(format!(
                            "coefficients exceed the declared bound {bound} at t = {t}, regime {}",
                            l + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `lambda(t, l)` evaluator shared by the generator closures: constant
    /// coefficients are resolved once, time-varying ones per call.
    fn lambda_eval(&self) -> Result<LambdaEval> {
        if self.coefficients.iter().all(RegimeCoefficients::is_constant) {
            let mut per_regime = Vec::with_capacity(self.n_regimes());
            for l in 0..self.n_regimes() {
                per_regime.push(self.lambda(0.0, l)?);
            }
            Ok(LambdaEval::Constant(Arc::new(per_regime)))
        } else {
            let market = self.clone();
            Ok(LambdaEval::TimeVarying(Arc::new(move |t, l| {
                market.lambda(t, l).unwrap_or_else(|_| vec![f64::NAN; market.d])
            })))
        }
    }
}

#[derive(Clone)]
enum LambdaEval {
    Constant(Arc<Vec<Vec<f64>>>),
    TimeVarying(Arc<dyn Fn(f64, usize) -> Vec<f64> + Send + Sync>),
}

impl LambdaEval {
    /// `|lambda + z/y|^2` without allocating.
    fn quad_term(&self, t: f64, component: usize, y: f64, z: &[f64]) -> f64 {
        match self {
            LambdaEval::Constant(v) => {
                let lam = &v[component];
                lam.iter().zip(z).map(|(l, zi)| {
                    let w = l + zi / y;
                    w * w
                }).sum()
            }
            LambdaEval::TimeVarying(f) => {
                let lam = f(t, component);
                lam.iter().zip(z).map(|(l, zi)| {
                    let w = l + zi / y;
                    w * w
                }).sum()
            }
        }
    }
}

/// Squared norm of `lambda(t, l)` maximized over regimes (envelope beta).
fn beta_process(market: &MarketSpec) -> Result<CoeffProcess> {
    let gamma = market.gamma;
    let scale = gamma / (1.0 - gamma);
    if market.coefficients.iter().all(RegimeCoefficients::is_constant) {
        let mut worst = 0.0f64;
        for l in 0..market.n_regimes() {
            let lam = market.lambda(0.0, l)?;
            worst = worst.max(lam.iter().map(|v| v * v).sum::<f64>());
        }
        Ok(CoeffProcess::Constant(scale * worst))
    } else {
        let m = market.clone();
        Ok(CoeffProcess::TimeFn(Arc::new(move |t| {
            let mut worst = 0.0f64;
            for l in 0..m.n_regimes() {
                if let Ok(lam) = m.lambda(t, l) {
                    worst = worst.max(lam.iter().map(|v| v * v).sum::<f64>());
                }
            }
            scale * worst
        })))
    }
}

/// The untransformed generator system of the value BSDE:
/// `H^l = (gamma y^l / (2(1-gamma))) |lambda' + z^l/y^l|^2 + sum_j q^{lj} y^j`,
/// split as coupling `sum_{j != l} q^{lj} y^j` plus diagonal
/// `quad + q^{ll} y^l`.
///
/// The diagonal part is signed (the `q^{ll} y^l` term), so this system does
/// not satisfy the nonnegativity side of the envelope for `k > 1`; it is
/// exposed for evaluation and diagnostics. Solving goes through
/// [`build_transformed_system`].
pub fn build_generator_system(market: &MarketSpec) -> Result<GeneratorSystemSpec> {
    let k = market.n_regimes();
    let gamma = market.gamma;
    let lambda = market.lambda_eval()?;
    let q = market.chain().matrix().clone();

    let mut components = Vec::with_capacity(k);
    for l in 0..k {
        let q_row: Vec<f64> = (0..k).map(|j| q[(l, j)]).collect();
        let coupling_row = q_row.clone();
        let coupling: crate::model::CouplingFn = Arc::new(move |_t, _r, y: &[f64]| {
            let mut acc = 0.0;
            for (j, rate) in coupling_row.iter().enumerate() {
                if j != l {
                    acc += rate * y[j];
                }
            }
            acc
        });
        let lam = lambda.clone();
        let q_ll = q_row[l];
        let diagonal: crate::model::DiagonalFn = Arc::new(move |t, _r, y, z: &[f64]| {
            gamma / (2.0 * (1.0 - gamma)) * y * lam.quad_term(t, l, y, z) + q_ll * y
        });
        components.push(ComponentGenerator { coupling, diagonal });
    }

    let a_lipschitz = (0..k)
        .map(|l| (0..k).filter(|j| *j != l).map(|j| q[(l, j)]).sum::<f64>())
        .fold(0.0f64, f64::max);
    let envelope =
        GrowthEnvelope::new(a_lipschitz, market.delta(), CoeffProcess::zero(), beta_process(market)?)?;
    GeneratorSystemSpec::new(market.brownian_dim(), components, envelope)
}

/// The rescaled system actually solved: `y^l = Y^l e^{q^{ll} t}` with
/// terminal `xi^l e^{q^{ll} T}` and driver
///
/// ```text
/// g^l(t, y, z) = (gamma y^l / (2(1-gamma))) |lambda(t,l)' + z^l/y^l|^2
///              + sum_{j != l} q^{lj} e^{(q^{ll} - q^{jj}) t} max(y^j, 0)
/// ```
///
/// whose coupling is nonnegative and Lipschitz with constant
/// `A = max_l sum_{j != l} q^{lj} e^{(max_l q^{ll} - min_j q^{jj}) T}`.
pub fn build_transformed_system(
    market: &MarketSpec,
    grid: &TimeGrid,
) -> Result<(GeneratorSystemSpec, TerminalSpec)> {
    let k = market.n_regimes();
    let gamma = market.gamma;
    let horizon = grid.horizon();
    let lambda = market.lambda_eval()?;
    let q = market.chain().matrix().clone();

    let mut components = Vec::with_capacity(k);
    for l in 0..k {
        let q_row: Vec<f64> = (0..k).map(|j| q[(l, j)]).collect();
        let q_ll = q_row[l];
        let diag_rates: Vec<f64> = (0..k).map(|j| q[(j, j)]).collect();
        let coupling_rates = q_row.clone();
        let coupling: crate::model::CouplingFn = Arc::new(move |t, _r, y: &[f64]| {
            let mut acc = 0.0;
            for (j, rate) in coupling_rates.iter().enumerate() {
                if j != l && *rate != 0.0 {
                    acc += rate * ((q_ll - diag_rates[j]) * t).exp() * y[j].max(0.0);
                }
            }
            acc
        });
        let lam = lambda.clone();
        let diagonal: crate::model::DiagonalFn = Arc::new(move |t, _r, y, z: &[f64]| {
            gamma / (2.0 * (1.0 - gamma)) * y * lam.quad_term(t, l, y, z)
        });
        components.push(ComponentGenerator { coupling, diagonal });
    }

    let max_diag = (0..k).map(|l| q[(l, l)]).fold(f64::NEG_INFINITY, f64::max);
    let min_diag = (0..k).map(|l| q[(l, l)]).fold(f64::INFINITY, f64::min);
    let spread_factor = ((max_diag - min_diag) * horizon).exp();
    let a_lipschitz = (0..k)
        .map(|l| {
            (0..k).filter(|j| *j != l).map(|j| q[(l, j)]).sum::<f64>() * spread_factor
        })
        .fold(0.0f64, f64::max);
    let envelope =
        GrowthEnvelope::new(a_lipschitz, market.delta(), CoeffProcess::zero(), beta_process(market)?)?;
    let system = GeneratorSystemSpec::new(market.brownian_dim(), components, envelope)?;

    let xi = market.xi();
    let transformed_xi: Vec<f64> =
        (0..k).map(|l| xi[l] * (q[(l, l)] * horizon).exp()).collect();
    let terminal = TerminalSpec::constant(transformed_xi, 2.0, 2.0)?;
    Ok((system, terminal))
}

/// Maps a solved grid of the rescaled system back to the original scale:
/// `Y^l = y^l e^{-q^{ll} t}`, `Z^l = z^l e^{-q^{ll} t}` nodewise.
pub fn untransform_solution(
    transformed: &[BsdeSolutionGrid],
    chain: &ChainGenerator,
    grid: &TimeGrid,
) -> Result<Vec<BsdeSolutionGrid>> {
    if transformed.len() != chain.n_states() {
        return Err(CoreError::Internal(format!(
            "{} components for a {}-state chain",
            transformed.len(),
            chain.n_states()
        )));
    }
    let mut out = Vec::with_capacity(transformed.len());
    for (l, sol) in transformed.iter().enumerate() {
        let q_ll = chain.rate(l, l);
        let factors: Vec<f64> =
            (0..grid.n_nodes()).map(|i| (-q_ll * grid.node(i)).exp()).collect();
        out.push(sol.with_node_scaling(&factors)?);
    }
    Ok(out)
}

/// Everything produced by a full market solve.
#[derive(Debug)]
pub struct MarketSolution {
    /// Solved grids of the rescaled system.
    pub transformed: Vec<BsdeSolutionGrid>,
    /// Grids mapped back to the original scale.
    pub components: Vec<BsdeSolutionGrid>,
    pub report: PicardReport,
    /// Frozen coupling of the final sweep (the `a`-process of each
    /// component's scalar solve).
    pub frozen_coupling: Vec<Array2<f64>>,
    /// Terminal samples of the rescaled system, per (path, component).
    pub xi_transformed: Array2<f64>,
}

impl MarketSolution {
    pub fn y0(&self, component: usize) -> f64 {
        self.components[component].y0()
    }
}

/// Solves the market's value BSDE on a batch: builds the rescaled system,
/// runs the decoupling iteration, and maps the solution back.
pub fn solve_market(
    market: &MarketSpec,
    batch: &ScenarioBatch,
    basis: Option<&RegressionBasis>,
    options: &PicardOptions,
) -> Result<MarketSolution> {
    market.validate_coefficients(batch.grid().horizon())?;
    let (system, terminal) = build_transformed_system(market, batch.grid())?;
    let default_basis;
    let basis = match basis {
        Some(b) => b,
        None => {
            default_basis =
                RegressionBasis::poly2_regime(market.n_regimes(), market.brownian_dim());
            &default_basis
        }
    };
    let outcome = picard_solve(&system, &terminal, batch, basis, options)?;
    let components = untransform_solution(&outcome.components, market.chain(), batch.grid())?;
    Ok(MarketSolution {
        transformed: outcome.components,
        components,
        report: outcome.report,
        frozen_coupling: outcome.frozen_coupling,
        xi_transformed: outcome.terminal_samples,
    })
}

/// Volatility-adjusted portfolio weights `p(t, path)` per node.
#[derive(Debug, Clone)]
pub struct StrategyGrid {
    /// `(paths, steps, d)`.
    pub p: Array3<f64>,
    /// Nodes where `Y` sat at or below the positivity floor.
    pub flagged_nodes: usize,
}

impl StrategyGrid {
    pub fn scaled(&self, factor: f64) -> StrategyGrid {
        StrategyGrid { p: &self.p * factor, flagged_nodes: self.flagged_nodes }
    }

    pub fn sup_norm(&self) -> f64 {
        self.p.iter().map(|v| v.abs()).fold(0.0f64, f64::max)
    }

    /// Constant strategy (same row at every node and path).
    pub fn constant(row: &[f64], n_paths: usize, steps: usize) -> StrategyGrid {
        let d = row.len();
        StrategyGrid {
            p: Array3::from_shape_fn((n_paths, steps, d), |(_, _, j)| row[j]),
            flagged_nodes: 0,
        }
    }
}

/// `lambda(t_i, l)` for every node and regime.
fn lambda_table(market: &MarketSpec, grid: &TimeGrid) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut table = Vec::with_capacity(grid.n_nodes());
    for i in 0..grid.n_nodes() {
        let mut per_regime = Vec::with_capacity(market.n_regimes());
        for l in 0..market.n_regimes() {
            per_regime.push(market.lambda(grid.node(i), l)?);
        }
        table.push(per_regime);
    }
    Ok(table)
}

/// Extracts the optimal strategy
/// `p*(s) = (lambda(s, l)' + Z^l(s) / Y^l(s)) / (1 - gamma)` with `l` the
/// path's regime at the left node.
pub fn optimal_strategy(
    market: &MarketSpec,
    components: &[BsdeSolutionGrid],
    batch: &ScenarioBatch,
) -> Result<StrategyGrid> {
    const FLOOR: f64 = 1e-8;
    let m = batch.n_paths();
    let grid = batch.grid();
    let steps = grid.n_steps();
    let d = market.brownian_dim();
    let lambda = lambda_table(market, grid)?;
    let scale = 1.0 / (1.0 - market.gamma);

    let mut p = Array3::<f64>::zeros((m, steps, d));
    let mut flagged = 0usize;
    for path in 0..m {
        for i in 0..steps {
            let l = batch.regime(path, i);
            let y = components[l].y()[(path, i)];
            if y <= FLOOR {
                flagged += 1;
            }
            for j in 0..d {
                let z = components[l].z()[(path, i, j)];
                p[(path, i, j)] = scale * (lambda[i][l][j] + z / y);
            }
        }
    }
    Ok(StrategyGrid { p, flagged_nodes: flagged })
}

/// Wealth paths under a strategy.
#[derive(Debug, Clone)]
pub struct WealthGrid {
    /// `(paths, nodes)`, strictly positive.
    pub x: Array2<f64>,
}

impl WealthGrid {
    pub fn terminal(&self, path: usize) -> f64 {
        self.x[(path, self.x.dim().1 - 1)]
    }
}

/// Simulates wealth by exact stochastic-exponential stepping:
/// `X_{i+1} = X_i exp((p lambda - |p|^2 / 2) dt + p dW_i)`; positivity is
/// structural and `X` is linear in the initial wealth pathwise.
pub fn simulate_wealth(
    initial_wealth: f64,
    strategy: &StrategyGrid,
    batch: &ScenarioBatch,
    market: &MarketSpec,
) -> Result<WealthGrid> {
    if !(initial_wealth > 0.0) {
        return Err(CoreError::Config(format!("initial wealth must be > 0, got {initial_wealth}")));
    }
    let (m, steps, d) = strategy.p.dim();
    if m != batch.n_paths() || steps != batch.grid().n_steps() || d != batch.brownian_dim() {
        return Err(CoreError::Internal(format!(
            "strategy shape {:?} does not match the batch",
            strategy.p.dim()
        )));
    }
    if strategy.p.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerics("strategy contains non-finite entries".into()));
    }
    let grid = batch.grid();
    let dt = grid.dt();
    let lambda = lambda_table(market, grid)?;

    let mut x = Array2::<f64>::zeros((m, steps + 1));
    for path in 0..m {
        x[(path, 0)] = initial_wealth;
        for i in 0..steps {
            let l = batch.regime(path, i);
            let lam = &lambda[i][l];
            let mut drift = 0.0;
            let mut p_sq = 0.0;
            let mut noise = 0.0;
            for j in 0..d {
                let pj = strategy.p[(path, i, j)];
                drift += pj * lam[j];
                p_sq += pj * pj;
                noise += pj * batch.increment(path, i)[j];
            }
            let growth = (drift - 0.5 * p_sq) * dt + noise;
            x[(path, i + 1)] = x[(path, i)] * growth.exp();
        }
    }
    Ok(WealthGrid { x })
}

/// Sample mean and standard error of the terminal utility
/// `(X_T zeta(alpha_T))^gamma / gamma`.
pub fn estimate_utility(
    wealth: &WealthGrid,
    batch: &ScenarioBatch,
    market: &MarketSpec,
) -> (f64, f64) {
    let m = batch.n_paths();
    let last = batch.grid().n_steps();
    let gamma = market.gamma;
    let mut samples = Vec::with_capacity(m);
    for path in 0..m {
        let zeta = market.zeta()[batch.regime(path, last)];
        samples.push((wealth.terminal(path) * zeta).powf(gamma) / gamma);
    }
    let mean = samples.iter().sum::<f64>() / m as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
    (mean, (var / m as f64).sqrt())
}

/// Utility of one candidate strategy in the verification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyUtility {
    pub label: String,
    pub utility: f64,
    pub stderr: f64,
    /// `(v_bsde - utility) / stderr`; positive when the candidate is worse.
    pub gap_sigmas: f64,
    /// Candidate does not beat the BSDE value beyond tolerance.
    pub pass: bool,
}

/// Statistical optimality verification of the solved value function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    /// `V = (x^gamma / gamma) Y_0^{l0}`.
    pub v_bsde: f64,
    pub y0: Vec<f64>,
    pub initial_regime: usize,
    pub rows: Vec<StrategyUtility>,
    /// `|utility(p*) - V| <= 3 stderr`.
    pub optimal_matches_value: bool,
    /// No candidate beats `V` by more than 3 stderr.
    pub dominance: bool,
    /// `sup |p*|` over the grid (admissibility diagnostic, heuristic).
    pub strategy_sup: f64,
    /// Relative drift of `X` under the risk-premium-shifted measure;
    /// `E[X_T E(-lambda . W)_T] / x - 1` should vanish for admissible
    /// strategies (heuristic stand-in for the class-(D) requirement).
    pub drift_diagnostic: f64,
    pub flagged_nodes: usize,
}

/// Verifies `V(x, l0) = (x^gamma / gamma) Y_0^{l0}` statistically: the
/// extracted strategy must attain the value within three standard errors
/// and no perturbation may beat it. Default perturbations scale `p*` by
/// `{0, 0.5, 0.8, 1.2, 1.5}` and freeze `lambda(0, l0)' / (1 - gamma)`.
pub fn verify_optimality(
    market: &MarketSpec,
    components: &[BsdeSolutionGrid],
    batch: &ScenarioBatch,
    extra_strategies: &[(String, StrategyGrid)],
) -> Result<VerificationReport> {
    let gamma = market.gamma;
    let x0 = market.initial_wealth;
    let l0 = market.initial_regime;
    let y0: Vec<f64> = components.iter().map(|g| g.y0()).collect();
    let v_bsde = x0.powf(gamma) / gamma * y0[l0];

    let optimal = optimal_strategy(market, components, batch)?;
    let steps = batch.grid().n_steps();
    let m = batch.n_paths();

    let mut candidates: Vec<(String, StrategyGrid)> = Vec::new();
    candidates.push(("optimal".into(), optimal.scaled(1.0)));
    for scale in [0.0, 0.5, 0.8, 1.2, 1.5] {
        candidates.push((format!("scaled_{scale}"), optimal.scaled(scale)));
    }
    let lam0 = market.lambda(0.0, l0)?;
    let frozen_row: Vec<f64> = lam0.iter().map(|v| v / (1.0 - gamma)).collect();
    candidates.push(("frozen_t0".into(), StrategyGrid::constant(&frozen_row, m, steps)));
    for (label, s) in extra_strategies {
        candidates.push((label.clone(), s.scaled(1.0)));
    }

    let mut rows = Vec::with_capacity(candidates.len());
    let mut optimal_matches_value = false;
    let mut dominance = true;
    for (label, strategy) in &candidates {
        let wealth = simulate_wealth(x0, strategy, batch, market)?;
        let (utility, stderr) = estimate_utility(&wealth, batch, market);
        let gap_sigmas = if stderr > 0.0 { (v_bsde - utility) / stderr } else { 0.0 };
        let guard = 1e-9 * v_bsde.abs().max(1.0);
        let pass = utility <= v_bsde + 3.0 * stderr + guard;
        if label == "optimal" {
            optimal_matches_value = (utility - v_bsde).abs() <= 3.0 * stderr + guard;
        }
        dominance &= pass;
        rows.push(StrategyUtility { label: label.clone(), utility, stderr, gap_sigmas, pass });
    }

    let drift_diagnostic = shifted_drift(market, &optimal, batch, x0)?;
    Ok(VerificationReport {
        v_bsde,
        y0,
        initial_regime: l0,
        rows,
        optimal_matches_value,
        dominance,
        strategy_sup: optimal.sup_norm(),
        drift_diagnostic,
        flagged_nodes: optimal.flagged_nodes,
    })
}

/// `E[X_T E(-lambda . W)_T] / x - 1` under the extracted strategy.
fn shifted_drift(
    market: &MarketSpec,
    strategy: &StrategyGrid,
    batch: &ScenarioBatch,
    x0: f64,
) -> Result<f64> {
    let wealth = simulate_wealth(x0, strategy, batch, market)?;
    let grid = batch.grid();
    let dt = grid.dt();
    let d = batch.brownian_dim();
    let lambda = lambda_table(market, grid)?;
    let m = batch.n_paths();
    let mut acc = 0.0;
    for path in 0..m {
        let mut log_density = 0.0;
        for i in 0..grid.n_steps() {
            let l = batch.regime(path, i);
            let lam = &lambda[i][l];
            let mut lam_sq = 0.0;
            let mut lam_dw = 0.0;
            for j in 0..d {
                lam_sq += lam[j] * lam[j];
                lam_dw += lam[j] * batch.increment(path, i)[j];
            }
            log_density += -lam_dw - 0.5 * lam_sq * dt;
        }
        acc += wealth.terminal(path) * log_density.exp();
    }
    Ok(acc / (m as f64 * x0) - 1.0)
}
