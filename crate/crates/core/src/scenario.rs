//! Scenario engine: the driving d-dimensional Brownian motion, an
//! independent continuous-time Markov chain, and regime-switching market
//! coefficient utilities.
//!
//! Brownian increments and chain jumps are drawn from two disjoint seeded
//! streams derived from a single master seed by labeled hashing, so the two
//! sources are independent and every batch is reproducible from
//! `(master seed, grid, path count)`. Paths are generated in fixed-size
//! blocks, each block owning its own counter-mode substream; results are
//! therefore identical no matter how many threads generate the blocks.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::model::TimeGrid;

/// Paths per RNG substream block.
const BLOCK: usize = 4096;

/// Derives a labeled 64-bit stream seed from a master seed (FNV-1a over the
/// master bytes followed by the label). Not cryptographic; just a stable,
/// collision-unfriendly way to split one knob into independent streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in master.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Seeds of the two independent generator streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SeedPair {
    pub brownian: u64,
    pub chain: u64,
}

impl SeedPair {
    pub fn from_master(master: u64) -> Self {
        Self { brownian: derive_seed(master, "brownian"), chain: derive_seed(master, "chain") }
    }
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Rate matrix `Q = (q^{lj})` of a continuous-time Markov chain on
/// `{1, ..., k}`: off-diagonal entries nonnegative, rows summing to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainGenerator {
    k: usize,
    q: Array2<f64>,
}

impl ChainGenerator {
    pub fn new(q: Array2<f64>) -> Result<Self> {
        let (r, c) = q.dim();
        if r != c || r == 0 {
            return Err(CoreError::Config(format!("rate matrix must be square and nonempty, got {r}x{c}")));
        }
        for l in 0..r {
            let mut row_sum = 0.0;
            for j in 0..r {
                let v = q[(l, j)];
                if !v.is_finite() {
                    return Err(CoreError::Config(format!("rate q[{l}][{j}] is not finite")));
                }
                if l != j && v < 0.0 {
                    return Err(CoreError::Config(format!(
                        "off-diagonal rate q[{}][{}] = {v} must be >= 0",
                        l + 1,
                        j + 1
                    )));
                }
                if l == j && v > 0.0 {
                    return Err(CoreError::Config(format!(
                        "diagonal rate q[{}][{}] = {v} must be <= 0",
                        l + 1,
                        j + 1
                    )));
                }
                row_sum += v;
            }
            if row_sum.abs() > 1e-12 {
                return Err(CoreError::Config(format!(
                    "row {} of the rate matrix sums to {row_sum}, expected 0",
                    l + 1
                )));
            }
        }
        Ok(Self { k: r, q })
    }

    pub fn n_states(&self) -> usize {
        self.k
    }

    pub fn rate(&self, l: usize, j: usize) -> f64 {
        self.q[(l, j)]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }
}

/// Simulates `n_paths` paths of independent `Normal(0, dt)` increments on
/// the grid; shape `(n_paths, N, d)`. Bit-identical for a fixed seed.
pub fn simulate_brownian(grid: &TimeGrid, d: usize, n_paths: usize, seed: u64) -> Result<Array3<f64>> {
    if d == 0 {
        return Err(CoreError::Config("brownian dimension d must be >= 1".into()));
    }
    if n_paths == 0 {
        return Err(CoreError::Config("path count must be >= 1".into()));
    }
    let steps = grid.n_steps();
    let normal = Normal::new(0.0, grid.dt().sqrt())
        .map_err(|e| CoreError::Config(format!("bad increment distribution: {e}")))?;

    let mut dw = Array3::<f64>::zeros((n_paths, steps, d));
    {
        let slice = dw.as_slice_mut().expect("standard layout");
        let row = steps * d;
        slice
            .par_chunks_mut(BLOCK * row)
            .enumerate()
            .for_each(|(block, chunk)| {
                let mut rng = block_rng(seed, block);
                for v in chunk.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            });
    }
    Ok(dw)
}

/// Simulates the chain by its embedded jump chain: exponential holding times
/// of rate `-q^{ll}` and jump law `q^{lj} / (-q^{ll})`, recording the state
/// at every grid node. All paths start at `l0`; shape `(n_paths, N + 1)`.
pub fn simulate_chain(
    chain: &ChainGenerator,
    l0: usize,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Array2<u16>> {
    if l0 >= chain.n_states() {
        return Err(CoreError::Config(format!(
            "initial regime {} out of range 1..{}",
            l0 + 1,
            chain.n_states()
        )));
    }
    if n_paths == 0 {
        return Err(CoreError::Config("path count must be >= 1".into()));
    }
    let n_nodes = grid.n_nodes();
    let mut states = Array2::<u16>::zeros((n_paths, n_nodes));
    {
        let slice = states.as_slice_mut().expect("standard layout");
        slice
            .par_chunks_mut(BLOCK * n_nodes)
            .enumerate()
            .for_each(|(block, chunk)| {
                let mut rng = block_rng(seed, block);
                for path in chunk.chunks_mut(n_nodes) {
                    simulate_chain_path(chain, l0, grid, &mut rng, path);
                }
            });
    }
    Ok(states)
}

fn simulate_chain_path(
    chain: &ChainGenerator,
    l0: usize,
    grid: &TimeGrid,
    rng: &mut ChaCha8Rng,
    out: &mut [u16],
) {
    let mut state = l0;
    let mut clock = 0.0_f64;
    let mut next_jump = clock + holding_time(chain, state, rng);
    for (i, slot) in out.iter_mut().enumerate() {
        let node_time = grid.node(i);
        while next_jump <= node_time {
            clock = next_jump;
            state = jump_target(chain, state, rng);
            next_jump = clock + holding_time(chain, state, rng);
        }
        *slot = state as u16;
    }
}

fn holding_time(chain: &ChainGenerator, state: usize, rng: &mut ChaCha8Rng) -> f64 {
    let rate = -chain.rate(state, state);
    if rate <= 0.0 {
        return f64::INFINITY; // absorbing state
    }
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn jump_target(chain: &ChainGenerator, state: usize, rng: &mut ChaCha8Rng) -> usize {
    let total = -chain.rate(state, state);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut target = state;
    for j in 0..chain.n_states() {
        if j == state {
            continue;
        }
        acc += chain.rate(state, j) / total;
        if u < acc {
            return j;
        }
        target = j;
    }
    target
}

/// Row `l0` of `exp(tQ)` by scaling-and-squaring of the truncated Taylor
/// series. Serves as the independent distributional oracle for
/// [`simulate_chain`].
pub fn chain_marginal(chain: &ChainGenerator, t: f64, l0: usize) -> Result<Vec<f64>> {
    if t < 0.0 {
        return Err(CoreError::Config(format!("chain marginal requires t >= 0, got {t}")));
    }
    if l0 >= chain.n_states() {
        return Err(CoreError::Config(format!(
            "initial regime {} out of range 1..{}",
            l0 + 1,
            chain.n_states()
        )));
    }
    let k = chain.n_states();
    let a = chain.matrix() * t;
    let norm = a
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = &a / 2f64.powi(squarings as i32);

    // Taylor series of exp(scaled); terms decay fast since |scaled| <= 1/2.
    let mut result = Array2::<f64>::eye(k);
    let mut term = Array2::<f64>::eye(k);
    for order in 1..=40 {
        term = term.dot(&scaled) / order as f64;
        result = &result + &term;
        if term.iter().map(|v| v.abs()).fold(0.0_f64, f64::max) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }

    let mut row: Vec<f64> = result.row(l0).iter().cloned().collect();
    for v in row.iter_mut() {
        if *v < 0.0 && *v > -1e-12 {
            *v = 0.0;
        }
    }
    Ok(row)
}

/// Market price of risk `lambda = sigma' (sigma sigma')^{-1} b`, computed by
/// a Cholesky factorization of `sigma sigma'` (never an explicit inverse).
pub fn market_price_of_risk(b: &[f64], sigma: &Array2<f64>) -> Result<Vec<f64>> {
    let (m, d) = sigma.dim();
    if b.len() != m {
        return Err(CoreError::Config(format!(
            "b has {} entries but sigma has {m} rows",
            b.len()
        )));
    }
    let gram = sigma.dot(&sigma.t());
    let na = nalgebra::DMatrix::from_fn(m, m, |r, c| gram[(r, c)]);

    // Condition estimate via symmetric eigenvalues.
    let eig = na.clone().symmetric_eigen();
    let max_e = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_e = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_e > 0.0) || max_e / min_e > 1e12 {
        return Err(CoreError::Degenerate(format!(
            "sigma sigma' is numerically singular (eigenvalues in [{min_e:.3e}, {max_e:.3e}])"
        )));
    }

    let chol = nalgebra::Cholesky::new(na).ok_or_else(|| {
        CoreError::Degenerate("Cholesky factorization of sigma sigma' failed".into())
    })?;
    let rhs = nalgebra::DVector::from_column_slice(b);
    let x = chol.solve(&rhs);
    let mut lambda = vec![0.0; d];
    for j in 0..d {
        let mut acc = 0.0;
        for i in 0..m {
            acc += sigma[(i, j)] * x[i];
        }
        lambda[j] = acc;
    }
    Ok(lambda)
}

/// Non-degeneracy report: worst margin of `lambda_min(sigma sigma') - mu`
/// over the supplied probes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NondegeneracyReport {
    pub mu: f64,
    pub worst_margin: f64,
    pub worst_time: f64,
    pub worst_regime: usize,
    pub pass: bool,
}

/// Verifies `lambda_min(sigma(t, l) sigma(t, l)') >= mu` at every probe.
pub fn check_nondegeneracy(
    sigma_at: impl Fn(f64, usize) -> Array2<f64>,
    probe_times: &[f64],
    n_regimes: usize,
    mu: f64,
) -> Result<NondegeneracyReport> {
    if !(mu > 0.0) {
        return Err(CoreError::Config(format!("non-degeneracy level mu must be > 0, got {mu}")));
    }
    let mut worst_margin = f64::INFINITY;
    let mut worst_time = 0.0;
    let mut worst_regime = 0;
    for &t in probe_times {
        for l in 0..n_regimes {
            let sigma = sigma_at(t, l);
            let m = sigma.nrows();
            let gram = sigma.dot(&sigma.t());
            let na = nalgebra::DMatrix::from_fn(m, m, |r, c| gram[(r, c)]);
            let eig = na.symmetric_eigen();
            let min_e = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            let margin = min_e - mu;
            if margin < worst_margin {
                worst_margin = margin;
                worst_time = t;
                worst_regime = l;
            }
        }
    }
    Ok(NondegeneracyReport {
        mu,
        worst_margin,
        worst_time,
        worst_regime,
        pass: worst_margin >= 0.0,
    })
}

/// A simulated batch: Brownian increments and levels plus regime states on a
/// common grid, reproducible from the seed pair.
#[derive(Debug, Clone)]
pub struct ScenarioBatch {
    grid: TimeGrid,
    d: usize,
    k: usize,
    seeds: SeedPair,
    dw: Array3<f64>,
    w: Array3<f64>,
    regimes: Array2<u16>,
}

impl ScenarioBatch {
    /// Simulates a batch from a master seed: Brownian and chain streams are
    /// derived by labeled hashing and therefore independent.
    pub fn generate(
        grid: &TimeGrid,
        d: usize,
        chain: &ChainGenerator,
        l0: usize,
        n_paths: usize,
        master_seed: u64,
    ) -> Result<Self> {
        Self::generate_with_seeds(grid, d, chain, l0, n_paths, SeedPair::from_master(master_seed))
    }

    pub fn generate_with_seeds(
        grid: &TimeGrid,
        d: usize,
        chain: &ChainGenerator,
        l0: usize,
        n_paths: usize,
        seeds: SeedPair,
    ) -> Result<Self> {
        let dw = simulate_brownian(grid, d, n_paths, seeds.brownian)?;
        let regimes = simulate_chain(chain, l0, grid, n_paths, seeds.chain)?;
        let w = cumulative_levels(&dw);
        Ok(Self { grid: grid.clone(), d, k: chain.n_states(), seeds, dw, w, regimes })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.dw.dim().0
    }

    pub fn brownian_dim(&self) -> usize {
        self.d
    }

    pub fn n_regimes(&self) -> usize {
        self.k
    }

    pub fn seeds(&self) -> SeedPair {
        self.seeds
    }

    /// Increment `Delta W_i` of one path (d entries, step `i`).
    pub fn increment(&self, path: usize, step: usize) -> ArrayView1<'_, f64> {
        self.dw.slice(ndarray::s![path, step, ..])
    }

    /// Brownian level `W_{t_i}` of one path (d entries, node `i`).
    pub fn brownian_level(&self, path: usize, node: usize) -> ArrayView1<'_, f64> {
        self.w.slice(ndarray::s![path, node, ..])
    }

    pub fn regime(&self, path: usize, node: usize) -> usize {
        self.regimes[(path, node)] as usize
    }

    pub fn increments(&self) -> &Array3<f64> {
        &self.dw
    }

    pub fn regimes(&self) -> &Array2<u16> {
        &self.regimes
    }

    /// Persists the batch to a binary file; reload is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"SCNB0001");
        let push_u64 = |buf: &mut Vec<u8>, v: u64| buf.extend_from_slice(&v.to_le_bytes());
        let push_f64 = |buf: &mut Vec<u8>, v: f64| buf.extend_from_slice(&v.to_le_bytes());
        push_u64(&mut buf, self.seeds.brownian);
        push_u64(&mut buf, self.seeds.chain);
        push_f64(&mut buf, self.grid.horizon());
        push_u64(&mut buf, self.grid.n_steps() as u64);
        push_u64(&mut buf, self.n_paths() as u64);
        push_u64(&mut buf, self.k as u64);
        push_u64(&mut buf, self.d as u64);
        for v in self.dw.iter() {
            push_f64(&mut buf, *v);
        }
        for v in self.regimes.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Reloads a batch persisted by [`ScenarioBatch::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(CoreError::Internal("truncated batch file".into()));
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 8)? != b"SCNB0001" {
            return Err(CoreError::Config("not a scenario batch file".into()));
        }
        let read_u64 = |cursor: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
        };
        let read_f64 = |cursor: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
        };
        let brownian = read_u64(&mut cursor)?;
        let chain = read_u64(&mut cursor)?;
        let horizon = read_f64(&mut cursor)?;
        let steps = read_u64(&mut cursor)? as usize;
        let n_paths = read_u64(&mut cursor)? as usize;
        let k = read_u64(&mut cursor)? as usize;
        let d = read_u64(&mut cursor)? as usize;
        let grid = TimeGrid::uniform(horizon, steps)?;
        let mut dw = Array3::<f64>::zeros((n_paths, steps, d));
        for v in dw.iter_mut() {
            *v = read_f64(&mut cursor)?;
        }
        let mut regimes = Array2::<u16>::zeros((n_paths, steps + 1));
        for v in regimes.iter_mut() {
            *v = u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap());
        }
        let w = cumulative_levels(&dw);
        Ok(Self { grid, d, k, seeds: SeedPair { brownian, chain }, dw, w, regimes })
    }
}

fn cumulative_levels(dw: &Array3<f64>) -> Array3<f64> {
    let (m, steps, d) = dw.dim();
    let mut w = Array3::<f64>::zeros((m, steps + 1, d));
    for path in 0..m {
        for i in 0..steps {
            for j in 0..d {
                w[(path, i + 1, j)] = w[(path, i, j)] + dw[(path, i, j)];
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn symmetric_two_state() -> ChainGenerator {
        ChainGenerator::new(arr2(&[[-1.0, 1.0], [1.0, -1.0]])).unwrap()
    }

    #[test]
    fn rate_matrix_validation() {
        assert!(ChainGenerator::new(arr2(&[[0.0]])).is_ok());
        assert!(ChainGenerator::new(arr2(&[[-1.0, 1.0], [1.0, -1.0]])).is_ok());
        // positive diagonal
        assert!(ChainGenerator::new(arr2(&[[1.0, -1.0], [1.0, -1.0]])).is_err());
        // row sum != 0
        assert!(ChainGenerator::new(arr2(&[[-1.0, 0.5], [1.0, -1.0]])).is_err());
        // negative off-diagonal
        assert!(ChainGenerator::new(arr2(&[[1.0, -1.0], [-1.0, 1.0]])).is_err());
    }

    #[test]
    fn brownian_is_deterministic() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let a = simulate_brownian(&grid, 2, 500, 42).unwrap();
        let b = simulate_brownian(&grid, 2, 500, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_brownian(&grid, 2, 500, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn brownian_terminal_variance_matches_horizon() {
        // Var(W_T) = T, estimated over many paths; sample-variance standard
        // error is about T sqrt(2/M).
        let grid = TimeGrid::uniform(2.0, 4).unwrap();
        let m = 100_000;
        let dw = simulate_brownian(&grid, 1, m, 7).unwrap();
        let totals: Vec<f64> = (0..m).map(|p| (0..4).map(|i| dw[(p, i, 0)]).sum()).collect();
        let mean = totals.iter().sum::<f64>() / m as f64;
        let var = totals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
        let se = 2.0 * (2.0 / m as f64).sqrt();
        assert!((var - 2.0).abs() < 4.0 * se, "var {var} vs horizon 2, se {se}");
    }

    #[test]
    fn brownian_mean_within_clt_band() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let m = 100_000;
        let dw = simulate_brownian(&grid, 1, m, 11).unwrap();
        let dt = grid.dt();
        for step in [0, 4, 9] {
            let mean = (0..m).map(|p| dw[(p, step, 0)]).sum::<f64>() / m as f64;
            assert!(
                mean.abs() <= 4.0 * (dt / m as f64).sqrt(),
                "step {step} mean {mean}"
            );
        }
    }

    #[test]
    fn single_state_chain_never_moves() {
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let chain = ChainGenerator::new(arr2(&[[0.0]])).unwrap();
        let states = simulate_chain(&chain, 0, &grid, 200, 5).unwrap();
        assert!(states.iter().all(|&s| s == 0));
    }

    #[test]
    fn absorbing_state_is_terminal() {
        // State 2 has an all-zero row: once entered, never left.
        let chain =
            ChainGenerator::new(arr2(&[[-2.0, 2.0], [0.0, 0.0]])).unwrap();
        let grid = TimeGrid::uniform(4.0, 16).unwrap();
        let states = simulate_chain(&chain, 0, &grid, 2000, 13).unwrap();
        for path in 0..2000 {
            let mut absorbed = false;
            for node in 0..grid.n_nodes() {
                let s = states[(path, node)];
                if absorbed {
                    assert_eq!(s, 1, "path {path} left the absorbing state");
                }
                if s == 1 {
                    absorbed = true;
                }
            }
        }
    }

    #[test]
    fn chain_marginal_identity_at_zero() {
        let chain = symmetric_two_state();
        let p = chain_marginal(&chain, 0.0, 1).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn chain_marginal_symmetric_half_time() {
        let chain = symmetric_two_state();
        let p = chain_marginal(&chain, 0.5, 0).unwrap();
        let expect = (1.0 + (-1.0_f64).exp()) / 2.0;
        assert!((p[0] - expect).abs() < 1e-10, "{p:?}");
        assert!((p[1] - (1.0 - expect)).abs() < 1e-10);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_marginal_long_run_is_stationary() {
        let chain = symmetric_two_state();
        let p = chain_marginal(&chain, 50.0, 0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-9);
        assert!((p[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn chain_occupation_matches_marginal() {
        let chain = symmetric_two_state();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let m = 100_000;
        let states = simulate_chain(&chain, 0, &grid, m, 21).unwrap();
        for node in 1..grid.n_nodes() {
            let t = grid.node(node);
            let p = chain_marginal(&chain, t, 0).unwrap();
            let freq =
                (0..m).filter(|&path| states[(path, node)] == 0).count() as f64 / m as f64;
            let se = (p[0] * (1.0 - p[0]) / m as f64).sqrt();
            assert!(
                (freq - p[0]).abs() <= 4.0 * se,
                "node {node}: freq {freq} vs marginal {}",
                p[0]
            );
        }
    }

    #[test]
    fn brownian_and_chain_streams_are_uncorrelated() {
        let chain = symmetric_two_state();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let m = 50_000;
        let batch = ScenarioBatch::generate(&grid, 1, &chain, 0, m, 37).unwrap();
        for step in [0, 5, 9] {
            let xs: Vec<f64> = (0..m).map(|p| batch.increment(p, step)[0]).collect();
            let ys: Vec<f64> =
                (0..m).map(|p| if batch.regime(p, step) == 0 { 1.0 } else { 0.0 }).collect();
            let mx = xs.iter().sum::<f64>() / m as f64;
            let my = ys.iter().sum::<f64>() / m as f64;
            let mut cov = 0.0;
            let mut vx = 0.0;
            let mut vy = 0.0;
            for i in 0..m {
                cov += (xs[i] - mx) * (ys[i] - my);
                vx += (xs[i] - mx) * (xs[i] - mx);
                vy += (ys[i] - my) * (ys[i] - my);
            }
            let corr = cov / (vx.sqrt() * vy.sqrt()).max(1e-300);
            assert!(corr.abs() <= 4.0 / (m as f64).sqrt(), "step {step}: corr {corr}");
        }
    }

    #[test]
    fn market_price_of_risk_examples() {
        // zero excess return
        let sigma = arr2(&[[0.2]]);
        let lambda = market_price_of_risk(&[0.0], &sigma).unwrap();
        assert_eq!(lambda, vec![0.0]);

        // scalar: 0.2 * (0.04)^{-1} * 0.1 = 0.5
        let lambda = market_price_of_risk(&[0.1], &sigma).unwrap();
        assert!((lambda[0] - 0.5).abs() < 1e-12);

        // identity volatility passes b through
        let sigma = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let lambda = market_price_of_risk(&[0.1, 0.3], &sigma).unwrap();
        assert!((lambda[0] - 0.1).abs() < 1e-12 && (lambda[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn market_price_of_risk_residual_property() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.random_range(1..=3);
            let d = rng.random_range(m..=3);
            let sigma = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0))
                + Array2::from_shape_fn((m, d), |(i, j)| if i == j { 1.5 } else { 0.0 });
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
            let lambda = market_price_of_risk(&b, &sigma).unwrap();
            for i in 0..m {
                let got: f64 = (0..d).map(|j| sigma[(i, j)] * lambda[j]).sum();
                assert!((got - b[i]).abs() < 1e-10, "residual {}", got - b[i]);
            }
        }
    }

    #[test]
    fn singular_sigma_is_degeneracy_error() {
        let sigma = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            market_price_of_risk(&[0.1, 0.1], &sigma),
            Err(CoreError::Degenerate(_))
        ));
    }

    #[test]
    fn nondegeneracy_examples() {
        let id = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let rep = check_nondegeneracy(|_t, _l| id.clone(), &[0.0, 0.5, 1.0], 1, 0.5).unwrap();
        assert!(rep.pass);
        assert!((rep.worst_margin - 0.5).abs() < 1e-12);

        let diag = arr2(&[[0.2, 0.0], [0.0, 0.1]]);
        let rep = check_nondegeneracy(|_t, _l| diag.clone(), &[0.0], 1, 0.05).unwrap();
        assert!(!rep.pass);
        assert!((rep.worst_margin - (0.01 - 0.05)).abs() < 1e-12);

        let rank_deficient = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        let rep = check_nondegeneracy(|_t, _l| rank_deficient.clone(), &[0.0], 1, 1e-6).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn batch_roundtrip_is_bit_exact() {
        let chain = symmetric_two_state();
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let batch = ScenarioBatch::generate(&grid, 2, &chain, 1, 300, 1234).unwrap();
        let dir = std::env::temp_dir().join(format!("qbsde-batch-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("batch.bin");
        batch.save(&file).unwrap();
        let loaded = ScenarioBatch::load(&file).unwrap();
        assert_eq!(batch.increments(), loaded.increments());
        assert_eq!(batch.regimes(), loaded.regimes());
        assert_eq!(batch.seeds(), loaded.seeds());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn seed_derivation_is_label_sensitive() {
        assert_ne!(derive_seed(42, "brownian"), derive_seed(42, "chain"));
        assert_ne!(derive_seed(42, "brownian"), derive_seed(43, "brownian"));
        assert_eq!(derive_seed(42, "chain"), derive_seed(42, "chain"));
    }
}
