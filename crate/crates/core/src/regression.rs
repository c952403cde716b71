//! Least-squares Monte Carlo estimation of conditional expectations.
//!
//! Future values are regressed on basis functions of the current state
//! (Brownian level and regime). The normal equations carry a small ridge
//! floor scaled by the trace of the Gram matrix, which keeps near-collinear
//! feature sets (e.g. regime indicators alongside a global constant)
//! solvable without visibly biasing well-posed fits.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::scenario::ScenarioBatch;

/// Feature map `phi(node, W_t, regime) -> features`; the first feature is
/// always the constant 1.
#[derive(Clone)]
pub struct RegressionBasis {
    n_features: usize,
    fill: Arc<dyn Fn(usize, &[f64], usize, &mut [f64]) + Send + Sync>,
}

impl RegressionBasis {
    pub fn new(
        n_features: usize,
        fill: Arc<dyn Fn(usize, &[f64], usize, &mut [f64]) + Send + Sync>,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(CoreError::Config("basis needs at least the constant feature".into()));
        }
        Ok(Self { n_features, fill })
    }

    /// Constant-only basis; regression degenerates to the sample mean.
    pub fn constant_only() -> Self {
        Self { n_features: 1, fill: Arc::new(|_node, _w, _regime, out| out[0] = 1.0) }
    }

    /// Default basis: a global constant plus, per regime, the indicator
    /// times all monomials in `W_t` of total degree <= 2.
    pub fn poly2_regime(k: usize, d: usize) -> Self {
        let per_regime = 1 + d + d * (d + 1) / 2;
        let n_features = 1 + k * per_regime;
        let fill = Arc::new(move |_node: usize, w: &[f64], regime: usize, out: &mut [f64]| {
            for v in out.iter_mut() {
                *v = 0.0;
            }
            out[0] = 1.0;
            let base = 1 + regime * per_regime;
            out[base] = 1.0;
            for i in 0..d {
                out[base + 1 + i] = w[i];
            }
            let mut slot = base + 1 + d;
            for i in 0..d {
                for j in i..d {
                    out[slot] = w[i] * w[j];
                    slot += 1;
                }
            }
        });
        Self { n_features, fill }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn fill(&self, node: usize, w: &[f64], regime: usize, out: &mut [f64]) {
        (self.fill)(node, w, regime, out)
    }

    /// Assembles the `M x F` design matrix at one grid node.
    pub fn design_matrix(&self, batch: &ScenarioBatch, node: usize) -> Array2<f64> {
        let m = batch.n_paths();
        let mut x = Array2::<f64>::zeros((m, self.n_features));
        for path in 0..m {
            let w = batch.brownian_level(path, node);
            let row = x.row_mut(path);
            self.fill(node, w.as_slice().unwrap(), batch.regime(path, node), row.into_slice().unwrap());
        }
        x
    }
}

impl fmt::Debug for RegressionBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressionBasis").field("n_features", &self.n_features).finish()
    }
}

/// Fitted conditional means and the coefficients that produced them.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub fitted: Vec<f64>,
    pub coeffs: Vec<f64>,
}

/// A factored regression problem at one node, reusable across targets.
pub struct NodeRegression {
    x: Array2<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// At the initial node the state is deterministic, so the conditional
    /// expectation is the plain sample mean.
    deterministic: bool,
}

impl NodeRegression {
    pub fn new(x: Array2<f64>, ridge: f64, deterministic: bool) -> Result<Self> {
        let (m, f) = x.dim();
        if deterministic {
            return Ok(Self { x, chol: None, deterministic: true });
        }
        if m < f {
            return Err(CoreError::Numerics(format!(
                "regression needs at least as many paths ({m}) as features ({f})"
            )));
        }
        // Row-major Gram accumulation; regime-indicator bases are sparse,
        // so zero entries are skipped.
        let xs = x.as_slice().expect("standard layout");
        let mut gram = vec![0.0f64; f * f];
        for row in xs.chunks_exact(f) {
            for (r, &xr) in row.iter().enumerate() {
                if xr != 0.0 {
                    let base = r * f;
                    for c in r..f {
                        gram[base + c] += xr * row[c];
                    }
                }
            }
        }
        let trace: f64 = (0..f).map(|i| gram[i * f + i]).sum();
        let floor = ridge * trace.max(f64::MIN_POSITIVE) / f as f64;
        let mut na = nalgebra::DMatrix::<f64>::zeros(f, f);
        for r in 0..f {
            for c in r..f {
                na[(r, c)] = gram[r * f + c];
                na[(c, r)] = gram[r * f + c];
            }
            na[(r, r)] += floor;
        }
        let chol = nalgebra::Cholesky::new(na).ok_or_else(|| {
            CoreError::Numerics("normal equations are rank-deficient after ridge".into())
        })?;
        Ok(Self { x, chol: Some(chol), deterministic: false })
    }

    /// Fits one target vector, returning per-path conditional means.
    pub fn fit(&self, targets: &[f64]) -> Result<RegressionFit> {
        let (m, f) = self.x.dim();
        if targets.len() != m {
            return Err(CoreError::Internal(format!(
                "target length {} does not match path count {m}",
                targets.len()
            )));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerics("regression target contains non-finite values".into()));
        }
        if self.deterministic {
            let mean = targets.iter().sum::<f64>() / m as f64;
            let mut coeffs = vec![0.0; f];
            coeffs[0] = mean;
            return Ok(RegressionFit { fitted: vec![mean; m], coeffs });
        }
        let xs = self.x.as_slice().expect("standard layout");
        let mut rhs = nalgebra::DVector::<f64>::zeros(f);
        for (row, &t) in xs.chunks_exact(f).zip(targets) {
            if t != 0.0 {
                for (c, &xc) in row.iter().enumerate() {
                    rhs[c] += xc * t;
                }
            }
        }
        let beta = self.chol.as_ref().unwrap().solve(&rhs);
        let coeffs: Vec<f64> = beta.iter().cloned().collect();
        let mut fitted = vec![0.0; m];
        for (slot, row) in fitted.iter_mut().zip(xs.chunks_exact(f)) {
            let mut acc = 0.0;
            for (c, &xc) in row.iter().enumerate() {
                if xc != 0.0 {
                    acc += xc * coeffs[c];
                }
            }
            *slot = acc;
        }
        Ok(RegressionFit { fitted, coeffs })
    }
}

/// Factors the design matrices of every interior node once; reused across
/// regression targets, components, and decoupling sweeps.
pub fn factor_nodes(
    basis: &RegressionBasis,
    batch: &ScenarioBatch,
    ridge: f64,
) -> Result<Vec<NodeRegression>> {
    let steps = batch.grid().n_steps();
    (0..steps)
        .map(|node| NodeRegression::new(basis.design_matrix(batch, node), ridge, node == 0))
        .collect()
}

/// One-shot least-squares fit of `targets` on the rows of `features`.
/// `deterministic` marks nodes where the state carries no information
/// (node 0), in which case the sample mean is returned.
pub fn regress_conditional(
    features: &Array2<f64>,
    targets: &[f64],
    ridge: f64,
    deterministic: bool,
) -> Result<RegressionFit> {
    NodeRegression::new(features.clone(), ridge, deterministic)?.fit(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use crate::scenario::{ChainGenerator, ScenarioBatch};
    use ndarray::arr2;

    const RIDGE: f64 = 1e-10;

    fn batch() -> ScenarioBatch {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let chain = ChainGenerator::new(arr2(&[[-1.0, 1.0], [1.0, -1.0]])).unwrap();
        ScenarioBatch::generate(&grid, 1, &chain, 0, 4000, 17).unwrap()
    }

    #[test]
    fn constants_reproduce() {
        let b = batch();
        let basis = RegressionBasis::poly2_regime(2, 1);
        let x = basis.design_matrix(&b, 2);
        let targets = vec![3.25; b.n_paths()];
        let fit = regress_conditional(&x, &targets, RIDGE, false).unwrap();
        for v in &fit.fitted {
            assert!((v - 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn in_span_targets_fit_exactly() {
        let b = batch();
        let basis = RegressionBasis::poly2_regime(2, 1);
        let node = 2;
        let x = basis.design_matrix(&b, node);
        let targets: Vec<f64> = (0..b.n_paths()).map(|p| b.brownian_level(p, node)[0]).collect();
        let fit = regress_conditional(&x, &targets, RIDGE, false).unwrap();
        let resid: f64 = fit
            .fitted
            .iter()
            .zip(&targets)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(resid < 1e-8, "in-span residual {resid}");
    }

    #[test]
    fn independent_targets_fit_to_mean() {
        // Targets independent of the node-2 state: fitted values should be
        // near the sample mean and residuals uncorrelated with features.
        let b = batch();
        let basis = RegressionBasis::poly2_regime(2, 1);
        let node = 2;
        let x = basis.design_matrix(&b, node);
        // Use future increments (independent of node-2 information).
        let targets: Vec<f64> = (0..b.n_paths()).map(|p| 1.0 + b.increment(p, 3)[0]).collect();
        let m = b.n_paths() as f64;
        let mean = targets.iter().sum::<f64>() / m;
        let fit = regress_conditional(&x, &targets, RIDGE, false).unwrap();
        let fit_spread = fit
            .fitted
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            .sqrt()
            / m.sqrt();
        let target_sd =
            (targets.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m).sqrt();
        assert!(fit_spread < 0.1 * target_sd, "spread {fit_spread} vs sd {target_sd}");
        // Residual correlation with each feature is zero by the normal
        // equations (up to the ridge floor).
        for c in 0..basis.n_features() {
            let mut dot = 0.0;
            for p in 0..b.n_paths() {
                dot += (targets[p] - fit.fitted[p]) * x[(p, c)];
            }
            assert!(dot.abs() / m < 1e-6, "feature {c} residual correlation {dot}");
        }
    }

    #[test]
    fn deterministic_node_uses_mean() {
        let b = batch();
        let basis = RegressionBasis::poly2_regime(2, 1);
        let x = basis.design_matrix(&b, 0);
        let targets: Vec<f64> = (0..b.n_paths()).map(|p| p as f64).collect();
        let fit = regress_conditional(&x, &targets, RIDGE, true).unwrap();
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        assert!(fit.fitted.iter().all(|v| *v == mean));
        assert_eq!(fit.coeffs[0], mean);
    }

    #[test]
    fn more_features_than_paths_is_an_error() {
        let x = Array2::<f64>::ones((2, 3));
        assert!(matches!(
            regress_conditional(&x, &[1.0, 2.0], RIDGE, false),
            Err(CoreError::Numerics(_))
        ));
    }
}
