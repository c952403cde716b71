//! Experiment configuration file (TOML) and its mapping onto the model
//! types. Parse errors and rejected values carry the offending field path.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use qbsde::portfolio::{MarketSpec, PolyCoeffs, RegimeCoefficients};
use qbsde::scenario::ChainGenerator;
use qbsde::solver::{PositivityMode, SolveOptions};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunSection,
    pub market: MarketSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Default pipeline when the subcommand is `run`-style; subcommands win.
    pub pipeline: Option<String>,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Path count of optimality-verification runs.
    pub verify_paths: usize,
    /// Positivity mode: "log" or "floor".
    pub positivity: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            pipeline: None,
            seed: 42,
            paths: 10_000,
            steps: 50,
            horizon: 1.0,
            tol: 1e-4,
            max_iter: 50,
            verify_paths: 100_000,
            positivity: "log".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub regimes: usize,
    pub gamma: f64,
    pub initial_wealth: f64,
    /// One-based regime index.
    pub initial_regime: usize,
    pub zeta: Vec<f64>,
    pub nondegeneracy_mu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeff_bound: Option<f64>,
    pub rate_matrix: Vec<Vec<f64>>,
    pub coefficients: Vec<CoefficientSection>,
}

/// Per-regime coefficients: constants (`b`, `sigma`) or polynomials in `t`
/// (`b_poly`, `sigma_poly`, innermost index = power of `t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_poly: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_poly: Option<Vec<Vec<Vec<f64>>>>,
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("config serialize error: {e}")))
    }

    /// Stable fingerprint of the effective configuration.
    pub fn fingerprint(&self) -> Result<String, CliError> {
        let canonical = self.to_toml()?;
        const OFFSET: u64 = 0xcbf29ce484222325;
        const PRIME: u64 = 0x100000001b3;
        let mut h = OFFSET;
        for b in canonical.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(PRIME);
        }
        Ok(format!("{h:016x}"))
    }

    pub fn positivity_mode(&self) -> Result<PositivityMode, CliError> {
        match self.run.positivity.as_str() {
            "log" => Ok(PositivityMode::LogTransform),
            "floor" => Ok(PositivityMode::Floor { floor: 1e-8 }),
            other => Err(CliError::Config(format!(
                "run.positivity: expected \"log\" or \"floor\", got \"{other}\""
            ))),
        }
    }

    pub fn solve_options(&self) -> Result<SolveOptions, CliError> {
        Ok(SolveOptions { positivity: self.positivity_mode()?, ..SolveOptions::default() })
    }

    pub fn build_market(&self) -> Result<MarketSpec, CliError> {
        let m = &self.market;
        let k = m.regimes;
        if m.rate_matrix.len() != k || m.rate_matrix.iter().any(|row| row.len() != k) {
            return Err(CliError::Config(format!(
                "market.rate_matrix: expected a {k} x {k} matrix"
            )));
        }
        let q = Array2::from_shape_fn((k, k), |(l, j)| m.rate_matrix[l][j]);
        let chain = ChainGenerator::new(q)
            .map_err(|e| CliError::Config(format!("market.rate_matrix: {e}")))?;

        if m.coefficients.len() != k {
            return Err(CliError::Config(format!(
                "market.coefficients: expected {k} entries, got {}",
                m.coefficients.len()
            )));
        }
        let mut coefficients = Vec::with_capacity(k);
        for (idx, c) in m.coefficients.iter().enumerate() {
            coefficients.push(convert_coefficients(idx, c)?);
        }

        if m.initial_regime == 0 || m.initial_regime > k {
            return Err(CliError::Config(format!(
                "market.initial_regime: {} out of range 1..{k}",
                m.initial_regime
            )));
        }

        MarketSpec::new(
            chain,
            coefficients,
            m.zeta.clone(),
            m.gamma,
            m.initial_wealth,
            m.initial_regime - 1,
            m.nondegeneracy_mu,
            m.zeta_bound,
            m.coeff_bound,
        )
        .map_err(|e| CliError::Config(format!("market: {e}")))
    }
}

fn convert_coefficients(idx: usize, c: &CoefficientSection) -> Result<RegimeCoefficients, CliError> {
    let field = |name: &str| format!("market.coefficients[{idx}].{name}");
    let b = match (&c.b, &c.b_poly) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(format!("{}: give either b or b_poly, not both", field("b"))))
        }
        (Some(v), None) => v.iter().map(|x| PolyCoeffs::constant(*x)).collect(),
        (None, Some(p)) => p.iter().map(|coeffs| PolyCoeffs(coeffs.clone())).collect(),
        (None, None) => {
            return Err(CliError::Config(format!("{}: b or b_poly is required", field("b"))))
        }
    };
    let sigma: Vec<Vec<PolyCoeffs>> = match (&c.sigma, &c.sigma_poly) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(format!(
                "{}: give either sigma or sigma_poly, not both",
                field("sigma")
            )))
        }
        (Some(v), None) => v
            .iter()
            .map(|row| row.iter().map(|x| PolyCoeffs::constant(*x)).collect())
            .collect(),
        (None, Some(p)) => p
            .iter()
            .map(|row| row.iter().map(|coeffs| PolyCoeffs(coeffs.clone())).collect())
            .collect(),
        (None, None) => {
            return Err(CliError::Config(format!("{}: sigma or sigma_poly is required", field("sigma"))))
        }
    };
    Ok(RegimeCoefficients { b, sigma })
}
