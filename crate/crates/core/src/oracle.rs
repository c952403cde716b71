//! Independent reference solvers for analytically reducible configurations.
//!
//! When the market coefficients are deterministic in time the BSDE solution
//! carries no Brownian exposure (`Z = 0`) and the system collapses to the
//! linear ODE
//!
//! ```text
//! dY^l/dt = -(gamma / (2 (1 - gamma))) |lambda(t, l)|^2 Y^l - sum_j q^{lj} Y^j
//! ```
//!
//! integrated backward from the terminal values. These oracles never touch
//! the Monte Carlo machinery and are used as ground truth in acceptance
//! tests.

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::model::TimeGrid;

/// Single-regime closed form: `Y_t = zeta^gamma exp(gamma |lambda|^2 (T - t)
/// / (2 (1 - gamma)))`.
pub fn merton_closed_form(gamma: f64, lambda_sq: f64, horizon: f64, t: f64, zeta: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CoreError::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if gamma == 1.0 / 3.0 {
        return Err(CoreError::Config("gamma = 1/3 implies delta = 1 and is rejected".into()));
    }
    if !(zeta > 0.0) {
        return Err(CoreError::Config(format!("zeta must be > 0, got {zeta}")));
    }
    if lambda_sq < 0.0 || t < 0.0 || t > horizon {
        return Err(CoreError::Config("need |lambda|^2 >= 0 and 0 <= t <= T".into()));
    }
    Ok(zeta.powf(gamma) * (gamma * lambda_sq * (horizon - t) / (2.0 * (1.0 - gamma))).exp())
}

/// Backward Runge-Kutta solution of the regime-coupled value ODE, recorded
/// at the grid nodes.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    grid: TimeGrid,
    /// `k x (N + 1)` values, component-major.
    y: Array2<f64>,
    pub integrator_steps: usize,
}

impl OdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn value(&self, component: usize, node: usize) -> f64 {
        self.y[(component, node)]
    }

    pub fn y0(&self, component: usize) -> f64 {
        self.y[(component, 0)]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.y
    }

    /// Writes `(t, component, y)` rows as a comma-separated table.
    pub fn save_table(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,component,y")?;
        for node in 0..self.grid.n_nodes() {
            for l in 0..self.y.dim().0 {
                writeln!(out, "{:.12},{},{:.17e}", self.grid.node(node), l + 1, self.y[(l, node)])?;
            }
        }
        Ok(())
    }
}

/// Integrates the coupled ODE backward from `xi` with classical RK4 on at
/// least `min_steps` substeps (aligned with the grid nodes), and verifies
/// the result against a step-halved run; disagreement beyond 1e-6 is an
/// oracle error.
pub fn ode_oracle(
    rate_matrix: &Array2<f64>,
    lambda_sq: &dyn Fn(f64, usize) -> f64,
    gamma: f64,
    xi: &[f64],
    grid: &TimeGrid,
    min_steps: usize,
) -> Result<OdeSolution> {
    let k = xi.len();
    if rate_matrix.dim() != (k, k) {
        return Err(CoreError::Config(format!(
            "rate matrix is {:?} but terminal has {k} components",
            rate_matrix.dim()
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) || gamma == 1.0 / 3.0 {
        return Err(CoreError::Config(format!(
            "gamma must lie in (0, 1/3) or (1/3, 1), got {gamma}"
        )));
    }
    if xi.iter().any(|v| !(*v > 0.0)) {
        return Err(CoreError::Config("terminal values must be strictly positive".into()));
    }

    let coarse = integrate(rate_matrix, lambda_sq, gamma, xi, grid, min_steps.max(1000));
    let fine = integrate(rate_matrix, lambda_sq, gamma, xi, grid, 2 * min_steps.max(1000));
    let mut worst = 0.0f64;
    for node in 0..grid.n_nodes() {
        for l in 0..k {
            worst = worst.max((coarse.y[(l, node)] - fine.y[(l, node)]).abs());
        }
    }
    if worst > 1e-6 {
        return Err(CoreError::Oracle(format!(
            "step-halving disagreement {worst:.3e} exceeds 1e-6"
        )));
    }
    Ok(fine)
}

fn integrate(
    rate_matrix: &Array2<f64>,
    lambda_sq: &dyn Fn(f64, usize) -> f64,
    gamma: f64,
    xi: &[f64],
    grid: &TimeGrid,
    min_steps: usize,
) -> OdeSolution {
    let k = xi.len();
    let per_interval = min_steps.div_ceil(grid.n_steps()).max(1);
    let h = grid.dt() / per_interval as f64;
    let scale = gamma / (2.0 * (1.0 - gamma));

    // dY/dt = -B(t) Y with B = diag(scale * |lambda|^2) + Q.
    let deriv = |t: f64, y: &[f64], out: &mut [f64]| {
        for l in 0..k {
            let mut acc = scale * lambda_sq(t, l) * y[l];
            for j in 0..k {
                acc += rate_matrix[(l, j)] * y[j];
            }
            out[l] = -acc;
        }
    };

    let mut values = Array2::<f64>::zeros((k, grid.n_nodes()));
    let mut y: Vec<f64> = xi.to_vec();
    for l in 0..k {
        values[(l, grid.n_steps())] = y[l];
    }

    let mut k1 = vec![0.0; k];
    let mut k2 = vec![0.0; k];
    let mut k3 = vec![0.0; k];
    let mut k4 = vec![0.0; k];
    let mut tmp = vec![0.0; k];

    for node in (0..grid.n_steps()).rev() {
        let t_right = grid.node(node + 1);
        for sub in 0..per_interval {
            let t = t_right - sub as f64 * h;
            // Backward integration: step -h.
            deriv(t, &y, &mut k1);
            for i in 0..k {
                tmp[i] = y[i] - 0.5 * h * k1[i];
            }
            deriv(t - 0.5 * h, &tmp, &mut k2);
            for i in 0..k {
                tmp[i] = y[i] - 0.5 * h * k2[i];
            }
            deriv(t - 0.5 * h, &tmp, &mut k3);
            for i in 0..k {
                tmp[i] = y[i] - h * k3[i];
            }
            deriv(t - h, &tmp, &mut k4);
            for i in 0..k {
                y[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        for l in 0..k {
            values[(l, node)] = y[l];
        }
    }

    OdeSolution { grid: grid.clone(), y: values, integrator_steps: per_interval * grid.n_steps() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn closed_form_examples() {
        // zero premium
        assert_eq!(merton_closed_form(0.5, 0.0, 1.0, 0.3, 2.0).unwrap(), 2.0f64.powf(0.5));
        // gamma = 0.5, |lambda|^2 = 0.04 at t = 0
        let v = merton_closed_form(0.5, 0.04, 1.0, 0.0, 1.0).unwrap();
        assert!((v - (0.02f64).exp()).abs() < 1e-15);
        assert!((v - 1.020201).abs() < 1e-6);
        // terminal condition is exact
        assert_eq!(merton_closed_form(0.5, 0.04, 1.0, 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn closed_form_rejects_bad_gamma() {
        assert!(merton_closed_form(1.0 / 3.0, 0.04, 1.0, 0.0, 1.0).is_err());
        assert!(merton_closed_form(0.0, 0.04, 1.0, 0.0, 1.0).is_err());
        assert!(merton_closed_form(1.0, 0.04, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn single_regime_matches_closed_form() {
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let q = arr2(&[[0.0]]);
        let sol = ode_oracle(&q, &|_t, _l| 0.04, 0.5, &[1.0], &grid, 1000).unwrap();
        for node in 0..grid.n_nodes() {
            let t = grid.node(node);
            let expect = merton_closed_form(0.5, 0.04, 1.0, t, 1.0).unwrap();
            assert!(
                (sol.value(0, node) - expect).abs() < 1e-8,
                "node {node}: {} vs {expect}",
                sol.value(0, node)
            );
        }
    }

    #[test]
    fn frozen_regimes_decouple() {
        // Q = 0: each component follows its own closed form.
        let grid = TimeGrid::uniform(2.0, 40).unwrap();
        let q = arr2(&[[0.0, 0.0], [0.0, 0.0]]);
        let lam = |_t: f64, l: usize| if l == 0 { 0.04 } else { 0.16 };
        // Terminal xi = zeta^gamma: zeta = (1, 4) with gamma = 0.5.
        let sol = ode_oracle(&q, &lam, 0.5, &[1.0, 2.0], &grid, 1000).unwrap();
        let e0 = merton_closed_form(0.5, 0.04, 2.0, 0.0, 1.0).unwrap();
        let e1 = merton_closed_form(0.5, 0.16, 2.0, 0.0, 4.0).unwrap();
        assert!((sol.y0(0) - e0).abs() < 1e-8);
        assert!((sol.y0(1) - e1).abs() < 1e-8);
    }

    #[test]
    fn zero_premium_fixed_point() {
        // lambda = 0 and row sums zero: Y = 1 for all t, any Q.
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let q = arr2(&[[-2.0, 1.0, 1.0], [0.5, -1.0, 0.5], [1.0, 1.0, -2.0]]);
        let sol = ode_oracle(&q, &|_t, _l| 0.0, 0.5, &[1.0, 1.0, 1.0], &grid, 1000).unwrap();
        for node in 0..grid.n_nodes() {
            for l in 0..3 {
                assert!((sol.value(l, node) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_is_positive_and_step_stable() {
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let q = arr2(&[[-1.0, 1.0], [1.0, -1.0]]);
        let lam = |_t: f64, l: usize| if l == 0 { 0.04 } else { 0.16 };
        let a = ode_oracle(&q, &lam, 0.5, &[1.0, 1.0], &grid, 1000).unwrap();
        let b = ode_oracle(&q, &lam, 0.5, &[1.0, 1.0], &grid, 2000).unwrap();
        for node in 0..grid.n_nodes() {
            for l in 0..2 {
                assert!(a.value(l, node) > 0.0);
                assert!((a.value(l, node) - b.value(l, node)).abs() < 1e-8);
            }
        }
    }
}
