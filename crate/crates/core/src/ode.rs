//! Noise-free limit dynamics: the ODE `dx/dt = S(theta, t, x)` solved by
//! classical fourth-order Runge-Kutta on the shared uniform grid, plus the
//! derived quantities built along the solution (state-derivative exponential
//! `psi`, parameter sensitivities, first-order variance profile).

use crate::error::{Error, Result};
use crate::grid::{cum_trapezoid, Grid};
use crate::model::{AlternativeDrift, ModelSpec};

/// Exponent bound before `exp` overflows; integrals beyond this are reported
/// as [`Error::PsiOverflow`] instead of returning infinities.
const EXP_OVERFLOW: f64 = 700.0;

/// Deterministic path on a grid: `values[i]` is the state at node `t_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPath {
    grid: Grid,
    values: Vec<f64>,
}

impl DeterministicPath {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                what: "path values",
                expected: grid.n_nodes(),
                got: values.len(),
            });
        }
        Ok(DeterministicPath { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }
}

pub(crate) fn require_matching_horizon(grid: Grid, horizon: f64) -> Result<()> {
    if (grid.horizon() - horizon).abs() > 1e-12 * horizon.abs().max(1.0) {
        return Err(Error::Config(format!(
            "grid horizon {} does not match model horizon {}",
            grid.horizon(),
            horizon
        )));
    }
    Ok(())
}

fn rk4<F>(grid: Grid, x0: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(f64, f64) -> f64,
{
    let n = grid.n();
    let dt = grid.dt();
    let mut values = Vec::with_capacity(n + 1);
    let mut x = x0;
    values.push(x);
    for i in 0..n {
        let t = grid.t(i);
        let k1 = f(t, x);
        let k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1);
        let k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2);
        let k4 = f(t + dt, x + dt * k3);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !x.is_finite() {
            return Err(Error::NonFiniteState { index: i + 1, t: grid.t(i + 1) });
        }
        values.push(x);
    }
    Ok(values)
}

/// Solves `dx/dt = S(theta, t, x)`, `x(0) = x0`, on the grid.
pub fn solve_limit_ode(model: &ModelSpec, theta: &[f64], grid: Grid) -> Result<DeterministicPath> {
    model.check_theta(theta)?;
    require_matching_horizon(grid, model.horizon())?;
    let values = rk4(grid, model.x0(), |t, x| model.drift(theta, t, x))?;
    DeterministicPath::new(grid, values)
}

/// Solves `dy/dt = S_alt(t, y)`, `y(0) = x0(alt)`, on the grid.
pub fn solve_alternative_ode(alt: &AlternativeDrift, grid: Grid) -> Result<DeterministicPath> {
    let values = rk4(grid, alt.x0(), |t, y| alt.drift(t, y))?;
    DeterministicPath::new(grid, values)
}

/// `psi(t) = exp( integral_0^t S'(theta, v, x_v) dv )` along the given limit
/// path, trapezoid rule in the exponent.
pub fn psi(model: &ModelSpec, theta: &[f64], path: &DeterministicPath) -> Result<Vec<f64>> {
    model.check_theta(theta)?;
    let grid = path.grid();
    let sprime: Vec<f64> = path
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| model.drift_dx(theta, grid.t(i), x))
        .collect();
    let exponent = cum_trapezoid(&sprime, grid.dt());
    let mut out = Vec::with_capacity(exponent.len());
    for (i, &e) in exponent.iter().enumerate() {
        if !e.is_finite() || e.abs() > EXP_OVERFLOW {
            return Err(Error::PsiOverflow { integral: e, t: grid.t(i) });
        }
        out.push(e.exp());
    }
    Ok(out)
}

/// Parameter sensitivities of the limit path: component `k` of the result is
/// the time series `d x_t / d theta_k` obtained from the variation-of-
/// constants formula `psi(t) * integral_0^t Sdot_k(s, x_s) / psi(s) ds`.
pub fn sensitivity(
    model: &ModelSpec,
    theta: &[f64],
    path: &DeterministicPath,
) -> Result<Vec<Vec<f64>>> {
    model.check_theta(theta)?;
    let grid = path.grid();
    let n_nodes = grid.n_nodes();
    let d = model.dim();
    let psi = psi(model, theta, path)?;

    let mut grad = vec![0.0; d];
    let mut integrands = vec![vec![0.0; n_nodes]; d];
    for (i, &x) in path.values().iter().enumerate() {
        model.drift_dtheta(theta, grid.t(i), x, &mut grad);
        for k in 0..d {
            integrands[k][i] = grad[k] / psi[i];
        }
    }
    let mut out = Vec::with_capacity(d);
    for integrand in &integrands {
        let mut cum = cum_trapezoid(integrand, grid.dt());
        for (c, &p) in cum.iter_mut().zip(&psi) {
            *c *= p;
        }
        out.push(cum);
    }
    Ok(out)
}

/// First-order variance profile of the small-noise expansion:
/// `v(t) = integral_0^t ( psi(t) sigma(s, x_s) / psi(s) )^2 ds`, so that
/// `Var(X_t) ~ eps^2 v(t)` as the noise level shrinks.
pub fn x1_variance(model: &ModelSpec, theta: &[f64], path: &DeterministicPath) -> Result<Vec<f64>> {
    model.check_theta(theta)?;
    let grid = path.grid();
    let psi = psi(model, theta, path)?;
    let mut integrand = Vec::with_capacity(grid.n_nodes());
    for (i, &x) in path.values().iter().enumerate() {
        let s = model.sigma(grid.t(i), x)?;
        integrand.push((s / psi[i]).powi(2));
    }
    let mut v = cum_trapezoid(&integrand, grid.dt());
    for (vi, &p) in v.iter_mut().zip(&psi) {
        *vi *= p * p;
    }
    Ok(v)
}
