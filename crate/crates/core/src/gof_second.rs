//! Second goodness-of-fit test (any parameter dimension).
//!
//! The normalized innovation process
//!
//! ```text
//! U(t_i) = [ sum_{j<i} dX_j / sigma_j  -  cumtrapz(D / sigma)_i ] / eps
//! ```
//!
//! behaves like a Wiener process distorted by parameter estimation. The
//! distortion is removed by a martingale transform built from the tail
//! information
//!
//! ```text
//! Nbar(t) = integral_t^T Sdot Sdot^T / sigma^2 ds      (along X, trapezoid)
//! W(t)   = U(t) + integral_0^t hbar(s)^T Nbar(s)^+ Kbar(s) ds,
//! ```
//!
//! with `hbar = Sdot / sigma`, `Kbar = (Rbar - Qbar) / eps` the unnormalized
//! residual vector, and `Nbar^+` a thresholded inverse. Because `Nbar(t)`
//! degenerates at the right endpoint, the transform integrand is frozen at
//! the last grid node before `T - nu`. The statistic `Delta = T^{-2}
//! integral_0^T W(t)^2 dt` converges under the null to
//! `integral_0^1 w(s)^2 ds` for a standard Wiener process `w`, regardless of
//! the model or the true parameter.

use crate::error::{Error, Result};
use crate::gof_first::{unnormalized_q, unnormalized_r};
use crate::grid::{cum_trapezoid, trapezoid};
use crate::limits::{default_table, LimitFamily, QuantileTable};
use crate::mle;
use crate::model::{ModelSpec, ParameterSpace};
use crate::ode::solve_limit_ode;
use crate::sde::Trajectory;
use crate::TestReport;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Tail handling of the martingale transform: freeze the integrand once
/// `t > horizon - nu`, and treat `Nbar` with an eigenvalue below `min_eig`
/// as non-invertible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub nu: f64,
    pub min_eig: f64,
}

impl TruncationPolicy {
    /// Default policy for a given horizon: `nu = 0.05 T`, `min_eig = 1e-10`.
    pub fn default_for(horizon: f64) -> Self {
        TruncationPolicy { nu: 0.05 * horizon, min_eig: 1e-10 }
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.nu.is_finite() && self.nu > 0.0 && self.nu < horizon)
            || !(self.min_eig.is_finite() && self.min_eig > 0.0)
        {
            return Err(Error::BadTruncationPolicy { nu: self.nu, min_eig: self.min_eig });
        }
        Ok(())
    }
}

/// Thresholded inverse with a whole-matrix rule: if the smallest eigenvalue
/// of the symmetric matrix is at least `min_eig` the true inverse is
/// returned, otherwise the zero matrix. No per-direction truncation: a
/// nearly singular matrix is treated as wholly uninformative.
pub fn pinv_plus(mat: &DMatrix<f64>, min_eig: f64) -> Result<DMatrix<f64>> {
    let d = mat.nrows();
    if mat.ncols() != d {
        return Err(Error::DimensionMismatch { what: "pinv input", expected: d, got: mat.ncols() });
    }
    let scale = mat.abs().max().max(1e-300);
    let asym = (mat - mat.transpose()).abs().max();
    if asym > 1e-8 * scale {
        return Err(Error::NotSymmetric { asymmetry: asym, tol: 1e-8 * scale });
    }
    let eig = SymmetricEigen::new(mat.clone());
    if eig.eigenvalues.min() < min_eig {
        return Ok(DMatrix::zeros(d, d));
    }
    let mut inv = eig.eigenvalues.clone();
    for v in inv.iter_mut() {
        *v = 1.0 / *v;
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// Innovation process `U` on the trajectory grid (see module docs).
pub fn u_process(model: &ModelSpec, theta: &[f64], traj: &Trajectory) -> Result<Vec<f64>> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let n = grid.n();
    let eps = traj.epsilon();
    let limit = solve_limit_ode(model, theta, grid)?;

    let mut sigmas = Vec::with_capacity(n + 1);
    for i in 0..=n {
        sigmas.push(model.sigma(grid.t(i), traj.value(i))?);
    }
    // Left-point martingale sum.
    let mut mart = Vec::with_capacity(n + 1);
    mart.push(0.0);
    let mut acc = 0.0;
    for j in 0..n {
        acc += (traj.value(j + 1) - traj.value(j)) / sigmas[j];
        mart.push(acc);
    }
    // Trapezoid compensator of the linearized drift.
    let mut integrand = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = grid.t(i);
        let x = limit.value(i);
        let xx = traj.value(i);
        let d_i = model.drift(theta, t, x) + model.drift_dx(theta, t, xx) * (xx - x);
        integrand.push(d_i / sigmas[i]);
    }
    let comp = cum_trapezoid(&integrand, grid.dt());
    Ok(mart
        .iter()
        .zip(&comp)
        .map(|(m, c)| (m - c) / eps)
        .collect())
}

/// Tail information matrices `Nbar(t_i)` along the observed path:
/// `Nbar(0)` equals the observed information exactly and `Nbar(t_n) = 0`.
pub fn nbar_matrices(model: &ModelSpec, theta: &[f64], traj: &Trajectory) -> Result<Vec<DMatrix<f64>>> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let d = model.dim();
    let n_nodes = grid.n_nodes();

    let mut entry_series = vec![Vec::with_capacity(n_nodes); d * d];
    let mut sdot = vec![0.0; d];
    for i in 0..n_nodes {
        let t = grid.t(i);
        let x = traj.value(i);
        let s = model.sigma(t, x)?;
        model.drift_dtheta(theta, t, x, &mut sdot);
        let w = 1.0 / (s * s);
        for j in 0..d {
            for k in 0..d {
                entry_series[j * d + k].push(sdot[j] * sdot[k] * w);
            }
        }
    }
    let tails: Vec<Vec<f64>> = entry_series
        .iter()
        .map(|s| crate::grid::tail_trapezoid(s, grid.dt()))
        .collect();
    Ok((0..n_nodes)
        .map(|i| DMatrix::from_fn(d, d, |j, k| tails[j * d + k][i]))
        .collect())
}

/// Diagnostic curves of one second-test evaluation. Componentwise series
/// are indexed `[component][node]`.
#[derive(Debug, Clone)]
pub struct SecondTestCurves {
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    /// Tail information matrices, one per node.
    pub nbar: Vec<DMatrix<f64>>,
    /// Unnormalized score weights `Sdot / sigma` along the observed path.
    pub hbar: Vec<Vec<f64>>,
    pub rbar: Vec<Vec<f64>>,
    pub qbar: Vec<Vec<f64>>,
    /// Transform integrand `hbar^T Nbar^+ Kbar` (frozen past the cutoff).
    pub transform: Vec<f64>,
    pub delta2_stat: f64,
}

impl SecondTestCurves {
    /// Writes `t,u,w,transform` rows, statistic in a leading comment.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# delta2 = {:.16e}", self.delta2_stat)?;
        writeln!(out, "t,u,w,transform")?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[i], self.u[i], self.w[i], self.transform[i]
            )?;
        }
        Ok(())
    }
}

/// Builds every second-test curve at a given parameter value.
pub fn second_test_curves(
    model: &ModelSpec,
    theta: &[f64],
    traj: &Trajectory,
    policy: TruncationPolicy,
) -> Result<SecondTestCurves> {
    let grid = traj.grid();
    policy.validate(grid.horizon())?;
    let d = model.dim();
    let n_nodes = grid.n_nodes();
    let eps = traj.epsilon();
    let cutoff = grid.horizon() - policy.nu;

    let u = u_process(model, theta, traj)?;
    let nbar = nbar_matrices(model, theta, traj)?;
    let rbar = unnormalized_r(model, theta, traj)?;
    let qbar = unnormalized_q(model, theta, traj)?;

    let mut hbar = vec![vec![0.0; n_nodes]; d];
    let mut sdot = vec![0.0; d];
    for i in 0..n_nodes {
        let t = grid.t(i);
        let x = traj.value(i);
        let s = model.sigma(t, x)?;
        model.drift_dtheta(theta, t, x, &mut sdot);
        for k in 0..d {
            hbar[k][i] = sdot[k] / s;
        }
    }

    // Transform integrand, frozen at the last node at or before the cutoff.
    let freeze_idx = grid.floor_index(cutoff);
    let mut transform = vec![0.0; n_nodes];
    for i in 0..n_nodes {
        if grid.t(i) > cutoff || i > freeze_idx {
            transform[i] = transform[freeze_idx];
            continue;
        }
        // One decomposition per node; before the cutoff a sub-floor
        // eigenvalue is an error, so the zero branch of the thresholded
        // inverse never applies here.
        let eig = SymmetricEigen::new(nbar[i].clone());
        let eig_min = eig.eigenvalues.min();
        if eig_min < policy.min_eig {
            return Err(Error::DegenerateTailMatrix {
                t: grid.t(i),
                min_eig: eig_min,
                floor: policy.min_eig,
                cutoff,
            });
        }
        let mut inv_vals = eig.eigenvalues.clone();
        for v in inv_vals.iter_mut() {
            *v = 1.0 / *v;
        }
        let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        let mut acc = 0.0;
        for j in 0..d {
            let kbar_j = (rbar[j][i] - qbar[j][i]) / eps;
            for k in 0..d {
                acc += hbar[k][i] * inv[(k, j)] * kbar_j;
            }
        }
        transform[i] = acc;
    }

    let correction = cum_trapezoid(&transform, grid.dt());
    let w: Vec<f64> = u.iter().zip(&correction).map(|(a, b)| a + b).collect();
    let wsq: Vec<f64> = w.iter().map(|v| v * v).collect();
    let t_sq = grid.horizon() * grid.horizon();
    let delta2_stat = trapezoid(&wsq, grid.dt()) / t_sq;
    let times = (0..n_nodes).map(|i| grid.t(i)).collect();
    Ok(SecondTestCurves { times, u, w, nbar, hbar, rbar, qbar, transform, delta2_stat })
}

/// Runs the second test end to end against a given quantile table.
pub fn second_test_with_table(
    model: &ModelSpec,
    space: &ParameterSpace,
    traj: &Trajectory,
    alpha: f64,
    table: &QuantileTable,
    policy: TruncationPolicy,
) -> Result<(TestReport, SecondTestCurves)> {
    if table.family != LimitFamily::WienerSq {
        return Err(Error::Config(format!(
            "second test needs a wiener-law table, got {}",
            table.family
        )));
    }
    let threshold = table.threshold(alpha)?;
    let est = mle::estimate(model, space, traj)?;
    let curves = second_test_curves(model, &est.theta_hat, traj, policy)?;
    let report = TestReport {
        statistic: curves.delta2_stat,
        threshold,
        alpha,
        reject: curves.delta2_stat > threshold,
        theta_hat: est.theta_hat,
        n: traj.grid().n(),
        epsilon: traj.epsilon(),
    };
    Ok((report, curves))
}

/// [`second_test_with_table`] with the shipped wiener table and the default
/// truncation policy for the trajectory's horizon.
pub fn second_test(
    model: &ModelSpec,
    space: &ParameterSpace,
    traj: &Trajectory,
    alpha: f64,
) -> Result<(TestReport, SecondTestCurves)> {
    second_test_with_table(
        model,
        space,
        traj,
        alpha,
        default_table(LimitFamily::WienerSq),
        TruncationPolicy::default_for(traj.grid().horizon()),
    )
}
