//! First goodness-of-fit test (scalar parameter only).
//!
//! The weighted residual process is built without any stochastic integral:
//! the martingale part of the score is recovered from a state-space integral
//! evaluated along the observed path,
//!
//! ```text
//! R(t) = [ F(t, X_t) - integral_0^t G(s, X_s) ds ] / sqrt(I)
//! F(t, z) = integral_{x0}^{z} Sdot(theta, t, y) / sigma(t, y)^2 dy
//! G(s, z) = integral_{x0}^{z} (Sdot'_t sigma - 2 Sdot sigma'_t)(s, y) / sigma(s, y)^3 dy
//! ```
//!
//! minus its compensator
//!
//! ```text
//! Q(t) = integral_0^t Sdot(theta, s, x_s) D(s) / sigma(s, x_s)^2 ds / sqrt(I),
//! D(s) = S(theta, s, x_s) + S'(theta, s, X_s) (X_s - x_s),
//! ```
//!
//! where `x` is the noise-free limit path at the estimate and `I` the
//! observed information. Then `K(t) = (R(t) - Q(t)) / eps` and the statistic
//! is `delta = integral_0^T K(t)^2 h(t)^2 dt` with the normalized score
//! weight `h`. Under the null the law of `delta` converges to
//! `integral_0^1 B(s)^2 ds` for a Brownian bridge `B`, free of both `theta`
//! and the model, so one quantile table serves every scalar family.

use crate::error::{Error, Result};
use crate::grid::{adaptive_simpson, cum_trapezoid, trapezoid};
use crate::limits::{default_table, LimitFamily, QuantileTable};
use crate::mle;
use crate::model::{AlternativeDrift, ModelSpec, ParameterSpace};
use crate::ode::{solve_alternative_ode, solve_limit_ode};
use crate::sde::Trajectory;
use crate::TestReport;
use std::path::Path;

/// Tolerance of the adaptive state-space integrals in `F` and `G`.
pub const STATE_INTEGRAL_TOL: f64 = 1e-9;

/// Options for the first test; the defaults match the limit theory.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstTestOptions {
    /// Adds the second-order Ito expansion term of `F(t, X_t)` to the
    /// residual process. The limit law is unchanged (the term is O(eps)
    /// after scaling); the flag exists to measure its finite-noise impact.
    pub include_ito_correction: bool,
}

/// Diagnostic curves of one first-test evaluation, all on the trajectory
/// grid; `r[0] = q[0] = k[0] = 0` by construction.
#[derive(Debug, Clone)]
pub struct FirstTestCurves {
    pub times: Vec<f64>,
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    /// Normalized empirical score weight `h(t_i)`; its squared trapezoid
    /// integral is exactly 1.
    pub h_emp: Vec<f64>,
    pub delta_stat: f64,
}

impl FirstTestCurves {
    /// Writes the curves as CSV (`t,r,q,k,h`), with the statistic value in a
    /// leading comment.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# delta = {:.16e}", self.delta_stat)?;
        writeln!(w, "t,r,q,k,h")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[i], self.r[i], self.q[i], self.k[i], self.h_emp[i]
            )?;
        }
        Ok(())
    }
}

/// Linearized drift along the limit path:
/// `D(s) = S(theta, s, x_s) + S'(theta, s, X_s) (X_s - x_s)`.
pub fn statistic_d(
    model: &ModelSpec,
    theta: &[f64],
    traj: &Trajectory,
) -> Result<Vec<f64>> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let limit = solve_limit_ode(model, theta, grid)?;
    let mut out = Vec::with_capacity(grid.n_nodes());
    for i in 0..grid.n_nodes() {
        let t = grid.t(i);
        let x = limit.value(i);
        let xx = traj.value(i);
        out.push(model.drift(theta, t, x) + model.drift_dx(theta, t, xx) * (xx - x));
    }
    Ok(out)
}

/// Componentwise unnormalized residual curves `Rbar_k(t)` (both tests build
/// on these; the first test divides by `sqrt(I)`, the second keeps the
/// vector).
pub(crate) fn unnormalized_r(
    model: &ModelSpec,
    theta: &[f64],
    traj: &Trajectory,
) -> Result<Vec<Vec<f64>>> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let d = model.dim();
    let n_nodes = grid.n_nodes();
    let x0 = model.x0();

    let sdot_buf = std::cell::RefCell::new(vec![0.0; d]);
    let sdot_dt_buf = std::cell::RefCell::new(vec![0.0; d]);
    let mut f_curves = vec![vec![0.0; n_nodes]; d];
    let mut g_integrands = vec![vec![0.0; n_nodes]; d];
    for i in 0..n_nodes {
        let t = grid.t(i);
        let z = traj.value(i);
        for k in 0..d {
            let f_val = adaptive_simpson(
                |y| {
                    let s = model.sigma(t, y)?;
                    let mut sdot = sdot_buf.borrow_mut();
                    model.drift_dtheta(theta, t, y, &mut sdot);
                    Ok(sdot[k] / (s * s))
                },
                x0,
                z,
                STATE_INTEGRAL_TOL,
            )?;
            f_curves[k][i] = f_val;
            let g_val = adaptive_simpson(
                |y| {
                    let s = model.sigma(t, y)?;
                    let st = model.sigma_dt(t, y);
                    let mut sdot = sdot_buf.borrow_mut();
                    model.drift_dtheta(theta, t, y, &mut sdot);
                    let mut sdot_dt = sdot_dt_buf.borrow_mut();
                    model.drift_dtheta_dt(theta, t, y, &mut sdot_dt);
                    Ok((sdot_dt[k] * s - 2.0 * sdot[k] * st) / (s * s * s))
                },
                x0,
                z,
                STATE_INTEGRAL_TOL,
            )?;
            g_integrands[k][i] = g_val;
        }
    }

    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        let cg = cum_trapezoid(&g_integrands[k], grid.dt());
        out.push(
            f_curves[k]
                .iter()
                .zip(&cg)
                .map(|(f, g)| f - g)
                .collect::<Vec<f64>>(),
        );
    }
    Ok(out)
}

/// Componentwise unnormalized compensator curves `Qbar_k(t)`.
///
/// The weights `Sdot` and `sigma` ride the observed path; only the linearized
/// drift `D` anchors to the limit path. Mixing the evaluation points leaves an
/// O(1) drift in `Rbar - Qbar` that the noise terms never cancel.
pub(crate) fn unnormalized_q(
    model: &ModelSpec,
    theta: &[f64],
    traj: &Trajectory,
) -> Result<Vec<Vec<f64>>> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let d = model.dim();
    let n_nodes = grid.n_nodes();
    let limit = solve_limit_ode(model, theta, grid)?;

    let mut integrands = vec![vec![0.0; n_nodes]; d];
    let mut sdot = vec![0.0; d];
    for i in 0..n_nodes {
        let t = grid.t(i);
        let x = limit.value(i);
        let xx = traj.value(i);
        let d_i = model.drift(theta, t, x) + model.drift_dx(theta, t, xx) * (xx - x);
        let s = model.sigma(t, xx)?;
        model.drift_dtheta(theta, t, xx, &mut sdot);
        let w = d_i / (s * s);
        for k in 0..d {
            integrands[k][i] = sdot[k] * w;
        }
    }
    Ok(integrands
        .iter()
        .map(|ints| cum_trapezoid(ints, grid.dt()))
        .collect())
}

/// Componentwise second-order Ito terms:
/// `C_k(t) = (1/2) integral_0^t sigma(s, X_s)^2 d/dz [Sdot_k / sigma^2](s, X_s) ds`
/// (multiply by `eps^2` to get the expansion term of `F(t, X_t)`).
pub(crate) fn ito_correction(
    model: &ModelSpec,
    theta: &[f64],
    traj: &Trajectory,
) -> Result<Vec<Vec<f64>>> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let d = model.dim();
    let n_nodes = grid.n_nodes();

    let mut sdot = vec![0.0; d];
    let mut ratio = |t: f64, y: f64, k: usize| -> Result<f64> {
        let s = model.sigma(t, y)?;
        model.drift_dtheta(theta, t, y, &mut sdot);
        Ok(sdot[k] / (s * s))
    };

    let mut integrands = vec![vec![0.0; n_nodes]; d];
    for i in 0..n_nodes {
        let t = grid.t(i);
        let x = traj.value(i);
        let s2 = {
            let s = model.sigma(t, x)?;
            s * s
        };
        let h = 1e-5 * x.abs().max(1.0);
        for k in 0..d {
            let dz = (ratio(t, x + h, k)? - ratio(t, x - h, k)?) / (2.0 * h);
            integrands[k][i] = 0.5 * s2 * dz;
        }
    }
    Ok(integrands
        .iter()
        .map(|ints| cum_trapezoid(ints, grid.dt()))
        .collect())
}

fn scalar_sqrt_info(model: &ModelSpec, theta: &[f64], traj: &Trajectory) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::ScalarParameterRequired { dim: model.dim() });
    }
    let info = mle::fisher_information_observed(model, theta, traj)?;
    Ok(info[(0, 0)].sqrt())
}

/// Normalized residual curve `R(t)` (scalar-parameter families).
pub fn statistic_r(model: &ModelSpec, theta: &[f64], traj: &Trajectory) -> Result<Vec<f64>> {
    let root = scalar_sqrt_info(model, theta, traj)?;
    let rbar = unnormalized_r(model, theta, traj)?;
    Ok(rbar[0].iter().map(|v| v / root).collect())
}

/// Normalized compensator curve `Q(t)` (scalar-parameter families).
pub fn statistic_q(model: &ModelSpec, theta: &[f64], traj: &Trajectory) -> Result<Vec<f64>> {
    let root = scalar_sqrt_info(model, theta, traj)?;
    let qbar = unnormalized_q(model, theta, traj)?;
    Ok(qbar[0].iter().map(|v| v / root).collect())
}

/// Builds every first-test curve at a given parameter value.
pub fn first_test_curves(
    model: &ModelSpec,
    theta: &[f64],
    traj: &Trajectory,
    options: FirstTestOptions,
) -> Result<FirstTestCurves> {
    if model.dim() != 1 {
        return Err(Error::ScalarParameterRequired { dim: model.dim() });
    }
    let grid = traj.grid();
    let eps = traj.epsilon();
    let weights = mle::score_weights(model, theta, traj)?;
    let root = weights.info[(0, 0)].sqrt();

    let rbar = unnormalized_r(model, theta, traj)?;
    let qbar = unnormalized_q(model, theta, traj)?;
    let ito = if options.include_ito_correction {
        Some(ito_correction(model, theta, traj)?)
    } else {
        None
    };

    let n_nodes = grid.n_nodes();
    let mut r = Vec::with_capacity(n_nodes);
    let mut q = Vec::with_capacity(n_nodes);
    let mut k = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let ri = rbar[0][i] / root;
        let qi = qbar[0][i] / root;
        let correction = match &ito {
            Some(c) => eps * eps * c[0][i] / root,
            None => 0.0,
        };
        r.push(ri);
        q.push(qi);
        k.push((ri - qi - correction) / eps);
    }
    let h_emp = weights.components[0].clone();
    let weighted_sq: Vec<f64> = k
        .iter()
        .zip(&h_emp)
        .map(|(ki, hi)| (ki * hi).powi(2))
        .collect();
    let delta_stat = trapezoid(&weighted_sq, grid.dt());
    let times = (0..n_nodes).map(|i| grid.t(i)).collect();
    Ok(FirstTestCurves { times, r, q, k, h_emp, delta_stat })
}

/// Runs the first test end to end: estimate the parameter, build `delta`,
/// compare to the requested level's threshold from the given table.
pub fn first_test_with_table(
    model: &ModelSpec,
    space: &ParameterSpace,
    traj: &Trajectory,
    alpha: f64,
    table: &QuantileTable,
    options: FirstTestOptions,
) -> Result<(TestReport, FirstTestCurves)> {
    if model.dim() != 1 {
        return Err(Error::ScalarParameterRequired { dim: model.dim() });
    }
    if table.family != LimitFamily::BridgeSq {
        return Err(Error::Config(format!(
            "first test needs a bridge-law table, got {}",
            table.family
        )));
    }
    let threshold = table.threshold(alpha)?;
    let est = mle::estimate(model, space, traj)?;
    let curves = first_test_curves(model, &est.theta_hat, traj, options)?;
    let report = TestReport {
        statistic: curves.delta_stat,
        threshold,
        alpha,
        reject: curves.delta_stat > threshold,
        theta_hat: est.theta_hat,
        n: traj.grid().n(),
        epsilon: traj.epsilon(),
    };
    Ok((report, curves))
}

/// [`first_test_with_table`] with the shipped bridge table and default
/// options.
pub fn first_test(
    model: &ModelSpec,
    space: &ParameterSpace,
    traj: &Trajectory,
    alpha: f64,
) -> Result<(TestReport, FirstTestCurves)> {
    first_test_with_table(
        model,
        space,
        traj,
        alpha,
        default_table(LimitFamily::BridgeSq),
        FirstTestOptions::default(),
    )
}

/// Power diagnostics of a fixed alternative against a scalar family.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PowerDiagnostics {
    /// Parameter of the family member closest to the alternative in the
    /// weighted L2 sense along the alternative's limit path.
    pub theta_star: Vec<f64>,
    /// Squared weighted L2 distance at `theta_star`; zero iff the
    /// alternative lies in the family (along its limit path).
    pub separation: f64,
    /// Squared L2 norm of the limiting mean shift of the weighted residual
    /// process; zero means the first test is blind to this alternative even
    /// though `separation` may be positive.
    pub shift_norm_sq: f64,
}

fn misfit_objective(
    model: &ModelSpec,
    theta: &[f64],
    alt_drift: &[f64],
    sigmas: &[f64],
    times: &[f64],
    states: &[f64],
    dt: f64,
) -> f64 {
    let vals: Vec<f64> = (0..times.len())
        .map(|i| {
            let diff = model.drift(theta, times[i], states[i]) - alt_drift[i];
            (diff / sigmas[i]).powi(2)
        })
        .collect();
    trapezoid(&vals, dt)
}

/// Finds the family member closest to the alternative:
/// `theta* = argmin integral ((S(theta, t, y_t) - S_alt(t, y_t)) / sigma)^2 dt`
/// along the alternative's limit path `y`, and reports the induced limiting
/// shift of the first-test residual process.
///
/// Two essentially tied minimizers at well-separated parameters are an
/// error (the power analysis is ambiguous there), not a silent pick.
pub fn theta_star(
    model: &ModelSpec,
    space: &ParameterSpace,
    alt: &AlternativeDrift,
    grid: crate::grid::Grid,
) -> Result<PowerDiagnostics> {
    if model.dim() != 1 {
        return Err(Error::ScalarParameterRequired { dim: model.dim() });
    }
    if space.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "parameter space",
            expected: model.dim(),
            got: space.dim(),
        });
    }
    let y = solve_alternative_ode(alt, grid)?;
    let n_nodes = grid.n_nodes();
    let times: Vec<f64> = (0..n_nodes).map(|i| grid.t(i)).collect();
    let states = y.values().to_vec();
    let mut alt_drift = Vec::with_capacity(n_nodes);
    let mut sigmas = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        alt_drift.push(alt.drift(times[i], states[i]));
        sigmas.push(model.sigma(times[i], states[i])?);
    }
    let dt = grid.dt();
    let obj = |theta: &[f64]| misfit_objective(model, theta, &alt_drift, &sigmas, &times, &states, dt);

    // Coarse scan, then Newton on the smooth objective from the best seed.
    let m = 33usize;
    let (lo, hi) = (space.lower()[0], space.upper()[0]);
    let mut candidates: Vec<(f64, f64)> = (0..m)
        .map(|j| {
            let th = lo + (j as f64 + 0.5) / m as f64 * (hi - lo);
            (th, obj(&[th]))
        })
        .collect();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));

    let polish = |start: f64| -> (f64, f64) {
        let mut th = start;
        let mut val = obj(&[th]);
        let scale = (hi - lo).max(1e-12);
        let h = 1e-6 * scale;
        for _ in 0..100 {
            let up = obj(&[th + h]);
            let dn = obj(&[th - h]);
            let g = (up - dn) / (2.0 * h);
            let hess = (up - 2.0 * val + dn) / (h * h);
            let mut step = if hess > 0.0 { -g / hess } else { -g.signum() * 0.1 * scale };
            if !step.is_finite() {
                break;
            }
            step = step.clamp(-0.25 * scale, 0.25 * scale);
            let mut improved = false;
            let mut s = 1.0;
            for _ in 0..30 {
                let cand = (th + s * step).clamp(lo + 1e-9 * scale, hi - 1e-9 * scale);
                let v = obj(&[cand]);
                if v < val {
                    th = cand;
                    val = v;
                    improved = true;
                    break;
                }
                s *= 0.5;
            }
            if !improved || g.abs() < 1e-12 * (1.0 + val) {
                break;
            }
        }
        (th, val)
    };

    let (best_th, best_val) = polish(candidates[0].0);
    // Probe other scan basins for a distinct minimizer of equal quality.
    let sep_tol = 1e-2 * (hi - lo);
    let val_tol = 1e-8 * (1.0 + best_val.abs());
    for &(seed, seed_val) in candidates.iter().take(5).skip(1) {
        if seed_val > candidates[0].1 + 10.0 * val_tol.max(1e-6 * (1.0 + best_val.abs())) {
            // Clearly worse basin at scan resolution with a convex-ish dip
            // elsewhere would still polish below; only probe near-ties.
            continue;
        }
        let (other_th, other_val) = polish(seed);
        if (other_th - best_th).abs() > sep_tol && (other_val - best_val).abs() <= val_tol {
            return Err(Error::NonUniqueMinimizer {
                first: vec![best_th],
                second: vec![other_th],
                value: best_val,
            });
        }
    }

    // Limiting mean shift of the weighted residual process: with
    // `m(t) = integral_0^t Sdot (S_alt - S(theta*)) / sigma^2 ds / I`, the
    // shift norm is `integral m(t)^2 Sdot(t)^2 / sigma(t)^2 dt`. At an
    // interior minimizer the normal equation makes m(T) = 0.
    let theta_hat = [best_th];
    let mut sdot = vec![0.0; 1];
    let mut info_integrand = Vec::with_capacity(n_nodes);
    let mut cross_integrand = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        model.drift_dtheta(&theta_hat, times[i], states[i], &mut sdot);
        let s2 = sigmas[i] * sigmas[i];
        info_integrand.push(sdot[0] * sdot[0] / s2);
        let diff = alt_drift[i] - model.drift(&theta_hat, times[i], states[i]);
        cross_integrand.push(sdot[0] * diff / s2);
    }
    let info = trapezoid(&info_integrand, dt);
    if !(info > 0.0) {
        return Err(Error::SingularInformation { min_eig: info, condition: f64::INFINITY });
    }
    let mut m_curve = cum_trapezoid(&cross_integrand, dt);
    for v in m_curve.iter_mut() {
        *v /= info;
    }
    let shift_vals: Vec<f64> = (0..n_nodes)
        .map(|i| m_curve[i] * m_curve[i] * info_integrand[i])
        .collect();
    let shift_norm_sq = trapezoid(&shift_vals, dt);

    Ok(PowerDiagnostics { theta_star: vec![best_th], separation: best_val, shift_norm_sq })
}
