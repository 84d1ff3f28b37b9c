//! Drift maximum-likelihood estimation from one discretized trajectory, the
//! Fisher information along limit and observed paths, and the normalized
//! score weights both tests are built from.
//!
//! The log-likelihood uses left-point Riemann sums,
//!
//! ```text
//! logL(theta) = sum_i S_i / (eps^2 sigma_i^2) dX_i
//!             - sum_i S_i^2 / (2 eps^2 sigma_i^2) dt,
//! ```
//!
//! with `S_i = S(theta, t_i, X_i)` and `sigma_i = sigma(t_i, X_i)`. For
//! linear-in-theta families the maximizer solves the normal equations
//! exactly; otherwise a coarse scan over the parameter box seeds a damped
//! Newton iteration.

use crate::error::{Error, Result};
use crate::grid::{trapezoid, Grid};
use crate::model::{ModelSpec, ParameterSpace};
use crate::ode::solve_limit_ode;
use crate::sde::Trajectory;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Convergence threshold on the eps^2-scaled score norm. The raw score
/// carries a 1/eps^2 factor, so this is an O(1)-scaled criterion.
const SCORE_TOLERANCE: f64 = 1e-8;
const MAX_NEWTON_ITERS: usize = 100;
const SCAN_POINTS_PER_DIM: usize = 17;
/// Condition-number ceiling before an information matrix is reported as
/// numerically singular.
const MAX_CONDITION: f64 = 1e12;

/// Output of [`estimate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: Vec<f64>,
    /// True iff the scaled score norm fell below tolerance at an interior
    /// point.
    pub converged: bool,
    /// True iff the maximizer was pulled back onto the closed box.
    pub on_boundary: bool,
    /// Number of objective/score evaluations spent.
    pub n_evals: usize,
    /// Log-likelihood at `theta_hat`.
    pub log_likelihood: f64,
    /// Observed Fisher information at `theta_hat` (trapezoid along the
    /// observed path).
    #[serde(with = "matrix_rows")]
    pub info_matrix: DMatrix<f64>,
}

/// Serializes a `DMatrix` as a plain list of rows instead of nalgebra's
/// (data, nrows, ncols) tuple, so the JSON report reads as a matrix.
mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> =
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

struct TrajCache {
    t: Vec<f64>,
    x: Vec<f64>,
    dx: Vec<f64>,
    /// 1 / sigma(t_i, X_i)^2 at the left endpoints.
    inv_s2: Vec<f64>,
    dt: f64,
    eps2: f64,
}

impl TrajCache {
    fn build(model: &ModelSpec, traj: &Trajectory) -> Result<Self> {
        let grid = traj.grid();
        if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
            return Err(Error::Config(format!(
                "trajectory horizon {} does not match model horizon {}",
                grid.horizon(),
                model.horizon()
            )));
        }
        let n = grid.n();
        let values = traj.values();
        let mut t = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut dx = Vec::with_capacity(n);
        let mut inv_s2 = Vec::with_capacity(n);
        for i in 0..n {
            let ti = grid.t(i);
            let xi = values[i];
            let s = model.sigma(ti, xi)?;
            t.push(ti);
            x.push(xi);
            dx.push(values[i + 1] - xi);
            inv_s2.push(1.0 / (s * s));
        }
        Ok(TrajCache {
            t,
            x,
            dx,
            inv_s2,
            dt: grid.dt(),
            eps2: traj.epsilon() * traj.epsilon(),
        })
    }

    fn log_likelihood(&self, model: &ModelSpec, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.t.len() {
            let s = model.drift(theta, self.t[i], self.x[i]);
            acc += s * self.inv_s2[i] * (self.dx[i] - 0.5 * s * self.dt);
        }
        acc / self.eps2
    }

    /// eps^2-scaled score and its Jacobian (the scaled Hessian of logL).
    fn scaled_score(&self, model: &ModelSpec, theta: &[f64], grad: &mut DVector<f64>, hess: &mut DMatrix<f64>) {
        let d = theta.len();
        grad.fill(0.0);
        hess.fill(0.0);
        let mut sdot = vec![0.0; d];
        let mut sddot = vec![0.0; d * d];
        for i in 0..self.t.len() {
            let (t, x, w) = (self.t[i], self.x[i], self.inv_s2[i]);
            let s = model.drift(theta, t, x);
            model.drift_dtheta(theta, t, x, &mut sdot);
            model.drift_d2theta(theta, t, x, &mut sddot);
            let resid = self.dx[i] - s * self.dt;
            for j in 0..d {
                grad[j] += sdot[j] * w * resid;
                for k in 0..d {
                    hess[(j, k)] += w
                        * (sddot[j * d + k] * resid - sdot[j] * sdot[k] * self.dt);
                }
            }
        }
    }
}

/// Left-point Riemann log-likelihood of `theta` given one trajectory.
pub fn log_likelihood(model: &ModelSpec, theta: &[f64], traj: &Trajectory) -> Result<f64> {
    model.check_theta(theta)?;
    let cache = TrajCache::build(model, traj)?;
    let v = cache.log_likelihood(model, theta);
    if !v.is_finite() {
        return Err(Error::NonFiniteEvaluation {
            what: "log-likelihood",
            t: f64::NAN,
            x: f64::NAN,
            theta: theta.to_vec(),
        });
    }
    Ok(v)
}

fn solve_linear(
    model: &ModelSpec,
    space: &ParameterSpace,
    cache: &TrajCache,
) -> Result<(Vec<f64>, bool, bool, usize)> {
    let d = model.dim();
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut h = vec![0.0; d];
    let zero = vec![0.0; d];
    for i in 0..cache.t.len() {
        model.drift_dtheta(&zero, cache.t[i], cache.x[i], &mut h);
        let w = cache.inv_s2[i];
        for j in 0..d {
            b[j] += h[j] * w * cache.dx[i];
            for k in j..d {
                a[(j, k)] += h[j] * h[k] * w * cache.dt;
            }
        }
    }
    for j in 0..d {
        for k in 0..j {
            a[(j, k)] = a[(k, j)];
        }
    }
    let eig = SymmetricEigen::new(a.clone());
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    if !(min_eig > 0.0) || max_eig / min_eig > MAX_CONDITION {
        return Err(Error::SingularInformation { min_eig, condition: max_eig / min_eig });
    }
    let theta = a
        .lu()
        .solve(&b)
        .ok_or(Error::SingularInformation { min_eig, condition: max_eig / min_eig })?;
    let theta: Vec<f64> = theta.iter().copied().collect();
    if space.contains(&theta) {
        Ok((theta, true, false, 1))
    } else {
        let clamped = space.clamp_inside(&theta, 0.0);
        Ok((clamped, false, true, 1))
    }
}

fn scan_seed(
    model: &ModelSpec,
    space: &ParameterSpace,
    cache: &TrajCache,
    n_evals: &mut usize,
) -> Vec<f64> {
    let d = model.dim();
    let mut best = space.midpoint();
    let mut best_val = cache.log_likelihood(model, &best);
    *n_evals += 1;
    let consider = |theta: &[f64], best: &mut Vec<f64>, best_val: &mut f64| {
        let v = cache.log_likelihood(model, theta);
        if v > *best_val {
            *best_val = v;
            best.clear();
            best.extend_from_slice(theta);
        }
    };
    if d <= 2 {
        // Tensor grid of interior points.
        let m = SCAN_POINTS_PER_DIM;
        let point = |dim: usize, k: usize| {
            space.lower()[dim]
                + (k as f64 + 0.5) / m as f64 * (space.upper()[dim] - space.lower()[dim])
        };
        if d == 1 {
            for k in 0..m {
                consider(&[point(0, k)], &mut best, &mut best_val);
                *n_evals += 1;
            }
        } else {
            for k0 in 0..m {
                for k1 in 0..m {
                    consider(&[point(0, k0), point(1, k1)], &mut best, &mut best_val);
                    *n_evals += 1;
                }
            }
        }
    } else {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xE577);
        let count = SCAN_POINTS_PER_DIM * SCAN_POINTS_PER_DIM;
        let mut theta = vec![0.0; d];
        for _ in 0..count {
            for j in 0..d {
                theta[j] = rng.random_range(space.lower()[j]..space.upper()[j]);
            }
            consider(&theta, &mut best, &mut best_val);
            *n_evals += 1;
        }
    }
    best
}

fn newton_polish(
    model: &ModelSpec,
    space: &ParameterSpace,
    cache: &TrajCache,
    seed: Vec<f64>,
    n_evals: &mut usize,
) -> Result<(Vec<f64>, bool, bool)> {
    let d = model.dim();
    let mut theta = seed;
    let mut grad = DVector::<f64>::zeros(d);
    let mut hess = DMatrix::<f64>::zeros(d, d);
    let mut current = cache.log_likelihood(model, &theta);
    *n_evals += 1;
    let mut hit_boundary = false;

    for _ in 0..MAX_NEWTON_ITERS {
        cache.scaled_score(model, &theta, &mut grad, &mut hess);
        *n_evals += 1;
        let gnorm = grad.norm();
        if !gnorm.is_finite() {
            return Err(Error::EstimationFailed {
                reason: "non-finite score",
                theta: theta.clone(),
                grad_norm: gnorm,
            });
        }
        if gnorm < SCORE_TOLERANCE {
            return Ok((theta, true, hit_boundary));
        }
        // Newton direction for a maximum: solve (-H) step = grad; fall back
        // to steepest ascent when the Hessian is unusable.
        let step = (-hess.clone())
            .lu()
            .solve(&grad)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .unwrap_or_else(|| grad.clone() / gnorm.max(1.0));

        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..25 {
            let candidate: Vec<f64> = (0..d).map(|j| theta[j] + scale * step[j]).collect();
            let candidate = space.clamp_inside(&candidate, 1e-9);
            let v = cache.log_likelihood(model, &candidate);
            *n_evals += 1;
            if v.is_finite() && v > current {
                if candidate
                    .iter()
                    .zip(theta.iter())
                    .all(|(a, b)| (a - b).abs() == 0.0)
                {
                    break;
                }
                hit_boundary = !space.contains(
                    &(0..d).map(|j| theta[j] + scale * step[j]).collect::<Vec<_>>(),
                );
                theta = candidate;
                current = v;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            // Stuck: accept the point if the score is small-ish, else fail.
            if gnorm < 1e-4 {
                return Ok((theta, false, hit_boundary));
            }
            return Err(Error::EstimationFailed {
                reason: "line search stalled",
                theta,
                grad_norm: gnorm,
            });
        }
    }
    cache.scaled_score(model, &theta, &mut grad, &mut hess);
    *n_evals += 1;
    Ok((theta, grad.norm() < SCORE_TOLERANCE, hit_boundary))
}

/// Maximum-likelihood estimate of the drift parameter over the open box.
///
/// Linear families are solved exactly through the normal equations; other
/// families by a coarse scan plus damped Newton. An exact maximizer outside
/// the box is pulled back onto it and flagged `on_boundary` (and not
/// `converged`, since the score does not vanish there).
pub fn estimate(model: &ModelSpec, space: &ParameterSpace, traj: &Trajectory) -> Result<EstimationResult> {
    if space.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "parameter space",
            expected: model.dim(),
            got: space.dim(),
        });
    }
    // The linear solve never touches the limit ODE, so the mismatch guard
    // there would not fire; refuse foreign-horizon trajectories up front.
    crate::ode::require_matching_horizon(traj.grid(), model.horizon())?;
    let cache = TrajCache::build(model, traj)?;

    let (theta_hat, converged, on_boundary, n_evals) = if model.is_linear_in_theta() {
        solve_linear(model, space, &cache)?
    } else {
        let mut n_evals = 0;
        let seed = scan_seed(model, space, &cache, &mut n_evals);
        let (theta, converged, boundary) =
            newton_polish(model, space, &cache, seed, &mut n_evals)?;
        (theta, converged && !boundary, boundary, n_evals)
    };

    let ll = cache.log_likelihood(model, &theta_hat);
    if !ll.is_finite() {
        return Err(Error::EstimationFailed {
            reason: "non-finite log-likelihood at the estimate",
            theta: theta_hat,
            grad_norm: f64::NAN,
        });
    }
    let info_matrix = fisher_information_observed(model, &theta_hat, traj)?;
    Ok(EstimationResult { theta_hat, converged, on_boundary, n_evals, log_likelihood: ll, info_matrix })
}

fn information_along(
    model: &ModelSpec,
    theta: &[f64],
    times: impl Iterator<Item = f64>,
    states: &[f64],
    dt: f64,
) -> Result<DMatrix<f64>> {
    let d = model.dim();
    let mut integrands = vec![Vec::with_capacity(states.len()); d * d];
    let mut sdot = vec![0.0; d];
    for (t, &x) in times.zip(states) {
        let s = model.sigma(t, x)?;
        model.drift_dtheta(theta, t, x, &mut sdot);
        let w = 1.0 / (s * s);
        for j in 0..d {
            for k in 0..d {
                integrands[j * d + k].push(sdot[j] * sdot[k] * w);
            }
        }
    }
    let mut out = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        for k in 0..d {
            out[(j, k)] = trapezoid(&integrands[j * d + k], dt);
        }
    }
    Ok(out)
}

fn check_spd(info: &DMatrix<f64>) -> Result<()> {
    let eig = SymmetricEigen::new(info.clone());
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    if !(min_eig > 0.0) || !(max_eig / min_eig).is_finite() || max_eig / min_eig > MAX_CONDITION {
        return Err(Error::SingularInformation {
            min_eig,
            condition: if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY },
        });
    }
    Ok(())
}

/// Fisher information `I(theta) = integral Sdot Sdot^T / sigma^2 dt` along
/// the noise-free limit path on the given grid (trapezoid rule).
pub fn fisher_information(model: &ModelSpec, theta: &[f64], grid: Grid) -> Result<DMatrix<f64>> {
    model.check_theta(theta)?;
    let path = solve_limit_ode(model, theta, grid)?;
    let info = information_along(
        model,
        theta,
        (0..grid.n_nodes()).map(|i| grid.t(i)),
        path.values(),
        grid.dt(),
    )?;
    check_spd(&info)?;
    Ok(info)
}

/// Empirical information: same integrand evaluated along the observed
/// trajectory instead of the limit path.
pub fn fisher_information_observed(
    model: &ModelSpec,
    theta: &[f64],
    traj: &Trajectory,
) -> Result<DMatrix<f64>> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let info = information_along(
        model,
        theta,
        (0..grid.n_nodes()).map(|i| grid.t(i)),
        traj.values(),
        grid.dt(),
    )?;
    check_spd(&info)?;
    Ok(info)
}

/// Symmetric inverse square root of a symmetric positive-definite matrix.
pub fn inv_sqrt_spd(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = (mat - mat.transpose()).abs().max();
    let scale = mat.abs().max().max(1e-300);
    if asym > 1e-8 * scale {
        return Err(Error::NotSymmetric { asymmetry: asym, tol: 1e-8 * scale });
    }
    let eig = SymmetricEigen::new(mat.clone());
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    if !(min_eig > 0.0) || max_eig / min_eig > MAX_CONDITION {
        return Err(Error::SingularInformation {
            min_eig,
            condition: if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY },
        });
    }
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        *v = 1.0 / v.sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Normalized score weights along the observed path:
/// `h(t_i) = I^{-1/2} Sdot(theta, t_i, X_i) / sigma(t_i, X_i)` with `I` the
/// observed information. `components[k]` is the k-th coordinate time series;
/// by construction `integral h h^T dt` is the identity under the shared
/// trapezoid rule.
#[derive(Debug, Clone)]
pub struct ScoreWeights {
    pub components: Vec<Vec<f64>>,
    pub info: DMatrix<f64>,
    pub info_inv_sqrt: DMatrix<f64>,
}

pub fn score_weights(model: &ModelSpec, theta: &[f64], traj: &Trajectory) -> Result<ScoreWeights> {
    model.check_theta(theta)?;
    let grid = traj.grid();
    let d = model.dim();
    let info = fisher_information_observed(model, theta, traj)?;
    let root = inv_sqrt_spd(&info)?;

    let n_nodes = grid.n_nodes();
    let mut raw = vec![vec![0.0; n_nodes]; d];
    let mut sdot = vec![0.0; d];
    for (i, &x) in traj.values().iter().enumerate() {
        let t = grid.t(i);
        let s = model.sigma(t, x)?;
        model.drift_dtheta(theta, t, x, &mut sdot);
        for k in 0..d {
            raw[k][i] = sdot[k] / s;
        }
    }
    let mut components = vec![vec![0.0; n_nodes]; d];
    for i in 0..n_nodes {
        for k in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += root[(k, j)] * raw[j][i];
            }
            components[k][i] = acc;
        }
    }
    Ok(ScoreWeights { components, info, info_inv_sqrt: root })
}
