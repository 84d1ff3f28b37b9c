//! Uniform time grid shared by the ODE solver, the SDE simulator, and every
//! quadrature in the test statistics, plus the quadrature primitives
//! themselves. Sharing one grid keeps identities like `integral h h* dt = J` exact
//! instead of holding only up to interpolation error.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Uniform partition of `[0, T]` into `n` intervals, nodes `t_i = i*T/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
    horizon: f64,
}

impl Grid {
    pub fn new(n: usize, horizon: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::GridTooCoarse { got: n });
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::BadHorizon { value: horizon });
        }
        Ok(Grid { n, horizon })
    }

    /// Number of intervals.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of nodes, `n + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n + 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n as f64
    }

    /// Node `t_i`; computed as a product so that grids of different resolution
    /// share node values exactly where they overlap.
    pub fn t(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n);
        i as f64 * self.horizon / self.n as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.t(i)).collect()
    }

    /// Largest node index `i` with `t_i <= t` (clamped to the grid).
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let i = (t / self.dt()).floor() as usize;
        i.min(self.n)
    }
}

/// Composite trapezoid of node values over the whole grid.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    debug_assert!(values.len() >= 2);
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dt * (0.5 * (values[0] + values[values.len() - 1]) + inner)
}

/// Cumulative trapezoid: output[i] = trapezoid of values[0..=i]; output[0] = 0.
pub fn cum_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * (w[0] + w[1]) * dt;
        out.push(acc);
    }
    out
}

/// Tail trapezoid: output[i] = trapezoid of values[i..]; output[n] = 0.
pub fn tail_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut acc = 0.0;
    for i in (0..values.len() - 1).rev() {
        acc += 0.5 * (values[i] + values[i + 1]) * dt;
        out[i] = acc;
    }
    out
}

/// Adaptive Simpson quadrature of `f` over the signed interval from `a` to
/// `b` (when `a > b` the result flips sign). `tol` is an absolute tolerance.
/// The integrand may fail (for example on a diffusion-floor violation); the
/// first failure aborts the quadrature.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
    let flo = f(lo)?;
    let fhi = f(hi)?;
    let mid = 0.5 * (lo + hi);
    let fmid = f(mid)?;
    let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
    let v = simpson_recurse(&f, lo, hi, flo, fmid, fhi, whole, tol, 40)?;
    Ok(sign * v)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        // Richardson correction term delta/15 sharpens the estimate one order.
        return Ok(left + right + delta / 15.0);
    }
    let lv = simpson_recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let rv = simpson_recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(lv + rv)
}
