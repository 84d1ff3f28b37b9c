//! Null limit laws of the two test statistics and their quantile tables.
//!
//! The first statistic converges to `L1 = integral_0^1 B(s)^2 ds` (Brownian
//! bridge `B`), the second to `L2 = integral_0^1 w(s)^2 ds` (standard Wiener
//! process `w`). Both admit Karhunen-Loeve series
//!
//! ```text
//! L1 = sum_{k>=1} Z_k^2 / (k pi)^2,         E L1 = 1/6,  Var L1 = 1/45,
//! L2 = sum_{k>=1} Z_k^2 / ((k-1/2) pi)^2,   E L2 = 1/2,  Var L2 = 1/3,
//! ```
//!
//! sampled here by truncating at `K` terms and adding the exact tail mean as
//! a constant correction. An independent path-based sampler (discretized
//! Brownian motion, trapezoid integral) provides the cross-validation route;
//! the two routes are compared in the test suite, never collapsed.

use crate::error::{Error, Result};
use crate::sde::NoiseStream;
use crate::stats::quantile_sorted;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

/// Which of the two limit laws is meant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LimitFamily {
    /// `integral_0^1 B(s)^2 ds`, Brownian bridge (first test).
    #[serde(rename = "bridge")]
    BridgeSq,
    /// `integral_0^1 w(s)^2 ds`, Wiener process (second test).
    #[serde(rename = "wiener")]
    WienerSq,
}

impl LimitFamily {
    pub fn name(self) -> &'static str {
        match self {
            LimitFamily::BridgeSq => "bridge",
            LimitFamily::WienerSq => "wiener",
        }
    }

    /// Exact mean of the limit law.
    pub fn mean(self) -> f64 {
        match self {
            LimitFamily::BridgeSq => 1.0 / 6.0,
            LimitFamily::WienerSq => 0.5,
        }
    }

    /// Exact variance of the limit law.
    pub fn variance(self) -> f64 {
        match self {
            LimitFamily::BridgeSq => 1.0 / 45.0,
            LimitFamily::WienerSq => 1.0 / 3.0,
        }
    }

    /// k-th Karhunen-Loeve eigenvalue (k starts at 1).
    fn eigenvalue(self, k: usize) -> f64 {
        let base = match self {
            LimitFamily::BridgeSq => k as f64,
            LimitFamily::WienerSq => k as f64 - 0.5,
        };
        (base * std::f64::consts::PI).powi(2)
    }
}

impl fmt::Display for LimitFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LimitFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bridge" => Ok(LimitFamily::BridgeSq),
            "wiener" => Ok(LimitFamily::WienerSq),
            other => Err(Error::Config(format!(
                "unknown limit family '{other}' (expected bridge or wiener)"
            ))),
        }
    }
}

/// Draws `n_draws` samples of the limit law by truncated Karhunen-Loeve
/// expansion with `truncation` terms plus the exact tail-mean correction.
/// Draw `i` uses noise stream `i` of `seed`, so the output is independent of
/// scheduling order.
pub fn sample_limit(
    family: LimitFamily,
    n_draws: usize,
    truncation: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_draws == 0 {
        return Err(Error::Config("sample_limit needs at least one draw".into()));
    }
    if truncation == 0 {
        return Err(Error::Config("Karhunen-Loeve truncation must be at least 1".into()));
    }
    let inv_lambda: Vec<f64> = (1..=truncation).map(|k| 1.0 / family.eigenvalue(k)).collect();
    let tail_mean = family.mean() - inv_lambda.iter().sum::<f64>();

    Ok((0..n_draws)
        .into_par_iter()
        .map(|i| {
            let z = NoiseStream::new(seed, i as u64).standard_normals(truncation);
            let head: f64 = z.iter().zip(&inv_lambda).map(|(z, il)| z * z * il).sum();
            head + tail_mean
        })
        .collect())
}

/// Standard Brownian path on `[0, 1]` with `n` uniform steps: `n + 1` nodes,
/// `W_0 = 0`.
pub fn brownian_path(n: usize, noise: &NoiseStream) -> Vec<f64> {
    let sqrt_dt = (1.0 / n as f64).sqrt();
    let xi = noise.standard_normals(n);
    let mut w = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    w.push(0.0);
    for x in xi {
        acc += sqrt_dt * x;
        w.push(acc);
    }
    w
}

/// Brownian bridge pinned at both ends: `B_i = W_i - t_i W_n` (so the last
/// entry is exactly zero).
pub fn bridge_from_brownian(w: &[f64]) -> Vec<f64> {
    let n = w.len() - 1;
    let wn = w[n];
    w.iter()
        .enumerate()
        .map(|(i, &wi)| wi - (i as f64 / n as f64) * wn)
        .collect()
}

/// Draws the limit law the independent way: simulate the process on a grid
/// of `n_steps` and integrate its square by the trapezoid rule.
pub fn path_sample_limit(
    family: LimitFamily,
    n_steps: usize,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_steps < 2 {
        return Err(Error::GridTooCoarse { got: n_steps });
    }
    if n_draws == 0 {
        return Err(Error::Config("path_sample_limit needs at least one draw".into()));
    }
    let dt = 1.0 / n_steps as f64;
    Ok((0..n_draws)
        .into_par_iter()
        .map(|i| {
            let w = brownian_path(n_steps, &NoiseStream::new(seed, i as u64));
            let path = match family {
                LimitFamily::BridgeSq => bridge_from_brownian(&w),
                LimitFamily::WienerSq => w,
            };
            let sq: Vec<f64> = path.iter().map(|v| v * v).collect();
            crate::grid::trapezoid(&sq, dt)
        })
        .collect())
}

/// Upper-tail quantile table: `quantiles[i]` is the threshold `d` with
/// `P(L > d) = alphas[i]` under the limit law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub family: LimitFamily,
    pub alphas: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub n_draws: usize,
    pub truncation: usize,
}

impl QuantileTable {
    /// Builds a table from a Monte Carlo sample of the limit law.
    pub fn from_sample(
        family: LimitFamily,
        sample: &[f64],
        alphas: &[f64],
        truncation: usize,
    ) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::MalformedTable { reason: "empty sample".into() });
        }
        if alphas.is_empty() {
            return Err(Error::MalformedTable { reason: "no alpha levels requested".into() });
        }
        for pair in alphas.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::MalformedTable {
                    reason: format!("alpha levels must increase strictly, got {pair:?}"),
                });
            }
        }
        for &a in alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::AlphaRange { alpha: a });
            }
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        let quantiles = alphas
            .iter()
            .map(|&a| quantile_sorted(&sorted, 1.0 - a))
            .collect();
        Ok(QuantileTable {
            family,
            alphas: alphas.to_vec(),
            quantiles,
            n_draws: sample.len(),
            truncation,
        })
    }

    pub fn min_alpha(&self) -> f64 {
        self.alphas[0]
    }

    pub fn max_alpha(&self) -> f64 {
        *self.alphas.last().unwrap()
    }

    /// Rejection threshold for level `alpha`, linearly interpolated between
    /// tabulated levels; levels outside the tabulated range are refused.
    pub fn threshold(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::AlphaRange { alpha });
        }
        if alpha < self.min_alpha() || alpha > self.max_alpha() {
            return Err(Error::AlphaCoverage {
                alpha,
                min_alpha: self.min_alpha(),
                max_alpha: self.max_alpha(),
            });
        }
        let idx = self.alphas.partition_point(|&a| a < alpha);
        if idx < self.alphas.len() && self.alphas[idx] == alpha {
            return Ok(self.quantiles[idx]);
        }
        let (lo, hi) = (idx - 1, idx);
        let w = (alpha - self.alphas[lo]) / (self.alphas[hi] - self.alphas[lo]);
        Ok(self.quantiles[lo] + w * (self.quantiles[hi] - self.quantiles[lo]))
    }

    /// CSV rendering: optional leading `#` comment lines, then a header and
    /// one row per level.
    pub fn to_csv_string(&self, comments: &[&str]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("family,alpha,quantile,n_draws,truncation\n");
        for (a, q) in self.alphas.iter().zip(&self.quantiles) {
            out.push_str(&format!(
                "{},{},{:.16e},{},{}\n",
                self.family, a, q, self.n_draws, self.truncation
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut family: Option<LimitFamily> = None;
        let mut n_draws: Option<usize> = None;
        let mut truncation: Option<usize> = None;
        let mut alphas = Vec::new();
        let mut quantiles = Vec::new();
        let mut saw_header = false;
        let bad = |reason: String| Error::MalformedTable { reason };

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != "family,alpha,quantile,n_draws,truncation" {
                    return Err(bad(format!("line {}: unexpected header '{line}'", lineno + 1)));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(bad(format!("line {}: expected 5 fields, got {}", lineno + 1, fields.len())));
            }
            let fam = LimitFamily::from_str(fields[0])
                .map_err(|_| bad(format!("line {}: unknown family '{}'", lineno + 1, fields[0])))?;
            let alpha: f64 = fields[1]
                .parse()
                .map_err(|e| bad(format!("line {}: bad alpha: {e}", lineno + 1)))?;
            let quantile: f64 = fields[2]
                .parse()
                .map_err(|e| bad(format!("line {}: bad quantile: {e}", lineno + 1)))?;
            let nd: usize = fields[3]
                .parse()
                .map_err(|e| bad(format!("line {}: bad n_draws: {e}", lineno + 1)))?;
            let tr: usize = fields[4]
                .parse()
                .map_err(|e| bad(format!("line {}: bad truncation: {e}", lineno + 1)))?;

            match family {
                None => family = Some(fam),
                Some(f) if f == fam => {}
                Some(f) => return Err(bad(format!("mixed families {f} and {fam}"))),
            }
            if *n_draws.get_or_insert(nd) != nd {
                return Err(bad("inconsistent n_draws across rows".into()));
            }
            if *truncation.get_or_insert(tr) != tr {
                return Err(bad("inconsistent truncation across rows".into()));
            }
            alphas.push(alpha);
            quantiles.push(quantile);
        }

        let family = family.ok_or_else(|| bad("no data rows".into()))?;
        for pair in alphas.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(bad(format!("alpha levels must increase strictly, got {pair:?}")));
            }
        }
        for pair in quantiles.windows(2) {
            if pair[0] < pair[1] {
                return Err(bad(format!(
                    "upper-tail quantiles must not increase with alpha, got {pair:?}"
                )));
            }
        }
        Ok(QuantileTable {
            family,
            alphas,
            quantiles,
            n_draws: n_draws.unwrap(),
            truncation: truncation.unwrap(),
        })
    }

    pub fn write_csv(&self, path: &Path, comments: &[&str]) -> Result<()> {
        std::fs::write(path, self.to_csv_string(comments))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }
}

static BRIDGE_TABLE: OnceLock<QuantileTable> = OnceLock::new();
static WIENER_TABLE: OnceLock<QuantileTable> = OnceLock::new();

/// The quantile table shipped with the crate (regenerate with the command
/// recorded in the data file's header).
pub fn default_table(family: LimitFamily) -> &'static QuantileTable {
    let (cell, text) = match family {
        LimitFamily::BridgeSq => (&BRIDGE_TABLE, include_str!("../data/bridge_quantiles.csv")),
        LimitFamily::WienerSq => (&WIENER_TABLE, include_str!("../data/wiener_quantiles.csv")),
    };
    cell.get_or_init(|| {
        QuantileTable::parse_csv(text).expect("shipped quantile table must parse")
    })
}

/// Levels tabulated in the shipped tables.
pub const DEFAULT_TABLE_ALPHAS: [f64; 9] =
    [0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5];
