//! Euler-Maruyama simulation of `dX = S(theta, t, X) dt + eps sigma(t, X) dW`
//! with reproducible counter-based noise streams, plus trajectory CSV output
//! with a JSON sidecar carrying the metadata the test statistics need
//! (noise level, seed, generating model).

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{AlternativeDrift, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A reproducible source of standard normals: one base seed, many
/// independent streams. Replication `r` of an experiment draws from stream
/// `r`, so results do not depend on scheduling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        NoiseStream { seed, stream_id }
    }

    /// Draws `count` independent standard normals. A fresh generator is
    /// built per call, so the result depends only on `(seed, stream_id)`.
    pub fn standard_normals(&self, count: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

/// One simulated path: `values[i]` is `X_{t_i}` on the grid, generated at
/// noise level `epsilon` from the recorded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: Grid,
    values: Vec<f64>,
    epsilon: f64,
    seed: u64,
    stream_id: u64,
    model_tag: String,
}

impl Trajectory {
    pub fn new(
        grid: Grid,
        values: Vec<f64>,
        epsilon: f64,
        seed: u64,
        stream_id: u64,
        model_tag: String,
    ) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                what: "trajectory values",
                expected: grid.n_nodes(),
                got: values.len(),
            });
        }
        check_epsilon(epsilon)?;
        Ok(Trajectory { grid, values, epsilon, seed, stream_id, model_tag })
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

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::BadEpsilon { value: epsilon });
    }
    Ok(())
}

fn euler_maruyama<D, S>(
    grid: Grid,
    x0: f64,
    epsilon: f64,
    noise: &NoiseStream,
    antithetic: bool,
    mut drift: D,
    mut sigma: S,
) -> Result<Vec<f64>>
where
    D: FnMut(f64, f64) -> f64,
    S: FnMut(f64, f64) -> Result<f64>,
{
    let n = grid.n();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let sign = if antithetic { -1.0 } else { 1.0 };
    let normals = noise.standard_normals(n);

    let mut values = Vec::with_capacity(n + 1);
    let mut x = x0;
    values.push(x);
    for (i, &xi_raw) in normals.iter().enumerate() {
        let t = grid.t(i);
        let s = sigma(t, x)?;
        x += drift(t, x) * dt + epsilon * s * sqrt_dt * sign * xi_raw;
        if !x.is_finite() {
            return Err(Error::NonFiniteState { index: i + 1, t: grid.t(i + 1) });
        }
        values.push(x);
    }
    Ok(values)
}

/// Simulates the null model at `theta`. The antithetic variant flips the
/// sign of every increment (variance-reduction pairing).
pub fn simulate_with_options(
    model: &ModelSpec,
    theta: &[f64],
    epsilon: f64,
    grid: Grid,
    noise: &NoiseStream,
    antithetic: bool,
) -> Result<Trajectory> {
    model.check_theta(theta)?;
    check_epsilon(epsilon)?;
    if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(Error::Config(format!(
            "grid horizon {} does not match model horizon {}",
            grid.horizon(),
            model.horizon()
        )));
    }
    let values = euler_maruyama(
        grid,
        model.x0(),
        epsilon,
        noise,
        antithetic,
        |t, x| model.drift(theta, t, x),
        |t, x| model.sigma(t, x),
    )?;
    Trajectory::new(grid, values, epsilon, noise.seed, noise.stream_id, model.tag().to_string())
}

/// Simulates the null model at `theta` (plain, non-antithetic).
pub fn simulate(
    model: &ModelSpec,
    theta: &[f64],
    epsilon: f64,
    grid: Grid,
    noise: &NoiseStream,
) -> Result<Trajectory> {
    simulate_with_options(model, theta, epsilon, grid, noise, false)
}

/// Simulates under a fixed alternative drift, keeping the null model's
/// diffusion coefficient (and its floor check).
pub fn simulate_alternative(
    model: &ModelSpec,
    alt: &AlternativeDrift,
    epsilon: f64,
    grid: Grid,
    noise: &NoiseStream,
) -> Result<Trajectory> {
    check_epsilon(epsilon)?;
    let values = euler_maruyama(
        grid,
        alt.x0(),
        epsilon,
        noise,
        false,
        |t, x| alt.drift(t, x),
        |t, x| model.sigma(t, x),
    )?;
    Trajectory::new(grid, values, epsilon, noise.seed, noise.stream_id, alt.tag().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryMeta {
    schema_version: u32,
    model_tag: String,
    epsilon: f64,
    seed: u64,
    stream_id: u64,
    n: usize,
    horizon: f64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes `t,x` rows with 17 significant digits (lossless f64 round trip)
/// and a `<file>.meta.json` sidecar with the generation metadata.
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "t,x")?;
    let grid = traj.grid();
    for (i, v) in traj.values().iter().enumerate() {
        writeln!(w, "{:.16e},{:.16e}", grid.t(i), v)?;
    }
    w.flush()?;

    let meta = TrajectoryMeta {
        schema_version: 1,
        model_tag: traj.model_tag.clone(),
        epsilon: traj.epsilon,
        seed: traj.seed,
        stream_id: traj.stream_id,
        n: grid.n(),
        horizon: grid.horizon(),
    };
    let sidecar = sidecar_path(path);
    let file = std::fs::File::create(&sidecar)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &meta).map_err(|e| Error::Parse {
        context: sidecar.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(())
}

/// Reads a trajectory written by [`write_trajectory_csv`]; the sidecar is
/// required because the statistics need the noise level.
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let sidecar = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&sidecar).map_err(|e| Error::Parse {
        context: sidecar.display().to_string(),
        message: format!("missing or unreadable sidecar: {e}"),
    })?;
    let meta: TrajectoryMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        context: sidecar.display().to_string(),
        message: e.to_string(),
    })?;
    if meta.schema_version != 1 {
        return Err(Error::Parse {
            context: sidecar.display().to_string(),
            message: format!("unsupported schema_version {}", meta.schema_version),
        });
    }

    let grid = Grid::new(meta.n, meta.horizon)?;
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut values = Vec::with_capacity(grid.n_nodes());
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if lineno == 0 {
            if line != "t,x" {
                return Err(Error::Parse {
                    context: path.display().to_string(),
                    message: format!("expected header 't,x', got '{line}'"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (t_str, x_str) = match (parts.next(), parts.next(), parts.next()) {
            (Some(t), Some(x), None) => (t, x),
            _ => {
                return Err(Error::Parse {
                    context: path.display().to_string(),
                    message: format!("line {}: expected two comma-separated fields", lineno + 1),
                })
            }
        };
        let _t: f64 = t_str.trim().parse().map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: format!("line {}: bad t value: {e}", lineno + 1),
        })?;
        let x: f64 = x_str.trim().parse().map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: format!("line {}: bad x value: {e}", lineno + 1),
        })?;
        values.push(x);
    }
    if values.len() != grid.n_nodes() {
        return Err(Error::Parse {
            context: path.display().to_string(),
            message: format!("expected {} rows, got {}", grid.n_nodes(), values.len()),
        });
    }
    Trajectory::new(grid, values, meta.epsilon, meta.seed, meta.stream_id, meta.model_tag)
}
