//! Goodness-of-fit testing for small-noise diffusion processes
//!
//! The observation model is the scalar stochastic differential equation
//!
//! ```text
//! dX_t = S(theta, t, X_t) dt + eps * sigma(t, X_t) dW_t,   X_0 = x0,   0 <= t <= T,
//! ```
//!
//! with noise level `eps` in (0,1) and a drift family indexed by a parameter
//! `theta` in an open bounded box. The crate provides:
//!
//! * [`model`]: drift families with their full derivative suite, built-in
//!   examples, and configurable linear-in-theta models parsed from expression
//!   strings;
//! * [`ode`]: the noise-free limit dynamics, the exponential weight `psi`, and
//!   parameter sensitivities;
//! * [`sde`]: Euler-Maruyama simulation with counter-based, replication-keyed
//!   noise streams;
//! * [`mle`]: the drift maximum-likelihood estimator, Fisher information, and
//!   normalized score weights;
//! * [`gof_first`]: a Cramer-von-Mises-type test (statistic `delta`) whose null
//!   limit is `integral_0^1 B(s)^2 ds` for a Brownian bridge `B`; scalar
//!   parameter only;
//! * [`gof_second`]: a martingale-transform test (statistic `Delta`) whose null
//!   limit is `integral_0^1 w(s)^2 ds` for a Wiener process `w`; any parameter
//!   dimension;
//! * [`limits`]: samplers and quantile tables for those two limit laws;
//! * [`harness`]: reproducible Monte Carlo size/power/distribution experiments;
//! * [`stats`]: small statistical utilities (Kolmogorov-Smirnov, quantiles,
//!   Anderson-Darling).
//!
//! Both test statistics avoid stochastic integrals: every quantity is built
//! from Riemann-type sums over the simulation grid plus state-space integrals,
//! so the tests can be evaluated on any recorded trajectory.
//!
//! ```
//! use smallnoise_gof::{first_test, ou, simulate, Grid, NoiseStream, ParameterSpace};
//!
//! let model = ou();
//! let space = ParameterSpace::new(vec![0.1], vec![5.0]).unwrap();
//! let grid = Grid::new(2000, model.horizon()).unwrap();
//! let traj = simulate(&model, &[1.0], 0.05, grid, &NoiseStream::new(7, 0)).unwrap();
//! let (report, _curves) = first_test(&model, &space, &traj, 0.05).unwrap();
//! assert!(!report.reject);
//! ```

pub mod error;
pub mod expr;
pub mod grid;
pub mod model;
pub mod ode;
pub mod sde;
pub mod mle;
pub mod gof_first;
pub mod gof_second;
pub mod limits;
pub mod stats;
pub mod harness;

pub use error::{Error, Result};
pub use grid::Grid;
pub use model::{example1, ou, resolve_model_choice, AlternativeDrift, ModelSpec, ParameterSpace};
pub use ode::DeterministicPath;
pub use sde::{simulate, simulate_alternative, NoiseStream, Trajectory};
pub use mle::EstimationResult;
pub use gof_first::{
    first_test, first_test_curves, first_test_with_table, theta_star, FirstTestCurves,
    FirstTestOptions, PowerDiagnostics,
};
pub use gof_second::{
    nbar_matrices, pinv_plus, second_test, second_test_curves, second_test_with_table, u_process,
    SecondTestCurves, TruncationPolicy,
};
pub use limits::{default_table, path_sample_limit, sample_limit, LimitFamily, QuantileTable};
pub use harness::{
    run_distribution_check, run_power_experiment, run_size_experiment, CellResult,
    DistributionCell, ExperimentConfig, ExperimentResult, RepRecord, TestKind,
};

/// Report emitted by both tests; serializes to the JSON object printed by the
/// `test1`/`test2` CLI subcommands.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TestReport {
    /// Value of the test statistic (`delta` for the first test, `Delta` for
    /// the second).
    pub statistic: f64,
    /// Rejection threshold the statistic was compared against.
    pub threshold: f64,
    /// Nominal level the threshold was derived for.
    pub alpha: f64,
    /// True iff `statistic > threshold`.
    pub reject: bool,
    /// Maximum-likelihood estimate the statistic was built around.
    pub theta_hat: Vec<f64>,
    /// Number of grid intervals of the trajectory.
    pub n: usize,
    /// Noise level of the trajectory.
    pub epsilon: f64,
}
