//! Monte Carlo experiment harness: empirical size, power, and
//! distribution checks over a grid of noise levels.
//!
//! Every replication is seeded by `(seed, stream_id)` with
//! `stream_id = epsilon_index * replications + replication`, so results are
//! independent of scheduling: the parallel and serial drivers produce
//! byte-identical output. Replications that fail (estimation breakdown,
//! diffusion floor, degenerate tail) are counted per cell; an experiment
//! aborts once any cell exceeds a 5 percent failure budget.

use crate::error::{Error, Result};
use crate::gof_first::{first_test_curves, theta_star, FirstTestOptions, PowerDiagnostics};
use crate::gof_second::{second_test_curves, TruncationPolicy};
use crate::grid::Grid;
use crate::limits::{default_table, sample_limit, LimitFamily};
use crate::mle;
use crate::model::{resolve_model_choice, AlternativeDrift, ModelSpec, ParameterSpace};
use crate::sde::{simulate, simulate_alternative, NoiseStream, Trajectory};
use crate::stats::{binomial_se, two_sample_ks};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which of the two tests an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    First,
    Second,
    Both,
}

impl TestKind {
    /// Concrete tests to run, in output order.
    pub fn singles(self) -> &'static [TestKind] {
        match self {
            TestKind::First => &[TestKind::First],
            TestKind::Second => &[TestKind::Second],
            TestKind::Both => &[TestKind::First, TestKind::Second],
        }
    }

    fn family(self) -> LimitFamily {
        match self {
            TestKind::First => LimitFamily::BridgeSq,
            TestKind::Second => LimitFamily::WienerSq,
            TestKind::Both => unreachable!("Both is never run as a single test"),
        }
    }

    /// Lowercase name as used in configs and output files.
    pub fn label(self) -> &'static str {
        match self {
            TestKind::First => "first",
            TestKind::Second => "second",
            TestKind::Both => "both",
        }
    }
}

fn default_true() -> bool {
    true
}

/// One experiment description, usually read from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// `example1`, `ou`, or `linear:<path.toml>`.
    pub model: String,
    pub test: TestKind,
    /// Null parameter used to simulate size/distribution replications.
    pub theta0: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub replications: usize,
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Drift expression over `{t, x}` replacing the null drift in power
    /// experiments; simulation keeps the null diffusion coefficient.
    #[serde(default)]
    pub alternative: Option<String>,
    /// Override of the second-test tail cutoff width (absolute time).
    #[serde(default)]
    pub nu: Option<f64>,
    /// Override of the second-test eigenvalue floor.
    #[serde(default)]
    pub min_eig: Option<f64>,
    /// Adds the second-order expansion term to the first-test residual.
    #[serde(default)]
    pub ito_correction: bool,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            context: "experiment config".into(),
            message: e.to_string(),
        })?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported experiment schema_version {} (expected 1)",
                self.schema_version
            )));
        }
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilons must be non-empty".into()));
        }
        for &e in &self.epsilons {
            crate::sde::check_epsilon(e)?;
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        Ok(())
    }

    /// Builds the model, checks the null parameter and test compatibility.
    pub fn resolve(&self) -> Result<(ModelSpec, ParameterSpace)> {
        let (model, space) = resolve_model_choice(&self.model)?;
        model.check_theta(&self.theta0)?;
        space.require_inside(&self.theta0)?;
        if self.test.singles().contains(&TestKind::First) && model.dim() != 1 {
            return Err(Error::ScalarParameterRequired { dim: model.dim() });
        }
        self.policy(model.horizon()).validate(model.horizon())?;
        Ok((model, space))
    }

    fn policy(&self, horizon: f64) -> TruncationPolicy {
        let mut p = TruncationPolicy::default_for(horizon);
        if let Some(nu) = self.nu {
            p.nu = nu;
        }
        if let Some(me) = self.min_eig {
            p.min_eig = me;
        }
        p
    }

    fn alternative_drift(&self, model: &ModelSpec) -> Result<AlternativeDrift> {
        let source = self.alternative.as_deref().ok_or_else(|| {
            Error::Config("power experiment needs an `alternative` drift expression".into())
        })?;
        AlternativeDrift::from_expr(source, model.x0(), source)
    }
}

/// Per-replication outcome of a single test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepRecord {
    pub test: TestKind,
    pub epsilon: f64,
    pub replication: usize,
    pub statistic: f64,
    pub reject: bool,
}

/// Aggregate over one `(test, epsilon)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub test: TestKind,
    pub epsilon: f64,
    pub replications: usize,
    pub failures: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Binomial standard error of the rejection rate.
    pub se: f64,
    pub mean_statistic: f64,
}

/// Complete result of a size or power experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    /// `size` or `power`.
    pub kind: String,
    pub model_tag: String,
    pub test: TestKind,
    pub theta0: Vec<f64>,
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
    pub alternative: Option<String>,
    /// Closest family member and detectability diagnostics (power runs on
    /// scalar families only).
    pub power_diagnostics: Option<PowerDiagnostics>,
    pub cells: Vec<CellResult>,
    /// Per-replication rows, ordered first-test block then second-test
    /// block, epsilons in config order, replications ascending. Written to
    /// `stats.csv`, not to the JSON summary.
    #[serde(skip)]
    pub records: Vec<RepRecord>,
}

impl ExperimentResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing result: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Per-replication statistics, one row per test evaluation.
    pub fn write_stats_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "replication,epsilon,statistic,reject")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{}",
                r.replication,
                r.epsilon,
                r.statistic,
                if r.reject { 1 } else { 0 }
            )?;
        }
        Ok(())
    }
}

/// What drives the simulated paths of an experiment.
enum DriftSource<'a> {
    Null,
    Alternative(&'a AlternativeDrift),
}

struct CellOutcome {
    records: Vec<RepRecord>,
    failures: usize,
}

/// Runs all replications of one `(test, epsilon)` cell. The per-replication
/// stream id is `eps_idx * replications + rep` for both drivers.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    space: &ParameterSpace,
    source: &DriftSource<'_>,
    kind: TestKind,
    eps_idx: usize,
    threshold: f64,
    grid: Grid,
) -> Result<CellOutcome> {
    let epsilon = cfg.epsilons[eps_idx];
    let m = cfg.replications;
    let policy = cfg.policy(model.horizon());
    let options = FirstTestOptions { include_ito_correction: cfg.ito_correction };

    let one = |rep: usize| -> Result<RepRecord> {
        let noise = NoiseStream::new(cfg.seed, (eps_idx * m + rep) as u64);
        let traj: Trajectory = match source {
            DriftSource::Null => simulate(model, &cfg.theta0, epsilon, grid, &noise)?,
            DriftSource::Alternative(alt) => {
                simulate_alternative(model, alt, epsilon, grid, &noise)?
            }
        };
        let est = mle::estimate(model, space, &traj)?;
        let statistic = match kind {
            TestKind::First => first_test_curves(model, &est.theta_hat, &traj, options)?.delta_stat,
            TestKind::Second => {
                second_test_curves(model, &est.theta_hat, &traj, policy)?.delta2_stat
            }
            TestKind::Both => unreachable!(),
        };
        Ok(RepRecord { test: kind, epsilon, replication: rep, statistic, reject: statistic > threshold })
    };

    let outcomes: Vec<Result<RepRecord>> = if cfg.parallel {
        (0..m).into_par_iter().map(one).collect()
    } else {
        (0..m).map(one).collect()
    };

    let budget = (0.05 * m as f64).floor() as usize;
    let failures = outcomes.iter().filter(|r| r.is_err()).count();
    if failures > budget {
        return Err(Error::ExperimentAborted { failures, total: m, budget });
    }
    Ok(CellOutcome { records: outcomes.into_iter().filter_map(|r| r.ok()).collect(), failures })
}

fn summarize(kind: TestKind, epsilon: f64, m: usize, outcome: &CellOutcome) -> CellResult {
    let n_ok = outcome.records.len();
    let rejections = outcome.records.iter().filter(|r| r.reject).count();
    let rate = if n_ok == 0 { 0.0 } else { rejections as f64 / n_ok as f64 };
    let mean = if n_ok == 0 {
        f64::NAN
    } else {
        outcome.records.iter().map(|r| r.statistic).sum::<f64>() / n_ok as f64
    };
    CellResult {
        test: kind,
        epsilon,
        replications: m,
        failures: outcome.failures,
        rejections,
        rejection_rate: rate,
        se: binomial_se(rate, n_ok),
        mean_statistic: mean,
    }
}

fn run_experiment(
    cfg: &ExperimentConfig,
    kind_label: &str,
    source: DriftSource<'_>,
    power_diagnostics: Option<PowerDiagnostics>,
    model: &ModelSpec,
    space: &ParameterSpace,
) -> Result<ExperimentResult> {
    let grid = Grid::new(cfg.n, model.horizon())?;
    let mut cells = Vec::new();
    let mut records = Vec::new();
    for &kind in cfg.test.singles() {
        let threshold = default_table(kind.family()).threshold(cfg.alpha)?;
        for eps_idx in 0..cfg.epsilons.len() {
            let outcome = run_cell(cfg, model, space, &source, kind, eps_idx, threshold, grid)?;
            cells.push(summarize(kind, cfg.epsilons[eps_idx], cfg.replications, &outcome));
            records.extend(outcome.records);
        }
    }
    Ok(ExperimentResult {
        schema_version: 1,
        kind: kind_label.to_string(),
        model_tag: model.tag().to_string(),
        test: cfg.test,
        theta0: cfg.theta0.clone(),
        alpha: cfg.alpha,
        n: cfg.n,
        seed: cfg.seed,
        alternative: cfg.alternative.clone(),
        power_diagnostics,
        cells,
        records,
    })
}

/// Empirical size: simulate under the null at `theta0`, estimate, test.
pub fn run_size_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.alternative.is_some() {
        return Err(Error::Config("size experiment does not take an alternative".into()));
    }
    let (model, space) = cfg.resolve()?;
    run_experiment(cfg, "size", DriftSource::Null, None, &model, &space)
}

/// Empirical power: simulate under the alternative drift (null diffusion
/// coefficient), fit the null family, test. For scalar families the closest
/// family member and the detectability diagnostics are computed first.
pub fn run_power_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (model, space) = cfg.resolve()?;
    let alt = cfg.alternative_drift(&model)?;
    let diagnostics = if model.dim() == 1 {
        Some(theta_star(&model, &space, &alt, Grid::new(cfg.n, model.horizon())?)?)
    } else {
        None
    };
    run_experiment(cfg, "power", DriftSource::Alternative(&alt), diagnostics, &model, &space)
}

/// One `(test, epsilon)` row of a distribution check.
#[derive(Debug, Clone, Serialize)]
pub struct DistributionCell {
    pub test: TestKind,
    pub epsilon: f64,
    /// Two-sample Kolmogorov-Smirnov distance between the replicated
    /// statistics and a reference sample of the matching limit law.
    pub ks_distance: f64,
    pub n_stats: usize,
    pub n_reference: usize,
}

/// Number of limit-law reference draws used by [`run_distribution_check`].
pub const DISTRIBUTION_REFERENCE_DRAWS: usize = 20_000;
const DISTRIBUTION_REFERENCE_TRUNCATION: usize = 2_000;

/// Compares the null distribution of each statistic against its limit law.
pub fn run_distribution_check(cfg: &ExperimentConfig) -> Result<Vec<DistributionCell>> {
    let result = run_size_experiment(cfg)?;
    let mut cells = Vec::new();
    for &kind in cfg.test.singles() {
        let reference = sample_limit(
            kind.family(),
            DISTRIBUTION_REFERENCE_DRAWS,
            DISTRIBUTION_REFERENCE_TRUNCATION,
            cfg.seed ^ 0x9E37_79B9_7F4A_7C15,
        )?;
        for &epsilon in &cfg.epsilons {
            let stats: Vec<f64> = result
                .records
                .iter()
                .filter(|r| r.test == kind && r.epsilon == epsilon)
                .map(|r| r.statistic)
                .collect();
            cells.push(DistributionCell {
                test: kind,
                epsilon,
                ks_distance: two_sample_ks(&stats, &reference),
                n_stats: stats.len(),
                n_reference: reference.len(),
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: 1,
            model: "example1".into(),
            test: TestKind::Both,
            theta0: vec![0.5],
            epsilons: vec![0.2, 0.1],
            replications: 6,
            n: 64,
            alpha: 0.05,
            seed: 12345,
            alternative: None,
            nu: None,
            min_eig: None,
            ito_correction: false,
            parallel: true,
        }
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let text = r#"
            schema_version = 1
            model = "ou"
            test = "second"
            theta0 = [1.0]
            epsilons = [0.1]
            replications = 4
            n = 100
            alpha = 0.05
            seed = 7
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.test, TestKind::Second);
        assert!(cfg.parallel);
        assert!(cfg.alternative.is_none());
        assert!(!cfg.ito_correction);
        let (model, _) = cfg.resolve().unwrap();
        assert_eq!(model.tag(), "ou");
    }

    #[test]
    fn malformed_configs_are_rejected() {
        let bad_version = ExperimentConfig::from_toml_str(
            r#"
            schema_version = 2
            model = "ou"
            test = "first"
            theta0 = [1.0]
            epsilons = [0.1]
            replications = 4
            n = 100
            alpha = 0.05
            seed = 7
        "#,
        );
        assert!(matches!(bad_version, Err(Error::Config(_))));

        let unknown_field = ExperimentConfig::from_toml_str(
            r#"
            schema_version = 1
            model = "ou"
            test = "first"
            theta0 = [1.0]
            epsilons = [0.1]
            replications = 4
            n = 100
            alpha = 0.05
            seed = 7
            extra = true
        "#,
        );
        assert!(matches!(unknown_field, Err(Error::Parse { .. })));

        let bad_test = ExperimentConfig::from_toml_str(
            r#"
            schema_version = 1
            model = "ou"
            test = "third"
            theta0 = [1.0]
            epsilons = [0.1]
            replications = 4
            n = 100
            alpha = 0.05
            seed = 7
        "#,
        );
        assert!(matches!(bad_test, Err(Error::Parse { .. })));

        let mut cfg = base_config();
        cfg.epsilons = vec![];
        assert!(cfg.validate_shape().is_err());
        let mut cfg = base_config();
        cfg.epsilons = vec![1.5];
        assert!(cfg.validate_shape().is_err());
        let mut cfg = base_config();
        cfg.replications = 0;
        assert!(cfg.validate_shape().is_err());
    }

    #[test]
    fn first_test_on_multiparameter_model_is_rejected_up_front() {
        let dir = std::env::temp_dir().join(format!("harness-d2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let model_path = dir.join("affine.toml");
        std::fs::write(
            &model_path,
            r#"
            schema_version = 1
            horizon = 1.0
            x0 = 0.0
            h = ["1", "t"]
            lower = [-5.0, -5.0]
            upper = [5.0, 5.0]
        "#,
        )
        .unwrap();
        let mut cfg = base_config();
        cfg.model = format!("linear:{}", model_path.display());
        cfg.theta0 = vec![0.5, 1.0];
        cfg.test = TestKind::First;
        assert!(matches!(cfg.resolve(), Err(Error::ScalarParameterRequired { dim: 2 })));
        cfg.test = TestKind::Second;
        assert!(cfg.resolve().is_ok());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn serial_and_parallel_drivers_agree_exactly() {
        let mut cfg = base_config();
        cfg.parallel = true;
        let par = run_size_experiment(&cfg).unwrap();
        cfg.parallel = false;
        let ser = run_size_experiment(&cfg).unwrap();
        assert_eq!(par.records, ser.records);
        assert_eq!(par.cells, ser.cells);
    }

    #[test]
    fn record_order_is_first_block_then_second_block() {
        let cfg = base_config();
        let result = run_size_experiment(&cfg).unwrap();
        // 2 tests x 2 epsilons x 6 replications.
        assert_eq!(result.records.len(), 24);
        assert_eq!(result.cells.len(), 4);
        for (i, r) in result.records.iter().enumerate() {
            let expected_test = if i < 12 { TestKind::First } else { TestKind::Second };
            let expected_eps = cfg.epsilons[(i / 6) % 2];
            assert_eq!(r.test, expected_test);
            assert_eq!(r.epsilon, expected_eps);
            assert_eq!(r.replication, i % 6);
        }
        // Same trajectory, two tests: statistics differ but share seeds.
        assert_ne!(result.records[0].statistic, result.records[12].statistic);
    }

    #[test]
    fn size_rejects_alternative_field_and_power_requires_it() {
        let mut cfg = base_config();
        cfg.alternative = Some("0.8".into());
        assert!(matches!(run_size_experiment(&cfg), Err(Error::Config(_))));
        let mut cfg = base_config();
        cfg.alternative = None;
        assert!(matches!(run_power_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn power_run_carries_diagnostics_for_a_scalar_family() {
        let mut cfg = base_config();
        cfg.test = TestKind::First;
        cfg.epsilons = vec![0.05];
        cfg.replications = 8;
        cfg.n = 200;
        // Constant alternative drift 0.8 lies inside the constant family:
        // separation and shift must both vanish, power stays at level.
        cfg.alternative = Some("0.8".into());
        let result = run_power_experiment(&cfg).unwrap();
        let diag = result.power_diagnostics.as_ref().unwrap();
        assert!((diag.theta_star[0] - 0.8).abs() < 1e-6);
        assert!(diag.separation < 1e-10);
        assert!(diag.shift_norm_sq < 1e-10);
        assert_eq!(result.kind, "power");
        assert_eq!(result.cells.len(), 1);
    }

    #[test]
    fn output_files_have_the_documented_shape() {
        let cfg = base_config();
        let result = run_size_experiment(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("harness-out-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let json_path = dir.join("result.json");
        let csv_path = dir.join("stats.csv");
        result.write_json(&json_path).unwrap();
        result.write_stats_csv(&csv_path).unwrap();

        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert_eq!(json["kind"], "size");
        assert_eq!(json["cells"].as_array().unwrap().len(), 4);
        assert!(json.get("records").is_none());

        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("replication,epsilon,statistic,reject"));
        assert_eq!(lines.count(), 24);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn distribution_check_handles_a_single_replication() {
        let mut cfg = base_config();
        cfg.test = TestKind::Second;
        cfg.replications = 1;
        cfg.epsilons = vec![0.1];
        let cells = run_distribution_check(&cfg).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].n_stats, 1);
        assert_eq!(cells[0].n_reference, DISTRIBUTION_REFERENCE_DRAWS);
        // With one observation the KS distance is max(F(x), 1 - F(x-)) < 1.
        assert!(cells[0].ks_distance > 0.0 && cells[0].ks_distance <= 1.0);
    }

    #[test]
    fn failure_budget_aborts_the_run() {
        // theta0 pinned at the open boundary is rejected for every
        // replication, so the cell exhausts its budget immediately.
        let mut cfg = base_config();
        cfg.model = "ou".into();
        cfg.test = TestKind::Second;
        cfg.theta0 = vec![10.0];
        match run_size_experiment(&cfg) {
            Err(Error::OutsideParameterSpace { .. }) => {}
            other => panic!("expected boundary rejection at resolve time, got {other:?}"),
        }
        // A failure inside the replication loop trips the budget instead:
        // an unattainable eigenvalue floor degenerates every tail matrix.
        let mut cfg = base_config();
        cfg.model = "ou".into();
        cfg.test = TestKind::Second;
        cfg.theta0 = vec![1.0];
        cfg.replications = 4;
        cfg.epsilons = vec![0.1];
        cfg.min_eig = Some(1e6);
        let err = run_size_experiment(&cfg).unwrap_err();
        assert!(err.is_aborted_run(), "expected an aborted run, got {err:?}");
    }
}
