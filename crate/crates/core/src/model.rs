//! Parametric drift families `S(theta, t, x)`, the diffusion coefficient
//! `sigma(t, x)`, their derivative suites, parameter boxes, and fixed
//! alternative drifts for power studies.
//!
//! A model carries eight callables: the drift, its state derivative `S'`, its
//! parameter gradient `Sdot`, parameter Hessian `Sddot`, the time derivative of the
//! gradient `Sdot'_t`, and the diffusion coefficient with its `t`- and
//! `x`-derivatives. Missing derivatives are filled in by central finite
//! differences at build time; supplied ones can be cross-checked against
//! finite differences with [`validate_derivatives`].

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use serde::Deserialize;
use std::sync::Arc;

/// Central finite-difference step used by the fallback derivative generator
/// and by [`validate_derivatives`].
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance for derivative cross-checks.
pub const FD_TOLERANCE: f64 = 1e-4;

pub type DriftFn = Arc<dyn Fn(&[f64], f64, f64) -> f64 + Send + Sync>;
pub type DriftVecFn = Arc<dyn Fn(&[f64], f64, f64, &mut [f64]) + Send + Sync>;
pub type CoefFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A scalar coefficient of `(t, x)` together with its two first derivatives.
#[derive(Clone)]
pub struct Coefficient {
    pub value: CoefFn,
    pub dt: CoefFn,
    pub dx: CoefFn,
}

impl Coefficient {
    pub fn new(
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dt: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dx: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Coefficient { value: Arc::new(value), dt: Arc::new(dt), dx: Arc::new(dx) }
    }

    /// Builds the coefficient from an expression over `{t, x}`; derivatives
    /// are exact symbolic ones.
    pub fn from_expr(source: &str) -> Result<Self> {
        let e = Expr::parse(source)?;
        let et = e.diff(Var::T);
        let ex = e.diff(Var::X);
        Ok(Coefficient {
            value: Arc::new(move |t, x| e.eval(t, x)),
            dt: Arc::new(move |t, x| et.eval(t, x)),
            dx: Arc::new(move |t, x| ex.eval(t, x)),
        })
    }
}

/// Immutable specification of a drift family; all evaluations are pure and
/// safe to share across worker threads.
#[derive(Clone)]
pub struct ModelSpec {
    tag: String,
    dim: usize,
    horizon: f64,
    x0: f64,
    sigma_floor: f64,
    linear_in_theta: bool,
    drift: DriftFn,
    drift_dx: DriftFn,
    drift_dtheta: DriftVecFn,
    drift_d2theta: DriftVecFn,
    drift_dtheta_dt: DriftVecFn,
    sigma: CoefFn,
    sigma_dt: CoefFn,
    sigma_dx: CoefFn,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("tag", &self.tag)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("sigma_floor", &self.sigma_floor)
            .field("linear_in_theta", &self.linear_in_theta)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn builder(tag: &str, dim: usize, horizon: f64, x0: f64) -> ModelSpecBuilder {
        ModelSpecBuilder {
            tag: tag.to_string(),
            dim,
            horizon,
            x0,
            sigma_floor: 1e-8,
            linear_in_theta: false,
            drift: None,
            drift_dx: None,
            drift_dtheta: None,
            drift_d2theta: None,
            drift_dtheta_dt: None,
            sigma: None,
            sigma_dt: None,
            sigma_dx: None,
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Observation horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Deterministic initial value `x0`.
    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    /// True when `S(theta,t,x) = <theta, H(t,x)>`; the estimator then solves
    /// the normal equations exactly.
    pub fn is_linear_in_theta(&self) -> bool {
        self.linear_in_theta
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected: self.dim,
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Drift `S(theta, t, x)`.
    #[inline]
    pub fn drift(&self, theta: &[f64], t: f64, x: f64) -> f64 {
        (self.drift)(theta, t, x)
    }

    /// `S'(theta, t, x)`: derivative of the drift in the state variable.
    #[inline]
    pub fn drift_dx(&self, theta: &[f64], t: f64, x: f64) -> f64 {
        (self.drift_dx)(theta, t, x)
    }

    /// `Sdot(theta, t, x)`: gradient of the drift in `theta`, written into `out`.
    #[inline]
    pub fn drift_dtheta(&self, theta: &[f64], t: f64, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        (self.drift_dtheta)(theta, t, x, out)
    }

    /// `Sddot(theta, t, x)`: Hessian in `theta`, row-major into `out` (length d^2).
    #[inline]
    pub fn drift_d2theta(&self, theta: &[f64], t: f64, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim * self.dim);
        (self.drift_d2theta)(theta, t, x, out)
    }

    /// `Sdot'_t(theta, t, x)`: time derivative of the gradient, into `out`.
    #[inline]
    pub fn drift_dtheta_dt(&self, theta: &[f64], t: f64, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        (self.drift_dtheta_dt)(theta, t, x, out)
    }

    /// Diffusion coefficient with the floor check: values below
    /// `sigma_floor` (or non-finite) are errors.
    #[inline]
    pub fn sigma(&self, t: f64, x: f64) -> Result<f64> {
        let v = (self.sigma)(t, x);
        if !v.is_finite() {
            return Err(Error::NonFiniteEvaluation { what: "sigma", t, x, theta: vec![] });
        }
        if v < self.sigma_floor {
            return Err(Error::SigmaFloor { t, x, value: v, floor: self.sigma_floor });
        }
        Ok(v)
    }

    /// Raw diffusion value without the floor check (finite-difference
    /// plumbing only).
    pub(crate) fn sigma_unchecked(&self, t: f64, x: f64) -> f64 {
        (self.sigma)(t, x)
    }

    #[inline]
    pub fn sigma_dt(&self, t: f64, x: f64) -> f64 {
        (self.sigma_dt)(t, x)
    }

    #[inline]
    pub fn sigma_dx(&self, t: f64, x: f64) -> f64 {
        (self.sigma_dx)(t, x)
    }
}

/// Builder for [`ModelSpec`]; any derivative not supplied is generated as a
/// central finite difference (step [`FD_STEP`]) of its parent.
pub struct ModelSpecBuilder {
    tag: String,
    dim: usize,
    horizon: f64,
    x0: f64,
    sigma_floor: f64,
    linear_in_theta: bool,
    drift: Option<DriftFn>,
    drift_dx: Option<DriftFn>,
    drift_dtheta: Option<DriftVecFn>,
    drift_d2theta: Option<DriftVecFn>,
    drift_dtheta_dt: Option<DriftVecFn>,
    sigma: Option<CoefFn>,
    sigma_dt: Option<CoefFn>,
    sigma_dx: Option<CoefFn>,
}

impl ModelSpecBuilder {
    pub fn drift(mut self, f: impl Fn(&[f64], f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn drift_dx(mut self, f: impl Fn(&[f64], f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift_dx = Some(Arc::new(f));
        self
    }

    pub fn drift_dtheta(
        mut self,
        f: impl Fn(&[f64], f64, f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift_dtheta = Some(Arc::new(f));
        self
    }

    pub fn drift_d2theta(
        mut self,
        f: impl Fn(&[f64], f64, f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift_d2theta = Some(Arc::new(f));
        self
    }

    pub fn drift_dtheta_dt(
        mut self,
        f: impl Fn(&[f64], f64, f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift_dtheta_dt = Some(Arc::new(f));
        self
    }

    pub fn sigma(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.sigma = Some(Arc::new(f));
        self
    }

    pub fn sigma_dt(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.sigma_dt = Some(Arc::new(f));
        self
    }

    pub fn sigma_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.sigma_dx = Some(Arc::new(f));
        self
    }

    pub fn sigma_floor(mut self, floor: f64) -> Self {
        self.sigma_floor = floor;
        self
    }

    pub fn linear_in_theta(mut self, yes: bool) -> Self {
        self.linear_in_theta = yes;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        if self.dim < 1 {
            return Err(Error::Config("model dimension must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::BadHorizon { value: self.horizon });
        }
        if !(self.sigma_floor.is_finite() && self.sigma_floor > 0.0) {
            return Err(Error::Config(format!(
                "sigma_floor must be positive, got {}",
                self.sigma_floor
            )));
        }
        let drift = self.drift.ok_or_else(|| Error::Config("model needs a drift".into()))?;
        let sigma = self.sigma.ok_or_else(|| Error::Config("model needs a sigma".into()))?;
        let dim = self.dim;

        let drift_dx = self.drift_dx.unwrap_or_else(|| {
            let f = drift.clone();
            Arc::new(move |th: &[f64], t: f64, x: f64| {
                (f(th, t, x + FD_STEP) - f(th, t, x - FD_STEP)) / (2.0 * FD_STEP)
            })
        });
        let drift_dtheta = self.drift_dtheta.unwrap_or_else(|| {
            let f = drift.clone();
            Arc::new(move |th: &[f64], t: f64, x: f64, out: &mut [f64]| {
                let mut shifted = th.to_vec();
                for k in 0..out.len() {
                    shifted[k] = th[k] + FD_STEP;
                    let up = f(&shifted, t, x);
                    shifted[k] = th[k] - FD_STEP;
                    let dn = f(&shifted, t, x);
                    shifted[k] = th[k];
                    out[k] = (up - dn) / (2.0 * FD_STEP);
                }
            })
        });
        let drift_d2theta = self.drift_d2theta.unwrap_or_else(|| {
            let g = drift_dtheta.clone();
            Arc::new(move |th: &[f64], t: f64, x: f64, out: &mut [f64]| {
                let d = (out.len() as f64).sqrt() as usize;
                let mut shifted = th.to_vec();
                let mut up = vec![0.0; d];
                let mut dn = vec![0.0; d];
                for k in 0..d {
                    shifted[k] = th[k] + FD_STEP;
                    g(&shifted, t, x, &mut up);
                    shifted[k] = th[k] - FD_STEP;
                    g(&shifted, t, x, &mut dn);
                    shifted[k] = th[k];
                    for j in 0..d {
                        out[j * d + k] = (up[j] - dn[j]) / (2.0 * FD_STEP);
                    }
                }
            })
        });
        let drift_dtheta_dt = self.drift_dtheta_dt.unwrap_or_else(|| {
            let g = drift_dtheta.clone();
            Arc::new(move |th: &[f64], t: f64, x: f64, out: &mut [f64]| {
                let d = out.len();
                let mut up = vec![0.0; d];
                let mut dn = vec![0.0; d];
                g(th, t + FD_STEP, x, &mut up);
                g(th, t - FD_STEP, x, &mut dn);
                for j in 0..d {
                    out[j] = (up[j] - dn[j]) / (2.0 * FD_STEP);
                }
            })
        });
        let sigma_dt = self.sigma_dt.unwrap_or_else(|| {
            let s = sigma.clone();
            Arc::new(move |t: f64, x: f64| (s(t + FD_STEP, x) - s(t - FD_STEP, x)) / (2.0 * FD_STEP))
        });
        let sigma_dx = self.sigma_dx.unwrap_or_else(|| {
            let s = sigma.clone();
            Arc::new(move |t: f64, x: f64| (s(t, x + FD_STEP) - s(t, x - FD_STEP)) / (2.0 * FD_STEP))
        });

        Ok(ModelSpec {
            tag: self.tag,
            dim,
            horizon: self.horizon,
            x0: self.x0,
            sigma_floor: self.sigma_floor,
            linear_in_theta: self.linear_in_theta,
            drift,
            drift_dx,
            drift_dtheta,
            drift_d2theta,
            drift_dtheta_dt,
            sigma,
            sigma_dt,
            sigma_dx,
        })
    }
}

/// Open bounded box of admissible parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct ParameterSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::DegenerateParameterSpace { lower, upper });
        }
        let ok = lower
            .iter()
            .zip(&upper)
            .all(|(l, u)| l.is_finite() && u.is_finite() && l < u);
        if !ok {
            return Err(Error::DegenerateParameterSpace { lower, upper });
        }
        Ok(ParameterSpace { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Strict interior membership (the box is open).
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| v.is_finite() && *l < *v && *v < *u)
    }

    pub fn require_inside(&self, theta: &[f64]) -> Result<()> {
        if self.contains(theta) {
            Ok(())
        } else {
            Err(Error::OutsideParameterSpace {
                theta: theta.to_vec(),
                lower: self.lower.clone(),
                upper: self.upper.clone(),
            })
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Largest box edge, used to scale minimizer-separation tolerances.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .fold(0.0f64, f64::max)
    }

    /// Pulls a point onto the closed box shrunk by `margin` times the edge
    /// length on each side, so the result is strictly interior.
    pub fn clamp_inside(&self, theta: &[f64], margin: f64) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| {
                let pad = margin * (u - l);
                v.clamp(l + pad, u - pad)
            })
            .collect()
    }
}

/// A fixed drift outside the family, for power studies: `dX = S_alt(t, X) dt
/// + eps sigma(t, X) dW` with the diffusion coefficient of the null model.
#[derive(Clone)]
pub struct AlternativeDrift {
    tag: String,
    x0: f64,
    drift: CoefFn,
}

impl std::fmt::Debug for AlternativeDrift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlternativeDrift")
            .field("tag", &self.tag)
            .field("x0", &self.x0)
            .finish_non_exhaustive()
    }
}

impl AlternativeDrift {
    pub fn new(tag: &str, x0: f64, drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        AlternativeDrift { tag: tag.to_string(), x0, drift: Arc::new(drift) }
    }

    /// Alternative that coincides with the family member at `theta` (useful
    /// for degenerate-power checks).
    pub fn from_family(model: &ModelSpec, theta: &[f64]) -> Result<Self> {
        model.check_theta(theta)?;
        let th = theta.to_vec();
        let drift = model.drift.clone();
        Ok(AlternativeDrift {
            tag: format!("{}@{:?}", model.tag(), th),
            x0: model.x0(),
            drift: Arc::new(move |t, x| drift(&th, t, x)),
        })
    }

    /// Alternative defined by an expression over `{t, x}`, anchored at the
    /// null model's initial value.
    pub fn from_expr(tag: &str, x0: f64, source: &str) -> Result<Self> {
        let e = Expr::parse(source)?;
        Ok(AlternativeDrift {
            tag: tag.to_string(),
            x0,
            drift: Arc::new(move |t, x| e.eval(t, x)),
        })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    #[inline]
    pub fn drift(&self, t: f64, x: f64) -> f64 {
        (self.drift)(t, x)
    }

    /// Numerical Lipschitz/linear-growth estimate over a sampled rectangle.
    /// Returns (max |S(t,x1)-S(t,x2)|/|x1-x2|, max |S(t,x)|/(1+|x|)); both
    /// must be finite for the drift to be usable.
    pub fn growth_estimates(
        &self,
        horizon: f64,
        x_lo: f64,
        x_hi: f64,
        samples: usize,
        seed: u64,
    ) -> (f64, f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut lip: f64 = 0.0;
        let mut growth: f64 = 0.0;
        for _ in 0..samples {
            let t = rng.random_range(0.0..horizon);
            let x1 = rng.random_range(x_lo..x_hi);
            let x2 = rng.random_range(x_lo..x_hi);
            let f1 = self.drift(t, x1);
            let f2 = self.drift(t, x2);
            if (x1 - x2).abs() > 1e-9 {
                lip = lip.max((f1 - f2).abs() / (x1 - x2).abs());
            }
            growth = growth.max(f1.abs() / (1.0 + x1.abs()));
        }
        (lip, growth)
    }
}

/// Constant drift family `dX = theta dt + eps dW` on `[0, 1]`, `x0 = 0`.
/// Everything about it is exactly computable, which makes it the anchoring
/// oracle for both tests.
pub fn example1() -> ModelSpec {
    linear_drift_model("example1", 1.0, 0.0, &["1"], "1").expect("builtin model")
}

/// Ornstein-Uhlenbeck-type family `dX = -theta X dt + eps dW` on `[0, 1]`,
/// `x0 = 1`.
pub fn ou() -> ModelSpec {
    linear_drift_model("ou", 1.0, 1.0, &["-x"], "1").expect("builtin model")
}

/// Default parameter boxes for the built-in models (CLI defaults; override
/// with explicit bounds where needed).
pub fn default_space(tag: &str) -> Option<ParameterSpace> {
    match tag {
        "example1" => Some(ParameterSpace::new(vec![-10.0], vec![10.0]).unwrap()),
        "ou" => Some(ParameterSpace::new(vec![0.05], vec![10.0]).unwrap()),
        _ => None,
    }
}

/// Linear-in-theta family `S(theta,t,x) = <theta, H(t,x)>` from explicit
/// coefficient triples (value, d/dt, d/dx) for each component of `H` and for
/// `sigma`.
pub fn linear_model_from_parts(
    tag: &str,
    horizon: f64,
    x0: f64,
    components: Vec<Coefficient>,
    sigma: Coefficient,
) -> Result<ModelSpec> {
    let dim = components.len();
    if dim == 0 {
        return Err(Error::Config("linear model needs at least one component".into()));
    }
    let h: Arc<[Coefficient]> = components.into();

    let h1 = h.clone();
    let drift = move |theta: &[f64], t: f64, x: f64| -> f64 {
        theta
            .iter()
            .zip(h1.iter())
            .map(|(th, c)| th * (c.value)(t, x))
            .sum()
    };
    let h2 = h.clone();
    let drift_dx = move |theta: &[f64], t: f64, x: f64| -> f64 {
        theta
            .iter()
            .zip(h2.iter())
            .map(|(th, c)| th * (c.dx)(t, x))
            .sum()
    };
    let h3 = h.clone();
    let dtheta = move |_theta: &[f64], t: f64, x: f64, out: &mut [f64]| {
        for (o, c) in out.iter_mut().zip(h3.iter()) {
            *o = (c.value)(t, x);
        }
    };
    let d2 = move |_theta: &[f64], _t: f64, _x: f64, out: &mut [f64]| {
        out.fill(0.0);
    };
    let h4 = h.clone();
    let dtheta_dt = move |_theta: &[f64], t: f64, x: f64, out: &mut [f64]| {
        for (o, c) in out.iter_mut().zip(h4.iter()) {
            *o = (c.dt)(t, x);
        }
    };
    let sv = sigma.value.clone();
    let st = sigma.dt.clone();
    let sx = sigma.dx.clone();

    ModelSpec::builder(tag, dim, horizon, x0)
        .drift(drift)
        .drift_dx(drift_dx)
        .drift_dtheta(dtheta)
        .drift_d2theta(d2)
        .drift_dtheta_dt(dtheta_dt)
        .sigma(move |t, x| sv(t, x))
        .sigma_dt(move |t, x| st(t, x))
        .sigma_dx(move |t, x| sx(t, x))
        .linear_in_theta(true)
        .build()
}

/// Linear-in-theta family from expression strings; derivatives are symbolic.
pub fn linear_drift_model(
    tag: &str,
    horizon: f64,
    x0: f64,
    h_sources: &[&str],
    sigma_source: &str,
) -> Result<ModelSpec> {
    let components = h_sources
        .iter()
        .map(|s| Coefficient::from_expr(s))
        .collect::<Result<Vec<_>>>()?;
    let sigma = Coefficient::from_expr(sigma_source)?;
    linear_model_from_parts(tag, horizon, x0, components, sigma)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearModelConfig {
    schema_version: u32,
    #[serde(default = "default_linear_tag")]
    tag: String,
    horizon: f64,
    x0: f64,
    #[serde(default = "default_sigma_source")]
    sigma: String,
    h: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    #[serde(default)]
    sigma_floor: Option<f64>,
}

fn default_linear_tag() -> String {
    "linear".to_string()
}

fn default_sigma_source() -> String {
    "1".to_string()
}

/// Parses a linear-model declaration (TOML, flat keys, `schema_version = 1`):
///
/// ```toml
/// schema_version = 1
/// tag = "trig"
/// horizon = 1.0
/// x0 = 0.0
/// sigma = "1"
/// h = ["-x", "cos(t)"]
/// lower = [0.1, 0.1]
/// upper = [5.0, 5.0]
/// ```
pub fn linear_model_from_config_str(text: &str) -> Result<(ModelSpec, ParameterSpace)> {
    let cfg: LinearModelConfig = toml::from_str(text).map_err(|e| Error::Parse {
        context: "linear model config".into(),
        message: e.to_string(),
    })?;
    if cfg.schema_version != 1 {
        return Err(Error::Config(format!(
            "unsupported linear model schema_version {} (expected 1)",
            cfg.schema_version
        )));
    }
    if cfg.h.is_empty() {
        return Err(Error::Config("linear model config must declare at least one h component".into()));
    }
    if cfg.lower.len() != cfg.h.len() || cfg.upper.len() != cfg.h.len() {
        return Err(Error::Config(format!(
            "bounds must match the number of h components ({})",
            cfg.h.len()
        )));
    }
    let sources: Vec<&str> = cfg.h.iter().map(String::as_str).collect();
    let mut model = linear_drift_model(&cfg.tag, cfg.horizon, cfg.x0, &sources, &cfg.sigma)?;
    if let Some(floor) = cfg.sigma_floor {
        if !(floor.is_finite() && floor > 0.0) {
            return Err(Error::Config(format!("sigma_floor must be positive, got {floor}")));
        }
        model.sigma_floor = floor;
    }
    let space = ParameterSpace::new(cfg.lower, cfg.upper)?;
    Ok((model, space))
}

/// Resolves a CLI/config model choice: `example1`, `ou`, or
/// `linear:<path-to-config>`. Returns the model and its default parameter box.
pub fn resolve_model_choice(choice: &str) -> Result<(ModelSpec, ParameterSpace)> {
    match choice {
        "example1" => Ok((example1(), default_space("example1").unwrap())),
        "ou" => Ok((ou(), default_space("ou").unwrap())),
        other => {
            if let Some(path) = other.strip_prefix("linear:") {
                let text = std::fs::read_to_string(path)?;
                linear_model_from_config_str(&text)
            } else {
                Err(Error::Config(format!(
                    "unknown model '{other}' (expected example1, ou, or linear:<file>)"
                )))
            }
        }
    }
}

/// Result of the finite-difference cross-check of one derivative field.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DerivativeCheck {
    pub field: &'static str,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Report of [`validate_derivatives`]; a failing field is reported, not
/// thrown.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DerivativeReport {
    pub tolerance: f64,
    pub samples: usize,
    pub checks: Vec<DerivativeCheck>,
}

impl DerivativeReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_error(&self, field: &str) -> f64 {
        self.checks
            .iter()
            .find(|c| c.field == field)
            .map(|c| c.max_rel_error)
            .unwrap_or(f64::NAN)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Cross-checks every supplied derivative against a central finite difference
/// of its parent at `samples` random points: theta uniform in `space`,
/// t uniform in (0, T), x uniform in a window around `x0`.
pub fn validate_derivatives(
    model: &ModelSpec,
    space: &ParameterSpace,
    samples: usize,
    seed: u64,
) -> Result<DerivativeReport> {
    use rand::{Rng, SeedableRng};
    if space.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "parameter space",
            expected: model.dim(),
            got: space.dim(),
        });
    }
    let samples = samples.max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = model.dim();
    let h = FD_STEP;
    let x_half_width = 2.0 * (1.0 + model.x0().abs());

    let mut max_err = [0.0f64; 6];
    let mut grad = vec![0.0; d];
    let mut grad_up = vec![0.0; d];
    let mut grad_dn = vec![0.0; d];
    let mut hess = vec![0.0; d * d];

    for _ in 0..samples {
        let theta: Vec<f64> = space
            .lower()
            .iter()
            .zip(space.upper())
            .map(|(l, u)| rng.random_range(*l..*u))
            .collect();
        let t = rng.random_range(0.0..model.horizon());
        let x = model.x0() + rng.random_range(-x_half_width..x_half_width);

        // dS_dx against S.
        let fd = (model.drift(&theta, t, x + h) - model.drift(&theta, t, x - h)) / (2.0 * h);
        max_err[0] = max_err[0].max(rel_err(model.drift_dx(&theta, t, x), fd));

        // dS_dtheta against S, coordinate by coordinate.
        model.drift_dtheta(&theta, t, x, &mut grad);
        let mut shifted = theta.clone();
        for k in 0..d {
            shifted[k] = theta[k] + h;
            let up = model.drift(&shifted, t, x);
            shifted[k] = theta[k] - h;
            let dn = model.drift(&shifted, t, x);
            shifted[k] = theta[k];
            max_err[1] = max_err[1].max(rel_err(grad[k], (up - dn) / (2.0 * h)));
        }

        // d2S_dtheta2 against dS_dtheta.
        model.drift_d2theta(&theta, t, x, &mut hess);
        for k in 0..d {
            shifted[k] = theta[k] + h;
            model.drift_dtheta(&shifted, t, x, &mut grad_up);
            shifted[k] = theta[k] - h;
            model.drift_dtheta(&shifted, t, x, &mut grad_dn);
            shifted[k] = theta[k];
            for j in 0..d {
                let fd = (grad_up[j] - grad_dn[j]) / (2.0 * h);
                max_err[2] = max_err[2].max(rel_err(hess[j * d + k], fd));
            }
        }

        // dSdot_dt against dS_dtheta.
        model.drift_dtheta_dt(&theta, t, x, &mut grad_up);
        model.drift_dtheta(&theta, t + h, x, &mut grad);
        model.drift_dtheta(&theta, t - h, x, &mut grad_dn);
        for j in 0..d {
            let fd = (grad[j] - grad_dn[j]) / (2.0 * h);
            max_err[3] = max_err[3].max(rel_err(grad_up[j], fd));
        }

        // sigma derivatives against sigma.
        let fd_t =
            (model.sigma_unchecked(t + h, x) - model.sigma_unchecked(t - h, x)) / (2.0 * h);
        max_err[4] = max_err[4].max(rel_err(model.sigma_dt(t, x), fd_t));
        let fd_x =
            (model.sigma_unchecked(t, x + h) - model.sigma_unchecked(t, x - h)) / (2.0 * h);
        max_err[5] = max_err[5].max(rel_err(model.sigma_dx(t, x), fd_x));
    }

    let names = ["dS_dx", "dS_dtheta", "d2S_dtheta2", "dSdot_dt", "dsigma_dt", "dsigma_dx"];
    let checks = names
        .iter()
        .zip(max_err)
        .map(|(field, err)| DerivativeCheck { field, max_rel_error: err, pass: err <= FD_TOLERANCE })
        .collect();
    Ok(DerivativeReport { tolerance: FD_TOLERANCE, samples, checks })
}
