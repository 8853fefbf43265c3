//! Scenario files: one TOML document describing the plant, nominal
//! trajectory, noise, controller weights, geometry and estimator settings.
//!
//! Every optional setting has a default; [`Scenario::resolved`] holds the
//! fully populated configuration, which is what gets hashed and echoed into
//! results.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::closepoint::CloseSettings;
use crate::control::{ControlError, LqrWeights, NominalTrajectory};
use crate::dynamics::{Airplane, AirplaneParams, Dynamics, LinearPlant};
use crate::estimator::{GradientScale, Method};
use crate::gauss::{GaussianSpec, TrajectoryNoiseSpec};
use crate::geometry::{ConvexShape, Environment, NamedShape, RobotBody};
use crate::isopt::{IsoptSettings, MixtureSettings};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {reason}")]
    Field { field: String, reason: String },
    #[error("nominal trajectory is inconsistent with the dynamics: max residual {max_residual:.3e} at step {step}")]
    Nominal { max_residual: f64, step: usize },
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Field {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DynamicsConfig {
    Airplane {
        #[serde(flatten)]
        params: AirplaneParams,
    },
    /// `x_{t+1} = A x_t + B u_t`. `translation` maps up to three state
    /// coordinates to world x, y, z.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        dt: f64,
        translation: Vec<usize>,
    },
    DoubleIntegrator {
        dt: f64,
    },
}

/// A covariance given as a diagonal, a full matrix, or one full matrix per
/// time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceInput {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
    PerStep(Vec<Vec<Vec<f64>>>),
}

impl CovarianceInput {
    /// Matrix for time step `t` (1-based; 0 for time-invariant blocks).
    fn at(&self, field: &str, t: usize, dim: usize) -> Result<DMatrix<f64>, ScenarioError> {
        let m = match self {
            CovarianceInput::Diagonal(d) => {
                if d.len() != dim {
                    return Err(field_err(field, format!("expected {dim} diagonal entries, got {}", d.len())));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(d))
            }
            CovarianceInput::Full(rows) => matrix_from_rows(field, rows, dim, dim)?,
            CovarianceInput::PerStep(steps) => {
                let rows = steps
                    .get(t.saturating_sub(1))
                    .ok_or_else(|| field_err(field, format!("no entry for time step {t} ({} given)", steps.len())))?;
                matrix_from_rows(field, rows, dim, dim)?
            }
        };
        Ok(m)
    }

    fn spec(&self, field: &str, t: usize, dim: usize) -> Result<GaussianSpec, ScenarioError> {
        let m = self.at(field, t, dim)?;
        GaussianSpec::zero_mean(m).map_err(|e| field_err(field, format!("{e} (time step {t})")))
    }
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, ScenarioError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(field_err(field, format!("expected a {nrows}x{ncols} matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSegment {
    pub steps: usize,
    pub control: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalConfig {
    pub initial_state: Vec<f64>,
    /// One control per step. Exclusive with `segments`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<Vec<Vec<f64>>>,
    /// Piecewise-constant controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<ControlSegment>>,
    /// `x*_0..x*_T`; reconstructed from the controls when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_consistency_tolerance")]
    pub consistency_tolerance: f64,
}

fn default_consistency_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Initial estimation error covariance.
    pub p0: CovarianceInput,
    /// Control noise.
    pub vu: CovarianceInput,
    /// Process noise.
    pub vx: CovarianceInput,
    /// Measurement noise.
    pub w: CovarianceInput,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<CovarianceInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<CovarianceInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_final: Option<CovarianceInput>,
}

/// Shape syntax of scenario files; boxes expand to polytopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShapeInput {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
    Polytope { vertices: Vec<[f64; 3]> },
}

impl ShapeInput {
    pub fn to_shape(&self) -> ConvexShape {
        match self {
            ShapeInput::Sphere { center, radius } => ConvexShape::sphere(Vector3::from(*center), *radius),
            ShapeInput::Box { min, max } => ConvexShape::cuboid(Vector3::from(*min), Vector3::from(*max)),
            ShapeInput::Polytope { vertices } => ConvexShape::Polytope {
                vertices: vertices.iter().map(|v| Vector3::from(*v)).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    #[serde(flatten)]
    pub shape: ShapeInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub parts: Vec<ShapeEntry>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    #[serde(default)]
    pub obstacles: Vec<ShapeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Total samples for `naive` and `is`.
    pub m: usize,
    /// Batch size and batch count for `ais`.
    pub k: usize,
    pub l: usize,
    pub c: f64,
    pub gradient_scale: GradientScale,
    pub seed: u64,
    /// Clearance at or below which a configuration counts as colliding.
    pub margin: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: Method::Ais,
            m: 1000,
            k: 20,
            l: 50,
            c: 1.0,
            gradient_scale: GradientScale::RunningRms,
            seed: 0,
            margin: 0.0,
        }
    }
}

/// A scenario file as written, with defaults filled in by deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub dynamics: DynamicsConfig,
    pub nominal: NominalConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub lqr: LqrConfig,
    pub robot: RobotConfig,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub closepoint: CloseSettings,
    #[serde(default)]
    pub isopt: IsoptSettings,
    #[serde(default)]
    pub mixture: MixtureSettings,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

/// A validated scenario.
#[derive(Clone)]
pub struct Scenario {
    pub resolved: ScenarioFile,
    pub dynamics: Arc<dyn Dynamics>,
    pub nominal: NominalTrajectory,
    pub noise: TrajectoryNoiseSpec,
    pub lqr: LqrWeights,
    pub robot: RobotBody,
    pub environment: Environment,
    /// SHA-256 of the canonical JSON form of `resolved`.
    pub hash: String,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.resolved.name)
            .field("horizon", &self.nominal.horizon())
            .field("hash", &self.hash)
            .finish_non_exhaustive()
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_toml(&text)
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_file(mut file: ScenarioFile) -> Result<Self, ScenarioError> {
        let dynamics = build_dynamics(&file.dynamics)?;
        let n = dynamics.state_dim();
        let nu = dynamics.control_dim();
        let nz = dynamics.observation_dim();

        let controls = nominal_controls(&file.nominal, nu)?;
        let horizon = controls.len();
        if horizon == 0 {
            return Err(field_err("nominal", "horizon must be at least 1"));
        }
        if file.nominal.initial_state.len() != n {
            return Err(field_err(
                "nominal.initial_state",
                format!("expected {n} entries, got {}", file.nominal.initial_state.len()),
            ));
        }
        let x0 = DVector::from_column_slice(&file.nominal.initial_state);
        let nominal = match &file.nominal.states {
            Some(states) => {
                if states.len() != horizon + 1 || states.iter().any(|s| s.len() != n) {
                    return Err(field_err(
                        "nominal.states",
                        format!("expected {} states of dimension {n}", horizon + 1),
                    ));
                }
                let nominal = NominalTrajectory {
                    states: states.iter().map(|s| DVector::from_column_slice(s)).collect(),
                    controls,
                };
                if nominal.states[0] != x0 {
                    return Err(field_err("nominal.states", "first state differs from initial_state"));
                }
                nominal
                    .check_consistency(dynamics.as_ref(), file.nominal.consistency_tolerance)
                    .map_err(nominal_err)?;
                nominal
            }
            None => NominalTrajectory::from_controls(dynamics.as_ref(), x0, controls).map_err(nominal_err)?,
        };

        let init = file.noise.p0.spec("noise.p0", 0, n)?;
        let mut steps = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            steps.push((
                file.noise.vu.spec("noise.vu", t, nu)?,
                file.noise.vx.spec("noise.vx", t, n)?,
                file.noise.w.spec("noise.w", t, nz)?,
            ));
        }
        let noise = TrajectoryNoiseSpec::new(init, steps).map_err(|e| field_err("noise", e.to_string()))?;

        let weight = |input: &Option<CovarianceInput>, field: &str, dim: usize| -> Result<DMatrix<f64>, ScenarioError> {
            match input {
                None => Ok(DMatrix::identity(dim, dim)),
                Some(c) => {
                    let m = c.at(field, 0, dim)?;
                    let sym = (&m - m.transpose()).amax();
                    if sym > 1e-12 * m.amax().max(1.0) {
                        return Err(field_err(field, "must be symmetric"));
                    }
                    Ok(m)
                }
            }
        };
        let lqr = LqrWeights {
            q: weight(&file.lqr.q, "lqr.q", n)?,
            r: weight(&file.lqr.r, "lqr.r", nu)?,
            q_final: weight(&file.lqr.q_final, "lqr.q_final", n)?,
        };
        if lqr.r.clone().cholesky().is_none() {
            return Err(field_err("lqr.r", "must be positive definite"));
        }

        let robot = RobotBody {
            parts: named(&file.robot.parts),
        };
        robot.validate().map_err(|e| field_err("robot", e.to_string()))?;
        let environment = Environment {
            obstacles: named(&file.environment.obstacles),
        };
        environment
            .validate()
            .map_err(|e| field_err("environment", e.to_string()))?;

        validate_settings(&file)?;
        if file.name.is_empty() {
            file.name = "scenario".into();
        }
        let hash = hash_resolved(&file);
        Ok(Self {
            resolved: file,
            dynamics,
            nominal,
            noise,
            lqr,
            robot,
            environment,
            hash,
        })
    }

    pub fn horizon(&self) -> usize {
        self.nominal.horizon()
    }

    pub fn dt(&self) -> f64 {
        self.dynamics.dt()
    }
}

fn named(entries: &[ShapeEntry]) -> Vec<NamedShape> {
    entries
        .iter()
        .map(|e| NamedShape {
            name: e.name.clone(),
            shape: e.shape.to_shape(),
        })
        .collect()
}

fn nominal_err(e: ControlError) -> ScenarioError {
    match e {
        ControlError::InconsistentNominal { max_residual, step } => ScenarioError::Nominal { max_residual, step },
        other => field_err("nominal", other.to_string()),
    }
}

fn build_dynamics(cfg: &DynamicsConfig) -> Result<Arc<dyn Dynamics>, ScenarioError> {
    let d: Arc<dyn Dynamics> = match cfg {
        DynamicsConfig::Airplane { params } => {
            Arc::new(Airplane::new(*params).map_err(|e| field_err("dynamics", e.to_string()))?)
        }
        DynamicsConfig::Linear { a, b, dt, translation } => {
            let n = a.len();
            let am = matrix_from_rows("dynamics.a", a, n, n)?;
            let nu = b.first().map_or(0, Vec::len);
            let bm = matrix_from_rows("dynamics.b", b, n, nu)?;
            if translation.len() > 3 {
                return Err(field_err("dynamics.translation", "at most three coordinates"));
            }
            let mut coords = [None; 3];
            for (c, &i) in coords.iter_mut().zip(translation) {
                *c = Some(i);
            }
            Arc::new(LinearPlant::new(am, bm, *dt, coords).map_err(|e| field_err("dynamics", e.to_string()))?)
        }
        DynamicsConfig::DoubleIntegrator { dt } => {
            if !(*dt > 0.0) {
                return Err(field_err("dynamics.dt", "must be positive"));
            }
            Arc::new(LinearPlant::double_integrator(*dt))
        }
    };
    Ok(d)
}

fn nominal_controls(cfg: &NominalConfig, nu: usize) -> Result<Vec<DVector<f64>>, ScenarioError> {
    let controls: Vec<Vec<f64>> = match (&cfg.controls, &cfg.segments) {
        (Some(c), None) => c.clone(),
        (None, Some(segs)) => segs
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.control.clone(), s.steps))
            .collect(),
        _ => {
            return Err(field_err(
                "nominal",
                "exactly one of `controls` or `segments` must be given",
            ))
        }
    };
    controls
        .iter()
        .enumerate()
        .map(|(t, u)| {
            if u.len() != nu {
                Err(field_err(
                    "nominal.controls",
                    format!("control {t} has {} entries, expected {nu}", u.len()),
                ))
            } else {
                Ok(DVector::from_column_slice(u))
            }
        })
        .collect()
}

fn validate_settings(file: &ScenarioFile) -> Result<(), ScenarioError> {
    let cp = &file.closepoint;
    if !(cp.gamma > 0.0 && cp.gamma < 1.0) {
        return Err(field_err("closepoint.gamma", "must lie in (0, 1)"));
    }
    if !(cp.eps_distance > 0.0) || !(cp.eps_step > 0.0) {
        return Err(field_err("closepoint", "tolerances must be positive"));
    }
    if !(cp.kappa > 0.0) {
        return Err(field_err("closepoint.kappa", "must be positive"));
    }
    let mx = &file.mixture;
    if mx.components < 1 {
        return Err(field_err("mixture.components", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&mx.defensive_floor) {
        return Err(field_err("mixture.defensive_floor", "must lie in [0, 1)"));
    }
    if !(mx.nominal_weight > 0.0 && mx.nominal_weight <= 1.0) {
        return Err(field_err("mixture.nominal_weight", "must lie in (0, 1]"));
    }
    let est = &file.estimator;
    if est.m == 0 || est.k == 0 || est.l == 0 {
        return Err(field_err("estimator", "m, k and l must be at least 1"));
    }
    if !(est.c > 0.0) {
        return Err(field_err("estimator.c", "must be positive"));
    }
    if !est.margin.is_finite() || est.margin < 0.0 {
        return Err(field_err("estimator.margin", "must be finite and non-negative"));
    }
    Ok(())
}

fn hash_resolved(file: &ScenarioFile) -> String {
    let canonical = serde_json::to_vec(file).expect("scenario serializes");
    hex::encode(Sha256::digest(&canonical))
}
