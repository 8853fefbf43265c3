//! End-to-end runs: gains, close points, mixture construction and
//! estimation, with per-stage timings and a serializable result record.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closepoint::{close_points, CollisionMode};
use crate::control::Tracker;
use crate::estimator::{ais_estimate, is_fixed, naive_mc, AisSettings, Estimate, EstimatorError, Method, TrajectoryModel};
use crate::exec::Execution;
use crate::geometry::CollisionChecker;
use crate::isopt::{build_mixture, MixtureGeometry, MixtureSpec};
use crate::scenario::{Scenario, ScenarioFile};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("controller synthesis: {0}")]
    Control(String),
    #[error("estimation")]
    Estimate(#[from] EstimatorError),
}

/// Scenario plus the controller and collision checker derived from it.
pub struct Problem {
    pub scenario: Scenario,
    pub tracker: Tracker,
    pub checker: CollisionChecker,
}

impl Problem {
    pub fn new(scenario: Scenario) -> Result<Self, PipelineError> {
        let tracker = Tracker::new(
            scenario.dynamics.clone(),
            scenario.nominal.clone(),
            &scenario.noise,
            &scenario.lqr,
        )
        .map_err(|e| PipelineError::Control(e.to_string()))?;
        let checker = CollisionChecker::new(scenario.robot.clone(), scenario.environment.clone());
        Ok(Self {
            scenario,
            tracker,
            checker,
        })
    }

    /// Up to `top` collision modes over all time steps, parts and obstacles.
    pub fn close_points(&self, top: usize, exec: Execution) -> Vec<CollisionMode> {
        close_points(
            self.tracker.dynamics.as_ref(),
            &self.scenario.robot,
            &self.scenario.environment,
            &self.tracker.nominal.states,
            &self.tracker.system.sigma,
            top,
            &self.scenario.resolved.closepoint,
            exec,
        )
    }

    pub fn mixture(&self, modes: &[CollisionMode], exec: Execution) -> MixtureSpec {
        let cfg = &self.scenario.resolved;
        build_mixture(
            modes,
            &self.tracker,
            &self.scenario.noise,
            MixtureGeometry {
                robot: &self.scenario.robot,
                env: &self.scenario.environment,
            },
            &cfg.mixture,
            &cfg.isopt,
            exec,
        )
    }

    /// Close points and mixture for the configured number of components.
    pub fn setup(&self, exec: Execution) -> Setup {
        let d = self.scenario.resolved.mixture.components;
        let t0 = Instant::now();
        let modes = self.close_points(d.saturating_sub(1), exec);
        let closepoint_time = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let mixture = self.mixture(&modes, exec);
        let isopt_time = t1.elapsed().as_secs_f64();
        Setup {
            modes,
            mixture,
            closepoint_time,
            isopt_time,
        }
    }

    pub fn model<'a>(&'a self, mixture: &'a MixtureSpec) -> TrajectoryModel<'a> {
        TrajectoryModel {
            tracker: &self.tracker,
            checker: &self.checker,
            mixture,
            margin: self.scenario.resolved.estimator.margin,
        }
    }

    /// Runs `method` with the scenario's estimator settings and `seed`.
    pub fn estimate(&self, method: Method, setup: Option<&Setup>, seed: u64, exec: Execution) -> Result<Estimate, PipelineError> {
        let est = &self.scenario.resolved.estimator;
        let nominal_only = MixtureSpec::pure_nominal(self.scenario.noise.clone());
        let mixture = match (method, setup) {
            (Method::Naive, _) | (_, None) => &nominal_only,
            (_, Some(s)) => &s.mixture,
        };
        let model = self.model(mixture);
        let result = match method {
            Method::Naive => naive_mc(&model, est.m, seed, exec)?,
            Method::Is => is_fixed(&model, &mixture.weights, est.m, seed, exec)?,
            Method::Ais => {
                let settings = AisSettings {
                    k: est.k,
                    l: est.l,
                    c: est.c,
                    defensive_floor: mixture.defensive_floor,
                    gradient_scale: est.gradient_scale,
                };
                ais_estimate(&model, &mixture.weights, &settings, seed, exec)?
            }
        };
        Ok(result)
    }
}

pub struct Setup {
    pub modes: Vec<CollisionMode>,
    pub mixture: MixtureSpec,
    pub closepoint_time: f64,
    pub isopt_time: f64,
}

/// One mixture term in a result: its collision mode (none for the nominal),
/// initial and final weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub index: usize,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mode: Option<CollisionMode>,
    pub halfspace_weight: Option<f64>,
    pub initial_objective: Option<f64>,
    pub objective: Option<f64>,
    pub initial_weight: f64,
    pub final_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub closepoint: f64,
    pub isopt: f64,
    pub sampling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub tool_version: String,
    pub scenario_name: String,
    pub scenario_hash: String,
    pub estimate: Estimate,
    pub components: Vec<ComponentRecord>,
    pub close_points: Vec<CollisionMode>,
    pub timings: Timings,
    /// Fully resolved scenario, defaults included.
    pub config: ScenarioFile,
}

impl ResultRecord {
    /// Copy with all wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.timings = Timings::default();
        r.estimate.wall_time = 0.0;
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// `t=82 wing/left_pillar` style label for a collision mode.
pub fn mode_label(problem: &Problem, mode: &CollisionMode) -> String {
    format!(
        "t={} {}/{}",
        mode.t, problem.scenario.robot.parts[mode.part].name, problem.scenario.environment.obstacles[mode.obstacle].name
    )
}

fn component_records(problem: &Problem, setup: Option<&Setup>, estimate: &Estimate) -> Vec<ComponentRecord> {
    let Some(setup) = setup.filter(|_| estimate.method != Method::Naive) else {
        return vec![ComponentRecord {
            index: 1,
            label: "nominal".into(),
            mode: None,
            halfspace_weight: None,
            initial_objective: None,
            objective: None,
            initial_weight: 1.0,
            final_weight: *estimate.final_weights.last().unwrap_or(&1.0),
        }];
    };
    let mix = &setup.mixture;
    let mut out: Vec<ComponentRecord> = mix
        .components
        .iter()
        .enumerate()
        .map(|(d, c)| ComponentRecord {
            index: d + 1,
            label: mode_label(problem, &c.mode),
            mode: Some(c.mode.clone()),
            halfspace_weight: Some(c.halfspace_weight),
            initial_objective: Some(c.initial_objective),
            objective: Some(c.objective_value),
            initial_weight: mix.weights[d],
            final_weight: estimate.final_weights[d],
        })
        .collect();
    let last = mix.components.len();
    out.push(ComponentRecord {
        index: last + 1,
        label: "nominal".into(),
        mode: None,
        halfspace_weight: None,
        initial_objective: None,
        objective: None,
        initial_weight: mix.weights[last],
        final_weight: estimate.final_weights[last],
    });
    out
}

/// Full pipeline for one method with the scenario's seed.
pub fn run_estimate(problem: &Problem, method: Method, exec: Execution) -> Result<ResultRecord, PipelineError> {
    let setup = (method != Method::Naive).then(|| problem.setup(exec));
    let seed = problem.scenario.resolved.estimator.seed;
    let t = Instant::now();
    let estimate = problem.estimate(method, setup.as_ref(), seed, exec)?;
    let sampling = t.elapsed().as_secs_f64();
    Ok(ResultRecord {
        tool_version: TOOL_VERSION.into(),
        scenario_name: problem.scenario.resolved.name.clone(),
        scenario_hash: problem.scenario.hash.clone(),
        components: component_records(problem, setup.as_ref(), &estimate),
        close_points: setup.as_ref().map(|s| s.modes.clone()).unwrap_or_default(),
        timings: Timings {
            closepoint: setup.as_ref().map_or(0.0, |s| s.closepoint_time),
            isopt: setup.as_ref().map_or(0.0, |s| s.isopt_time),
            sampling,
        },
        estimate,
        config: problem.scenario.resolved.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FREE: &str = r#"
name = "free"

[dynamics]
model = "double_integrator"
dt = 0.1

[nominal]
initial_state = [0.0, 1.0]
segments = [{ steps = 10, control = [0.0] }]

[noise]
p0 = [0.01, 0.01]
vu = [0.01]
vx = [0.001, 0.001]
w = [0.01, 0.01]

[robot]
parts = [{ name = "ball", type = "sphere", center = [0.0, 0.0, 0.0], radius = 0.1 }]

[estimator]
m = 200
k = 10
l = 5
"#;

    #[test]
    fn collision_free_scenario_gives_zero() {
        let p = Problem::new(Scenario::from_toml(FREE).unwrap()).unwrap();
        for method in [Method::Naive, Method::Is, Method::Ais] {
            let r = run_estimate(&p, method, Execution::Sequential).unwrap();
            assert_eq!(r.estimate.p_hat, 0.0, "{method}");
            assert!(r.close_points.is_empty());
        }
    }

    #[test]
    fn record_round_trips() {
        let text = FREE.replace("[estimator]", "[[environment.obstacles]]\nname = \"wall\"\ntype = \"box\"\nmin = [1.2, -1.0, -1.0]\nmax = [1.5, 1.0, 1.0]\n\n[estimator]");
        let p = Problem::new(Scenario::from_toml(&text).unwrap()).unwrap();
        let r = run_estimate(&p, Method::Ais, Execution::Parallel).unwrap();
        assert!(!r.close_points.is_empty());
        let back = ResultRecord::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let again = run_estimate(&p, Method::Ais, Execution::Sequential).unwrap();
        assert_eq!(again.without_timings().to_json(), r.without_timings().to_json());
    }
}
