//! Likely collision modes: for each (time step, robot part, obstacle) tuple,
//! a zero-distance state of locally minimal Mahalanobis distance from the
//! nominal.
//!
//! Each search runs a Newton phase onto the contact surface followed by a
//! projected descent on the squared Mahalanobis distance `m`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Dynamics;
use crate::exec::Execution;
use crate::geometry::{distance_gradient, signed_distance, Environment, GeometryError, RobotBody};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosePointError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("distance gradient is degenerate (gᵀΣg = {0:.3e})")]
    DegenerateGradient(f64),
    #[error("Newton projection did not converge in {iterations} iterations (|d| = {distance:.3e})")]
    NoConvergence { iterations: usize, distance: f64 },
    #[error("covariance is not positive definite")]
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloseSettings {
    /// Surface tolerance on |d| (m).
    pub eps_distance: f64,
    /// Step-norm tolerance ending the Newton and refinement loops.
    pub eps_step: f64,
    pub newton_max_iterations: usize,
    pub refine_max_iterations: usize,
    /// Linesearch parameter.
    pub gamma: f64,
    /// Pairs whose nominal clearance exceeds `kappa · sqrt(λ_max(Σ_t))` are
    /// skipped.
    pub kappa: f64,
    pub dedup_distance: f64,
    /// Keep refining with a halved step after a non-improving projection
    /// instead of stopping.
    pub continue_on_stall: bool,
}

impl Default for CloseSettings {
    fn default() -> Self {
        Self {
            eps_distance: 1e-6,
            eps_step: 1e-8,
            newton_max_iterations: 100,
            refine_max_iterations: 200,
            gamma: 0.5,
            kappa: 6.0,
            dedup_distance: 1e-3,
            continue_on_stall: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionMode {
    pub t: usize,
    pub part: usize,
    pub obstacle: usize,
    pub x_obs: DVector<f64>,
    /// Mahalanobis distance of `x_obs` under `Σ_t`.
    pub maha: f64,
    /// Mahalanobis distance after the Newton phase, before refinement.
    pub maha_newton: f64,
    pub newton_iterations: usize,
    pub refine_iterations: usize,
    /// At least one trial projection failed during refinement; `x_obs` is
    /// the best point found.
    pub refine_warning: bool,
}

/// Distance function `d_ij(q(x))` for one part/obstacle pair.
#[derive(Debug, Clone, Copy)]
pub struct PairGeometry<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub robot: &'a RobotBody,
    pub env: &'a Environment,
    pub part: usize,
    pub obstacle: usize,
}

impl PairGeometry<'_> {
    pub fn distance(&self, x: &[f64]) -> Result<f64, GeometryError> {
        let pose = self.dynamics.configuration(x);
        Ok(signed_distance(self.robot.part(self.part)?, &pose, self.env.obstacle(self.obstacle)?)?.distance)
    }

    fn gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>, bool), GeometryError> {
        let g = distance_gradient(self.dynamics, self.robot, self.part, self.env, self.obstacle, x)?;
        Ok((g.distance, g.gradient, g.degenerate))
    }
}

/// Squared Mahalanobis distance `(x - c)ᵀ Σ⁻¹ (x - c)`.
fn maha_sq(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
    let e = x - c;
    e.dot(&chol.solve(&e))
}

/// Newton iteration `x ← x − d Σ∇d / (∇dᵀ Σ ∇d)` onto `d = 0`. Returns the
/// surface point and the iteration count.
pub fn newton_to_surface(
    pair: &PairGeometry<'_>,
    x_start: &DVector<f64>,
    sigma: &DMatrix<f64>,
    settings: &CloseSettings,
) -> Result<(DVector<f64>, usize), ClosePointError> {
    let mut x = x_start.clone();
    let mut last_d = f64::NAN;
    for k in 1..=settings.newton_max_iterations {
        let (d, g, _) = pair.gradient(x.as_slice())?;
        last_d = d;
        let sg = sigma * &g;
        let curv = g.dot(&sg);
        if curv < 1e-14 {
            return Err(ClosePointError::DegenerateGradient(curv));
        }
        let step = sg * (d / curv);
        x -= &step;
        if step.norm() < settings.eps_step {
            let d_new = pair.distance(x.as_slice())?;
            if d_new.abs() < settings.eps_distance {
                return Ok((x, k));
            }
            last_d = d_new;
        }
    }
    Err(ClosePointError::NoConvergence {
        iterations: settings.newton_max_iterations,
        distance: last_d,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub x: DVector<f64>,
    /// Squared Mahalanobis distance of `x`.
    pub m: f64,
    pub iterations: usize,
    pub warning: bool,
}

/// Projected descent on `m(x) = (x − x*)ᵀ Σ⁻¹ (x − x*)` along the contact
/// surface. The search direction is `Σ⁻¹(x − x*)` with its component along
/// `∇d` removed; each trial point is projected back with
/// [`newton_to_surface`]. Never returns a point worse than `x_surface`.
pub fn refine_mahalanobis(
    pair: &PairGeometry<'_>,
    x_surface: &DVector<f64>,
    x_star: &DVector<f64>,
    sigma: &DMatrix<f64>,
    settings: &CloseSettings,
) -> Result<Refined, ClosePointError> {
    let chol = sigma.clone().cholesky().ok_or(ClosePointError::Covariance)?;
    let mut x = x_surface.clone();
    let mut m = maha_sq(&chol, &x, x_star);
    let mut best = Refined {
        x: x.clone(),
        m,
        iterations: 0,
        warning: false,
    };
    let mut alpha_start = 1.0;
    let mut stalls = 0;
    for k in 1..=settings.refine_max_iterations {
        best.iterations = k;
        let (_, g, _) = match pair.gradient(x.as_slice()) {
            Ok(v) => v,
            Err(_) => {
                best.warning = true;
                break;
            }
        };
        let e = chol.solve(&(&x - x_star));
        let gg = g.norm_squared();
        if gg <= 0.0 {
            break;
        }
        let s = &e - &g * (g.dot(&e) / gg);
        let se = s.dot(&e);
        if se <= 1e-300 || m <= 0.0 {
            break;
        }
        let mut alpha = alpha_start;
        let mut trial = x.clone();
        let mut m_trial = f64::INFINITY;
        loop {
            let stepped = &x - &s * (alpha * settings.gamma * m / se);
            let projected = newton_to_surface(pair, &stepped, sigma, settings);
            alpha *= 0.5;
            match projected {
                Ok((p, _)) => {
                    m_trial = maha_sq(&chol, &p, x_star);
                    let small = (&p - &x).norm() < settings.eps_step;
                    trial = p;
                    if m_trial <= m || small {
                        break;
                    }
                }
                // a failed projection counts as a rejected trial
                Err(_) => best.warning = true,
            }
            if alpha < 1e-30 {
                break;
            }
        }
        let moved = (&trial - &x).norm();
        let improved = m_trial < m;
        if improved {
            x = trial;
            m = m_trial;
            if m < best.m {
                best.x = x.clone();
                best.m = m;
            }
            alpha_start = 1.0;
            stalls = 0;
        }
        if !improved || moved < settings.eps_step {
            if settings.continue_on_stall && stalls < 10 && alpha > 1e-30 {
                stalls += 1;
                alpha_start = alpha;
                continue;
            }
            break;
        }
    }
    Ok(best)
}

/// Close-point search over every (t, part, obstacle) tuple that survives the
/// clearance prefilter. Returns up to `top` modes sorted by Mahalanobis
/// distance, ties broken by (t, part, obstacle).
pub fn close_points(
    dynamics: &dyn Dynamics,
    robot: &RobotBody,
    env: &Environment,
    nominal_states: &[DVector<f64>],
    sigmas: &[DMatrix<f64>],
    top: usize,
    settings: &CloseSettings,
    exec: Execution,
) -> Vec<CollisionMode> {
    let n_parts = robot.parts.len();
    let n_obs = env.obstacles.len();
    let horizon = nominal_states.len().min(sigmas.len());
    let reach: Vec<f64> = sigmas
        .iter()
        .map(|s| s.clone().symmetric_eigen().eigenvalues.max().max(0.0).sqrt() * settings.kappa)
        .collect();
    let tuples: Vec<(usize, usize, usize)> = (0..horizon)
        .flat_map(|t| (0..n_parts).flat_map(move |i| (0..n_obs).map(move |j| (t, i, j))))
        .collect();
    let found = exec.map(tuples.len(), |k| {
        let (t, i, j) = tuples[k];
        let pair = PairGeometry {
            dynamics,
            robot,
            env,
            part: i,
            obstacle: j,
        };
        let clearance = match pair.distance(nominal_states[t].as_slice()) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("clearance query failed at (t={t}, part={i}, obstacle={j}): {e}");
                return None;
            }
        };
        if clearance > reach[t] {
            return None;
        }
        match search_pair(&pair, &nominal_states[t], &sigmas[t], settings) {
            Ok(mut mode) => {
                mode.t = t;
                Some(mode)
            }
            Err(e) => {
                log::debug!("close-point search skipped (t={t}, part={i}, obstacle={j}): {e}");
                None
            }
        }
    });
    let mut modes: Vec<CollisionMode> = found.into_iter().flatten().collect();
    rank_modes(&mut modes);
    let mut kept: Vec<CollisionMode> = Vec::new();
    for m in modes {
        if kept
            .iter()
            .all(|k| k.x_obs.len() != m.x_obs.len() || (&k.x_obs - &m.x_obs).norm() >= settings.dedup_distance)
        {
            kept.push(m);
        }
        if kept.len() == top {
            break;
        }
    }
    kept
}

pub fn rank_modes(modes: &mut [CollisionMode]) {
    modes.sort_by(|a, b| {
        a.maha
            .total_cmp(&b.maha)
            .then(a.t.cmp(&b.t))
            .then(a.part.cmp(&b.part))
            .then(a.obstacle.cmp(&b.obstacle))
    });
}

/// Newton phase plus refinement for one pair at one time step.
pub fn search_pair(
    pair: &PairGeometry<'_>,
    x_star: &DVector<f64>,
    sigma: &DMatrix<f64>,
    settings: &CloseSettings,
) -> Result<CollisionMode, ClosePointError> {
    let chol = sigma.clone().cholesky().ok_or(ClosePointError::Covariance)?;
    let (x_surface, newton_iterations) = match newton_to_surface(pair, x_star, sigma, settings) {
        Err(ClosePointError::DegenerateGradient(_)) => {
            // exact-touch contact: retry from a slightly perturbed seed
            let jitter = DVector::from_fn(x_star.len(), |k, _| if k % 2 == 0 { 1e-6 } else { -1e-6 });
            newton_to_surface(pair, &(x_star + jitter), sigma, settings)?
        }
        other => other?,
    };
    let m_newton = maha_sq(&chol, &x_surface, x_star);
    let refined = refine_mahalanobis(pair, &x_surface, x_star, sigma, settings)?;
    Ok(CollisionMode {
        t: 0,
        part: pair.part,
        obstacle: pair.obstacle,
        x_obs: refined.x,
        maha: refined.m.max(0.0).sqrt(),
        maha_newton: m_newton.max(0.0).sqrt(),
        newton_iterations,
        refine_iterations: refined.iterations,
        refine_warning: refined.warning,
    })
}
