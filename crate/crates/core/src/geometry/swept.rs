//! Swept collision checking of a rollout by conservative advancement.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{signed_distance_with, ConvexShape, Environment, RobotBody};
use crate::control::RolloutResult;
use crate::dynamics::{Dynamics, Pose};

/// Smallest interpolation advance, in meters of clearance.
const D_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    /// Step whose incoming interval (or, for 0, the initial pose) collided.
    pub t: usize,
    pub part: usize,
    pub obstacle: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweptResult {
    pub collided: bool,
    pub first_hit: Option<Hit>,
    /// Smallest distance evaluated during the sweep (`INFINITY` if every
    /// pair was pruned).
    pub min_distance: f64,
    pub domain_exit: bool,
}

/// Robot and environment with the per-part and per-obstacle bounds the sweep
/// needs, precomputed once.
#[derive(Debug, Clone)]
pub struct CollisionChecker {
    robot: RobotBody,
    env: Environment,
    part_reach: Vec<f64>,
    obstacle_spheres: Vec<(Vector3<f64>, f64)>,
}

impl CollisionChecker {
    pub fn new(robot: RobotBody, env: Environment) -> Self {
        let part_reach = robot.parts.iter().map(|p| p.shape.circumradius()).collect();
        let obstacle_spheres = env.obstacles.iter().map(|o| o.shape.bounding_sphere()).collect();
        Self {
            robot,
            env,
            part_reach,
            obstacle_spheres,
        }
    }

    pub fn robot(&self) -> &RobotBody {
        &self.robot
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    /// Collision check of the continuously interpolated rollout. Contacts
    /// count when the distance drops to `margin` or below.
    pub fn sweep(&self, dynamics: &dyn Dynamics, rollout: &RolloutResult, margin: f64) -> SweptResult {
        let mut out = SweptResult {
            collided: rollout.domain_exit,
            first_hit: None,
            min_distance: f64::INFINITY,
            domain_exit: rollout.domain_exit,
        };
        if rollout.is_empty() {
            return out;
        }
        let mut buf = Vec::with_capacity(16);
        let mut prev = dynamics.configuration(rollout.state(0));
        for (i, part) in self.robot.parts.iter().enumerate() {
            for (j, obs) in self.env.obstacles.iter().enumerate() {
                if self.pruned(i, j, &prev, &prev, margin) {
                    continue;
                }
                let d = distance(&part.shape, &prev, &obs.shape, &mut buf);
                out.min_distance = out.min_distance.min(d);
                if d <= margin {
                    out.collided = true;
                    out.first_hit = Some(Hit { t: 0, part: i, obstacle: j });
                    return out;
                }
            }
        }
        for t in 1..rollout.len() {
            let next = dynamics.configuration(rollout.state(t));
            for (i, part) in self.robot.parts.iter().enumerate() {
                for (j, obs) in self.env.obstacles.iter().enumerate() {
                    if self.pruned(i, j, &prev, &next, margin) {
                        continue;
                    }
                    let hit = advance(&part.shape, self.part_reach[i], &obs.shape, &prev, &next, margin, &mut buf);
                    out.min_distance = out.min_distance.min(hit.1);
                    if hit.0 {
                        out.collided = true;
                        out.first_hit = Some(Hit { t, part: i, obstacle: j });
                        return out;
                    }
                }
            }
            prev = next;
        }
        out
    }

    /// Bounding-sphere test of the part's reach along the translation
    /// segment against the obstacle's bounding sphere.
    fn pruned(&self, i: usize, j: usize, p0: &Pose, p1: &Pose, margin: f64) -> bool {
        let (c, r) = self.obstacle_spheres[j];
        let a = p0.translation;
        let ab = p1.translation - a;
        let len2 = ab.norm_squared();
        let s = if len2 > 0.0 { ((c - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let gap = (a + ab * s - c).norm();
        gap > self.part_reach[i] + r + margin
    }
}

fn distance(part: &ConvexShape, pose: &Pose, obs: &ConvexShape, buf: &mut Vec<Vector3<f64>>) -> f64 {
    match signed_distance_with(part, pose, obs, buf) {
        Ok(r) => r.distance,
        Err(e) => {
            // unreachable for validated shapes; count as contact
            log::warn!("distance query failed during sweep: {e}");
            f64::NEG_INFINITY
        }
    }
}

/// Conservative advancement over one interval. Returns (hit, min distance).
fn advance(
    part: &ConvexShape,
    reach: f64,
    obs: &ConvexShape,
    p0: &Pose,
    p1: &Pose,
    margin: f64,
    buf: &mut Vec<Vector3<f64>>,
) -> (bool, f64) {
    let speed = (p1.translation - p0.translation).norm() + p0.rotation.angle_to(&p1.rotation) * reach;
    let mut lambda: f64 = 0.0;
    let mut min_d = f64::INFINITY;
    loop {
        let pose = p0.interpolate(p1, lambda);
        let d = distance(part, &pose, obs, buf);
        min_d = min_d.min(d);
        if d <= margin {
            return (true, min_d);
        }
        if lambda >= 1.0 || speed <= 1e-15 {
            return (false, min_d);
        }
        lambda = (lambda + (d - margin).max(D_FLOOR) / speed).min(1.0);
    }
}

/// Swept check of `rollout` for `robot` against `env`.
pub fn swept_collides(
    dynamics: &dyn Dynamics,
    robot: &RobotBody,
    env: &Environment,
    rollout: &RolloutResult,
    margin: f64,
) -> SweptResult {
    CollisionChecker::new(robot.clone(), env.clone()).sweep(dynamics, rollout, margin)
}
