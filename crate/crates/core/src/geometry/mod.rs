//! Convex rigid-body geometry: shapes, signed distance between a posed robot
//! part and a world-frame obstacle, distance gradients with respect to state,
//! and swept collision checking along a rollout.

mod gjk;
mod swept;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Dynamics, Pose};

pub use swept::{swept_collides, CollisionChecker, Hit, SweptResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{algorithm} did not converge within {iterations} iterations")]
    IterationCap { algorithm: &'static str, iterations: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("index {index} out of range ({len} entries)")]
    Index { index: usize, len: usize },
}

/// A convex shape. Spheres are stored as a single core point plus radius;
/// polytopes as the convex hull of their vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ConvexShape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Polytope { vertices: Vec<Vector3<f64>> },
}

impl ConvexShape {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        ConvexShape::Sphere { center, radius }
    }

    /// Axis-aligned box with the given corners.
    pub fn cuboid(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for &x in &[min.x, max.x] {
            for &y in &[min.y, max.y] {
                for &z in &[min.z, max.z] {
                    vertices.push(Vector3::new(x, y, z));
                }
            }
        }
        ConvexShape::Polytope { vertices }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match self {
            ConvexShape::Sphere { center, radius } => {
                if !(radius.is_finite() && *radius > 0.0) || !center.iter().all(|c| c.is_finite()) {
                    return Err(GeometryError::InvalidShape(format!(
                        "sphere radius must be positive and finite, got {radius}"
                    )));
                }
            }
            ConvexShape::Polytope { vertices } => {
                if vertices.len() < 4 {
                    return Err(GeometryError::InvalidShape(format!(
                        "polytope needs at least 4 vertices, got {}",
                        vertices.len()
                    )));
                }
                if !vertices.iter().flatten().all(|c| c.is_finite()) {
                    return Err(GeometryError::InvalidShape("non-finite polytope vertex".into()));
                }
                let v0 = vertices[0];
                let scale = vertices.iter().map(|v| (v - v0).norm()).fold(0.0, f64::max);
                let mut m = nalgebra::DMatrix::zeros(3, vertices.len() - 1);
                for (k, v) in vertices[1..].iter().enumerate() {
                    m.set_column(k, &(v - v0));
                }
                let sv = m.singular_values();
                if scale == 0.0 || sv.min() <= 1e-9 * scale {
                    return Err(GeometryError::InvalidShape(
                        "polytope vertices are not affinely independent".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn core(&self) -> &[Vector3<f64>] {
        match self {
            ConvexShape::Sphere { center, .. } => std::slice::from_ref(center),
            ConvexShape::Polytope { vertices } => vertices,
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            ConvexShape::Sphere { radius, .. } => *radius,
            ConvexShape::Polytope { .. } => 0.0,
        }
    }

    /// Bounding sphere `(center, radius)` in the shape's own frame.
    pub fn bounding_sphere(&self) -> (Vector3<f64>, f64) {
        let core = self.core();
        let mut lo = core[0];
        let mut hi = core[0];
        for p in core {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let c = (lo + hi) * 0.5;
        let r = core.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        (c, r + self.radius())
    }

    /// Largest distance of any point of the shape from the frame origin.
    pub fn circumradius(&self) -> f64 {
        self.core().iter().map(|p| p.norm()).fold(0.0, f64::max) + self.radius()
    }

    /// Support value `max_{p ∈ shape} n·p` (world frame when `pose` given).
    pub fn support_value(&self, pose: &Pose, n: &Vector3<f64>) -> f64 {
        self.core()
            .iter()
            .map(|p| pose.transform_point(p).dot(n))
            .fold(f64::NEG_INFINITY, f64::max)
            + self.radius() * n.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedShape {
    pub name: String,
    #[serde(flatten)]
    pub shape: ConvexShape,
}

/// Robot parts, in the body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotBody {
    pub parts: Vec<NamedShape>,
}

/// Static obstacles, in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub obstacles: Vec<NamedShape>,
}

impl RobotBody {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.parts.is_empty() {
            return Err(GeometryError::InvalidShape("robot has no parts".into()));
        }
        for p in &self.parts {
            p.shape
                .validate()
                .map_err(|e| GeometryError::InvalidShape(format!("robot part '{}': {e}", p.name)))?;
        }
        Ok(())
    }

    pub fn part(&self, i: usize) -> Result<&ConvexShape, GeometryError> {
        self.parts.get(i).map(|p| &p.shape).ok_or(GeometryError::Index {
            index: i,
            len: self.parts.len(),
        })
    }
}

impl Environment {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for o in &self.obstacles {
            o.shape
                .validate()
                .map_err(|e| GeometryError::InvalidShape(format!("obstacle '{}': {e}", o.name)))?;
        }
        Ok(())
    }

    pub fn obstacle(&self, j: usize) -> Result<&ConvexShape, GeometryError> {
        self.obstacles.get(j).map(|o| &o.shape).ok_or(GeometryError::Index {
            index: j,
            len: self.obstacles.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceResult {
    /// Separation (positive) or minus the penetration depth.
    pub distance: f64,
    /// Closest (or deepest) point on the part, world frame.
    pub point_part: Vector3<f64>,
    /// Closest (or deepest) point on the obstacle, world frame.
    pub point_obstacle: Vector3<f64>,
}

/// Signed distance between `part` placed at `pose` and a world-frame
/// `obstacle`.
pub fn signed_distance(
    part: &ConvexShape,
    pose: &Pose,
    obstacle: &ConvexShape,
) -> Result<DistanceResult, GeometryError> {
    let mut buf = Vec::new();
    signed_distance_with(part, pose, obstacle, &mut buf)
}

pub(crate) fn signed_distance_with(
    part: &ConvexShape,
    pose: &Pose,
    obstacle: &ConvexShape,
    buf: &mut Vec<Vector3<f64>>,
) -> Result<DistanceResult, GeometryError> {
    buf.clear();
    buf.extend(part.core().iter().map(|p| pose.transform_point(p)));
    core_distance(buf, part.radius(), obstacle.core(), obstacle.radius())
}

fn core_distance(
    a: &[Vector3<f64>],
    ra: f64,
    b: &[Vector3<f64>],
    rb: f64,
) -> Result<DistanceResult, GeometryError> {
    if a.len() == 1 && b.len() == 1 {
        let diff = b[0] - a[0];
        let len = diff.norm();
        let n = if len > 0.0 { diff / len } else { Vector3::x() };
        return Ok(DistanceResult {
            distance: len - ra - rb,
            point_part: a[0] + n * ra,
            point_obstacle: b[0] - n * rb,
        });
    }
    let q = match gjk::gjk(a, b)? {
        gjk::Gjk::Separated(q) => q,
        gjk::Gjk::Overlapping(start) => gjk::epa(a, b, start)?,
    };
    Ok(DistanceResult {
        distance: q.distance - ra - rb,
        point_part: q.point_a + q.normal * ra,
        point_obstacle: q.point_b - q.normal * rb,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGradient {
    pub distance: f64,
    pub gradient: DVector<f64>,
    /// Set when the query sits on a contact whose one-sided derivatives
    /// disagree; the gradient is then only a subgradient estimate.
    pub degenerate: bool,
}

/// Distance between part `i` and obstacle `j` at state `x`.
pub fn state_distance(
    dynamics: &dyn Dynamics,
    robot: &RobotBody,
    i: usize,
    env: &Environment,
    j: usize,
    x: &[f64],
) -> Result<f64, GeometryError> {
    let pose = dynamics.configuration(x);
    Ok(signed_distance(robot.part(i)?, &pose, env.obstacle(j)?)?.distance)
}

/// Central finite-difference gradient of `d_ij(q(x))` with per-coordinate
/// step `1e-5 · max(1, |x_k|)`.
pub fn distance_gradient(
    dynamics: &dyn Dynamics,
    robot: &RobotBody,
    i: usize,
    env: &Environment,
    j: usize,
    x: &[f64],
) -> Result<DistanceGradient, GeometryError> {
    distance_gradient_with_step(dynamics, robot, i, env, j, x, 1e-5)
}

pub fn distance_gradient_with_step(
    dynamics: &dyn Dynamics,
    robot: &RobotBody,
    i: usize,
    env: &Environment,
    j: usize,
    x: &[f64],
    rel_step: f64,
) -> Result<DistanceGradient, GeometryError> {
    let part = robot.part(i)?;
    let obstacle = env.obstacle(j)?;
    let mut buf = Vec::new();
    let mut eval = |x: &[f64]| -> Result<f64, GeometryError> {
        let pose = dynamics.configuration(x);
        Ok(signed_distance_with(part, &pose, obstacle, &mut buf)?.distance)
    };
    let d0 = eval(x)?;
    let n = x.len();
    let mut grad = DVector::zeros(n);
    let mut degenerate = false;
    let mut xp = x.to_vec();
    for k in 0..n {
        let h = rel_step * x[k].abs().max(1.0);
        xp[k] = x[k] + h;
        let dp = eval(&xp)?;
        xp[k] = x[k] - h;
        let dm = eval(&xp)?;
        xp[k] = x[k];
        let central = (dp - dm) / (2.0 * h);
        grad[k] = central;
        if d0.abs() < 1e-9 {
            let fwd = (dp - d0) / h;
            let bwd = (d0 - dm) / h;
            if (fwd - bwd).abs() > 1e-3 * central.abs().max(1.0) {
                degenerate = true;
            }
        }
    }
    Ok(DistanceGradient {
        distance: d0,
        gradient: grad,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearPlant;
    use approx::assert_abs_diff_eq;
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cube() -> ConvexShape {
        ConvexShape::cuboid(Vector3::new(-0.5, -0.5, -0.5), Vector3::new(0.5, 0.5, 0.5))
    }

    fn random_box(rng: &mut ChaCha8Rng) -> ConvexShape {
        let h = Vector3::new(
            rng.random_range(0.1..0.8),
            rng.random_range(0.1..0.8),
            rng.random_range(0.1..0.8),
        );
        ConvexShape::cuboid(-h, h)
    }

    fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> Pose {
        Pose {
            translation: Vector3::new(
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ),
            rotation: UnitQuaternion::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            ),
        }
    }

    fn posed(shape: &ConvexShape, pose: &Pose) -> ConvexShape {
        match shape {
            ConvexShape::Sphere { center, radius } => ConvexShape::sphere(pose.transform_point(center), *radius),
            ConvexShape::Polytope { vertices } => ConvexShape::Polytope {
                vertices: vertices.iter().map(|v| pose.transform_point(v)).collect(),
            },
        }
    }

    /// Signed distance as `-min_n h_{A-B}(n)` over a dense set of directions,
    /// refined by local random search.
    fn support_oracle(a: &ConvexShape, pa: &Pose, b: &ConvexShape) -> f64 {
        let id = Pose::identity();
        let h = |n: &Vector3<f64>| a.support_value(pa, n) + b.support_value(&id, &-n);
        let mut best = (f64::INFINITY, Vector3::x());
        let k = 40_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..k {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / k as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            let n = Vector3::new(r * th.cos(), r * th.sin(), z);
            let v = h(&n);
            if v < best.0 {
                best = (v, n);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut step = 0.05;
        for _ in 0..60 {
            for _ in 0..200 {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let n = (best.1 + p * step).normalize();
                let v = h(&n);
                if v < best.0 {
                    best = (v, n);
                }
            }
            step *= 0.8;
        }
        -best.0
    }

    /// Minimum distance between dense surface samples of two disjoint boxes
    /// given as cuboids (half-extents) at poses.
    fn surface_oracle(ha: Vector3<f64>, pa: &Pose, hb: Vector3<f64>, pb: &Pose, n: usize) -> f64 {
        let sample = |h: Vector3<f64>, pose: &Pose| {
            let mut pts = Vec::new();
            for axis in 0..3 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for s in [-1.0, 1.0] {
                    for i in 0..=n {
                        for j in 0..=n {
                            let mut p = Vector3::zeros();
                            p[axis] = s * h[axis];
                            p[u] = h[u] * (2.0 * i as f64 / n as f64 - 1.0);
                            p[v] = h[v] * (2.0 * j as f64 / n as f64 - 1.0);
                            pts.push(pose.transform_point(&p));
                        }
                    }
                }
            }
            pts
        };
        let a = sample(ha, pa);
        let b = sample(hb, pb);
        let mut best = f64::INFINITY;
        for p in &a {
            for q in &b {
                best = best.min((p - q).norm());
            }
        }
        best
    }

    #[test]
    fn sphere_closed_forms() {
        let a = ConvexShape::sphere(Vector3::zeros(), 1.0);
        let b = ConvexShape::sphere(Vector3::new(3.0, 0.0, 0.0), 1.0);
        let d = signed_distance(&a, &Pose::identity(), &b).unwrap();
        assert_abs_diff_eq!(d.distance, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.point_part.x, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.point_obstacle.x, 2.0, epsilon = 1e-9);
        let c = ConvexShape::sphere(Vector3::new(1.0, 0.0, 0.0), 1.0);
        assert_abs_diff_eq!(signed_distance(&a, &Pose::identity(), &c).unwrap().distance, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn sphere_against_box_faces() {
        let cube = unit_cube();
        let s = ConvexShape::sphere(Vector3::zeros(), 0.25);
        let pose = Pose::from_translation(Vector3::new(2.0, 0.0, 0.0));
        assert_abs_diff_eq!(signed_distance(&s, &pose, &cube).unwrap().distance, 1.25, epsilon = 1e-9);
        let pose = Pose::from_translation(Vector3::new(0.3, 0.0, 0.0));
        // center inside: depth to nearest face 0.2 plus radius
        assert_abs_diff_eq!(signed_distance(&s, &pose, &cube).unwrap().distance, -0.45, epsilon = 1e-9);
        let pose = Pose::from_translation(Vector3::new(1.5, 1.5, 0.0));
        assert_abs_diff_eq!(
            signed_distance(&s, &pose, &cube).unwrap().distance,
            2f64.sqrt() - 0.25,
            epsilon = 1e-9
        );
    }

    #[test]
    fn box_box_axis_aligned() {
        let cube = unit_cube();
        let pose = Pose::from_translation(Vector3::new(1.7, 0.2, -0.1));
        assert_abs_diff_eq!(signed_distance(&cube, &pose, &cube).unwrap().distance, 0.7, epsilon = 1e-9);
        let pose = Pose::from_translation(Vector3::new(0.8, 0.1, 0.0));
        assert_abs_diff_eq!(signed_distance(&cube, &pose, &cube).unwrap().distance, -0.2, epsilon = 1e-9);
        let d = signed_distance(&cube, &Pose::identity(), &cube).unwrap().distance;
        assert_abs_diff_eq!(d, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn random_boxes_match_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..12 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let pa = random_pose(&mut rng, 1.2);
            let pb = random_pose(&mut rng, 0.3);
            let b_world = posed(&b, &pb);
            let d = signed_distance(&a, &pa, &b_world).unwrap().distance;
            let oracle = support_oracle(&a, &pa, &b_world);
            assert!((d - oracle).abs() < 1e-3, "case {case}: gjk {d} vs oracle {oracle}");
            if oracle > 0.05 {
                let half = |s: &ConvexShape| match s {
                    ConvexShape::Polytope { vertices } => vertices[7],
                    _ => unreachable!(),
                };
                let surf = surface_oracle(half(&a), &pa, half(&b), &pb, 60);
                assert!(surf >= d - 1e-9 && surf - d < 2e-2, "case {case}: {d} vs surface {surf}");
            }
        }
    }

    #[test]
    fn penetration_depth_matches_support_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut overlapping = 0;
        for case in 0..20 {
            let a = if case % 4 == 0 {
                ConvexShape::sphere(Vector3::new(0.1, 0.0, 0.0), rng.random_range(0.1..0.5))
            } else {
                random_box(&mut rng)
            };
            let b_world = posed(&random_box(&mut rng), &random_pose(&mut rng, 0.3));
            let pa = random_pose(&mut rng, 0.4);
            let d = signed_distance(&a, &pa, &b_world).unwrap().distance;
            let oracle = support_oracle(&a, &pa, &b_world);
            overlapping += usize::from(oracle < 0.0);
            assert!((d - oracle).abs() < 1e-3, "case {case}: epa {d} vs oracle {oracle}");
        }
        assert!(overlapping >= 10);
    }

    #[test]
    fn witnesses_realize_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = random_box(&mut rng);
            let b = posed(&random_box(&mut rng), &random_pose(&mut rng, 0.2));
            let pa = Pose::from_translation(Vector3::new(4.0, 0.0, 0.0));
            let pa = Pose { rotation: random_pose(&mut rng, 0.1).rotation, ..pa };
            let r = signed_distance(&a, &pa, &b).unwrap();
            assert!(r.distance > 0.0);
            assert_abs_diff_eq!((r.point_part - r.point_obstacle).norm(), r.distance, epsilon = 1e-8);
        }
    }

    #[test]
    fn translation_and_yaw_gradients() {
        let plant = LinearPlant::translation(3, 0.1);
        let robot = RobotBody {
            parts: vec![NamedShape {
                name: "ball".into(),
                shape: ConvexShape::sphere(Vector3::zeros(), 1.0),
            }],
        };
        let env = Environment {
            obstacles: vec![NamedShape {
                name: "rock".into(),
                shape: ConvexShape::sphere(Vector3::new(4.0, 3.0, 0.0), 1.0),
            }],
        };
        let g = distance_gradient(&plant, &robot, 0, &env, 0, &[0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g.distance, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.gradient[0], -0.8, epsilon = 1e-8);
        assert_abs_diff_eq!(g.gradient[1], -0.6, epsilon = 1e-8);
        assert_abs_diff_eq!(g.gradient[2], 0.0, epsilon = 1e-8);
        assert!(!g.degenerate);
    }

    #[test]
    fn symmetric_part_ignores_roll_about_its_axis() {
        use crate::dynamics::{Airplane, AirplaneParams};
        let plane = Airplane::new(AirplaneParams::default()).unwrap();
        let robot = RobotBody {
            parts: vec![NamedShape {
                name: "nose".into(),
                shape: ConvexShape::sphere(Vector3::new(0.5, 0.0, 0.0), 0.1),
            }],
        };
        let env = Environment {
            obstacles: vec![NamedShape {
                name: "post".into(),
                shape: ConvexShape::cuboid(Vector3::new(3.0, -1.0, -1.0), Vector3::new(3.5, 1.0, 1.0)),
            }],
        };
        let x = [0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, plane.params.alpha0];
        let g = distance_gradient(&plane, &robot, 0, &env, 0, &x).unwrap();
        // roll (index 6) spins the nose sphere about its own center on the body x-axis
        assert!(g.gradient[6].abs() < 1e-6, "{}", g.gradient[6]);
        assert_abs_diff_eq!(g.gradient[0], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn gradient_step_halving_agrees() {
        use crate::dynamics::{Airplane, AirplaneParams};
        let plane = Airplane::new(AirplaneParams::default()).unwrap();
        let robot = RobotBody {
            parts: vec![NamedShape {
                name: "wing".into(),
                shape: ConvexShape::cuboid(Vector3::new(-0.1, -0.75, -0.01), Vector3::new(0.1, 0.75, 0.01)),
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 100 {
            let obstacle = posed(&random_box(&mut rng), &random_pose(&mut rng, 0.5));
            let env = Environment {
                obstacles: vec![NamedShape { name: "o".into(), shape: obstacle }],
            };
            let x = [
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                10.0,
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.0..0.3),
            ];
            let g1 = distance_gradient_with_step(&plane, &robot, 0, &env, 0, &x, 1e-4).unwrap();
            if g1.distance.abs() < 0.05 {
                continue;
            }
            let g2 = distance_gradient_with_step(&plane, &robot, 0, &env, 0, &x, 1e-5).unwrap();
            let rel = (&g1.gradient - &g2.gradient).norm() / g2.gradient.norm().max(1e-12);
            if rel >= 1e-3 {
                // the closest feature pair switched inside the stencil; the
                // distance is only piecewise smooth there
                let g3 = distance_gradient_with_step(&plane, &robot, 0, &env, 0, &x, 1e-6).unwrap();
                let rel2 = (&g2.gradient - &g3.gradient).norm() / g3.gradient.norm().max(1e-12);
                assert!(rel2 < 1e-3, "rel {rel} then {rel2} at {x:?}");
            }
            checked += 1;
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(ConvexShape::sphere(Vector3::zeros(), 0.0).validate().is_err());
        let flat = ConvexShape::Polytope {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
            ],
        };
        assert!(flat.validate().is_err());
        assert!(unit_cube().validate().is_ok());
    }

    #[test]
    fn shapes_roundtrip_through_serde() {
        let env = Environment {
            obstacles: vec![
                NamedShape { name: "a".into(), shape: unit_cube() },
                NamedShape { name: "b".into(), shape: ConvexShape::sphere(Vector3::new(1.0, 2.0, 3.0), 0.5) },
            ],
        };
        let text = serde_json::to_string(&env).unwrap();
        assert!(text.contains("\"type\":\"sphere\""));
        let back: Environment = serde_json::from_str(&text).unwrap();
        assert_eq!(back, env);
    }

    fn shape_strategy() -> impl Strategy<Value = ConvexShape> {
        prop_oneof![
            (0.1f64..1.0).prop_map(|r| ConvexShape::sphere(Vector3::zeros(), r)),
            (0.1f64..0.8, 0.1f64..0.8, 0.1f64..0.8)
                .prop_map(|(a, b, c)| ConvexShape::cuboid(Vector3::new(-a, -b, -c), Vector3::new(a, b, c))),
        ]
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (
            -2.0f64..2.0,
            -2.0f64..2.0,
            -2.0f64..2.0,
            -3.0f64..3.0,
            -1.5f64..1.5,
            -3.0f64..3.0,
        )
            .prop_map(|(x, y, z, r, p, w)| Pose {
                translation: Vector3::new(x, y, z),
                rotation: UnitQuaternion::from_euler_angles(r, p, w),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn distance_is_symmetric(a in shape_strategy(), b in shape_strategy(), pa in pose_strategy(), pb in pose_strategy()) {
            let bw = posed(&b, &pb);
            let aw = posed(&a, &pa);
            let d1 = signed_distance(&a, &pa, &bw).unwrap().distance;
            let d2 = signed_distance(&b, &pb, &aw).unwrap().distance;
            prop_assert!((d1 - d2).abs() < 1e-9, "{} vs {}", d1, d2);
        }

        #[test]
        fn distance_is_translation_invariant(a in shape_strategy(), b in shape_strategy(), pa in pose_strategy(),
                                             pb in pose_strategy(), sx in -5.0f64..5.0, sy in -5.0f64..5.0) {
            let bw = posed(&b, &pb);
            let d1 = signed_distance(&a, &pa, &bw).unwrap().distance;
            let shift = Vector3::new(sx, sy, 0.5);
            let pa2 = Pose { translation: pa.translation + shift, ..pa };
            let pb2 = Pose { translation: pb.translation + shift, ..pb };
            let d2 = signed_distance(&a, &pa2, &posed(&b, &pb2)).unwrap().distance;
            prop_assert!((d1 - d2).abs() < 1e-9, "{} vs {}", d1, d2);
        }
    }
}
