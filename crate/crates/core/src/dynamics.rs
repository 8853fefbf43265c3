//! Robot dynamics: the fixed-wing airplane model, a linear test plant, and
//! finite-difference linearization of any discrete step map.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("state left the model domain: {0}")]
    Singular(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

/// Rigid-body configuration in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Linear translation, shortest-arc rotation interpolation.
    pub fn interpolate(&self, other: &Pose, lambda: f64) -> Pose {
        let translation = self.translation.lerp(&other.translation, lambda);
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, lambda, 1e-12)
            .unwrap_or(self.rotation);
        Pose {
            translation,
            rotation,
        }
    }
}

/// Discrete-time robot model `x_t = f(x_{t-1}, u_{t-1})` with full-state
/// observation `h(x) = x`.
pub trait Dynamics: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dt(&self) -> f64;

    /// One zero-order-hold step. `out` has length `state_dim`.
    fn step(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DynamicsError>;

    fn configuration(&self, x: &[f64]) -> Pose;

    fn observation_dim(&self) -> usize {
        self.state_dim()
    }

    /// Observation model. The default is full-state observation.
    fn observe(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn observation_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim(), self.state_dim())
    }

    /// Exact `(A, B)` for models that are linear; `None` means finite
    /// differencing is used.
    fn exact_jacobians(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// Convenience wrapper returning an owned vector.
pub fn step_vec(
    dynamics: &dyn Dynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    if x.len() != dynamics.state_dim() {
        return Err(DynamicsError::Dimension {
            expected: dynamics.state_dim(),
            got: x.len(),
        });
    }
    if u.len() != dynamics.control_dim() {
        return Err(DynamicsError::Dimension {
            expected: dynamics.control_dim(),
            got: u.len(),
        });
    }
    let mut out = DVector::zeros(x.len());
    dynamics.step(x.as_slice(), u.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

/// Central finite-difference Jacobians `(∂f/∂x, ∂f/∂u)` of the discrete step
/// map, with per-coordinate step `1e-6 · max(1, |coordinate|)`. Linear models
/// return their matrices directly.
pub fn jacobians(
    dynamics: &dyn Dynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    if let Some(ab) = dynamics.exact_jacobians() {
        return Ok(ab);
    }
    jacobians_with_step(dynamics, x, u, 1e-6)
}

pub fn jacobians_with_step(
    dynamics: &dyn Dynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rel_step: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
    let nx = dynamics.state_dim();
    let nu = dynamics.control_dim();
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    let mut plus = DVector::zeros(nx);
    let mut minus = DVector::zeros(nx);

    let mut xp = x.clone();
    for i in 0..nx {
        let h = rel_step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        dynamics.step(xp.as_slice(), u.as_slice(), plus.as_mut_slice())?;
        xp[i] = x[i] - h;
        dynamics.step(xp.as_slice(), u.as_slice(), minus.as_mut_slice())?;
        xp[i] = x[i];
        a.set_column(i, &((&plus - &minus) / (2.0 * h)));
    }
    let mut up = u.clone();
    for j in 0..nu {
        let h = rel_step * u[j].abs().max(1.0);
        up[j] = u[j] + h;
        dynamics.step(x.as_slice(), up.as_slice(), plus.as_mut_slice())?;
        up[j] = u[j] - h;
        dynamics.step(x.as_slice(), up.as_slice(), minus.as_mut_slice())?;
        up[j] = u[j];
        b.set_column(j, &((&plus - &minus) / (2.0 * h)));
    }
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// Fixed-wing airplane
// ---------------------------------------------------------------------------

/// Constants of the flat-plate airplane model. Omitted fields take the
/// defaults; note that the default `alpha0` is the trim angle for the
/// default constants at 10 m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirplaneParams {
    /// Gravity, m/s².
    pub g: f64,
    /// Air density, kg/m³.
    pub rho: f64,
    /// Wing area, m².
    pub wing_area: f64,
    /// Mass, kg.
    pub mass: f64,
    /// Zero-lift drag coefficient.
    pub cd0: f64,
    /// Induced drag factor.
    pub induced_drag: f64,
    /// Angle of attack at straight and level flight, rad.
    pub alpha0: f64,
    /// Integration step, s.
    pub dt: f64,
}

impl Default for AirplaneParams {
    fn default() -> Self {
        let mut p = Self {
            g: 9.81,
            rho: 1.225,
            wing_area: 0.3,
            mass: 1.0,
            cd0: 0.03,
            induced_drag: 0.05,
            alpha0: 0.0,
            dt: 0.129,
        };
        p.alpha0 = p.trim_alpha(10.0);
        p
    }
}

impl AirplaneParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("g", self.g),
            ("rho", self.rho),
            ("wing_area", self.wing_area),
            ("mass", self.mass),
            ("cd0", self.cd0),
            ("induced_drag", self.induced_drag),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::InvalidParameter {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if !self.alpha0.is_finite() {
            return Err(DynamicsError::InvalidParameter {
                name: "alpha0",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }

    pub fn lift(&self, v: f64, alpha: f64) -> f64 {
        std::f64::consts::PI * self.rho * self.wing_area * v * v * alpha
    }

    pub fn drag(&self, v: f64, alpha: f64) -> f64 {
        let pi = std::f64::consts::PI;
        self.rho * self.wing_area * v * v * (self.cd0 + 4.0 * pi * pi * self.induced_drag * alpha * alpha)
    }

    /// Angle of attack for which lift balances weight in level flight at `v`.
    pub fn trim_alpha(&self, v: f64) -> f64 {
        self.mass * self.g / (std::f64::consts::PI * self.rho * self.wing_area * v * v)
    }

    /// Longitudinal acceleration cancelling drag in level flight at `v`.
    pub fn trim_thrust(&self, v: f64) -> f64 {
        self.drag(v, self.trim_alpha(v)) / self.mass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirplaneState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Airspeed, m/s.
    pub v: f64,
    /// Course angle.
    pub psi: f64,
    /// Flight path angle.
    pub gamma: f64,
    /// Roll.
    pub phi: f64,
    /// Angle of attack.
    pub alpha: f64,
}

impl AirplaneState {
    pub fn to_array(&self) -> [f64; 8] {
        [self.x, self.y, self.z, self.v, self.psi, self.gamma, self.phi, self.alpha]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            x: s[0],
            y: s[1],
            z: s[2],
            v: s[3],
            psi: s[4],
            gamma: s[5],
            phi: s[6],
            alpha: s[7],
        }
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.to_array())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirplaneControl {
    /// Longitudinal acceleration, m/s².
    pub u_a: f64,
    /// Roll rate, rad/s.
    pub u_phidot: f64,
    /// Pitch rate, rad/s.
    pub u_alphadot: f64,
}

impl AirplaneControl {
    pub fn to_array(&self) -> [f64; 3] {
        [self.u_a, self.u_phidot, self.u_alphadot]
    }

    pub fn from_slice(u: &[f64]) -> Self {
        Self {
            u_a: u[0],
            u_phidot: u[1],
            u_alphadot: u[2],
        }
    }
}

fn check_domain(v: f64, gamma: f64) -> Result<(), DynamicsError> {
    if !(v > 0.0) {
        return Err(DynamicsError::Singular("airspeed must be positive"));
    }
    if !(gamma.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(DynamicsError::Singular("flight path angle must be within ±π/2"));
    }
    Ok(())
}

fn derivative(p: &AirplaneParams, s: &[f64; 8], u: &[f64; 3]) -> Result<[f64; 8], DynamicsError> {
    let [_, _, _, v, psi, gamma, phi, alpha] = *s;
    check_domain(v, gamma)?;
    let lift = p.lift(v, alpha);
    let drag = p.drag(v, alpha);
    let (sg, cg) = gamma.sin_cos();
    let (sp, cp) = psi.sin_cos();
    let (sphi, cphi) = phi.sin_cos();
    Ok([
        v * cp * cg,
        v * sp * cg,
        v * sg,
        u[0] - drag / p.mass - p.g * sg,
        -lift * sphi / (p.mass * v * cg),
        lift * cphi / (p.mass * v) - p.g * cg / v,
        u[1],
        u[2],
    ])
}

/// Continuous-time state derivative `ẋ = F(x, u)`.
pub fn continuous_derivative(
    p: &AirplaneParams,
    s: &AirplaneState,
    u: &AirplaneControl,
) -> Result<[f64; 8], DynamicsError> {
    derivative(p, &s.to_array(), &u.to_array())
}

fn rk4(p: &AirplaneParams, s: &[f64; 8], u: &[f64; 3], dt: f64) -> Result<[f64; 8], DynamicsError> {
    let axpy = |a: &[f64; 8], k: &[f64; 8], h: f64| {
        let mut r = [0.0; 8];
        for i in 0..8 {
            r[i] = a[i] + h * k[i];
        }
        r
    };
    let k1 = derivative(p, s, u)?;
    let k2 = derivative(p, &axpy(s, &k1, 0.5 * dt), u)?;
    let k3 = derivative(p, &axpy(s, &k2, 0.5 * dt), u)?;
    let k4 = derivative(p, &axpy(s, &k3, dt), u)?;
    let mut out = [0.0; 8];
    for i in 0..8 {
        out[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

/// Classical RK4 over one step `dt` with the control held constant.
pub fn step_nominal(
    p: &AirplaneParams,
    s: &AirplaneState,
    u: &AirplaneControl,
) -> Result<AirplaneState, DynamicsError> {
    let out = rk4(p, &s.to_array(), &u.to_array(), p.dt)?;
    Ok(AirplaneState::from_slice(&out))
}

/// Pose of the airframe: Euler ZYX with yaw ψ, pitch `θ = α0 − α − γ`, roll φ.
pub fn configuration(p: &AirplaneParams, s: &AirplaneState) -> Pose {
    let theta = p.alpha0 - s.alpha - s.gamma;
    Pose {
        translation: Vector3::new(s.x, s.y, s.z),
        rotation: UnitQuaternion::from_euler_angles(s.phi, theta, s.psi),
    }
}

/// Identity observation; the airplane is fully observed.
pub fn observe(s: &AirplaneState) -> DVector<f64> {
    s.to_dvector()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Airplane {
    pub params: AirplaneParams,
}

impl Airplane {
    pub fn new(params: AirplaneParams) -> Result<Self, DynamicsError> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl Dynamics for Airplane {
    fn state_dim(&self) -> usize {
        8
    }

    fn control_dim(&self) -> usize {
        3
    }

    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn step(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        let s: &[f64; 8] = x.try_into().map_err(|_| DynamicsError::Dimension {
            expected: 8,
            got: x.len(),
        })?;
        let u: &[f64; 3] = u.try_into().map_err(|_| DynamicsError::Dimension {
            expected: 3,
            got: u.len(),
        })?;
        let next = rk4(&self.params, s, u, self.params.dt)?;
        out.copy_from_slice(&next);
        Ok(())
    }

    fn configuration(&self, x: &[f64]) -> Pose {
        configuration(&self.params, &AirplaneState::from_slice(x))
    }
}

// ---------------------------------------------------------------------------
// Linear test plant
// ---------------------------------------------------------------------------

/// `x_t = A x_{t-1} + B u_{t-1}`; selected state coordinates give the
/// translation, rotation is always identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    dt: f64,
    translation_coords: [Option<usize>; 3],
}

impl LinearPlant {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        dt: f64,
        translation_coords: [Option<usize>; 3],
    ) -> Result<Self, DynamicsError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(DynamicsError::Dimension {
                expected: n,
                got: a.ncols(),
            });
        }
        if b.nrows() != n {
            return Err(DynamicsError::Dimension {
                expected: n,
                got: b.nrows(),
            });
        }
        if let Some(bad) = translation_coords.iter().flatten().find(|&&c| c >= n) {
            return Err(DynamicsError::InvalidParameter {
                name: "translation_coords",
                reason: format!("coordinate {bad} out of range for state dimension {n}"),
            });
        }
        if !(dt > 0.0) {
            return Err(DynamicsError::InvalidParameter {
                name: "dt",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            a,
            b,
            dt,
            translation_coords,
        })
    }

    /// State `(position, velocity)` along world x, control = acceleration.
    pub fn double_integrator(dt: f64) -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
        Self::new(a, b, dt, [Some(0), None, None]).expect("valid double integrator")
    }

    /// Pure translation in `dim` (1..=3) world axes, control = velocity.
    pub fn translation(dim: usize, dt: f64) -> Self {
        assert!((1..=3).contains(&dim));
        let mut coords = [None; 3];
        for (i, c) in coords.iter_mut().enumerate().take(dim) {
            *c = Some(i);
        }
        Self::new(
            DMatrix::identity(dim, dim),
            DMatrix::identity(dim, dim) * dt,
            dt,
            coords,
        )
        .expect("valid translation plant")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl Dynamics for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        let n = self.state_dim();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            *o = acc;
        }
        Ok(())
    }

    fn configuration(&self, x: &[f64]) -> Pose {
        let mut t = Vector3::zeros();
        for (k, c) in self.translation_coords.iter().enumerate() {
            if let Some(i) = c {
                t[k] = x[*i];
            }
        }
        Pose::from_translation(t)
    }

    fn exact_jacobians(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

/// Rotation matrix `R_z(ψ) R_y(θ) R_x(φ)` built explicitly; used by tests as
/// an independent route to the quaternion conversion.
pub fn euler_zyx_matrix(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trim_state(p: &AirplaneParams, v: f64) -> (AirplaneState, AirplaneControl) {
        let s = AirplaneState {
            x: 0.0,
            y: 0.0,
            z: 10.0,
            v,
            psi: 0.3,
            gamma: 0.0,
            phi: 0.0,
            alpha: p.trim_alpha(v),
        };
        let u = AirplaneControl {
            u_a: p.trim_thrust(v),
            u_phidot: 0.0,
            u_alphadot: 0.0,
        };
        (s, u)
    }

    #[test]
    fn level_trim_has_zero_rates() {
        let p = AirplaneParams::default();
        let (s, u) = trim_state(&p, 10.0);
        // lift balances weight by construction of the trim
        assert_abs_diff_eq!(p.lift(s.v, s.alpha), p.mass * p.g, epsilon = 1e-12);
        let d = continuous_derivative(&p, &s, &u).unwrap();
        assert_abs_diff_eq!(d[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[3], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[4], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[5], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn default_alpha0_is_level_trim_at_ten() {
        let p = AirplaneParams::default();
        // m g / (π ρ A v²) = 9.81 / (π · 1.225 · 0.3 · 100)
        assert_abs_diff_eq!(p.alpha0, 9.81 / (std::f64::consts::PI * 1.225 * 0.3 * 100.0), epsilon = 1e-15);
    }

    #[test]
    fn zero_roll_gives_zero_course_rate() {
        let p = AirplaneParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = AirplaneState {
                x: rng.random_range(-5.0..5.0),
                y: rng.random_range(-5.0..5.0),
                z: rng.random_range(-5.0..5.0),
                v: rng.random_range(5.0..20.0),
                psi: rng.random_range(-3.0..3.0),
                gamma: rng.random_range(-0.5..0.5),
                phi: 0.0,
                alpha: rng.random_range(-0.2..0.2),
            };
            let u = AirplaneControl { u_a: 1.0, u_phidot: 0.2, u_alphadot: -0.1 };
            assert_eq!(continuous_derivative(&p, &s, &u).unwrap()[4], 0.0);
        }
    }

    #[test]
    fn aerodynamic_forces_scale_with_v_squared() {
        let p = AirplaneParams::default();
        assert_abs_diff_eq!(p.lift(20.0, 0.1), 4.0 * p.lift(10.0, 0.1), epsilon = 1e-12);
        assert_abs_diff_eq!(p.drag(20.0, 0.1), 4.0 * p.drag(10.0, 0.1), epsilon = 1e-12);
        // through the derivative: v̇ drag term with γ = 0, u_a = 0
        let mut s = AirplaneState { x: 0.0, y: 0.0, z: 0.0, v: 10.0, psi: 0.0, gamma: 0.0, phi: 0.0, alpha: 0.1 };
        let u = AirplaneControl { u_a: 0.0, u_phidot: 0.0, u_alphadot: 0.0 };
        let d1 = continuous_derivative(&p, &s, &u).unwrap()[3];
        s.v = 20.0;
        let d2 = continuous_derivative(&p, &s, &u).unwrap()[3];
        assert_abs_diff_eq!(d2, 4.0 * d1, epsilon = 1e-12);
    }

    #[test]
    fn singular_states_are_rejected() {
        let p = AirplaneParams::default();
        let u = AirplaneControl { u_a: 0.0, u_phidot: 0.0, u_alphadot: 0.0 };
        let mut s = AirplaneState { x: 0.0, y: 0.0, z: 0.0, v: 0.0, psi: 0.0, gamma: 0.0, phi: 0.0, alpha: 0.0 };
        assert!(matches!(continuous_derivative(&p, &s, &u), Err(DynamicsError::Singular(_))));
        s.v = 10.0;
        s.gamma = std::f64::consts::FRAC_PI_2;
        assert!(matches!(step_nominal(&p, &s, &u), Err(DynamicsError::Singular(_))));
    }

    #[test]
    fn trim_step_advances_position_only() {
        let p = AirplaneParams::default();
        let (s, u) = trim_state(&p, 10.0);
        let n = step_nominal(&p, &s, &u).unwrap();
        assert_abs_diff_eq!(n.x - s.x, 10.0 * p.dt * s.psi.cos(), epsilon = 1e-9);
        assert_abs_diff_eq!(n.y - s.y, 10.0 * p.dt * s.psi.sin(), epsilon = 1e-9);
        assert_abs_diff_eq!(n.z, s.z, epsilon = 1e-9);
        for (a, b) in n.to_array()[3..].iter().zip(&s.to_array()[3..]) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn rk4_error_ratio_is_sixteen() {
        // Global error over a fixed horizon scales as dt^4: halving dt → 16x.
        let base = AirplaneParams::default();
        let s0 = AirplaneState { x: 0.0, y: 0.0, z: 0.0, v: 11.0, psi: 0.1, gamma: 0.05, phi: 0.4, alpha: 0.12 };
        let u = [0.5, 0.3, -0.05];
        let horizon = 0.8;
        let integrate = |dt: f64| {
            let n = (horizon / dt).round() as usize;
            let mut s = s0.to_array();
            for _ in 0..n {
                s = rk4(&base, &s, &u, dt).unwrap();
            }
            s
        };
        let reference = integrate(0.8 / 1024.0);
        let err = |dt: f64| {
            let s = integrate(dt);
            s.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        let r1 = e1 / e2;
        let r2 = e2 / e3;
        assert!((12.0..20.0).contains(&r1), "ratio {r1}");
        assert!((12.0..20.0).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn unpowered_wings_level_flight_descends() {
        let p = AirplaneParams::default();
        let s = AirplaneState { x: 0.0, y: 0.0, z: 50.0, v: 10.0, psi: 0.0, gamma: 0.0, phi: 0.0, alpha: 0.0 };
        let u = AirplaneControl { u_a: 0.0, u_phidot: 0.0, u_alphadot: 0.0 };
        let d = continuous_derivative(&p, &s, &u).unwrap();
        assert!(d[5] < 0.0);
        let n = step_nominal(&p, &s, &u).unwrap();
        assert!(n.gamma < 0.0);
    }

    fn random_near_trim(rng: &mut ChaCha8Rng, p: &AirplaneParams) -> (DVector<f64>, DVector<f64>) {
        let (s, u) = trim_state(p, 10.0);
        let mut x = s.to_dvector();
        let scales = [1.0, 1.0, 1.0, 1.0, 0.3, 0.1, 0.3, 0.05];
        for i in 0..8 {
            x[i] += scales[i] * rng.random_range(-1.0..1.0);
        }
        let mut uu = DVector::from_row_slice(&u.to_array());
        for j in 0..3 {
            uu[j] += 0.2 * rng.random_range(-1.0..1.0);
        }
        (x, uu)
    }

    #[test]
    fn jacobians_match_directional_differences() {
        let plane = Airplane::new(AirplaneParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (x, u) = random_near_trim(&mut rng, &plane.params);
            let (a, b) = jacobians(&plane, &x, &u).unwrap();
            // independent directional difference, step 1e-5
            let dir_x = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let dir_u = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let h = 1e-5;
            let fp = step_vec(&plane, &(&x + &dir_x * h), &(&u + &dir_u * h)).unwrap();
            let fm = step_vec(&plane, &(&x - &dir_x * h), &(&u - &dir_u * h)).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let lin = &a * &dir_x + &b * &dir_u;
            let rel = (&fd - &lin).norm() / fd.norm().max(1e-12);
            assert!(rel < 1e-3, "relative error {rel}");
        }
    }

    #[test]
    fn jacobian_tends_to_identity_as_dt_vanishes() {
        let mut p = AirplaneParams::default();
        p.dt = 1e-6;
        let plane = Airplane::new(p).unwrap();
        let (s, u) = trim_state(&p, 10.0);
        let (a, _) = jacobians(&plane, &s.to_dvector(), &DVector::from_row_slice(&u.to_array())).unwrap();
        assert!((a - DMatrix::identity(8, 8)).norm() < 1e-4);
    }

    #[test]
    fn roll_rate_column_integrates_directly() {
        let mut p = AirplaneParams::default();
        p.dt = 0.01;
        let plane = Airplane::new(p).unwrap();
        let (s, u) = trim_state(&p, 10.0);
        let (_, b) = jacobians(&plane, &s.to_dvector(), &DVector::from_row_slice(&u.to_array())).unwrap();
        let col = b.column(1);
        assert_abs_diff_eq!(col[6], 0.01, epsilon = 1e-8);
        assert_eq!(col.iamax(), 6);
    }

    #[test]
    fn level_pose_is_identity() {
        let p = AirplaneParams::default();
        let s = AirplaneState { x: 1.0, y: 2.0, z: 3.0, v: 10.0, psi: 0.0, gamma: 0.0, phi: 0.0, alpha: p.alpha0 };
        let pose = configuration(&p, &s);
        assert!(pose.rotation.angle() < 1e-12);
        assert_eq!(pose.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn yaw_quarter_turn_maps_x_to_y() {
        let p = AirplaneParams::default();
        let s = AirplaneState {
            x: 0.0, y: 0.0, z: 0.0, v: 10.0,
            psi: std::f64::consts::FRAC_PI_2, gamma: 0.0, phi: 0.0, alpha: p.alpha0,
        };
        let r = configuration(&p, &s).rotation * Vector3::x();
        assert!((r - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn rotation_matches_explicit_euler_product() {
        let p = AirplaneParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s = AirplaneState {
                x: 0.0, y: 0.0, z: 0.0, v: 10.0,
                psi: rng.random_range(-3.0..3.0),
                gamma: rng.random_range(-1.0..1.0),
                phi: rng.random_range(-1.5..1.5),
                alpha: rng.random_range(-0.3..0.3),
            };
            let pose = configuration(&p, &s);
            let theta = p.alpha0 - s.alpha - s.gamma;
            let m = euler_zyx_matrix(s.psi, theta, s.phi);
            let got = pose.rotation.to_rotation_matrix().into_inner();
            assert!((got - m).amax() < 1e-9);
            assert_abs_diff_eq!(pose.rotation.as_ref().norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn observation_is_identity() {
        let p = AirplaneParams::default();
        let (s, _) = trim_state(&p, 10.0);
        assert_eq!(observe(&s), s.to_dvector());
        let plane = Airplane::new(p).unwrap();
        assert_eq!(plane.observation_dim(), 8);
        assert_eq!(plane.observation_jacobian(&s.to_array()), DMatrix::identity(8, 8));
    }

    #[test]
    fn linear_plant_jacobian_is_exact() {
        let plant = LinearPlant::double_integrator(0.1);
        let (a, b) = jacobians(&plant, &DVector::from_vec(vec![0.3, -1.0]), &DVector::from_vec(vec![0.2])).unwrap();
        assert!((a - plant.a()).amax() < 1e-9);
        assert!((b - plant.b()).amax() < 1e-9);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn configuration_quaternion_stays_unit(
            psi in -6.0f64..6.0, gamma in -1.4f64..1.4, phi in -3.0f64..3.0, alpha in -0.5f64..0.5
        ) {
            let p = AirplaneParams::default();
            let s = AirplaneState { x: 0.0, y: 0.0, z: 0.0, v: 10.0, psi, gamma, phi, alpha };
            let q = configuration(&p, &s).rotation;
            proptest::prop_assert!((q.as_ref().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn step_is_deterministic(seed in 0u64..1000) {
            let plane = Airplane::new(AirplaneParams::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, u) = random_near_trim(&mut rng, &plane.params);
            let a = step_vec(&plane, &x, &u).unwrap();
            let b = step_vec(&plane, &x, &u).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
