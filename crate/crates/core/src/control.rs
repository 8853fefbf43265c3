//! LQG trajectory tracking: linearization about the nominal, finite-horizon
//! LQR and Kalman gains, the linearized closed-loop system used to design
//! importance-sampling components, and the exact nonlinear rollout.
//!
//! Index conventions: `A_t, B_t` (t = 1..T) map step `t-1` to `t` and are
//! stored at vector index `t-1`. The control applied at time `t` is
//! `u_t = u*_t + L_{t+1} x̂_t`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{jacobians, step_vec, Dynamics, DynamicsError};
use crate::gauss::{BlockKind, NoiseLayout, TrajectoryNoise, TrajectoryNoiseSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("nominal trajectory is inconsistent with the dynamics (max residual {max_residual:.3e} at step {step})")]
    InconsistentNominal { max_residual: f64, step: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix {0} is singular")]
    Singular(&'static str),
    #[error("time index {t} out of range 0..={horizon}")]
    TimeIndex { t: usize, horizon: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    /// Forward-integrates `controls` from `x0`.
    pub fn from_controls(
        dynamics: &dyn Dynamics,
        x0: DVector<f64>,
        controls: Vec<DVector<f64>>,
    ) -> Result<Self, ControlError> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0);
        for u in &controls {
            let next = step_vec(dynamics, states.last().unwrap(), u)?;
            states.push(next);
        }
        Ok(Self { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Checks `x*_t = f(x*_{t-1}, u*_{t-1})` coordinate-wise within `tol`.
    pub fn check_consistency(&self, dynamics: &dyn Dynamics, tol: f64) -> Result<(), ControlError> {
        if self.states.len() != self.controls.len() + 1 {
            return Err(ControlError::Shape(format!(
                "{} states for {} controls",
                self.states.len(),
                self.controls.len()
            )));
        }
        let mut worst = (0.0f64, 0usize);
        for t in 1..self.states.len() {
            let pred = step_vec(dynamics, &self.states[t - 1], &self.controls[t - 1])?;
            let r = (pred - &self.states[t]).amax();
            if r > worst.0 {
                worst = (r, t);
            }
        }
        if worst.0 > tol {
            return Err(ControlError::InconsistentNominal {
                max_residual: worst.0,
                step: worst.1,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedPlant {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
}

impl LinearizedPlant {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn meas_dim(&self) -> usize {
        self.h[0].nrows()
    }
}

pub fn linearize_trajectory(
    dynamics: &dyn Dynamics,
    nominal: &NominalTrajectory,
) -> Result<LinearizedPlant, ControlError> {
    let horizon = nominal.horizon();
    let mut a = Vec::with_capacity(horizon);
    let mut b = Vec::with_capacity(horizon);
    let mut h = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let (at, bt) = jacobians(dynamics, &nominal.states[t - 1], &nominal.controls[t - 1])?;
        a.push(at);
        b.push(bt);
        h.push(dynamics.observation_jacobian(nominal.states[t].as_slice()));
    }
    Ok(LinearizedPlant { a, b, h })
}

/// State, control and terminal penalties of the tracking LQR.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_final: DMatrix<f64>,
}

impl LqrWeights {
    pub fn identity(state_dim: usize, control_dim: usize) -> Self {
        Self {
            q: DMatrix::identity(state_dim, state_dim),
            r: DMatrix::identity(control_dim, control_dim),
            q_final: DMatrix::identity(state_dim, state_dim),
        }
    }
}

/// Backward Riccati recursion. Returns `L_1..L_T` with
/// `L_t = -(R + B_tᵀ P_t B_t)⁻¹ B_tᵀ P_t A_t`, `P_T = Q_final`.
pub fn lqr_gains(plant: &LinearizedPlant, weights: &LqrWeights) -> Result<Vec<DMatrix<f64>>, ControlError> {
    let horizon = plant.horizon();
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    let mut p = weights.q_final.clone();
    for t in (1..=horizon).rev() {
        let (a, b) = (&plant.a[t - 1], &plant.b[t - 1]);
        let btp = b.transpose() * &p;
        let s = &weights.r + &btp * b;
        let rhs = &btp * a;
        let l = -s
            .cholesky()
            .ok_or(ControlError::Singular("R + BᵀPB"))?
            .solve(&rhs);
        let next = &weights.q + a.transpose() * &p * (a + b * &l);
        p = (&next + next.transpose()) * 0.5;
        gains[t - 1] = l;
    }
    Ok(gains)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGains {
    /// `K_1..K_T`.
    pub gains: Vec<DMatrix<f64>>,
    /// Filter a-priori error covariances `Σ⁻_1..Σ⁻_T`.
    pub apriori: Vec<DMatrix<f64>>,
    /// Filter a-posteriori covariances `Σ⁺_0..Σ⁺_T`, with `Σ⁺_0 = P0`.
    pub aposteriori: Vec<DMatrix<f64>>,
}

/// Forward Kalman recursion for the linearized plant with the nominal noise
/// covariances.
pub fn kalman_gains(plant: &LinearizedPlant, noise: &TrajectoryNoiseSpec) -> Result<KalmanGains, ControlError> {
    let horizon = plant.horizon();
    check_noise_layout(plant, noise)?;
    let n = plant.state_dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut post = noise.block(0).cov().clone();
    let mut gains = Vec::with_capacity(horizon);
    let mut apriori = Vec::with_capacity(horizon);
    let mut aposteriori = vec![post.clone()];
    for t in 1..=horizon {
        let (a, b, h) = (&plant.a[t - 1], &plant.b[t - 1], &plant.h[t - 1]);
        let cb = noise.layout().control_block(t);
        let vu = noise.block(cb).cov();
        let vx = noise.block(cb + 1).cov();
        let w = noise.block(cb + 2).cov();
        let prior = a * &post * a.transpose() + b * vu * b.transpose() + vx;
        let prior = (&prior + prior.transpose()) * 0.5;
        let innov = h * &prior * h.transpose() + w;
        let innov_chol = innov.cholesky().ok_or(ControlError::Singular("innovation covariance"))?;
        // K = Σ⁻ Hᵀ S⁻¹  ⇔  S Kᵀ = H Σ⁻
        let k = innov_chol.solve(&(h * &prior)).transpose();
        let p = (&eye - &k * h) * &prior;
        post = (&p + p.transpose()) * 0.5;
        gains.push(k);
        apriori.push(prior);
        aposteriori.push(post.clone());
    }
    Ok(KalmanGains {
        gains,
        apriori,
        aposteriori,
    })
}

fn check_noise_layout(plant: &LinearizedPlant, noise: &TrajectoryNoiseSpec) -> Result<(), ControlError> {
    let l = noise.layout();
    if l.horizon != plant.horizon()
        || l.state_dim != plant.state_dim()
        || l.control_dim != plant.control_dim()
        || l.meas_dim != plant.meas_dim()
    {
        return Err(ControlError::Shape(format!(
            "noise layout {l:?} does not match plant (T={}, dx={}, du={}, dz={})",
            plant.horizon(),
            plant.state_dim(),
            plant.control_dim(),
            plant.meas_dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqgGains {
    pub lqr: Vec<DMatrix<f64>>,
    pub kalman: Vec<DMatrix<f64>>,
}

/// `y_t = F_t y_{t-1} + G_t r_t` for `y = [x̄; x̂]`, `r_t ~ N(0, R_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLinearSystem {
    pub f: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    /// `Cov(y_0)..Cov(y_T)`.
    pub cov_y: Vec<DMatrix<f64>>,
    /// A-priori covariance of the true deviation, `Σ_0 = P0 .. Σ_T`.
    pub sigma: Vec<DMatrix<f64>>,
}

pub fn closed_loop_system(
    plant: &LinearizedPlant,
    gains: &LqgGains,
    noise: &TrajectoryNoiseSpec,
) -> Result<ClosedLoopLinearSystem, ControlError> {
    check_noise_layout(plant, noise)?;
    let horizon = plant.horizon();
    let n = plant.state_dim();
    if gains.lqr.len() != horizon || gains.kalman.len() != horizon {
        return Err(ControlError::Shape("gain sequences must have length T".into()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut f = Vec::with_capacity(horizon);
    let mut g = Vec::with_capacity(horizon);
    let mut r = Vec::with_capacity(horizon);
    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    cov.view_mut((0, 0), (n, n)).copy_from(noise.block(0).cov());
    let mut cov_y = vec![cov.clone()];
    let mut sigma = vec![noise.block(0).cov().clone()];
    for t in 1..=horizon {
        let (a, b, h) = (&plant.a[t - 1], &plant.b[t - 1], &plant.h[t - 1]);
        let (l, k) = (&gains.lqr[t - 1], &gains.kalman[t - 1]);
        let bl = b * l;
        let kh = k * h;
        let kha = &kh * a;
        let mut ft = DMatrix::zeros(2 * n, 2 * n);
        ft.view_mut((0, 0), (n, n)).copy_from(a);
        ft.view_mut((0, n), (n, n)).copy_from(&bl);
        ft.view_mut((n, 0), (n, n)).copy_from(&kha);
        ft.view_mut((n, n), (n, n)).copy_from(&(a + &bl - &kha));
        let mut gt = DMatrix::zeros(2 * n, 2 * n);
        gt.view_mut((0, 0), (n, n)).copy_from(&eye);
        gt.view_mut((n, 0), (n, n)).copy_from(&kh);
        gt.view_mut((n, n), (n, n)).copy_from(&eye);
        let cb = noise.layout().control_block(t);
        let vu = noise.block(cb).cov();
        let vx = noise.block(cb + 1).cov();
        let w = noise.block(cb + 2).cov();
        let mut rt = DMatrix::zeros(2 * n, 2 * n);
        rt.view_mut((0, 0), (n, n)).copy_from(&(b * vu * b.transpose() + vx));
        rt.view_mut((n, n), (n, n)).copy_from(&(k * w * k.transpose()));
        let next = &ft * &cov * ft.transpose() + &gt * &rt * gt.transpose();
        cov = (&next + next.transpose()) * 0.5;
        sigma.push(cov.view((0, 0), (n, n)).into_owned());
        cov_y.push(cov.clone());
        f.push(ft);
        g.push(gt);
        r.push(rt);
    }
    Ok(ClosedLoopLinearSystem {
        f,
        g,
        r,
        cov_y,
        sigma,
    })
}

/// Matrix `C_t` mapping the stacked raw noise mean (block order of
/// [`TrajectoryNoise`]) to `E[x̄_t]` under the linearized closed loop.
pub fn mean_response_matrix(
    sys: &ClosedLoopLinearSystem,
    plant: &LinearizedPlant,
    gains: &LqgGains,
    layout: &NoiseLayout,
    t: usize,
) -> Result<DMatrix<f64>, ControlError> {
    let horizon = plant.horizon();
    if t > horizon {
        return Err(ControlError::TimeIndex { t, horizon });
    }
    let n = plant.state_dim();
    let mut c = DMatrix::zeros(n, layout.total_dim());
    // rows = [I 0] Φ(t, s), updated right-to-left as s decreases
    let mut rows = DMatrix::zeros(n, 2 * n);
    rows.view_mut((0, 0), (n, n)).fill_with_identity();
    for s in (1..=t).rev() {
        let rg = &rows * &sys.g[s - 1];
        let top = rg.columns(0, n);
        let bottom = rg.columns(n, n);
        let cb = layout.control_block(s);
        c.view_mut((0, layout.block_offset(cb)), (n, layout.control_dim))
            .copy_from(&(top * &plant.b[s - 1]));
        c.view_mut((0, layout.block_offset(cb + 1)), (n, n)).copy_from(&top);
        c.view_mut((0, layout.block_offset(cb + 2)), (n, layout.meas_dim))
            .copy_from(&(bottom * &gains.kalman[s - 1]));
        rows = &rows * &sys.f[s - 1];
    }
    c.view_mut((0, 0), (n, n)).copy_from(&rows.columns(0, n));
    Ok(c)
}

/// Output of one closed-loop rollout, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub state_dim: usize,
    pub control_dim: usize,
    /// `x_0..x_k`, `k ≤ T` (shorter when the rollout left the model domain).
    pub states: Vec<f64>,
    /// `x̂_0..x̂_{k-1}`.
    pub estimates: Vec<f64>,
    /// Applied controls including control noise.
    pub applied_controls: Vec<f64>,
    pub domain_exit: bool,
}

impl RolloutResult {
    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn estimate(&self, t: usize) -> &[f64] {
        &self.estimates[t * self.state_dim..(t + 1) * self.state_dim]
    }
}

/// Everything needed to roll out the closed loop for one scenario: the
/// nominal, its linearization, and the LQG gains. Built once, shared
/// read-only across sample evaluations.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub dynamics: Arc<dyn Dynamics>,
    pub nominal: NominalTrajectory,
    pub plant: LinearizedPlant,
    pub gains: LqgGains,
    pub kalman: KalmanGains,
    pub system: ClosedLoopLinearSystem,
    /// `I - K_t H_t`.
    innovation_complement: Vec<DMatrix<f64>>,
    nominal_obs: Vec<DVector<f64>>,
}

impl Tracker {
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        nominal: NominalTrajectory,
        noise: &TrajectoryNoiseSpec,
        weights: &LqrWeights,
    ) -> Result<Self, ControlError> {
        let plant = linearize_trajectory(dynamics.as_ref(), &nominal)?;
        let lqr = lqr_gains(&plant, weights)?;
        let kalman = kalman_gains(&plant, noise)?;
        let gains = LqgGains {
            lqr,
            kalman: kalman.gains.clone(),
        };
        let system = closed_loop_system(&plant, &gains, noise)?;
        let n = plant.state_dim();
        let innovation_complement = gains
            .kalman
            .iter()
            .zip(&plant.h)
            .map(|(k, h)| DMatrix::identity(n, n) - k * h)
            .collect();
        let nominal_obs = nominal
            .states
            .iter()
            .map(|x| {
                let mut z = DVector::zeros(dynamics.observation_dim());
                dynamics.observe(x.as_slice(), z.as_mut_slice());
                z
            })
            .collect();
        Ok(Self {
            dynamics,
            nominal,
            plant,
            gains,
            kalman,
            system,
            innovation_complement,
            nominal_obs,
        })
    }

    pub fn horizon(&self) -> usize {
        self.nominal.horizon()
    }

    pub fn noise_layout(&self) -> NoiseLayout {
        NoiseLayout::new(
            self.plant.state_dim(),
            self.plant.control_dim(),
            self.plant.meas_dim(),
            self.horizon(),
        )
    }

    pub fn mean_response_matrix(&self, t: usize) -> Result<DMatrix<f64>, ControlError> {
        mean_response_matrix(&self.system, &self.plant, &self.gains, &self.noise_layout(), t)
    }

    /// Simulates the true nonlinear closed loop under `noise`.
    ///
    /// A dynamics singularity truncates the rollout and sets `domain_exit`.
    pub fn rollout(&self, noise: &TrajectoryNoise) -> RolloutResult {
        let nx = self.plant.state_dim();
        let nu = self.plant.control_dim();
        let nz = self.plant.meas_dim();
        let horizon = self.horizon();
        debug_assert_eq!(noise.layout(), &self.noise_layout());

        let mut states = Vec::with_capacity((horizon + 1) * nx);
        let mut estimates = Vec::with_capacity(horizon * nx);
        let mut applied = Vec::with_capacity(horizon * nu);

        let x0: Vec<f64> = self.nominal.states[0]
            .iter()
            .zip(noise.init())
            .map(|(a, b)| a + b)
            .collect();
        states.extend_from_slice(&x0);

        let mut xhat = vec![0.0; nx];
        let mut ubar = vec![0.0; nu];
        let mut u = vec![0.0; nu];
        let mut next = vec![0.0; nx];
        let mut zbar = vec![0.0; nz];
        let mut obs = vec![0.0; nz];
        let mut pred = vec![0.0; nx];
        let mut domain_exit = false;

        for t in 1..=horizon {
            let l = &self.gains.lqr[t - 1];
            for i in 0..nu {
                let mut acc = 0.0;
                for j in 0..nx {
                    acc += l[(i, j)] * xhat[j];
                }
                ubar[i] = acc;
            }
            estimates.extend_from_slice(&xhat);
            let ustar = &self.nominal.controls[t - 1];
            let vu = noise.ctrl(t);
            for i in 0..nu {
                u[i] = ustar[i] + ubar[i] + vu[i];
            }
            applied.extend_from_slice(&u);
            let prev = &states[(t - 1) * nx..t * nx];
            if self.dynamics.step(prev, &u, &mut next).is_err() {
                domain_exit = true;
                break;
            }
            for (xi, vx) in next.iter_mut().zip(noise.proc(t)) {
                *xi += vx;
            }
            if !next.iter().all(|v| v.is_finite()) {
                domain_exit = true;
                break;
            }
            states.extend_from_slice(&next);

            self.dynamics.observe(&next, &mut obs);
            let zstar = &self.nominal_obs[t];
            for ((z, (o, zs)), w) in zbar.iter_mut().zip(obs.iter().zip(zstar.iter())).zip(noise.meas(t)) {
                *z = o - zs + w;
            }
            let (a, b) = (&self.plant.a[t - 1], &self.plant.b[t - 1]);
            for i in 0..nx {
                let mut acc = 0.0;
                for j in 0..nx {
                    acc += a[(i, j)] * xhat[j];
                }
                for j in 0..nu {
                    acc += b[(i, j)] * ubar[j];
                }
                pred[i] = acc;
            }
            let (k, m) = (&self.gains.kalman[t - 1], &self.innovation_complement[t - 1]);
            for i in 0..nx {
                let mut acc = 0.0;
                for j in 0..nz {
                    acc += k[(i, j)] * zbar[j];
                }
                for j in 0..nx {
                    acc += m[(i, j)] * pred[j];
                }
                xhat[i] = acc;
            }
        }
        RolloutResult {
            state_dim: nx,
            control_dim: nu,
            states,
            estimates,
            applied_controls: applied,
            domain_exit,
        }
    }

    /// Deviations of the stacked-mean noise propagated through `rollout`, for
    /// first-order checks: returns `x_t - x*_t`.
    pub fn deviation(&self, result: &RolloutResult, t: usize) -> DVector<f64> {
        DVector::from_row_slice(result.state(t)) - &self.nominal.states[t]
    }
}

/// Raw-space block kind helper used by tests and the optimizer.
pub fn block_is_state_sized(layout: &NoiseLayout, b: usize) -> bool {
    matches!(layout.block_kind(b).0, BlockKind::Initial | BlockKind::Process)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Airplane, AirplaneParams, LinearPlant};
    use crate::gauss::GaussianSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_plant(a: f64, b: f64, horizon: usize) -> LinearizedPlant {
        LinearizedPlant {
            a: vec![DMatrix::from_element(1, 1, a); horizon],
            b: vec![DMatrix::from_element(1, 1, b); horizon],
            h: vec![DMatrix::from_element(1, 1, 1.0); horizon],
        }
    }

    fn scalar(v: f64) -> GaussianSpec {
        GaussianSpec::zero_mean(DMatrix::from_element(1, 1, v)).unwrap()
    }

    fn scalar_noise(p0: f64, vu: f64, vx: f64, w: f64, horizon: usize) -> TrajectoryNoiseSpec {
        TrajectoryNoiseSpec::new(scalar(p0), (0..horizon).map(|_| (scalar(vu), scalar(vx), scalar(w))).collect()).unwrap()
    }

    #[test]
    fn scalar_riccati_one_step() {
        let plant = scalar_plant(1.0, 1.0, 1);
        let w = LqrWeights::identity(1, 1);
        let l = lqr_gains(&plant, &w).unwrap();
        assert_abs_diff_eq!(l[0][(0, 0)], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn scalar_riccati_two_steps_by_hand() {
        // P2 = 1, L2 = -1/2, P1 = 1 + 1·1·(1 - 1/2) = 1.5, L1 = -1.5/2.5 = -0.6
        let plant = scalar_plant(1.0, 1.0, 2);
        let l = lqr_gains(&plant, &LqrWeights::identity(1, 1)).unwrap();
        assert_abs_diff_eq!(l[1][(0, 0)], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l[0][(0, 0)], -0.6, epsilon = 1e-12);
    }

    #[test]
    fn expensive_control_gives_zero_gain() {
        let plant = scalar_plant(1.0, 1.0, 5);
        let mut w = LqrWeights::identity(1, 1);
        w.r[(0, 0)] = 1e9;
        for l in lqr_gains(&plant, &w).unwrap() {
            assert!(l[(0, 0)].abs() < 1e-6);
        }
    }

    #[test]
    fn riccati_converges_to_stationary_gain() {
        let plant = scalar_plant(1.1, 0.5, 200);
        let l = lqr_gains(&plant, &LqrWeights::identity(1, 1)).unwrap();
        // independent fixed-point iteration of the scalar algebraic Riccati map
        let (a, b, q, r) = (1.1f64, 0.5f64, 1.0f64, 1.0f64);
        let mut p = 1.0;
        for _ in 0..10_000 {
            p = q + a * a * p - (a * b * p).powi(2) / (r + b * b * p);
        }
        let stationary = -(b * p * a) / (r + b * b * p);
        assert!((l[0][(0, 0)] - l[1][(0, 0)]).abs() < 1e-6);
        assert_abs_diff_eq!(l[0][(0, 0)], stationary, epsilon = 1e-9);
    }

    #[test]
    fn scalar_kalman_one_step() {
        let plant = scalar_plant(1.0, 1.0, 1);
        let noise = scalar_noise(1.0, 1e-300, 1.0, 1.0, 1);
        let k = kalman_gains(&plant, &noise).unwrap();
        assert_abs_diff_eq!(k.apriori[0][(0, 0)], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(k.gains[0][(0, 0)], 2.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(k.aposteriori[1][(0, 0)], 2.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn kalman_limits() {
        let plant = scalar_plant(1.0, 1.0, 3);
        let useless = kalman_gains(&plant, &scalar_noise(1.0, 0.5, 1.0, 1e12, 3)).unwrap();
        assert!(useless.gains.iter().all(|k| k[(0, 0)].abs() < 1e-9));
        let perfect = kalman_gains(&plant, &scalar_noise(1.0, 0.5, 1.0, 1e-12, 3)).unwrap();
        assert!(perfect.gains.iter().all(|k| (k[(0, 0)] - 1.0).abs() < 1e-9));
    }

    #[test]
    fn zero_gains_decouple_estimate() {
        let plant = scalar_plant(1.2, 1.0, 4);
        let noise = scalar_noise(0.5, 0.1, 0.3, 1.0, 4);
        let gains = LqgGains {
            lqr: vec![DMatrix::zeros(1, 1); 4],
            kalman: vec![DMatrix::zeros(1, 1); 4],
        };
        let sys = closed_loop_system(&plant, &gains, &noise).unwrap();
        let mut s = 0.5;
        for t in 1..=4 {
            s = 1.44 * s + 0.1 + 0.3;
            assert_abs_diff_eq!(sys.sigma[t][(0, 0)], s, epsilon = 1e-12);
            assert_abs_diff_eq!(sys.cov_y[t][(1, 1)], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn scalar_closed_loop_covariance_stays_bounded() {
        let horizon = 200;
        let plant = scalar_plant(1.05, 1.0, horizon);
        let noise = scalar_noise(0.5, 0.01, 0.02, 0.1, horizon);
        let lqr = lqr_gains(&plant, &LqrWeights::identity(1, 1)).unwrap();
        let kal = kalman_gains(&plant, &noise).unwrap();
        let gains = LqgGains { lqr, kalman: kal.gains.clone() };
        let sys = closed_loop_system(&plant, &gains, &noise).unwrap();
        // explicit scalar iteration of the 2x2 second-moment recursion
        let (a, b) = (1.05, 1.0);
        let mut m = [[0.5, 0.0], [0.0, 0.0]];
        for t in 1..=horizon {
            let (l, k) = (gains.lqr[t - 1][(0, 0)], gains.kalman[t - 1][(0, 0)]);
            let f = [[a, b * l], [k * a, a + b * l - k * a]];
            let g = [[1.0, 0.0], [k, 1.0]];
            let r = [b * b * 0.01 + 0.02, k * k * 0.1];
            let mut nm = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..2 {
                        for q in 0..2 {
                            acc += f[i][p] * m[p][q] * f[j][q];
                        }
                        acc += g[i][p] * r[p] * g[j][p];
                    }
                    nm[i][j] = acc;
                }
            }
            m = nm;
            assert_abs_diff_eq!(sys.sigma[t][(0, 0)], m[0][0], epsilon = 1e-9);
            assert!(m[0][0] < 1.0);
        }
    }

    fn airplane_tracker(horizon: usize) -> Tracker {
        let params = AirplaneParams::default();
        let plane = Arc::new(Airplane::new(params).unwrap());
        let x0 = DVector::from_row_slice(&[0.0, 0.0, 10.0, 10.0, 0.0, 0.0, 0.0, params.alpha0]);
        let u = DVector::from_row_slice(&[params.trim_thrust(10.0), 0.0, 0.0]);
        let nominal = NominalTrajectory::from_controls(plane.as_ref(), x0, vec![u; horizon]).unwrap();
        let diag = |v: &[f64]| GaussianSpec::zero_mean(DMatrix::from_diagonal(&DVector::from_row_slice(v))).unwrap();
        let noise = TrajectoryNoiseSpec::new(
            diag(&[0.01; 8]),
            (0..horizon)
                .map(|_| (diag(&[0.05, 0.02, 0.01]), diag(&[1e-4; 8]), diag(&[1e-3; 8])))
                .collect(),
        )
        .unwrap();
        Tracker::new(plane, nominal, &noise, &LqrWeights::identity(8, 3)).unwrap()
    }

    #[test]
    fn straight_trim_linearization_is_time_invariant() {
        let tr = airplane_tracker(10);
        for t in 1..10 {
            assert!((&tr.plant.a[t] - &tr.plant.a[0]).amax() < 1e-9);
            assert_eq!(tr.plant.h[t], DMatrix::identity(8, 8));
        }
    }

    #[test]
    fn discrete_jacobian_matches_continuous_to_first_order() {
        // A ≈ I + dt J_c; the residual shrinks as dt².
        let mut errs = vec![];
        for dt in [0.02, 0.01, 0.005] {
            let mut params = AirplaneParams::default();
            params.dt = dt;
            let plane = Airplane::new(params).unwrap();
            let x = DVector::from_row_slice(&[0.0, 0.0, 10.0, 10.0, 0.2, 0.05, 0.1, params.alpha0]);
            let u = DVector::from_row_slice(&[params.trim_thrust(10.0), 0.0, 0.0]);
            let nominal = NominalTrajectory::from_controls(&plane, x.clone(), vec![u.clone()]).unwrap();
            let plant = linearize_trajectory(&plane, &nominal).unwrap();
            // continuous Jacobian by central differences of the derivative
            let mut jc = DMatrix::zeros(8, 8);
            for i in 0..8 {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let sp = crate::dynamics::AirplaneState::from_slice(xp.as_slice());
                let sm = crate::dynamics::AirplaneState::from_slice(xm.as_slice());
                let uc = crate::dynamics::AirplaneControl::from_slice(u.as_slice());
                let dp = crate::dynamics::continuous_derivative(&params, &sp, &uc).unwrap();
                let dm = crate::dynamics::continuous_derivative(&params, &sm, &uc).unwrap();
                for r in 0..8 {
                    jc[(r, i)] = (dp[r] - dm[r]) / (2.0 * h);
                }
            }
            let approx = DMatrix::identity(8, 8) + jc * dt;
            errs.push((&plant.a[0] - approx).amax());
        }
        assert!(errs[0] / errs[1] > 3.0 && errs[1] / errs[2] > 3.0, "{errs:?}");
    }

    #[test]
    fn zero_noise_rollout_tracks_nominal() {
        let tr = airplane_tracker(30);
        let res = tr.rollout(&TrajectoryNoise::zeros(tr.noise_layout()));
        assert!(!res.domain_exit);
        for t in 0..=30 {
            let dev = tr.deviation(&res, t);
            assert!(dev.amax() < 1e-9, "t={t} dev={}", dev.amax());
        }
    }

    #[test]
    fn initial_offset_is_regulated() {
        let tr = airplane_tracker(60);
        let mut noise = TrajectoryNoise::zeros(tr.noise_layout());
        noise.block_mut(0).copy_from_slice(&[0.0, 0.3, -0.2, 0.2, 0.02, 0.0, 0.03, 0.0]);
        let res = tr.rollout(&noise);
        let d0 = tr.deviation(&res, 0).norm();
        let dt = tr.deviation(&res, 60).norm();
        assert!(dt < d0, "{dt} !< {d0}");
    }

    fn double_integrator_tracker(horizon: usize, seed: u64) -> (Tracker, TrajectoryNoiseSpec) {
        let plant = Arc::new(LinearPlant::double_integrator(0.1));
        let nominal = NominalTrajectory::from_controls(
            plant.as_ref(),
            DVector::from_vec(vec![0.0, 1.0]),
            vec![DVector::from_vec(vec![0.0]); horizon],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spd = |d: usize| {
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.3..0.3));
            GaussianSpec::zero_mean(&a * a.transpose() + DMatrix::identity(d, d) * 0.05).unwrap()
        };
        let noise = TrajectoryNoiseSpec::new(spd(2), (0..horizon).map(|_| (spd(1), spd(2), spd(2))).collect()).unwrap();
        let tr = Tracker::new(plant, nominal, &noise, &LqrWeights::identity(2, 1)).unwrap();
        (tr, noise)
    }

    #[test]
    fn linear_rollout_matches_matrix_recursion() {
        let (tr, noise) = double_integrator_tracker(12, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = noise.sample(&mut rng);
        let res = tr.rollout(&draw);
        let n = 2;
        let mut y = DVector::zeros(2 * n);
        y.rows_mut(0, n).copy_from_slice(draw.init());
        for t in 1..=12 {
            let b = &tr.plant.b[t - 1];
            let k = &tr.gains.kalman[t - 1];
            let mut r = DVector::zeros(2 * n);
            let lumped = b * DVector::from_row_slice(draw.ctrl(t)) + DVector::from_row_slice(draw.proc(t));
            r.rows_mut(0, n).copy_from(&lumped);
            r.rows_mut(n, n).copy_from(&(k * DVector::from_row_slice(draw.meas(t))));
            y = &tr.system.f[t - 1] * &y + &tr.system.g[t - 1] * r;
            let dev = tr.deviation(&res, t);
            assert!((dev - y.rows(0, n)).amax() < 1e-12);
            if t < 12 {
                let est = DVector::from_row_slice(res.estimate(t));
                assert!((est - y.rows(n, n)).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_response_structure() {
        let (tr, _) = double_integrator_tracker(3, 4);
        let layout = tr.noise_layout();
        let c0 = tr.mean_response_matrix(0).unwrap();
        assert_eq!(c0.columns(0, 2).into_owned(), DMatrix::identity(2, 2));
        assert!(c0.columns(2, layout.total_dim() - 2).iter().all(|&v| v == 0.0));
        for t in 0..=3 {
            let c = tr.mean_response_matrix(t).unwrap();
            let start = if t == 0 { 2 } else { layout.block_offset(layout.control_block(t) + 2) + 2 };
            assert!(c.columns(start, layout.total_dim() - start).iter().all(|&v| v == 0.0));
        }
        assert!(matches!(tr.mean_response_matrix(4), Err(ControlError::TimeIndex { .. })));
    }

    #[test]
    fn mean_response_matches_linear_simulation() {
        let (tr, noise) = double_integrator_tracker(3, 6);
        let layout = tr.noise_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mu = DVector::from_fn(layout.total_dim(), |_, _| rng.random_range(-0.5..0.5));
        let blocks: Vec<GaussianSpec> = (0..layout.block_count())
            .map(|b| noise.block(b).with_mean(mu.rows(layout.block_offset(b), layout.block_dim(b)).into_owned()).unwrap())
            .collect();
        let shifted = TrajectoryNoiseSpec::from_blocks(layout, blocks).unwrap();
        let n_sims = 1_000_000;
        let t = 3;
        let mut sum = DVector::zeros(2);
        let mut sumsq = DVector::zeros(2);
        let mut draw = TrajectoryNoise::zeros(layout);
        for _ in 0..n_sims {
            shifted.sample_into(&mut rng, &mut draw);
            let dev = tr.deviation(&tr.rollout(&draw), t);
            sum += &dev;
            sumsq += dev.component_mul(&dev);
        }
        let mean = &sum / n_sims as f64;
        let var = &sumsq / n_sims as f64 - mean.component_mul(&mean);
        let expected = tr.mean_response_matrix(t).unwrap() * &mu;
        for i in 0..2 {
            let se = (var[i] / n_sims as f64).sqrt();
            assert!((mean[i] - expected[i]).abs() < 3.0 * se, "coord {i}: {} vs {} (se {se})", mean[i], expected[i]);
        }
    }

    #[test]
    fn first_order_consistency_on_airplane() {
        let tr = airplane_tracker(20);
        let layout = tr.noise_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dir = DVector::from_fn(layout.total_dim(), |_, _| rng.random_range(-1.0..1.0));
        let t = 15;
        let c = tr.mean_response_matrix(t).unwrap();
        let lin = &c * &dir;
        let mut errs = vec![];
        for eps in [1e-2, 1e-3, 1e-4] {
            let noise = TrajectoryNoise::from_vec(layout, (&dir * eps).as_slice().to_vec()).unwrap();
            let dev = tr.deviation(&tr.rollout(&noise), t);
            errs.push((dev - &lin * eps).norm() / eps);
        }
        // residual/ε decays linearly in ε
        assert!(errs[0] / errs[1] > 5.0 && errs[1] / errs[2] > 5.0, "{errs:?}");
    }

    #[test]
    fn closed_loop_covariances_are_psd() {
        let tr = airplane_tracker(40);
        for cov in &tr.system.cov_y {
            let eig = cov.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() > -1e-10);
        }
        for s in &tr.system.sigma {
            assert!(s.clone().cholesky().is_some());
        }
    }

    #[test]
    fn nominal_consistency_check_reports_residual() {
        let plane = Airplane::new(AirplaneParams::default()).unwrap();
        let p = plane.params;
        let x0 = DVector::from_row_slice(&[0.0, 0.0, 10.0, 10.0, 0.0, 0.0, 0.0, p.alpha0]);
        let u = DVector::from_row_slice(&[p.trim_thrust(10.0), 0.0, 0.0]);
        let mut nominal = NominalTrajectory::from_controls(&plane, x0, vec![u; 5]).unwrap();
        nominal.check_consistency(&plane, 1e-9).unwrap();
        nominal.states[3][1] += 0.01;
        match nominal.check_consistency(&plane, 1e-9) {
            Err(ControlError::InconsistentNominal { max_residual, .. }) => assert!((max_residual - 0.01).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
    }
}
