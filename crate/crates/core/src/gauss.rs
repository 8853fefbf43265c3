//! Multivariate Gaussian primitives and the joint trajectory-noise distribution.
//!
//! The noise driving one closed-loop rollout is the stacked vector
//! `X = (p0, vu_1, vx_1, w_1, ..., vu_T, vx_T, w_T)` of `3T + 1` independent
//! Gaussian blocks. Everything here works in log space; a 100-step joint
//! density underflows `f64` long before it is useful.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("density of a degenerate (zero-covariance) Gaussian is undefined")]
    Degenerate,
    #[error("mixture has no components")]
    EmptyMixture,
    #[error("mixture weights do not lie on the simplex (sum {0})")]
    NotSimplex(f64),
}

/// A multivariate normal with its Cholesky factor cached at construction.
///
/// The covariance is immutable; build a new spec to change it.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    /// `-0.5 * (d ln 2π + ln|cov|)`; NaN for the degenerate test-only spec.
    log_norm: f64,
    degenerate: bool,
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GaussError> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(GaussError::Dimension {
                expected: d,
                got: cov.nrows(),
            });
        }
        let asym = relative_asymmetry(&cov);
        if asym > 1e-12 {
            return Err(GaussError::NotSymmetric(asym));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(GaussError::NotPositiveDefinite)?
            .unpack();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(GaussError::NotPositiveDefinite);
        }
        Ok(Self {
            mean,
            cov: sym,
            chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
            degenerate: false,
        })
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self, GaussError> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    /// Standard normal of dimension `d`.
    pub fn standard(d: usize) -> Self {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is SPD")
    }

    /// Point mass at `mean`. Only sampling is defined; densities error.
    #[cfg(test)]
    pub(crate) fn zero_covariance(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(d, d),
            chol: DMatrix::zeros(d, d),
            log_norm: f64::NAN,
            degenerate: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular factor `L` with `L Lᵀ = cov`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.dim() as f64 * LN_2PI
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Result<Self, GaussError> {
        if mean.len() != self.dim() {
            return Err(GaussError::Dimension {
                expected: self.dim(),
                got: mean.len(),
            });
        }
        Ok(Self {
            mean,
            ..self.clone()
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64, GaussError> {
        if x.len() != self.dim() {
            return Err(GaussError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if self.degenerate {
            return Err(GaussError::Degenerate);
        }
        Ok(self.log_density_unchecked(x.as_slice()))
    }

    /// Inner-loop variant: no dimension check, no allocation for `d <= 32`.
    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut buf = [0.0f64; 32];
        let mut heap;
        let y: &mut [f64] = if d <= 32 {
            &mut buf[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap[..]
        };
        let mean = self.mean.as_slice();
        let mut quad = 0.0;
        // forward substitution L y = x - mean
        for i in 0..d {
            let mut acc = x[i] - mean[i];
            for j in 0..i {
                acc -= self.chol[(i, j)] * y[j];
            }
            let yi = acc / self.chol[(i, i)];
            y[i] = yi;
            quad += yi * yi;
        }
        self.log_norm - 0.5 * quad
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.sample_into(rng, out.as_mut_slice());
        out
    }

    /// Writes `mean + L z` into `out`, drawing `z` from `rng` in coordinate order.
    pub(crate) fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut z = [0.0f64; 32];
        let mut heap;
        let z: &mut [f64] = if d <= 32 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap[..]
        };
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let mean = self.mean.as_slice();
        for i in 0..d {
            let mut acc = mean[i];
            for j in 0..=i {
                acc += self.chol[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }
}

fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// `sqrt((x - center)ᵀ cov⁻¹ (x - center))`.
pub fn mahalanobis(
    x: &DVector<f64>,
    center: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64, GaussError> {
    if x.len() != center.len() || cov.nrows() != x.len() || cov.ncols() != x.len() {
        return Err(GaussError::Dimension {
            expected: center.len(),
            got: x.len(),
        });
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(GaussError::NotPositiveDefinite)?;
    let diff = x - center;
    let y = chol.l().solve_lower_triangular(&diff).expect("cholesky factor is nonsingular");
    Ok(y.norm())
}

/// Numerically safe `ln Σ exp(v_i)`. Entries equal to `-inf` contribute zero.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Shape of the stacked trajectory-noise vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NoiseLayout {
    pub state_dim: usize,
    pub control_dim: usize,
    pub meas_dim: usize,
    pub horizon: usize,
}

/// Which of the three per-step noise sources a block holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Initial,
    Control,
    Process,
    Measurement,
}

impl NoiseLayout {
    pub fn new(state_dim: usize, control_dim: usize, meas_dim: usize, horizon: usize) -> Self {
        Self {
            state_dim,
            control_dim,
            meas_dim,
            horizon,
        }
    }

    pub fn step_len(&self) -> usize {
        self.control_dim + self.state_dim + self.meas_dim
    }

    /// Total dimension `d_x + T (d_u + d_x + d_z)`.
    pub fn total_dim(&self) -> usize {
        self.state_dim + self.horizon * self.step_len()
    }

    pub fn block_count(&self) -> usize {
        3 * self.horizon + 1
    }

    /// Block index `b` → (kind, step `t` in `1..=T`, or 0 for the initial block).
    pub fn block_kind(&self, b: usize) -> (BlockKind, usize) {
        if b == 0 {
            return (BlockKind::Initial, 0);
        }
        let t = (b - 1) / 3 + 1;
        let kind = match (b - 1) % 3 {
            0 => BlockKind::Control,
            1 => BlockKind::Process,
            _ => BlockKind::Measurement,
        };
        (kind, t)
    }

    pub fn block_dim(&self, b: usize) -> usize {
        match self.block_kind(b).0 {
            BlockKind::Initial | BlockKind::Process => self.state_dim,
            BlockKind::Control => self.control_dim,
            BlockKind::Measurement => self.meas_dim,
        }
    }

    pub fn block_offset(&self, b: usize) -> usize {
        if b == 0 {
            return 0;
        }
        let t = (b - 1) / 3;
        let base = self.state_dim + t * self.step_len();
        match (b - 1) % 3 {
            0 => base,
            1 => base + self.control_dim,
            _ => base + self.control_dim + self.state_dim,
        }
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let o = self.block_offset(b);
        o..o + self.block_dim(b)
    }

    /// Block index of the control noise at step `t` (1-based).
    pub fn control_block(&self, t: usize) -> usize {
        1 + 3 * (t - 1)
    }
}

/// One realization of the stacked noise vector, stored flat in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryNoise {
    layout: NoiseLayout,
    data: Vec<f64>,
}

impl TrajectoryNoise {
    pub fn zeros(layout: NoiseLayout) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.total_dim()],
        }
    }

    pub fn from_vec(layout: NoiseLayout, data: Vec<f64>) -> Result<Self, GaussError> {
        if data.len() != layout.total_dim() {
            return Err(GaussError::Dimension {
                expected: layout.total_dim(),
                got: data.len(),
            });
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &NoiseLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.data[self.layout.block_range(b)]
    }

    pub fn block_mut(&mut self, b: usize) -> &mut [f64] {
        let r = self.layout.block_range(b);
        &mut self.data[r]
    }

    pub fn init(&self) -> &[f64] {
        self.block(0)
    }

    /// Control noise `vu_t`, `t` in `1..=T`.
    pub fn ctrl(&self, t: usize) -> &[f64] {
        self.block(self.layout.control_block(t))
    }

    pub fn proc(&self, t: usize) -> &[f64] {
        self.block(self.layout.control_block(t) + 1)
    }

    pub fn meas(&self, t: usize) -> &[f64] {
        self.block(self.layout.control_block(t) + 2)
    }
}

/// Independent Gaussian blocks `(P0, Vu_1, Vx_1, W_1, ...)` in the same
/// order as [`TrajectoryNoise`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryNoiseSpec {
    layout: NoiseLayout,
    blocks: Vec<GaussianSpec>,
}

impl TrajectoryNoiseSpec {
    /// `steps` holds one `(control, process, measurement)` triple per time step.
    pub fn new(
        init: GaussianSpec,
        steps: Vec<(GaussianSpec, GaussianSpec, GaussianSpec)>,
    ) -> Result<Self, GaussError> {
        let state_dim = init.dim();
        let (control_dim, meas_dim) = match steps.first() {
            Some((c, _, m)) => (c.dim(), m.dim()),
            None => (0, 0),
        };
        let layout = NoiseLayout::new(state_dim, control_dim, meas_dim, steps.len());
        let mut blocks = Vec::with_capacity(layout.block_count());
        blocks.push(init);
        for (c, p, m) in steps {
            blocks.push(c);
            blocks.push(p);
            blocks.push(m);
        }
        Self::from_blocks(layout, blocks)
    }

    pub fn from_blocks(layout: NoiseLayout, blocks: Vec<GaussianSpec>) -> Result<Self, GaussError> {
        if blocks.len() != layout.block_count() {
            return Err(GaussError::Dimension {
                expected: layout.block_count(),
                got: blocks.len(),
            });
        }
        for (b, spec) in blocks.iter().enumerate() {
            if spec.dim() != layout.block_dim(b) {
                return Err(GaussError::Dimension {
                    expected: layout.block_dim(b),
                    got: spec.dim(),
                });
            }
        }
        Ok(Self { layout, blocks })
    }

    pub fn layout(&self) -> &NoiseLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[GaussianSpec] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &GaussianSpec {
        &self.blocks[b]
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon
    }

    /// True when every block mean is exactly zero.
    pub fn is_zero_mean(&self) -> bool {
        self.blocks.iter().all(|b| b.mean().iter().all(|&m| m == 0.0))
    }

    /// Stacked mean vector in raw block order.
    pub fn stacked_mean(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.total_dim());
        for (b, spec) in self.blocks.iter().enumerate() {
            out.rows_mut(self.layout.block_offset(b), spec.dim())
                .copy_from(spec.mean());
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrajectoryNoise {
        let mut noise = TrajectoryNoise::zeros(self.layout);
        self.sample_into(rng, &mut noise);
        noise
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, noise: &mut TrajectoryNoise) {
        debug_assert_eq!(noise.layout, self.layout);
        for (b, spec) in self.blocks.iter().enumerate() {
            spec.sample_into(rng, noise.block_mut(b));
        }
    }

    pub fn joint_log_density(&self, noise: &TrajectoryNoise) -> Result<f64, GaussError> {
        if noise.layout != self.layout {
            return Err(GaussError::Dimension {
                expected: self.layout.total_dim(),
                got: noise.layout.total_dim(),
            });
        }
        if self.blocks.iter().any(|b| b.degenerate) {
            return Err(GaussError::Degenerate);
        }
        Ok(self.joint_log_density_unchecked(noise))
    }

    pub(crate) fn joint_log_density_unchecked(&self, noise: &TrajectoryNoise) -> f64 {
        self.blocks
            .iter()
            .enumerate()
            .map(|(b, spec)| spec.log_density_unchecked(noise.block(b)))
            .sum()
    }

    /// Log-density difference `ln q(x) - ln p(x)` restricted to the blocks
    /// listed in `blocks`; all other blocks are assumed identical to `base`.
    pub(crate) fn log_ratio_on_blocks(
        &self,
        base: &TrajectoryNoiseSpec,
        blocks: &[usize],
        noise: &TrajectoryNoise,
    ) -> f64 {
        blocks
            .iter()
            .map(|&b| {
                let x = noise.block(b);
                self.blocks[b].log_density_unchecked(x) - base.blocks[b].log_density_unchecked(x)
            })
            .sum()
    }

    /// Indices of blocks whose mean or covariance differs from `other`.
    pub fn differing_blocks(&self, other: &TrajectoryNoiseSpec) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&b| {
                let (a, o) = (&self.blocks[b], &other.blocks[b]);
                a.mean() != o.mean() || a.cov() != o.cov()
            })
            .collect()
    }
}

/// `ln Σ_d α_d q_d(noise)`. Components with zero weight are skipped.
pub fn mixture_log_density(
    components: &[TrajectoryNoiseSpec],
    weights: &[f64],
    noise: &TrajectoryNoise,
) -> Result<f64, GaussError> {
    if components.is_empty() {
        return Err(GaussError::EmptyMixture);
    }
    if weights.len() != components.len() {
        return Err(GaussError::Dimension {
            expected: components.len(),
            got: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(GaussError::NotSimplex(sum));
    }
    let mut terms = Vec::with_capacity(components.len());
    for (spec, &w) in components.iter().zip(weights) {
        if w > 0.0 {
            terms.push(w.ln() + spec.joint_log_density(noise)?);
        }
    }
    Ok(log_sum_exp(&terms))
}
