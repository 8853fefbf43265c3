//! Naive Monte Carlo, fixed-mixture importance sampling and adaptive mixture
//! importance sampling with mirror-descent weight updates.
//!
//! Estimators are generic over [`SampleModel`], which draws from one mixture
//! component and reports the collision indicator together with the log ratio
//! `ln q_d(x) − ln p(x)` for every component. The nominal is always the last
//! component, so its ratio is exactly zero.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::Tracker;
use crate::exec::Execution;
use crate::gauss::{log_sum_exp, GaussianSpec, TrajectoryNoise, TrajectoryNoiseSpec};
use crate::geometry::CollisionChecker;
use crate::isopt::MixtureSpec;

/// Seed offset for the component-selection stream, so the noise stream of a
/// sample does not depend on whether a mixture draw happened.
const COMPONENT_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;
const GRADIENT_CLIP: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("sum of likelihood ratios is {0}; the estimate is undefined")]
    DegenerateNormalizer(f64),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Is,
    Ais,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Is => "is",
            Method::Ais => "ais",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Method::Naive),
            "is" => Ok(Method::Is),
            "ais" => Ok(Method::Ais),
            other => Err(format!("unknown method '{other}' (expected naive, is or ais)")),
        }
    }
}

/// Outcome of one model evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub hit: bool,
    pub domain_exit: bool,
    /// `ln q_d(x) − ln p(x)` for every component; the last entry is 0.
    pub log_ratios: Vec<f64>,
}

/// A sampling problem: a nominal density `p`, proposal components `q_d`
/// (the last one equal to `p`) and an event indicator.
pub trait SampleModel: Sync {
    /// Number of components including the nominal.
    fn components(&self) -> usize;

    /// Draws `x ~ q_d` from `rng` and evaluates it.
    fn evaluate(&self, component: usize, rng: &mut ChaCha8Rng) -> Evaluation;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub f: bool,
    /// `ln p(x) − ln Q_α(x)`.
    pub log_w: f64,
    pub component: usize,
    pub domain_exit: bool,
    pub log_ratios: Vec<f64>,
}

/// Per-sample generators: one for noise, one for the component draw.
fn sample_rngs(seed: u64, index: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(index);
    let mut pick = ChaCha8Rng::seed_from_u64(seed.wrapping_add(COMPONENT_SEED_OFFSET));
    pick.set_stream(index);
    (noise, pick)
}

fn draw_component(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (d, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return d;
        }
    }
    // rounding left u above the cumulative sum; take the last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// `ln Q_α(x) − ln p(x)` from per-component ratios.
fn log_mixture_ratio(weights: &[f64], log_ratios: &[f64]) -> f64 {
    let terms: Vec<f64> = weights
        .iter()
        .zip(log_ratios)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, r)| w.ln() + r)
        .collect();
    log_sum_exp(&terms)
}

/// Draws and evaluates sample `index` of a run with master seed `seed`
/// under mixture weights `weights`.
pub fn evaluate_sample<M: SampleModel + ?Sized>(model: &M, weights: &[f64], index: u64, seed: u64) -> SampleRecord {
    let (mut noise_rng, mut pick_rng) = sample_rngs(seed, index);
    let component = draw_component(weights, &mut pick_rng);
    let ev = model.evaluate(component, &mut noise_rng);
    let log_w = -log_mixture_ratio(weights, &ev.log_ratios);
    SampleRecord {
        f: ev.hit || ev.domain_exit,
        log_w,
        component,
        domain_exit: ev.domain_exit,
        log_ratios: ev.log_ratios,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub batch: usize,
    /// Samples drawn up to and including this batch.
    pub samples: usize,
    pub p_hat: f64,
    pub sigma_hat: f64,
    /// Weights after this batch's update.
    pub alpha: Vec<f64>,
    pub max_ratio: f64,
    pub domain_exits: usize,
}

/// Running estimate after a prefix of the samples, for convergence plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningPoint {
    pub samples: usize,
    pub p_hat: f64,
    pub sigma_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    pub p_hat: f64,
    pub v_hat: f64,
    pub sigma_hat: f64,
    pub samples_used: usize,
    pub trace: Vec<TraceRecord>,
    pub running: Vec<RunningPoint>,
    pub final_weights: Vec<f64>,
    pub domain_exits: usize,
    pub wall_time: f64,
    pub seed: u64,
}

/// How the mirror-descent gradient is scaled before the `C/√i` step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScale {
    /// Root mean square of the per-iteration max-abs entries seen so far.
    #[default]
    RunningRms,
    /// Largest max-abs entry seen so far. A single heavy-tailed batch can
    /// shrink every later step by orders of magnitude.
    RunningMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AisSettings {
    /// Samples per batch.
    pub k: usize,
    /// Number of batches.
    pub l: usize,
    /// Mirror-descent step size.
    pub c: f64,
    pub defensive_floor: f64,
    pub gradient_scale: GradientScale,
}

impl Default for AisSettings {
    fn default() -> Self {
        Self {
            k: 20,
            l: 100,
            c: 1.0,
            defensive_floor: 0.1,
            gradient_scale: GradientScale::RunningRms,
        }
    }
}

/// Number of points in the running series of single-batch methods.
const RUNNING_POINTS: usize = 50;

/// Running sums for the self-normalized estimator. With `f ∈ {0, 1}`,
/// `Σ w²(f − p)² = Σ_f w² (1 − 2p) + p² Σ w²`.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    n: usize,
    w: f64,
    fw: f64,
    w2: f64,
    fw2: f64,
    hits: usize,
    max_ratio: f64,
    exits: usize,
}

impl Sums {
    fn push(&mut self, f: bool, w: f64) {
        self.n += 1;
        self.w += w;
        self.w2 += w * w;
        if f {
            self.hits += 1;
            self.fw += w;
            self.fw2 += w * w;
        }
        self.max_ratio = self.max_ratio.max(w);
    }

    fn self_normalized(&self) -> Result<(f64, f64), EstimatorError> {
        if !(self.w > 0.0) || !self.w.is_finite() {
            return Err(EstimatorError::DegenerateNormalizer(self.w));
        }
        let p = (self.fw / self.w).clamp(0.0, 1.0);
        let v = (self.fw2 * (1.0 - 2.0 * p) + p * p * self.w2).max(0.0) / (self.w * self.w);
        Ok((p, v))
    }

    fn binomial(&self) -> (f64, f64) {
        let m = self.n as f64;
        let p = self.hits as f64 / m;
        (p, p * (1.0 - p) / m)
    }

    fn point(&self, method: Method) -> Option<RunningPoint> {
        let (p, v) = match method {
            Method::Naive => self.binomial(),
            _ => self.self_normalized().ok()?,
        };
        Some(RunningPoint {
            samples: self.n,
            p_hat: p,
            sigma_hat: v.sqrt(),
        })
    }
}

/// Running points at the given prefix lengths.
fn running_series(samples: &[(bool, f64)], checkpoints: &[usize], method: Method) -> Vec<RunningPoint> {
    let mut sums = Sums::default();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    for (i, &(f, w)) in samples.iter().enumerate() {
        sums.push(f, w);
        while next.peek().is_some_and(|&&c| c == i + 1) {
            next.next();
            out.extend(sums.point(method));
        }
    }
    out
}

fn even_checkpoints(m: usize) -> Vec<usize> {
    let n = RUNNING_POINTS.min(m);
    let mut pts: Vec<usize> = (1..=n).map(|i| (i * m).div_ceil(n)).collect();
    pts.dedup();
    pts
}

/// Naive Monte Carlo with `m` samples from the nominal.
pub fn naive_mc<M: SampleModel + ?Sized>(model: &M, m: usize, seed: u64, exec: Execution) -> Result<Estimate, EstimatorError> {
    if m == 0 {
        return Err(EstimatorError::InvalidParameter {
            name: "m",
            reason: "must be at least 1".into(),
        });
    }
    let start = Instant::now();
    let nominal = model.components() - 1;
    let records = exec.map(m, |j| {
        let (mut rng, _) = sample_rngs(seed, j as u64);
        let ev = model.evaluate(nominal, &mut rng);
        (ev.hit || ev.domain_exit, ev.domain_exit)
    });
    let samples: Vec<(bool, f64)> = records.iter().map(|r| (r.0, 1.0)).collect();
    let exits = records.iter().filter(|r| r.1).count();
    let mut sums = Sums::default();
    for &(f, w) in &samples {
        sums.push(f, w);
    }
    let (p, v) = sums.binomial();
    let mut weights = vec![0.0; model.components()];
    weights[nominal] = 1.0;
    Ok(Estimate {
        method: Method::Naive,
        p_hat: p,
        v_hat: v,
        sigma_hat: v.sqrt(),
        samples_used: m,
        trace: vec![TraceRecord {
            batch: 1,
            samples: m,
            p_hat: p,
            sigma_hat: v.sqrt(),
            alpha: weights.clone(),
            max_ratio: 1.0,
            domain_exits: exits,
        }],
        running: running_series(&samples, &even_checkpoints(m), Method::Naive),
        final_weights: weights,
        domain_exits: exits,
        wall_time: start.elapsed().as_secs_f64(),
        seed,
    })
}

/// Importance sampling from a fixed mixture: `m` samples, no weight update.
pub fn is_fixed<M: SampleModel + ?Sized>(
    model: &M,
    weights: &[f64],
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<Estimate, EstimatorError> {
    let settings = AisSettings {
        k: m,
        l: 1,
        c: 0.0,
        defensive_floor: 0.0,
        gradient_scale: GradientScale::RunningRms,
    };
    run_mixture(model, weights, &settings, seed, exec, Method::Is)
}

/// Adaptive mixture importance sampling: `l` batches of `k` samples with a
/// mirror-descent weight update after each batch.
pub fn ais_estimate<M: SampleModel + ?Sized>(
    model: &M,
    weights: &[f64],
    settings: &AisSettings,
    seed: u64,
    exec: Execution,
) -> Result<Estimate, EstimatorError> {
    run_mixture(model, weights, settings, seed, exec, Method::Ais)
}

fn check_weights(weights: &[f64], components: usize) -> Result<(), EstimatorError> {
    if weights.len() != components {
        return Err(EstimatorError::InvalidParameter {
            name: "weights",
            reason: format!("expected {components} weights, got {}", weights.len()),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(EstimatorError::InvalidParameter {
            name: "weights",
            reason: format!("not on the simplex (sum {sum})"),
        });
    }
    if !(weights[components - 1] > 0.0) {
        return Err(EstimatorError::InvalidParameter {
            name: "weights",
            reason: "nominal weight must be positive".into(),
        });
    }
    Ok(())
}

fn run_mixture<M: SampleModel + ?Sized>(
    model: &M,
    weights: &[f64],
    settings: &AisSettings,
    seed: u64,
    exec: Execution,
    method: Method,
) -> Result<Estimate, EstimatorError> {
    if settings.k == 0 || settings.l == 0 {
        return Err(EstimatorError::InvalidParameter {
            name: "k, l",
            reason: "must be at least 1".into(),
        });
    }
    if !(0.0..1.0).contains(&settings.defensive_floor) {
        return Err(EstimatorError::InvalidParameter {
            name: "defensive_floor",
            reason: "must lie in [0, 1)".into(),
        });
    }
    check_weights(weights, model.components())?;
    let start = Instant::now();
    let mut state = MirrorDescent::new(weights, settings.c, settings.defensive_floor, settings.gradient_scale);
    let mut samples: Vec<(bool, f64)> = Vec::with_capacity(settings.k * settings.l);
    let mut sums = Sums::default();
    let mut trace = Vec::with_capacity(settings.l);
    for i in 1..=settings.l {
        let alpha = state.alpha.clone();
        let base = ((i - 1) * settings.k) as u64;
        let batch = exec.map(settings.k, |j| evaluate_sample(model, &alpha, base + j as u64, seed));
        for r in &batch {
            let w = r.log_w.exp();
            samples.push((r.f, w));
            sums.push(r.f, w);
            sums.exits += usize::from(r.domain_exit);
        }
        if method == Method::Ais {
            state.step(&batch, i);
        }
        let (p, v) = sums.self_normalized().unwrap_or((f64::NAN, f64::NAN));
        trace.push(TraceRecord {
            batch: i,
            samples: sums.n,
            p_hat: p,
            sigma_hat: v.sqrt(),
            alpha: state.alpha.clone(),
            max_ratio: sums.max_ratio,
            domain_exits: sums.exits,
        });
    }
    let (p, v) = sums.self_normalized()?;
    let checkpoints: Vec<usize> = if method == Method::Ais {
        trace.iter().map(|t| t.samples).collect()
    } else {
        even_checkpoints(samples.len())
    };
    Ok(Estimate {
        method,
        p_hat: p,
        v_hat: v,
        sigma_hat: v.sqrt(),
        samples_used: sums.n,
        trace,
        running: running_series(&samples, &checkpoints, method),
        final_weights: state.alpha,
        domain_exits: sums.exits,
        wall_time: start.elapsed().as_secs_f64(),
        seed,
    })
}

/// Mirror-descent state on the weight simplex. The nominal is the last
/// component and is held at or above the defensive floor.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorDescent {
    pub alpha: Vec<f64>,
    alpha_tilde: Vec<f64>,
    c: f64,
    floor: f64,
    scale_rule: GradientScale,
    /// Running max or running sum of squares of the gradient magnitude.
    scale: f64,
    updates: usize,
}

impl MirrorDescent {
    pub fn new(alpha: &[f64], c: f64, floor: f64, scale_rule: GradientScale) -> Self {
        let mut s = Self {
            alpha: alpha.to_vec(),
            alpha_tilde: Vec::new(),
            c,
            floor,
            scale_rule,
            scale: 0.0,
            updates: 0,
        };
        s.project();
        s
    }

    /// Gradient of the per-sample second moment in the weights,
    /// `g_d = −(1/k) Σ f w² q_d / Q`, clipped in magnitude.
    pub fn gradient(batch: &[SampleRecord], components: usize) -> Vec<f64> {
        let k = batch.len() as f64;
        (0..components)
            .map(|d| {
                // w² q_d / Q = exp(3 ln w + ln q_d − ln p)
                let terms: Vec<f64> = batch
                    .iter()
                    .filter(|r| r.f)
                    .map(|r| 3.0 * r.log_w + r.log_ratios[d])
                    .collect();
                if terms.is_empty() {
                    return 0.0;
                }
                let log_g = log_sum_exp(&terms) - k.ln();
                -log_g.min(GRADIENT_CLIP.ln()).exp()
            })
            .collect()
    }

    /// One update with the batch drawn at iteration `i` (1-based).
    pub fn step(&mut self, batch: &[SampleRecord], i: usize) {
        if batch.is_empty() {
            return;
        }
        let g = Self::gradient(batch, self.alpha.len());
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax == 0.0 {
            return;
        }
        self.updates += 1;
        let scale = match self.scale_rule {
            GradientScale::RunningMax => {
                self.scale = self.scale.max(gmax);
                self.scale
            }
            GradientScale::RunningRms => {
                self.scale += gmax * gmax;
                (self.scale / self.updates as f64).sqrt()
            }
        };
        let eta = self.c / (i as f64).sqrt();
        for (a, gd) in self.alpha_tilde.iter_mut().zip(&g) {
            *a -= eta * gd / scale;
        }
        let mx = self.alpha_tilde.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.alpha_tilde.iter().map(|a| (a - mx).exp()).collect();
        let total: f64 = e.iter().sum();
        self.alpha = e.iter().map(|v| v / total).collect();
        self.project();
    }

    /// Floor clamp on the nominal weight, renormalization and resync of the
    /// mirrored weights.
    fn project(&mut self) {
        let n = self.alpha.len();
        let last = n - 1;
        if self.alpha[last] < self.floor {
            let rest: f64 = self.alpha[..last].iter().sum();
            let scale = if rest > 0.0 { (1.0 - self.floor) / rest } else { 0.0 };
            for a in &mut self.alpha[..last] {
                *a *= scale;
            }
            self.alpha[last] = self.floor;
        }
        let total: f64 = self.alpha.iter().sum();
        for a in &mut self.alpha {
            *a /= total;
        }
        if self.alpha[last] < self.floor {
            // renormalization rounding
            self.alpha[last] = self.floor;
        }
        self.alpha_tilde = self.alpha.iter().map(|a| a.ln()).collect();
    }
}

/// The airplane (or any tracked plant) sampling problem: trajectory noise
/// from a mixture, LQG closed-loop rollout, swept collision check.
pub struct TrajectoryModel<'a> {
    pub tracker: &'a Tracker,
    pub checker: &'a CollisionChecker,
    pub mixture: &'a MixtureSpec,
    pub margin: f64,
}

impl TrajectoryModel<'_> {
    fn log_ratios(&self, noise: &TrajectoryNoise) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .mixture
            .components
            .iter()
            .map(|c| c.spec.log_ratio_on_blocks(&self.mixture.nominal, &c.active_blocks, noise))
            .collect();
        out.push(0.0);
        out
    }
}

impl SampleModel for TrajectoryModel<'_> {
    fn components(&self) -> usize {
        self.mixture.len()
    }

    fn evaluate(&self, component: usize, rng: &mut ChaCha8Rng) -> Evaluation {
        let spec: &TrajectoryNoiseSpec = self.mixture.component_spec(component);
        let noise = spec.sample(rng);
        let rollout = self.tracker.rollout(&noise);
        let swept = self.checker.sweep(self.tracker.dynamics.as_ref(), &rollout, self.margin);
        Evaluation {
            hit: swept.collided,
            domain_exit: swept.domain_exit || rollout.domain_exit,
            log_ratios: self.log_ratios(&noise),
        }
    }
}

/// One-dimensional problem with an analytic answer: `p = N(0, 1)`, event
/// `x > threshold`, Gaussian proposal components plus the nominal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTail {
    pub threshold: f64,
    pub nominal: GaussianSpec,
    /// Proposal components, excluding the nominal.
    pub proposals: Vec<GaussianSpec>,
}

impl GaussianTail {
    pub fn new(threshold: f64, proposals: &[(f64, f64)]) -> Self {
        use nalgebra::{DMatrix, DVector};
        let proposals = proposals
            .iter()
            .map(|&(m, sd)| {
                GaussianSpec::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, sd * sd))
                    .expect("positive standard deviation")
            })
            .collect();
        Self {
            threshold,
            nominal: GaussianSpec::standard(1),
            proposals,
        }
    }
}

impl SampleModel for GaussianTail {
    fn components(&self) -> usize {
        self.proposals.len() + 1
    }

    fn evaluate(&self, component: usize, rng: &mut ChaCha8Rng) -> Evaluation {
        let spec = self.proposals.get(component).unwrap_or(&self.nominal);
        let x = spec.sample(rng);
        let lp = self.nominal.log_density_unchecked(x.as_slice());
        let mut log_ratios: Vec<f64> = self
            .proposals
            .iter()
            .map(|q| q.log_density_unchecked(x.as_slice()) - lp)
            .collect();
        log_ratios.push(0.0);
        Evaluation {
            hit: x[0] > self.threshold,
            domain_exit: false,
            log_ratios,
        }
    }
}
