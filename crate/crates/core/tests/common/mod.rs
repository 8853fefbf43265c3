#![allow(dead_code)]

use std::path::PathBuf;

use cpest::pipeline::Problem;
use cpest::scenario::{load_scenario, Scenario, ScenarioFile};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn scenario_file(name: &str) -> ScenarioFile {
    load_scenario(scenario_path(name)).unwrap().resolved
}

pub fn problem(file: ScenarioFile) -> Problem {
    Problem::new(Scenario::from_file(file).unwrap()).unwrap()
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `P(N(mean, sd²) > threshold)` by quadrature of the density.
pub fn gaussian_tail_quadrature(mean: f64, sd: f64, threshold: f64) -> f64 {
    let z0 = (threshold - mean) / sd;
    simpson(std_normal_pdf, z0, z0.max(0.0) + 40.0, 400_000)
}

/// Per-sample second moment `∫_{x>th} p² / (α q + (1−α) p)` for nominal
/// `p = N(0,1)` and proposal `q = N(m, s²)`.
pub fn tail_second_moment(alpha: f64, th: f64, m: f64, s: f64) -> f64 {
    let q = |x: f64| std_normal_pdf((x - m) / s) / s;
    simpson(
        |x| {
            let p = std_normal_pdf(x);
            p * p / (alpha * q(x) + (1.0 - alpha) * p)
        },
        th,
        th + 14.0,
        20_000,
    )
}

/// Grid minimizer of [`tail_second_moment`] over `α ∈ [0, max_alpha]`.
pub fn tail_alpha_star(th: f64, m: f64, s: f64, max_alpha: f64) -> f64 {
    let n = 9_000;
    (0..=n)
        .map(|i| max_alpha * i as f64 / n as f64)
        .map(|a| (a, tail_second_moment(a, th, m, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation.
pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
