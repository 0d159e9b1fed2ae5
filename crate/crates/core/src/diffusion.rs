//! Noise schedule and the DDPM forward/reverse transition primitives.
//!
//! Steps are 1-based: `k = 1` is the last (cleanest) reverse step and
//! `k = K` is pure noise. Tables are stored 0-based internally.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::grid::TrafficGrid;

/// Convention for the reverse-transition variance `sigma_k^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// `sigma_k^2 = beta_k`.
    Beta,
    /// `sigma_k^2 = (1 - abar_{k-1}) / (1 - abar_k) * beta_k`.
    #[default]
    BetaTilde,
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceMode::Beta => "beta",
            VarianceMode::BetaTilde => "beta_tilde",
        })
    }
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(VarianceMode::Beta),
            "beta_tilde" | "beta-tilde" => Ok(VarianceMode::BetaTilde),
            other => Err(invalid(format!("unknown variance mode `{other}`"))),
        }
    }
}

/// Per-step `beta`, `alpha`, cumulative `alpha_bar` and reverse variance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
    variance_mode: VarianceMode,
}

impl NoiseSchedule {
    /// Builds the derived tables from an explicit beta sequence.
    pub fn from_betas(beta: Vec<f64>, variance_mode: VarianceMode) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma2 = (0..beta.len())
            .map(|i| match variance_mode {
                VarianceMode::Beta => beta[i],
                VarianceMode::BetaTilde => {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma2,
            variance_mode,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn variance_mode(&self) -> VarianceMode {
        self.variance_mode
    }

    /// Same betas with a different variance convention.
    pub fn with_variance_mode(&self, mode: VarianceMode) -> Self {
        Self::from_betas(self.beta.clone(), mode).expect("betas already validated")
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_steps() {
            return Err(Error::InvalidStep {
                step: k,
                reason: format!("must lie in 1..={}", self.n_steps()),
            });
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    pub fn sigma2(&self, k: usize) -> f64 {
        self.sigma2[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `beta_k = ((K-k)/(K-1) sqrt(beta_1) + (k-1)/(K-1) sqrt(beta_K))^2`,
/// with both endpoints set to the given values exactly.
pub fn quadratic_schedule(
    n_steps: usize,
    beta1: f64,
    beta_k: f64,
    variance_mode: VarianceMode,
) -> Result<NoiseSchedule> {
    if n_steps < 2 {
        return Err(invalid("quadratic schedule needs at least 2 steps"));
    }
    if !(beta1 > 0.0 && beta1 <= beta_k && beta_k < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta1 <= betaK < 1, got beta1={beta1}, betaK={beta_k}"
        )));
    }
    let span = (n_steps - 1) as f64;
    let (lo, hi) = (beta1.sqrt(), beta_k.sqrt());
    let mut beta: Vec<f64> = (1..=n_steps)
        .map(|k| {
            let r = ((n_steps - k) as f64 / span) * lo + ((k - 1) as f64 / span) * hi;
            r * r
        })
        .collect();
    beta[0] = beta1;
    beta[n_steps - 1] = beta_k;
    NoiseSchedule::from_betas(beta, variance_mode)
}

fn check_shape(a: &TrafficGrid, b: &TrafficGrid) -> Result<()> {
    a.ensure_same_shape(b)
}

/// `sqrt(abar_k) x0 + sqrt(1 - abar_k) noise`.
pub fn q_sample(
    x0: &TrafficGrid,
    k: usize,
    noise: &TrafficGrid,
    sched: &NoiseSchedule,
) -> Result<TrafficGrid> {
    sched.check_step(k)?;
    check_shape(x0, noise)?;
    let a = sched.alpha_bar(k).sqrt();
    let b = (1.0 - sched.alpha_bar(k)).sqrt();
    x0.zip_map(noise, |x, e| a * x + b * e)
}

/// Reverse-transition mean
/// `(x_k - (1 - alpha_k) / sqrt(1 - abar_k) * eps_hat) / sqrt(alpha_k)`.
pub fn reverse_mean(
    x_k: &TrafficGrid,
    eps_hat: &TrafficGrid,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<TrafficGrid> {
    sched.check_step(k)?;
    check_shape(x_k, eps_hat)?;
    let coef = (1.0 - sched.alpha(k)) / (1.0 - sched.alpha_bar(k)).sqrt();
    let inv = 1.0 / sched.alpha(k).sqrt();
    x_k.zip_map(eps_hat, |x, e| inv * (x - coef * e))
}

/// Score from predicted noise: `-eps_hat / sqrt(1 - abar_k)`.
pub fn score_from_noise(eps_hat: &TrafficGrid, k: usize, sched: &NoiseSchedule) -> Result<TrafficGrid> {
    sched.check_step(k)?;
    let s = (1.0 - sched.alpha_bar(k)).sqrt();
    Ok(eps_hat.map(|e| -e / s))
}

/// Inverse of [`score_from_noise`]: `-sqrt(1 - abar_k) * score`.
pub fn noise_from_score(score: &TrafficGrid, k: usize, sched: &NoiseSchedule) -> Result<TrafficGrid> {
    sched.check_step(k)?;
    let s = (1.0 - sched.alpha_bar(k)).sqrt();
    Ok(score.map(|v| -v * s))
}

/// Draws `x_{k-1} = mean + sigma_k z`; the step `k = 1` returns `mean`
/// unchanged and consumes no randomness.
pub fn reverse_step<R: Rng + ?Sized>(
    mean: &TrafficGrid,
    k: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrafficGrid> {
    sched.check_step(k)?;
    if k == 1 {
        return Ok(mean.clone());
    }
    Ok(reverse_step_with_sigma(mean, sched.sigma2(k).sqrt(), rng))
}

/// `mean + sigma z` with explicit `sigma`; `sigma = 0` returns `mean`.
pub fn reverse_step_with_sigma<R: Rng + ?Sized>(
    mean: &TrafficGrid,
    sigma: f64,
    rng: &mut R,
) -> TrafficGrid {
    if sigma == 0.0 {
        return mean.clone();
    }
    mean.map(|m| {
        let z: f64 = rng.sample(StandardNormal);
        m + sigma * z
    })
}

/// Standard-normal grid.
pub fn gaussian_grid<R: Rng + ?Sized>(n_nodes: usize, n_steps: usize, rng: &mut R) -> TrafficGrid {
    TrafficGrid::from_raw(
        n_nodes,
        n_steps,
        (0..n_nodes * n_steps)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// Sinusoidal embedding of the diffusion step: the first half of the
/// vector holds `sin(k * f_j)`, the second half `cos(k * f_j)`, with
/// `f_j = 10^(-4 j / (dim/2 - 1))`.
pub fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|j| 10f64.powf(-4.0 * j as f64 / denom))
        .collect();
    let k = k as f64;
    freqs
        .iter()
        .map(|f| (k * f).sin())
        .chain(freqs.iter().map(|f| (k * f).cos()))
        .collect()
}
