//! Feedback-controlled classifier-free guidance.
//!
//! The conditional denoiser is modelled as a mixture
//! `(1 - pi) p(x) + pi p(x | c)` of the prior and the true conditional.
//! Undoing that contamination gives a guidance scale that depends on the
//! posterior `p(c | x_k)`:
//!
//! ```text
//! lambda = p / (p - (1 - pi))
//! ```
//!
//! The posterior is tracked in log space along the reverse chain from the
//! Gaussian log-likelihood ratio of the conditional and unconditional
//! reverse transitions, tempered by `tau` and shifted by `delta` per step.
//! `delta` and `tau` are derived from two schedule times `t0`, `t1`.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::grid::TrafficGrid;

/// Upper clamp applied to a log-posterior before exponentiation.
pub const LOG_POSTERIOR_CLAMP: f64 = 30.0;

/// How the per-node guidance scale is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    /// Posterior-feedback scale.
    Fence,
    /// Constant scale for every node and step.
    FixedCfg(f64),
    /// Unconditional sampling (scale 0).
    None,
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidanceMode::Fence => f.write_str("fence"),
            GuidanceMode::FixedCfg(l) => write!(f, "cfg:{l}"),
            GuidanceMode::None => f.write_str("none"),
        }
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fence" => Ok(GuidanceMode::Fence),
            "none" => Ok(GuidanceMode::None),
            _ => {
                let scale = s
                    .strip_prefix("cfg:")
                    .ok_or_else(|| invalid(format!("unknown guidance mode `{s}`")))?;
                let v: f64 = scale
                    .parse()
                    .map_err(|_| invalid(format!("bad guidance scale `{scale}`")))?;
                if !v.is_finite() {
                    return Err(invalid("guidance scale must be finite"));
                }
                Ok(GuidanceMode::FixedCfg(v))
            }
        }
    }
}

/// Granularity at which posteriors drive the scale in `Fence` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PosteriorScope {
    /// Per-node posteriors averaged inside attention clusters.
    #[default]
    Clustered,
    /// One posterior for the whole grid, updated with node-averaged
    /// squared distances (the single-cluster limit).
    Global,
    /// Each node's own posterior, no aggregation.
    PerNode,
}

impl fmt::Display for PosteriorScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosteriorScope::Clustered => "clustered",
            PosteriorScope::Global => "global",
            PosteriorScope::PerNode => "per-node",
        })
    }
}

impl FromStr for PosteriorScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clustered" => Ok(PosteriorScope::Clustered),
            "global" => Ok(PosteriorScope::Global),
            "per-node" | "per_node" => Ok(PosteriorScope::PerNode),
            other => Err(invalid(format!("unknown posterior scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Prior confidence that the conditional model follows the condition.
    pub pi: f64,
    /// Scale reached at the activation time `t0`.
    pub lambda_ref: f64,
    /// Activation time (0 = clean, 1 = pure noise).
    pub t0: f64,
    /// Peak time used to set the temperature.
    pub t1: f64,
    pub alpha_scale: f64,
    /// Saturation value of the scale.
    pub lambda_max: f64,
    pub mode: GuidanceMode,
    pub scope: PosteriorScope,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            pi: 0.5,
            lambda_ref: 1.6,
            t0: 0.8,
            t1: 0.5,
            alpha_scale: 10.0,
            lambda_max: 10.0,
            mode: GuidanceMode::Fence,
            scope: PosteriorScope::Clustered,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(invalid(format!("pi {} outside (0, 1]", self.pi)));
        }
        if !(self.lambda_ref > 1.0) || !self.lambda_ref.is_finite() {
            return Err(invalid(format!("lambda_ref {} must exceed 1", self.lambda_ref)));
        }
        if !(self.lambda_max >= 1.0) || !self.lambda_max.is_finite() {
            return Err(invalid(format!("lambda_max {} must be at least 1", self.lambda_max)));
        }
        for (name, t) in [("t0", self.t0), ("t1", self.t1)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(invalid(format!("{name} {t} outside (0, 1)")));
            }
        }
        if !(self.alpha_scale > 0.0) || !self.alpha_scale.is_finite() {
            return Err(invalid("alpha_scale must be positive"));
        }
        Ok(())
    }
}

/// Maps a schedule time `t` to the step `round(t * K)`, clamped to `1..=K`.
pub fn time_to_step(t: f64, n_steps: usize) -> usize {
    ((t * n_steps as f64).round() as usize).clamp(1, n_steps)
}

/// `delta = log((1 - pi) lambda_ref / (lambda_ref - 1)) / ((1 - t0) K)`.
///
/// At `pi = 1` the log argument is zero and the result is `-inf`.
pub fn calibrate_delta(cfg: &GuidanceConfig, n_steps: usize) -> Result<f64> {
    if !(cfg.lambda_ref > 1.0) {
        return Err(invalid(format!("lambda_ref {} must exceed 1", cfg.lambda_ref)));
    }
    if !(cfg.t0 < 1.0) {
        return Err(invalid(format!("t0 {} must be below 1", cfg.t0)));
    }
    if n_steps == 0 {
        return Err(invalid("step count must be positive"));
    }
    let arg = (1.0 - cfg.pi) * cfg.lambda_ref / (cfg.lambda_ref - 1.0);
    Ok(arg.ln() / ((1.0 - cfg.t0) * n_steps as f64))
}

/// `tau = |2 sigma2_t1 delta / alpha_scale|`.
pub fn calibrate_tau(cfg: &GuidanceConfig, delta: f64, sigma2_t1: f64) -> Result<f64> {
    if !(sigma2_t1 > 0.0) {
        return Err(invalid(format!("sigma^2 at t1 must be positive, got {sigma2_t1}")));
    }
    Ok((2.0 * sigma2_t1 * delta / cfg.alpha_scale).abs())
}

/// Offset and temperature of the posterior update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackCalibration {
    pub delta: f64,
    pub tau: f64,
}

impl FeedbackCalibration {
    /// Derives both constants, reading `sigma^2` at step `round(t1 K)`.
    pub fn from_schedule(cfg: &GuidanceConfig, sched: &NoiseSchedule) -> Result<Self> {
        let delta = calibrate_delta(cfg, sched.n_steps())?;
        let sigma2 = sched.sigma2(time_to_step(cfg.t1, sched.n_steps()));
        let tau = calibrate_tau(cfg, delta, sigma2)?;
        Ok(Self { delta, tau })
    }

    pub fn is_finite(&self) -> bool {
        self.delta.is_finite() && self.tau.is_finite()
    }
}

/// Unclamped scale `r / (r - (1 - pi))` from a posterior ratio
/// `r = p(c | x) / p(c)`.
pub fn feedback_scale(ratio: f64, pi: f64) -> f64 {
    ratio / (ratio - (1.0 - pi))
}

/// Scale for a log-posterior, with the prior `p(c)` taken as constant.
///
/// Above the pole (`p > 1 - pi`) the value is clamped to `[1, lambda_max]`;
/// at or below it the scale saturates at `lambda_max`. With `pi = 1` the
/// formula is identically 1.
pub fn guidance_scale(log_posterior: f64, pi: f64, lambda_max: f64) -> f64 {
    let threshold = 1.0 - pi;
    if threshold <= 0.0 {
        return 1.0;
    }
    let p = log_posterior.min(LOG_POSTERIOR_CLAMP).exp();
    if p > threshold {
        feedback_scale(p, pi).clamp(1.0, lambda_max)
    } else {
        lambda_max
    }
}

/// Per-node squared distance difference
/// `||row_i(x_prev - mean_cond)||^2 - ||row_i(x_prev - mean_uncond)||^2`.
pub fn node_distance_gaps(
    x_prev: &TrafficGrid,
    mean_cond: &TrafficGrid,
    mean_uncond: &TrafficGrid,
) -> Result<Vec<f64>> {
    x_prev.ensure_same_shape(mean_cond)?;
    x_prev.ensure_same_shape(mean_uncond)?;
    Ok((0..x_prev.n_nodes())
        .map(|i| {
            let (x, c, u) = (x_prev.row(i), mean_cond.row(i), mean_uncond.row(i));
            let dc: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            let du: f64 = x.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
            dc - du
        })
        .collect())
}

/// Log-posterior state of one reverse trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTracker {
    log_posterior: Vec<f64>,
    tau: f64,
    delta: f64,
}

impl PosteriorTracker {
    /// `len` entries, all starting at log 1 = 0.
    pub fn new(len: usize, calibration: FeedbackCalibration) -> Self {
        Self {
            log_posterior: vec![0.0; len],
            tau: calibration.tau,
            delta: calibration.delta,
        }
    }

    pub fn log_posterior(&self) -> &[f64] {
        &self.log_posterior
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn check_sigma(k: usize, sched: &NoiseSchedule) -> Result<f64> {
        sched.check_step(k)?;
        let s2 = sched.sigma2(k);
        if !(s2 > 0.0) {
            return Err(Error::InvalidStep {
                step: k,
                reason: "reverse variance is zero".into(),
            });
        }
        Ok(s2)
    }

    /// Per-node update; the tracker must hold one entry per node.
    pub fn update(
        &mut self,
        x_prev: &TrafficGrid,
        mean_cond: &TrafficGrid,
        mean_uncond: &TrafficGrid,
        k: usize,
        sched: &NoiseSchedule,
    ) -> Result<()> {
        let s2 = Self::check_sigma(k, sched)?;
        if self.log_posterior.len() != x_prev.n_nodes() {
            return Err(invalid(format!(
                "tracker holds {} nodes, grid has {}",
                self.log_posterior.len(),
                x_prev.n_nodes()
            )));
        }
        let gaps = node_distance_gaps(x_prev, mean_cond, mean_uncond)?;
        let w = self.tau / (2.0 * s2);
        for (lp, g) in self.log_posterior.iter_mut().zip(gaps) {
            *lp = *lp - w * g - self.delta;
        }
        Ok(())
    }

    /// Single-entry update driven by the node-averaged distance gap.
    pub fn update_global(
        &mut self,
        x_prev: &TrafficGrid,
        mean_cond: &TrafficGrid,
        mean_uncond: &TrafficGrid,
        k: usize,
        sched: &NoiseSchedule,
    ) -> Result<()> {
        let s2 = Self::check_sigma(k, sched)?;
        if self.log_posterior.len() != 1 {
            return Err(invalid("global tracker must hold exactly one entry"));
        }
        let gaps = node_distance_gaps(x_prev, mean_cond, mean_uncond)?;
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let w = self.tau / (2.0 * s2);
        self.log_posterior[0] = self.log_posterior[0] - w * mean_gap - self.delta;
        Ok(())
    }
}

/// Functional form of [`PosteriorTracker::update`].
pub fn posterior_update(
    tracker: &PosteriorTracker,
    x_prev: &TrafficGrid,
    mean_cond: &TrafficGrid,
    mean_uncond: &TrafficGrid,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<PosteriorTracker> {
    let mut next = tracker.clone();
    next.update(x_prev, mean_cond, mean_uncond, k, sched)?;
    Ok(next)
}

/// `eps_uncond + lambda_i (eps_cond - eps_uncond)` with `lambda_i` applied
/// to row `i`.
pub fn combine_scores(
    eps_uncond: &TrafficGrid,
    eps_cond: &TrafficGrid,
    lambda_per_node: &[f64],
) -> Result<TrafficGrid> {
    eps_uncond.ensure_same_shape(eps_cond)?;
    if lambda_per_node.len() != eps_uncond.n_nodes() {
        return Err(invalid(format!(
            "{} scales for {} nodes",
            lambda_per_node.len(),
            eps_uncond.n_nodes()
        )));
    }
    let t = eps_uncond.n_steps();
    let values = eps_uncond
        .values()
        .iter()
        .zip(eps_cond.values())
        .enumerate()
        .map(|(idx, (&u, &c))| u + lambda_per_node[idx / t] * (c - u))
        .collect();
    Ok(TrafficGrid::from_raw(eps_uncond.n_nodes(), t, values))
}

/// Per-node L2 norm of the score difference
/// `||row_i(eps_cond - eps_uncond)|| / sqrt(1 - abar_k)`.
pub fn guidance_gradient_norm(
    eps_uncond: &TrafficGrid,
    eps_cond: &TrafficGrid,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(k)?;
    eps_uncond.ensure_same_shape(eps_cond)?;
    let s = (1.0 - sched.alpha_bar(k)).sqrt();
    Ok((0..eps_uncond.n_nodes())
        .map(|i| {
            let sq: f64 = eps_cond
                .row(i)
                .iter()
                .zip(eps_uncond.row(i))
                .map(|(c, u)| (c - u) * (c - u))
                .sum();
            sq.sqrt() / s
        })
        .collect())
}
