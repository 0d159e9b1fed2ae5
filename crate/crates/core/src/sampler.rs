//! Guided reverse-diffusion imputation.
//!
//! Each trajectory starts from `x_K ~ N(0, I)` and walks `k = K..1`. At
//! every step both backends are queried, nodes are clustered on the
//! conditional backend's attention, per-node scales are derived from the
//! tracked log-posteriors, the guided noise drives one reverse step, and
//! the posteriors are updated from the conditional and unconditional
//! reverse means.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clustering::{cluster_log_posterior, cluster_scales, default_cluster_count, kmeans, ClusterAssignment, DEFAULT_MAX_ITER};
use crate::data::write_grid_csv;
use crate::denoiser::{ConditioningContext, Denoiser};
use crate::diffusion::{gaussian_grid, q_sample, reverse_mean, reverse_step, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::grid::{MaskMatrix, TrafficGrid};
use crate::guidance::{
    combine_scores, guidance_gradient_norm, guidance_scale, FeedbackCalibration, GuidanceConfig, GuidanceMode,
    PosteriorScope, PosteriorTracker,
};

/// Treatment of observed coordinates during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Anchoring {
    /// Observations act only through the conditioning context.
    #[default]
    Free,
    /// Observed coordinates are overwritten by a forward-noised copy of the
    /// observation after every step.
    Clamp,
}

impl fmt::Display for Anchoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Anchoring::Free => "free",
            Anchoring::Clamp => "clamp",
        })
    }
}

impl FromStr for Anchoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(Anchoring::Free),
            "clamp" => Ok(Anchoring::Clamp),
            other => Err(invalid(format!("unknown anchoring `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// `None` selects `max(1, round(N / 20))`.
    pub n_clusters: Option<usize>,
    /// Re-run k-means every this many steps.
    pub recluster_every: usize,
    pub anchoring: Anchoring,
    pub record_trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 10,
            seed: 0,
            n_clusters: None,
            recluster_every: 1,
            anchoring: Anchoring::Free,
            record_trace: true,
        }
    }
}

/// One `(trajectory, step, node)` row of the guidance trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub trajectory: usize,
    pub k: usize,
    pub node: usize,
    pub lambda: f64,
    /// Value in force when the step's scale was computed.
    pub log_posterior: f64,
    pub guidance_norm: f64,
    /// Cluster label, when the mode groups nodes.
    pub cluster_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    pub samples: Vec<TrafficGrid>,
    pub mean_imputation: TrafficGrid,
    pub traces: Vec<TraceRecord>,
}

struct Trajectory {
    sample: TrafficGrid,
    trace: Vec<TraceRecord>,
}

/// Per-node scales and labels for one step.
fn scales_for_step(
    gcfg: &GuidanceConfig,
    tracker: &PosteriorTracker,
    clusters: Option<&ClusterAssignment>,
    n: usize,
) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    Ok(match gcfg.mode {
        GuidanceMode::None => (vec![0.0; n], vec![None; n]),
        GuidanceMode::FixedCfg(l) => (vec![l; n], vec![None; n]),
        GuidanceMode::Fence => match gcfg.scope {
            PosteriorScope::Global => {
                let l = guidance_scale(tracker.log_posterior()[0], gcfg.pi, gcfg.lambda_max);
                (vec![l; n], vec![Some(0); n])
            }
            PosteriorScope::PerNode => (
                tracker
                    .log_posterior()
                    .iter()
                    .map(|&lp| guidance_scale(lp, gcfg.pi, gcfg.lambda_max))
                    .collect(),
                (0..n).map(Some).collect(),
            ),
            PosteriorScope::Clustered => {
                let c = clusters.expect("clusters computed in clustered scope");
                let lp = cluster_log_posterior(tracker.log_posterior(), c)?;
                (cluster_scales(&lp, c, gcfg)?, c.labels().iter().map(|&l| Some(l)).collect())
            }
        },
    })
}

fn recluster(
    attention: Option<&Vec<f64>>,
    x_k: &TrafficGrid,
    n_clusters: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = x_k.n_nodes();
    if n_clusters == 1 {
        return Ok(ClusterAssignment::single(n));
    }
    if n_clusters == n {
        return Ok(ClusterAssignment::singletons(n));
    }
    let features: Vec<Vec<f64>> = match attention {
        Some(a) => a.chunks(n).map(|r| r.to_vec()).collect(),
        None => (0..n).map(|i| x_k.row(i).to_vec()).collect(),
    };
    kmeans(&features, n_clusters, seed, DEFAULT_MAX_ITER)
}

#[allow(clippy::too_many_arguments)]
fn run_trajectory(
    index: usize,
    cond: &dyn Denoiser,
    uncond: &dyn Denoiser,
    ctx_c: &ConditioningContext,
    ctx_u: &ConditioningContext,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
    calibration: Option<FeedbackCalibration>,
    n_clusters: usize,
) -> Result<Trajectory> {
    let (n, t) = ctx_c.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed ^ index as u64);
    let mut cluster_rng = ChaCha8Rng::seed_from_u64(scfg.seed ^ index as u64);
    cluster_rng.set_stream(1);

    let fence = gcfg.mode == GuidanceMode::Fence;
    let tracker_len = if fence && gcfg.scope == PosteriorScope::Global { 1 } else { n };
    let cal = calibration.unwrap_or(FeedbackCalibration { delta: 0.0, tau: 0.0 });
    let mut tracker = PosteriorTracker::new(tracker_len, cal);
    let track = fence && calibration.is_some_and(|c| c.is_finite());
    let clustered = fence && gcfg.scope == PosteriorScope::Clustered;

    let mut x = gaussian_grid(n, t, &mut rng);
    let mut clusters: Option<ClusterAssignment> = None;
    let mut trace = Vec::new();
    let k_max = sched.n_steps();
    let step_err = |k: usize, e: Error| Error::Backend {
        trajectory: index,
        step: k,
        source: Box::new(e),
    };

    for k in (1..=k_max).rev() {
        let pc = cond.predict(&x, k, ctx_c).map_err(|e| step_err(k, e))?;
        let pu = uncond.predict(&x, k, ctx_u).map_err(|e| step_err(k, e))?;

        if clustered && ((k_max - k) % scfg.recluster_every == 0 || clusters.is_none()) {
            let attention = pc.attention.as_ref().or(pu.attention.as_ref());
            clusters = Some(recluster(attention, &x, n_clusters, cluster_rng.random())?);
        }
        let (lambda, labels) = scales_for_step(gcfg, &tracker, clusters.as_ref(), n)?;
        let eps = combine_scores(&pu.eps, &pc.eps, &lambda)?;

        if scfg.record_trace {
            let norms = guidance_gradient_norm(&pu.eps, &pc.eps, k, sched)?;
            for i in 0..n {
                let lp = tracker.log_posterior()[if tracker_len == 1 { 0 } else { i }];
                trace.push(TraceRecord {
                    trajectory: index,
                    k,
                    node: i,
                    lambda: lambda[i],
                    log_posterior: lp,
                    guidance_norm: norms[i],
                    cluster_id: labels[i],
                });
            }
        }

        let mean = reverse_mean(&x, &eps, k, sched)?;
        let mut next = reverse_step(&mean, k, sched, &mut rng)?;
        if scfg.anchoring == Anchoring::Clamp {
            let noise = gaussian_grid(n, t, &mut rng);
            let anchored = if k > 1 {
                q_sample(ctx_c.observed(), k - 1, &noise, sched)?
            } else {
                ctx_c.observed().clone()
            };
            for (idx, &obs) in ctx_c.mask().entries().iter().enumerate() {
                if obs {
                    next.values_mut()[idx] = anchored.values()[idx];
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::Diverged { trajectory: index, step: k });
        }

        if track && sched.sigma2(k) > 0.0 {
            let mu_c = reverse_mean(&x, &pc.eps, k, sched)?;
            let mu_u = reverse_mean(&x, &pu.eps, k, sched)?;
            if tracker_len == 1 {
                tracker.update_global(&next, &mu_c, &mu_u, k, sched)?;
            } else {
                tracker.update(&next, &mu_c, &mu_u, k, sched)?;
            }
        }
        x = next;
    }
    Ok(Trajectory { sample: x, trace })
}

/// Draws `scfg.n_samples` imputations of the grid behind `observed`.
///
/// `cond` is queried with the observations, `uncond` with the empty
/// context. Trajectories run in parallel; output order and values do not
/// depend on the thread count.
pub fn impute(
    cond: &dyn Denoiser,
    uncond: &dyn Denoiser,
    observed: &TrafficGrid,
    mask: &MaskMatrix,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
    scfg: &SamplerConfig,
) -> Result<ImputationResult> {
    gcfg.validate()?;
    if scfg.n_samples == 0 {
        return Err(invalid("sample count must be positive"));
    }
    if scfg.recluster_every == 0 {
        return Err(invalid("recluster interval must be positive"));
    }
    let (n, t) = observed.shape();
    mask.ensure_shape((n, t))?;
    let n_clusters = scfg.n_clusters.unwrap_or_else(|| default_cluster_count(n));
    if n_clusters == 0 || n_clusters > n {
        return Err(invalid(format!("cluster count {n_clusters} must lie in 1..={n}")));
    }
    if let GuidanceMode::FixedCfg(l) = gcfg.mode {
        if !l.is_finite() {
            return Err(invalid("fixed guidance scale must be finite"));
        }
    }
    let ctx_c = ConditioningContext::conditional(observed, mask)?;
    let ctx_u = ConditioningContext::unconditional(n, t);
    let calibration = match gcfg.mode {
        GuidanceMode::Fence => Some(FeedbackCalibration::from_schedule(gcfg, sched)?),
        _ => None,
    };

    let runs: Vec<Result<Trajectory>> = (0..scfg.n_samples)
        .into_par_iter()
        .map(|i| run_trajectory(i, cond, uncond, &ctx_c, &ctx_u, sched, gcfg, scfg, calibration, n_clusters))
        .collect();
    let mut samples = Vec::with_capacity(scfg.n_samples);
    let mut traces = Vec::new();
    for r in runs {
        let tr = r?;
        samples.push(tr.sample);
        traces.extend(tr.trace);
    }
    let mean_imputation = ensemble_mean(&samples);
    Ok(ImputationResult {
        samples,
        mean_imputation,
        traces,
    })
}

/// Elementwise mean of equally shaped grids.
pub fn ensemble_mean(samples: &[TrafficGrid]) -> TrafficGrid {
    let (n, t) = samples[0].shape();
    let mut acc = vec![0.0; n * t];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    TrafficGrid::from_raw(n, t, acc)
}

pub const TRACE_HEADER: &str = "k,node,lambda,log_posterior,guidance_norm,cluster_id";

pub fn write_trace(mut w: impl Write, traces: &[TraceRecord]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in traces {
        let cid = r.cluster_id.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.k, r.node, r.lambda, r.log_posterior, r.guidance_norm, cid
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a trace written by [`write_trace`]. The file carries no
/// trajectory column, so a new trajectory is assumed wherever `k` rises.
pub fn read_trace(reader: impl Read) -> Result<Vec<TraceRecord>> {
    let bad = |line: usize, reason: String| Error::Parse {
        location: format!("trace line {line}"),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != TRACE_HEADER {
        return Err(bad(1, format!("expected header `{TRACE_HEADER}`")));
    }
    let mut out: Vec<TraceRecord> = Vec::new();
    let mut trajectory = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| bad(line, format!("bad number `{}`", &rec[j])))
        };
        let int = |j: usize| -> Result<usize> {
            rec[j].parse().map_err(|_| bad(line, format!("bad integer `{}`", &rec[j])))
        };
        let k = int(0)?;
        if out.last().is_some_and(|prev| k > prev.k) {
            trajectory += 1;
        }
        out.push(TraceRecord {
            trajectory,
            k,
            node: int(1)?,
            lambda: num(2)?,
            log_posterior: num(3)?,
            guidance_norm: num(4)?,
            cluster_id: if rec[5].is_empty() { None } else { Some(int(5)?) },
        });
    }
    Ok(out)
}

/// Path of the `i`-th sample grid next to a trace file.
pub fn sample_path(trace_path: &Path, i: usize) -> PathBuf {
    let stem = trace_path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    trace_path.with_file_name(format!("{stem}.sample{i:03}.csv"))
}

/// Writes the trace CSV and one grid CSV per sample; returns the sample
/// paths.
pub fn emit_trace(result: &ImputationResult, path: &Path) -> Result<Vec<PathBuf>> {
    if result.traces.is_empty() {
        return Err(invalid("no trace records to write"));
    }
    write_trace(BufWriter::new(File::create(path)?), &result.traces)?;
    let mut paths = Vec::with_capacity(result.samples.len());
    for (i, s) in result.samples.iter().enumerate() {
        let p = sample_path(path, i);
        write_grid_csv(BufWriter::new(File::create(&p)?), s, None)?;
        paths.push(p);
    }
    Ok(paths)
}
