//! Stages shared by the subcommands and the full `run` pipeline.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use fence_core::data::{load_grid, prepare_dataset, save_grid, DatasetSplit, Normalization, RawSeries};
use fence_core::denoiser::checkpoint::save_model;
use fence_core::denoiser::{finetune_conditional, train_unconditional, NeuralDenoiser, OracleDenoiser, OracleKind};
use fence_core::diffusion::NoiseSchedule;
use fence_core::guidance::GuidanceConfig;
use fence_core::masking::generate_mask;
use fence_core::metrics::{crps_dataset, per_node_metrics, point_metrics, PointMetrics};
use fence_core::oracle_world::{synthesize_series, GaussianOracleWorld};
use fence_core::sampler::{ensemble_mean, impute, write_trace, ImputationResult, SamplerConfig};
use fence_core::{GraphSpec, MaskMatrix, TrafficGrid};
use log::info;

use crate::config::{Backend, Settings};
use crate::error::CliError;

/// Denoiser pair plus the units it works in.
pub enum Models {
    Neural {
        cond: NeuralDenoiser,
        uncond: NeuralDenoiser,
        normalization: Normalization,
    },
    Oracle {
        world: GaussianOracleWorld,
        pi_true: f64,
    },
}

impl Models {
    fn shape(&self) -> (usize, usize) {
        match self {
            Models::Neural { cond, .. } => (cond.config().n_nodes, cond.config().n_steps),
            Models::Oracle { world, .. } => (world.n_nodes(), world.n_steps()),
        }
    }

    /// Imputes one grid given in data units; results come back in data
    /// units. Only entries set in `observed_mask` are read from `raw`.
    pub fn impute(
        &self,
        raw: &TrafficGrid,
        observed_mask: &MaskMatrix,
        sched: &NoiseSchedule,
        gcfg: &GuidanceConfig,
        scfg: &SamplerConfig,
    ) -> Result<ImputationResult, CliError> {
        if raw.shape() != self.shape() {
            return Err(CliError::Data(format!(
                "grid is {}x{} but the model expects {}x{}",
                raw.n_nodes(),
                raw.n_steps(),
                self.shape().0,
                self.shape().1
            )));
        }
        let mut result = match self {
            Models::Neural {
                cond,
                uncond,
                normalization,
            } => {
                let observed = normalization.apply(raw)?.masked(observed_mask)?;
                let mut r = impute(cond, uncond, &observed, observed_mask, sched, gcfg, scfg)?;
                for s in r.samples.iter_mut() {
                    *s = normalization.invert(s)?;
                }
                r.mean_imputation = normalization.invert(&r.mean_imputation)?;
                r
            }
            Models::Oracle { world, pi_true } => {
                let observed = raw.masked(observed_mask)?;
                let conditioned = world.clone().observe(&observed, observed_mask)?;
                let kind = if *pi_true < 1.0 {
                    OracleKind::Contaminated { pi_true: *pi_true }
                } else {
                    OracleKind::Conditional
                };
                let cond = OracleDenoiser::new(&conditioned, sched, kind)?;
                let uncond = OracleDenoiser::new(&conditioned, sched, OracleKind::Prior)?;
                impute(&cond, &uncond, &observed, observed_mask, sched, gcfg, scfg)?
            }
        };
        if !scfg.record_trace {
            result.traces.clear();
        }
        Ok(result)
    }
}

/// Grid CSV with the path in any error message.
pub fn read_grid(path: &Path) -> Result<RawSeries, CliError> {
    load_grid(path).map_err(|e| with_path(path, e))
}

pub fn read_mask(path: &Path) -> Result<MaskMatrix, CliError> {
    fence_core::data::load_mask(path).map_err(|e| with_path(path, e))
}

pub fn read_model(path: &Path) -> Result<(NeuralDenoiser, Normalization), CliError> {
    fence_core::denoiser::checkpoint::load_model(path).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: fence_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn load_graph(adjacency: Option<&Path>, n_nodes: usize) -> Result<GraphSpec, CliError> {
    let Some(path) = adjacency else {
        return Ok(GraphSpec::ring(n_nodes)?);
    };
    let raw = read_grid(path)?;
    if raw.values.shape() != (n_nodes, n_nodes) {
        return Err(CliError::Data(format!(
            "adjacency {} is {}x{}, expected {n_nodes}x{n_nodes}",
            path.display(),
            raw.values.n_nodes(),
            raw.values.n_steps()
        )));
    }
    if raw.available.observed_count() != n_nodes * n_nodes {
        return Err(CliError::Data(format!("adjacency {} has empty cells", path.display())));
    }
    Ok(GraphSpec::new(n_nodes, raw.values.into_values())?)
}

/// Places equally tall grids side by side.
pub fn hcat(grids: &[TrafficGrid]) -> Result<TrafficGrid, CliError> {
    let n = grids.first().map_or(0, TrafficGrid::n_nodes);
    let total: usize = grids.iter().map(TrafficGrid::n_steps).sum();
    let mut values = Vec::with_capacity(n * total);
    for i in 0..n {
        for g in grids {
            values.extend_from_slice(g.row(i));
        }
    }
    Ok(TrafficGrid::new(n, total, values)?)
}

pub fn hcat_masks(masks: &[MaskMatrix]) -> Result<MaskMatrix, CliError> {
    let n = masks.first().map_or(0, |m| m.shape().0);
    let total: usize = masks.iter().map(|m| m.shape().1).sum();
    let mut entries = Vec::with_capacity(n * total);
    for i in 0..n {
        for m in masks {
            let t = m.shape().1;
            entries.extend_from_slice(&m.entries()[i * t..(i + 1) * t]);
        }
    }
    Ok(MaskMatrix::new(n, total, entries)?)
}

pub struct Evaluation {
    pub overall: PointMetrics,
    pub crps: f64,
    pub per_node: Vec<(Option<PointMetrics>, f64)>,
}

/// Point metrics of `pred` and CRPS of `samples` (NaN without samples)
/// over entries set in `eval_mask`.
pub fn evaluate(
    pred: &TrafficGrid,
    samples: &[TrafficGrid],
    truth: &TrafficGrid,
    eval_mask: &MaskMatrix,
) -> Result<Evaluation, CliError> {
    if eval_mask.observed_count() == 0 {
        return Err(CliError::Data("no entries to evaluate: every entry is observed or unavailable".into()));
    }
    let overall = point_metrics(pred, truth, eval_mask)?;
    let crps = if samples.is_empty() {
        f64::NAN
    } else {
        crps_dataset(samples, truth, eval_mask)?
    };
    let nodes = per_node_metrics(pred, truth, eval_mask)?;
    let (n, t) = truth.shape();
    let mut per_node = Vec::with_capacity(n);
    for (i, m) in nodes.into_iter().enumerate() {
        let node_crps = match (&m, samples.is_empty()) {
            (Some(_), false) => {
                let mut only = MaskMatrix::all_missing(n, t);
                for s in 0..t {
                    only.set(i, s, eval_mask.is_observed(i, s));
                }
                crps_dataset(samples, truth, &only)?
            }
            _ => f64::NAN,
        };
        per_node.push((m, node_crps));
    }
    Ok(Evaluation {
        overall,
        crps,
        per_node,
    })
}

pub const REPORT_HEADER: &str = "mae,rmse,mape,crps";

pub fn write_report(mut w: impl Write, e: &Evaluation) -> Result<(), CliError> {
    writeln!(w, "{REPORT_HEADER}")?;
    writeln!(w, "{},{},{},{}", e.overall.mae, e.overall.rmse, e.overall.mape, e.crps)?;
    w.flush()?;
    Ok(())
}

pub fn write_per_node(mut w: impl Write, e: &Evaluation) -> Result<(), CliError> {
    writeln!(w, "node,mae,rmse,mape,crps,count")?;
    for (i, (m, c)) in e.per_node.iter().enumerate() {
        match m {
            Some(m) => writeln!(w, "{i},{},{},{},{c},{}", m.mae, m.rmse, m.mape, m.count)?,
            None => writeln!(w, "{i},,,,,0")?,
        }
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

pub fn ingest(settings: &Settings) -> Result<RawSeries, CliError> {
    match &settings.data.input {
        Some(path) => read_grid(path),
        None => {
            let world = settings
                .world
                .build()
                .map_err(|e| CliError::Config(format!("[world]: {e}")))?;
            Ok(RawSeries::fully_observed(synthesize_series(
                &world,
                settings.world_length,
                settings.world.seed,
            )?))
        }
    }
}

pub fn train_models(settings: &Settings, data: &DatasetSplit, out: Option<&Path>) -> Result<Models, CliError> {
    let n = data.train[0].values.n_nodes();
    let net_cfg = settings.model.net_config(n, data.window_length);
    info!("stage one: unconditional training");
    let (uncond, _) = train_unconditional(data, &settings.schedule, net_cfg, &settings.train_uncond)?;
    info!("stage two: conditional fine-tuning");
    let (cond, _) = finetune_conditional(Some(uncond.clone()), net_cfg, data, &settings.schedule, &settings.train_cond)?;
    if let Some(dir) = out {
        save_model(&dir.join("uncond.bin"), &uncond, &data.normalization)?;
        save_model(&dir.join("cond.bin"), &cond, &data.normalization)?;
    }
    Ok(Models::Neural {
        cond,
        uncond,
        normalization: data.normalization,
    })
}

/// Full experiment: ingest, split, train (neural backend), mask and
/// impute each test window, evaluate, and write the report files.
pub fn run(settings: &Settings, resolved: &str, out: &Path) -> Result<Evaluation, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    let mut w = create(&out.join("config.resolved"))?;
    w.write_all(resolved.as_bytes())?;
    w.flush()?;

    let raw = ingest(settings)?;
    let data = prepare_dataset(
        &raw,
        settings.data.window,
        settings.data.train_stride,
        settings.data.eval_stride,
    )?;
    let n = raw.values.n_nodes();
    let models = match settings.model.backend {
        Backend::Neural => train_models(settings, &data, Some(out))?,
        Backend::Oracle => {
            let world = settings
                .world
                .build()
                .map_err(|e| CliError::Config(format!("[world]: {e}")))?;
            Models::Oracle {
                world,
                pi_true: settings.model.oracle_pi_true,
            }
        }
    };
    let graph = load_graph(settings.adjacency.as_deref(), n)?;

    let windows = match settings.data.max_windows {
        0 => data.test.len(),
        m => m.min(data.test.len()),
    };
    let n_mean = settings.sampler.n_samples;
    let n_crps = settings.crps_samples;
    let (mut preds, mut truths, mut evals) = (Vec::new(), Vec::new(), Vec::new());
    let mut ensembles: Vec<Vec<TrafficGrid>> = vec![Vec::new(); n_crps];
    let mut trace = Vec::new();
    for (w, window) in data.test.iter().take(windows).enumerate() {
        let mask_cfg = fence_core::masking::MaskPatternConfig {
            seed: settings.mask.seed.wrapping_add(w as u64),
            ..settings.mask.clone()
        };
        let mask = generate_mask(&graph, settings.data.window, &mask_cfg)?;
        let observed_mask = mask.and(&window.available)?;
        let eval_mask = mask.complement().and(&window.available)?;
        let truth = data.normalization.invert(&window.values)?;
        let scfg = SamplerConfig {
            n_samples: n_mean.max(n_crps),
            seed: settings.sampler.seed.wrapping_add(w as u64),
            record_trace: w == 0,
            ..settings.sampler.clone()
        };
        info!("imputing test window {} of {windows}", w + 1);
        let result = models.impute(&truth, &observed_mask, &settings.schedule, &settings.guidance, &scfg)?;
        preds.push(ensemble_mean(&result.samples[..n_mean]));
        for (slot, s) in ensembles.iter_mut().zip(&result.samples) {
            slot.push(s.clone());
        }
        if w == 0 {
            trace = result.traces.into_iter().filter(|r| r.trajectory < n_mean).collect();
        }
        truths.push(truth);
        evals.push(eval_mask);
    }
    if preds.is_empty() {
        return Err(CliError::Data("the test split holds no windows".into()));
    }
    let pred = hcat(&preds)?;
    let truth = hcat(&truths)?;
    let eval_mask = hcat_masks(&evals)?;
    let samples = ensembles.iter().map(|e| hcat(e)).collect::<Result<Vec<_>, _>>()?;
    let evaluation = evaluate(&pred, &samples, &truth, &eval_mask)?;

    write_report(create(&out.join("report.csv"))?, &evaluation)?;
    write_per_node(create(&out.join("per_node.csv"))?, &evaluation)?;
    write_trace(create(&out.join("trace.csv"))?, &trace)?;
    save_grid(&out.join("imputed.csv"), &pred, None)?;
    Ok(evaluation)
}
