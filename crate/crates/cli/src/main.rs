//! `fence`: data synthesis, masking, training, guided imputation and
//! evaluation for spatial-temporal grids.

mod config;
mod error;
mod pipeline;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fence_core::data::{prepare_dataset, save_grid, save_mask};
use fence_core::denoiser::checkpoint::save_model;
use fence_core::denoiser::{finetune_conditional, train_unconditional};
use fence_core::guidance::GuidanceMode;
use fence_core::masking::{generate_mask, MaskPattern, MaskPatternConfig};
use fence_core::oracle_world::{synthesize_series, WorldSpec};
use fence_core::sampler::{emit_trace, read_trace};
use log::{info, warn};

use config::RawConfig;
use error::CliError;
use pipeline::{read_grid, read_mask, read_model, Models};

#[derive(Parser)]
#[command(name = "fence", version, about = "Feedback-guided diffusion imputation of spatial-temporal grids")]
#[command(after_long_help = config::help_text())]
struct Cli {
    /// Worker threads for sampling and training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the stage commands.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines under `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset applied after the config file (repeatable): paper-defaults, wo-C, wo-F.
    #[arg(long = "preset")]
    presets: Vec<String>,
    /// Override a key, e.g. `--set guidance.pi=0.7` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn raw(&self) -> Result<RawConfig, CliError> {
        let mut c = RawConfig::default();
        if let Some(path) = &self.config {
            c.merge_file(path)?;
        }
        for p in &self.presets {
            c.apply_preset(p)?;
        }
        for s in &self.overrides {
            c.set_assignment(s)?;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a long series from a Gaussian world and write it as a grid CSV.
    Synth {
        /// World spec file (`nodes`, `steps`, `rho_s`, `rho_t`, `mean`, `seed`).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        nodes: Option<usize>,
        /// Window length the world describes.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        rho_s: Option<f64>,
        #[arg(long)]
        rho_t: Option<f64>,
        #[arg(long)]
        mean: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Series length.
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the resolved world spec, usable with `impute --oracle`.
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Generate a block-missing mask CSV (1 = observed, 0 = masked).
    Mask {
        /// Take the shape from this grid CSV.
        #[arg(long, conflicts_with_all = ["nodes", "length"])]
        data: Option<PathBuf>,
        #[arg(long, requires = "length")]
        nodes: Option<usize>,
        #[arg(long, requires = "nodes")]
        length: Option<usize>,
        /// N x N adjacency CSV for community detection; a ring by default.
        #[arg(long)]
        adjacency: Option<PathBuf>,
        #[arg(long, default_value = "sr-tc")]
        pattern: MaskPattern,
        /// Probability that a block is masked.
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(long, default_value_t = 12)]
        patch: usize,
        #[arg(long, default_value_t = 1)]
        communities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: train the unconditional denoiser on a grid CSV.
    TrainUncond {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage two: fine-tune the conditional denoiser.
    FinetuneCond {
        #[arg(long)]
        data: PathBuf,
        /// Stage-one checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Impute the masked entries of one grid.
    Impute(ImputeArgs),
    /// Score an imputation: one-line `mae,rmse,mape,crps` CSV plus a per-node CSV.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        /// Mask used for imputation; masked, available entries are scored.
        #[arg(long)]
        mask: PathBuf,
        /// Point imputation grid CSV.
        #[arg(long)]
        pred: PathBuf,
        /// Sample grid CSVs for CRPS.
        #[arg(long, num_args = 1..)]
        samples: Vec<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-node CSV; defaults to `<out stem>.per_node.csv` next to `--out`.
        #[arg(long)]
        per_node_out: Option<PathBuf>,
    },
    /// Summarize a trace CSV per diffusion step.
    Trace {
        #[arg(long)]
        input: PathBuf,
        /// Summary path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: ingest, mask, train, impute, evaluate.
    #[command(after_long_help = config::help_text())]
    Run {
        /// Output directory for report.csv, per_node.csv, trace.csv,
        /// imputed.csv, config.resolved and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Re-run k-means every this many steps.
        #[arg(long)]
        recluster_every: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ImputeArgs {
    /// Grid CSV to impute (raw units).
    #[arg(long)]
    data: PathBuf,
    /// Mask CSV; 1 marks entries given to the model.
    #[arg(long)]
    mask: PathBuf,
    /// Conditional network checkpoint.
    #[arg(long, requires = "checkpoint_uncond", conflicts_with = "oracle")]
    checkpoint_cond: Option<PathBuf>,
    /// Unconditional network checkpoint.
    #[arg(long, requires = "checkpoint_cond")]
    checkpoint_uncond: Option<PathBuf>,
    /// World spec file; use the exact Gaussian scores instead of networks.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// fence, cfg:<lambda> or none.
    #[arg(long)]
    mode: Option<GuidanceMode>,
    /// Prior confidence in the conditional model, in (0, 1].
    #[arg(long)]
    pi: Option<f64>,
    /// Guidance scale reached at the activation time.
    #[arg(long)]
    lambda_ref: Option<f64>,
    /// Activation time in (0, 1); 1 is pure noise.
    #[arg(long)]
    t0: Option<f64>,
    /// Peak time in (0, 1), sets the temperature.
    #[arg(long)]
    t1: Option<f64>,
    /// Cluster count for cluster-aware guidance.
    #[arg(long)]
    clusters: Option<usize>,
    /// Ensemble size.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Re-run k-means every this many steps.
    #[arg(long)]
    recluster_every: Option<usize>,
    /// Trace CSV; sample grids are written next to it.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Mean imputation grid CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn synth(
    spec: Option<&Path>,
    overrides: [Option<f64>; 3],
    nodes: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    length: usize,
    out: &Path,
    spec_out: Option<&Path>,
) -> Result<(), CliError> {
    let mut world = match spec {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?
            .parse::<WorldSpec>()
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => WorldSpec::default(),
    };
    let [rho_s, rho_t, mean] = overrides;
    world.nodes = nodes.unwrap_or(world.nodes);
    world.steps = steps.unwrap_or(world.steps);
    world.rho_s = rho_s.unwrap_or(world.rho_s);
    world.rho_t = rho_t.unwrap_or(world.rho_t);
    world.mean = mean.unwrap_or(world.mean);
    world.seed = seed.unwrap_or(world.seed);
    let built = world.build().map_err(|e| CliError::Config(e.to_string()))?;
    let series = synthesize_series(&built, length, world.seed)?;
    save_grid(out, &series, None)?;
    if let Some(p) = spec_out {
        std::fs::write(p, world.to_string())?;
    }
    info!("wrote {}x{} series to {}", series.n_nodes(), series.n_steps(), out.display());
    Ok(())
}

fn train(
    data: &Path,
    init: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
    cfg: &ConfigArgs,
    conditional: bool,
) -> Result<(), CliError> {
    let settings = cfg.raw()?.resolve()?;
    let raw = read_grid(data)?;
    let split = prepare_dataset(
        &raw,
        settings.data.window,
        settings.data.train_stride,
        settings.data.eval_stride,
    )?;
    let net_cfg = settings.model.net_config(raw.values.n_nodes(), settings.data.window);
    let (net, report) = if conditional {
        let mut tc = settings.train_cond.clone();
        tc.epochs = epochs.unwrap_or(tc.epochs);
        let start = match init {
            Some(p) => {
                let (net, _) = read_model(p)?;
                if net.config().n_nodes != net_cfg.n_nodes || net.config().n_steps != net_cfg.n_steps {
                    return Err(CliError::Data(format!(
                        "checkpoint {} was trained on a different grid shape",
                        p.display()
                    )));
                }
                Some(net)
            }
            None => None,
        };
        let cfg = start.as_ref().map_or(net_cfg, |n| *n.config());
        finetune_conditional(start, cfg, &split, &settings.schedule, &tc)?
    } else {
        let mut tc = settings.train_uncond.clone();
        tc.epochs = epochs.unwrap_or(tc.epochs);
        train_unconditional(&split, &settings.schedule, net_cfg, &tc)?
    };
    save_model(out, &net, &split.normalization)?;
    info!(
        "best epoch {} of {}, checkpoint {}",
        report.best_epoch,
        report.train_loss.len(),
        out.display()
    );
    Ok(())
}

fn impute_cmd(a: &ImputeArgs) -> Result<(), CliError> {
    let mut raw = a.cfg.raw()?;
    let mut set = |key: &str, v: Option<String>| -> Result<(), CliError> {
        match v {
            Some(v) => raw.set(key, &v),
            None => Ok(()),
        }
    };
    set("guidance.mode", a.mode.map(|m| m.to_string()))?;
    set("guidance.pi", a.pi.map(|v| v.to_string()))?;
    set("guidance.lambda_ref", a.lambda_ref.map(|v| v.to_string()))?;
    set("guidance.t0", a.t0.map(|v| v.to_string()))?;
    set("guidance.t1", a.t1.map(|v| v.to_string()))?;
    set("guidance.clusters", a.clusters.map(|v| v.to_string()))?;
    set("guidance.recluster_every", a.recluster_every.map(|v| v.to_string()))?;
    set("sampler.samples", a.samples.map(|v| v.to_string()))?;
    set("sampler.seed", a.seed.map(|v| v.to_string()))?;
    let settings = raw.resolve()?;

    let models = match (&a.checkpoint_cond, &a.checkpoint_uncond, &a.oracle) {
        (Some(c), Some(u), None) => {
            let (cond, normalization) = read_model(c)?;
            let (uncond, _) = read_model(u)?;
            if cond.config().n_nodes != uncond.config().n_nodes || cond.config().n_steps != uncond.config().n_steps {
                return Err(CliError::Data("conditional and unconditional checkpoints disagree in shape".into()));
            }
            Models::Neural {
                cond,
                uncond,
                normalization,
            }
        }
        (None, None, Some(spec)) => {
            let world = std::fs::read_to_string(spec)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", spec.display())))?
                .parse::<WorldSpec>()
                .and_then(|s| s.build())
                .map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
            Models::Oracle {
                world,
                pi_true: settings.model.oracle_pi_true,
            }
        }
        _ => {
            return Err(CliError::Config(
                "give either --checkpoint-cond with --checkpoint-uncond, or --oracle".into(),
            ))
        }
    };
    let grid = read_grid(&a.data)?;
    let mask = read_mask(&a.mask)?;
    let observed_mask = mask.and(&grid.available)?;
    let scfg = fence_core::sampler::SamplerConfig {
        record_trace: a.trace_out.is_some(),
        ..settings.sampler.clone()
    };
    let result = models.impute(&grid.values, &observed_mask, &settings.schedule, &settings.guidance, &scfg)?;
    save_grid(&a.out, &result.mean_imputation, None)?;
    if let Some(p) = &a.trace_out {
        let paths = emit_trace(&result, p)?;
        info!("wrote trace {} and {} sample grids", p.display(), paths.len());
    }
    Ok(())
}

fn evaluate_cmd(
    truth: &Path,
    mask: &Path,
    pred: &Path,
    samples: &[PathBuf],
    out: Option<&Path>,
    per_node_out: Option<&Path>,
) -> Result<(), CliError> {
    let truth = read_grid(truth)?;
    let mask = read_mask(mask)?;
    let pred = read_grid(pred)?;
    if pred.available.observed_count() != pred.available.entries().len() {
        return Err(CliError::Data("prediction grid has empty cells".into()));
    }
    let samples = samples
        .iter()
        .map(|p| read_grid(p).map(|r| r.values))
        .collect::<Result<Vec<_>, _>>()?;
    let eval_mask = mask.complement().and(&truth.available)?;
    let e = pipeline::evaluate(&pred.values, &samples, &truth.values, &eval_mask)?;
    pipeline::write_report(writer(out)?, &e)?;
    let per_node = per_node_out.map(Path::to_path_buf).or_else(|| {
        out.map(|o| {
            let stem = o.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            o.with_file_name(format!("{stem}.per_node.csv"))
        })
    });
    match per_node {
        Some(p) => pipeline::write_per_node(writer(Some(&p))?, &e)?,
        None => warn!("per-node breakdown not written; pass --out or --per-node-out"),
    }
    Ok(())
}

fn trace_cmd(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let file = File::open(input).map_err(|e| CliError::Data(format!("cannot open {}: {e}", input.display())))?;
    let records = read_trace(io::BufReader::new(file))?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no trace rows", input.display())));
    }
    let k_max = records.iter().map(|r| r.k).max().unwrap_or(0);
    let mut w = writer(out)?;
    writeln!(w, "k,mean_lambda,min_lambda,max_lambda,mean_log_posterior,mean_guidance_norm,rows")?;
    for k in (1..=k_max).rev() {
        let rows: Vec<_> = records.iter().filter(|r| r.k == k).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&fence_core::sampler::TraceRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let min = rows.iter().map(|r| r.lambda).fold(f64::INFINITY, f64::min);
        let max = rows.iter().map(|r| r.lambda).fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            w,
            "{k},{},{min},{max},{},{},{}",
            mean(|r| r.lambda),
            mean(|r| r.log_posterior),
            mean(|r| r.guidance_norm),
            rows.len()
        )?;
    }
    w.flush()?;
    Ok(())
}

fn run_cmd(out: &Path, recluster_every: Option<usize>, cfg: &ConfigArgs) -> Result<(), CliError> {
    let mut raw = cfg.raw()?;
    if let Some(r) = recluster_every {
        raw.set("guidance.recluster_every", &r.to_string())?;
    }
    let settings = raw.resolve()?;
    let e = pipeline::run(&settings, &raw.render(), out)?;
    println!("{}", pipeline::REPORT_HEADER);
    println!("{},{},{},{}", e.overall.mae, e.overall.rmse, e.overall.mape, e.crps);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth {
            spec,
            nodes,
            steps,
            rho_s,
            rho_t,
            mean,
            seed,
            length,
            out,
            spec_out,
        } => synth(
            spec.as_deref(),
            [rho_s, rho_t, mean],
            nodes,
            steps,
            seed,
            length,
            &out,
            spec_out.as_deref(),
        ),
        Command::Mask {
            data,
            nodes,
            length,
            adjacency,
            pattern,
            alpha,
            patch,
            communities,
            seed,
            out,
        } => {
            let (n, l) = match (data, nodes, length) {
                (Some(p), _, _) => read_grid(&p)?.values.shape(),
                (None, Some(n), Some(l)) => (n, l),
                _ => return Err(CliError::Config("give --data or both --nodes and --length".into())),
            };
            let graph = pipeline::load_graph(adjacency.as_deref(), n)?;
            let cfg = MaskPatternConfig {
                pattern,
                missing_rate: alpha,
                patch_length: patch,
                n_communities: communities,
                seed,
            };
            let mask = generate_mask(&graph, l, &cfg).map_err(|e| CliError::Config(e.to_string()))?;
            save_mask(&out, &mask)?;
            info!("missing rate {:.4}", mask.missing_rate());
            Ok(())
        }
        Command::TrainUncond { data, out, epochs, cfg } => train(&data, None, &out, epochs, &cfg, false),
        Command::FinetuneCond {
            data,
            init,
            out,
            epochs,
            cfg,
        } => train(&data, init.as_deref(), &out, epochs, &cfg, true),
        Command::Impute(a) => impute_cmd(&a),
        Command::Evaluate {
            truth,
            mask,
            pred,
            samples,
            out,
            per_node_out,
        } => evaluate_cmd(&truth, &mask, &pred, &samples, out.as_deref(), per_node_out.as_deref()),
        Command::Trace { input, out } => trace_cmd(&input, out.as_deref()),
        Command::Run {
            out,
            recluster_every,
            cfg,
        } => run_cmd(&out, recluster_every, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
