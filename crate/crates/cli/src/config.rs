//! Experiment configuration: flat `key = value` lines under `[section]`
//! headers, with named presets.
//!
//! Resolution order, later entries winning: built-in defaults, presets
//! named in the file, keys in the file, presets given on the command line,
//! `--set` overrides, dedicated flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fence_core::denoiser::{NetConfig, TrainConfig};
use fence_core::diffusion::{quadratic_schedule, NoiseSchedule, VarianceMode};
use fence_core::guidance::{GuidanceConfig, GuidanceMode, PosteriorScope};
use fence_core::masking::{MaskPattern, MaskPatternConfig};
use fence_core::oracle_world::WorldSpec;
use fence_core::sampler::{Anchoring, SamplerConfig};

use crate::error::CliError;

pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn k(section: &'static str, key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        default,
        doc,
    }
}

pub const KEYS: &[KeySpec] = &[
    k("data", "input", "", "grid CSV (rows = nodes, columns t0..); empty synthesizes from [world]"),
    k("data", "window", "12", "window length T"),
    k("data", "train_stride", "1", "stride of training and validation windows"),
    k("data", "eval_stride", "12", "stride of test windows"),
    k("data", "max_windows", "0", "test windows to impute, 0 for all"),
    k("world", "nodes", "6", "ring-graph node count of the synthetic world"),
    k("world", "rho_s", "0.6", "spatial correlation per hop"),
    k("world", "rho_t", "0.8", "temporal correlation per step"),
    k("world", "mean", "0", "constant mean"),
    k("world", "seed", "0", "seed of the synthetic series"),
    k("world", "length", "2000", "length of the synthetic series"),
    k("mask", "pattern", "sr-tc", "sr-tc or sc-tc"),
    k("mask", "missing_rate", "0.8", "probability that a block is masked"),
    k("mask", "patch", "0", "temporal patch length, 0 for the window length"),
    k("mask", "communities", "1", "community count for sc-tc"),
    k("mask", "seed", "0", "mask seed; test window w uses seed + w"),
    k("mask", "adjacency", "", "N x N adjacency CSV; empty uses a ring graph"),
    k("diffusion", "steps", "50", "diffusion steps K"),
    k("diffusion", "beta_start", "0.0001", "first noise level"),
    k("diffusion", "beta_end", "0.5", "last noise level"),
    k("diffusion", "variance", "beta-tilde", "reverse variance: beta or beta-tilde"),
    k("model", "backend", "neural", "neural or oracle"),
    k("model", "d_model", "16", "channel width"),
    k("model", "heads", "2", "attention heads"),
    k("model", "layers", "2", "residual blocks"),
    k("model", "step_embedding", "128", "sinusoidal step-embedding width"),
    k("model", "oracle_pi_true", "1", "oracle only: weight of the true conditional in the conditional score"),
    k("train", "uncond_epochs", "150", "stage-one epochs"),
    k("train", "uncond_lr", "0.002", "stage-one learning rate"),
    k("train", "uncond_patience", "20", "stage-one early-stopping patience"),
    k("train", "uncond_weight_decay", "0.000001", "stage-one weight decay"),
    k("train", "cond_epochs", "80", "stage-two epochs"),
    k("train", "cond_lr", "0.001", "stage-two learning rate"),
    k("train", "cond_patience", "10", "stage-two early-stopping patience"),
    k("train", "cond_weight_decay", "0.00001", "stage-two weight decay"),
    k("train", "batch_size", "16", "minibatch size"),
    k("train", "seed", "0", "initialization and batching seed"),
    k("train", "lr_milestones", "0.75,0.9", "epoch fractions where the learning rate decays"),
    k("train", "lr_decay", "0.1", "learning-rate decay factor"),
    k("train", "remask_patch", "0", "stage-two re-masking patch length, 0 for the window length"),
    k("guidance", "mode", "fence", "fence, cfg:<lambda> or none"),
    k("guidance", "pi", "0.5", "prior confidence"),
    k("guidance", "lambda_ref", "1.6", "reference guidance scale"),
    k("guidance", "t0", "0.8", "activation time"),
    k("guidance", "t1", "0.5", "peak time"),
    k("guidance", "alpha_scale", "10", "temperature scale"),
    k("guidance", "lambda_max", "10", "upper clamp of the guidance scale"),
    k("guidance", "scope", "clustered", "clustered, global or per-node"),
    k("guidance", "clusters", "auto", "cluster count, auto for max(1, round(N / 20))"),
    k("guidance", "recluster_every", "1", "re-cluster every this many steps"),
    k("sampler", "samples", "10", "ensemble size for the mean imputation"),
    k("sampler", "crps_samples", "100", "ensemble size for CRPS"),
    k("sampler", "seed", "0", "sampling seed; test window w uses seed + w"),
    k("sampler", "anchoring", "free", "free or clamp"),
];

pub struct Preset {
    pub name: &'static str,
    pub doc: &'static str,
    pub values: &'static [(&'static str, &'static str)],
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "paper-defaults",
        doc: "published hyper-parameters (K=50, d=64, 4 layers, 8 heads)",
        values: &[
            ("diffusion.steps", "50"),
            ("diffusion.beta_start", "0.0001"),
            ("diffusion.beta_end", "0.5"),
            ("guidance.pi", "0.5"),
            ("guidance.lambda_ref", "1.6"),
            ("guidance.t0", "0.8"),
            ("guidance.t1", "0.5"),
            ("model.d_model", "64"),
            ("model.layers", "4"),
            ("model.heads", "8"),
        ],
    },
    Preset {
        name: "wo-C",
        doc: "ablation: one cluster, a uniform scale for all nodes",
        values: &[("guidance.clusters", "1")],
    },
    Preset {
        name: "wo-F",
        doc: "ablation: no feedback, fixed guidance scale 1",
        values: &[("guidance.mode", "cfg:1")],
    },
];

/// Text appended to `--help`: every key with its default, and the presets.
pub fn help_text() -> String {
    let mut s = String::from("Configuration keys (section.key = default):\n");
    for spec in KEYS {
        let _ = writeln!(s, "  {}.{} = {}    {}", spec.section, spec.key, spec.default, spec.doc);
    }
    s.push_str("\nPresets:\n");
    for p in PRESETS {
        let _ = writeln!(s, "  {}    {}", p.name, p.doc);
    }
    s.push_str("\nExit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.\n");
    s
}

fn spec_of(name: &str) -> Option<&'static KeySpec> {
    let (section, key) = name.split_once('.')?;
    KEYS.iter().find(|s| s.section == section && s.key == key)
}

fn is_path_key(name: &str) -> bool {
    matches!(name, "data.input" | "mask.adjacency")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|s| (format!("{}.{}", s.section, s.key), s.default.to_owned()))
                .collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), CliError> {
        if spec_of(name).is_none() {
            return Err(CliError::Config(format!("unknown config key `{name}`")));
        }
        self.values.insert(name.to_owned(), value.trim().to_owned());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (name, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected `section.key=value`, got `{assignment}`")))?;
        self.set(name.trim(), value)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<(), CliError> {
        let preset = PRESETS
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?;
        for (key, value) in preset.values {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        &self.values[name]
    }

    /// Merges config text. Relative paths are taken relative to `base`.
    pub fn merge_text(&mut self, text: &str, origin: &str, base: &Path) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        let mut presets = Vec::new();
        let mut assignments: Vec<(String, String)> = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let at = || format!("{origin}:{}", i + 1);
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("{}: unterminated section header", at())))?
                    .trim();
                if !KEYS.iter().any(|s| s.section == name) {
                    return Err(CliError::Config(format!("{}: unknown section `[{name}]`", at())));
                }
                section = Some(name.to_owned());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{}: expected `key = value`", at())))?;
            let (key, value) = (key.trim(), value.trim());
            match &section {
                None if key == "preset" => {
                    presets.extend(value.split(',').map(|p| p.trim().to_owned()).filter(|p| !p.is_empty()));
                }
                None => {
                    return Err(CliError::Config(format!(
                        "{}: key `{key}` must appear under a [section] header",
                        at()
                    )))
                }
                Some(sec) => {
                    let name = format!("{sec}.{key}");
                    if spec_of(&name).is_none() {
                        return Err(CliError::Config(format!("{}: unknown config key `{name}`", at())));
                    }
                    if assignments.iter().any(|(n, _)| *n == name) {
                        return Err(CliError::Config(format!("{}: duplicate key `{name}`", at())));
                    }
                    let value = if is_path_key(&name) && !value.is_empty() {
                        absolute(&base.join(value))?
                    } else {
                        value.to_owned()
                    };
                    assignments.push((name, value));
                }
            }
        }
        for p in presets {
            self.apply_preset(&p)?;
        }
        for (name, value) in assignments {
            self.set(&name, &value)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        self.merge_text(&text, &path.display().to_string(), base)
    }

    /// Every key with its effective value, in documentation order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for spec in KEYS {
            if spec.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", spec.section);
                current = spec.section;
            }
            let _ = writeln!(out, "{} = {}", spec.key, self.get(&format!("{}.{}", spec.section, spec.key)));
        }
        out
    }

    fn parse<T: FromStr>(&self, name: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(name);
        raw.parse()
            .map_err(|e| CliError::Config(format!("bad value `{raw}` for `{name}`: {e}")))
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        let raw = self.get(name);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    fn patch_or(&self, name: &str, window: usize) -> Result<usize, CliError> {
        Ok(match self.parse::<usize>(name)? {
            0 => window,
            p => p,
        })
    }

    pub fn resolve(&self) -> Result<Settings, CliError> {
        let window: usize = self.parse("data.window")?;
        if window == 0 {
            return Err(CliError::Config("`data.window` must be positive".into()));
        }
        let positive = |name: &str| -> Result<usize, CliError> {
            let v: usize = self.parse(name)?;
            if v == 0 {
                return Err(CliError::Config(format!("`{name}` must be positive")));
            }
            Ok(v)
        };
        let data = DataSettings {
            input: self.path("data.input"),
            window,
            train_stride: positive("data.train_stride")?,
            eval_stride: positive("data.eval_stride")?,
            max_windows: self.parse("data.max_windows")?,
        };
        let world = WorldSpec {
            nodes: positive("world.nodes")?,
            steps: window,
            rho_s: self.parse("world.rho_s")?,
            rho_t: self.parse("world.rho_t")?,
            mean: self.parse("world.mean")?,
            seed: self.parse("world.seed")?,
        };
        let world_length = positive("world.length")?;

        let mask = MaskPatternConfig {
            pattern: self.parse::<MaskPattern>("mask.pattern")?,
            missing_rate: self.parse("mask.missing_rate")?,
            patch_length: self.patch_or("mask.patch", window)?,
            n_communities: positive("mask.communities")?,
            seed: self.parse("mask.seed")?,
        };
        if !(0.0..=1.0).contains(&mask.missing_rate) {
            return Err(CliError::Config("`mask.missing_rate` must lie in [0, 1]".into()));
        }

        let variance: VarianceMode = self.parse("diffusion.variance")?;
        let schedule = quadratic_schedule(
            positive("diffusion.steps")?,
            self.parse("diffusion.beta_start")?,
            self.parse("diffusion.beta_end")?,
            variance,
        )
        .map_err(|e| CliError::Config(format!("[diffusion]: {e}")))?;

        let backend = match self.get("model.backend") {
            "neural" => Backend::Neural,
            "oracle" => Backend::Oracle,
            other => return Err(CliError::Config(format!("bad value `{other}` for `model.backend`"))),
        };
        let model = ModelSettings {
            backend,
            d_model: positive("model.d_model")?,
            heads: positive("model.heads")?,
            layers: self.parse("model.layers")?,
            step_embedding: positive("model.step_embedding")?,
            oracle_pi_true: self.parse("model.oracle_pi_true")?,
        };
        if model.d_model % model.heads != 0 {
            return Err(CliError::Config("`model.d_model` must be divisible by `model.heads`".into()));
        }
        if !(model.oracle_pi_true > 0.0 && model.oracle_pi_true <= 1.0) {
            return Err(CliError::Config("`model.oracle_pi_true` must lie in (0, 1]".into()));
        }

        let milestones = self
            .get("train.lr_milestones")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| CliError::Config(format!("bad milestone `{s}` in `train.lr_milestones`: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let remask = match self.parse::<usize>("train.remask_patch")? {
            0 => None,
            p => Some(p),
        };
        let stage = |prefix: &str| -> Result<TrainConfig, CliError> {
            Ok(TrainConfig {
                epochs: self.parse(&format!("train.{prefix}_epochs"))?,
                learning_rate: self.parse(&format!("train.{prefix}_lr"))?,
                patience: self.parse(&format!("train.{prefix}_patience"))?,
                weight_decay: self.parse(&format!("train.{prefix}_weight_decay"))?,
                batch_size: positive("train.batch_size")?,
                seed: self.parse("train.seed")?,
                lr_milestones: milestones.clone(),
                lr_decay: self.parse("train.lr_decay")?,
                remask_patch: remask,
            })
        };
        let train_uncond = stage("uncond")?;
        let train_cond = stage("cond")?;

        let clusters = match self.get("guidance.clusters") {
            "auto" => None,
            _ => Some(positive("guidance.clusters")?),
        };
        let guidance = GuidanceConfig {
            pi: self.parse("guidance.pi")?,
            lambda_ref: self.parse("guidance.lambda_ref")?,
            t0: self.parse("guidance.t0")?,
            t1: self.parse("guidance.t1")?,
            alpha_scale: self.parse("guidance.alpha_scale")?,
            lambda_max: self.parse("guidance.lambda_max")?,
            mode: self.parse::<GuidanceMode>("guidance.mode")?,
            scope: self.parse::<PosteriorScope>("guidance.scope")?,
        };
        guidance
            .validate()
            .map_err(|e| CliError::Config(format!("[guidance]: {e}")))?;
        let sampler = SamplerConfig {
            n_samples: positive("sampler.samples")?,
            seed: self.parse("sampler.seed")?,
            n_clusters: clusters,
            recluster_every: positive("guidance.recluster_every")?,
            anchoring: self.parse::<Anchoring>("sampler.anchoring")?,
            record_trace: true,
        };

        Ok(Settings {
            data,
            world,
            world_length,
            mask,
            adjacency: self.path("mask.adjacency"),
            schedule,
            model,
            train_uncond,
            train_cond,
            guidance,
            sampler,
            crps_samples: positive("sampler.crps_samples")?,
        })
    }
}

fn absolute(p: &Path) -> Result<String, CliError> {
    std::path::absolute(p)
        .map(|p| p.display().to_string())
        .map_err(|e| CliError::Config(format!("cannot resolve path {}: {e}", p.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Neural,
    Oracle,
}

#[derive(Debug, Clone)]
pub struct DataSettings {
    pub input: Option<PathBuf>,
    pub window: usize,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub max_windows: usize,
}

#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub backend: Backend,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub step_embedding: usize,
    pub oracle_pi_true: f64,
}

impl ModelSettings {
    pub fn net_config(&self, n_nodes: usize, n_steps: usize) -> NetConfig {
        NetConfig {
            d_model: self.d_model,
            n_heads: self.heads,
            n_layers: self.layers,
            n_nodes,
            n_steps,
            step_embedding_dim: self.step_embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub data: DataSettings,
    pub world: WorldSpec,
    pub world_length: usize,
    pub mask: MaskPatternConfig,
    pub adjacency: Option<PathBuf>,
    pub schedule: NoiseSchedule,
    pub model: ModelSettings,
    pub train_uncond: TrainConfig,
    pub train_cond: TrainConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub crps_samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RawConfig, CliError> {
        let mut c = RawConfig::default();
        c.merge_text(text, "test", Path::new("/tmp"))?;
        Ok(c)
    }

    #[test]
    fn defaults_resolve() {
        let s = RawConfig::default().resolve().unwrap();
        assert_eq!(s.schedule.n_steps(), 50);
        assert_eq!(s.guidance, GuidanceConfig::default());
        assert_eq!(s.sampler.n_samples, 10);
        assert_eq!(s.mask.patch_length, 12);
        assert_eq!(s.world.steps, 12);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        assert!(matches!(parse("[guidance]\npie = 0.5\n"), Err(CliError::Config(m)) if m.contains("guidance.pie")));
        assert!(parse("[guide]\n").is_err());
        assert!(parse("pi = 0.5\n").is_err());
        assert!(parse("[guidance]\npi = 0.5\npi = 0.6\n").is_err());
        assert!(RawConfig::default().set_assignment("model.depth=3").is_err());
    }

    #[test]
    fn presets_set_their_keys() {
        let c = parse("preset = paper-defaults, wo-F\n[model]\nlayers = 3\n").unwrap();
        let s = c.resolve().unwrap();
        assert_eq!(s.model.d_model, 64);
        assert_eq!(s.model.heads, 8);
        // File keys win over file presets.
        assert_eq!(s.model.layers, 3);
        assert_eq!(s.guidance.mode, GuidanceMode::FixedCfg(1.0));
        let mut c = RawConfig::default();
        c.apply_preset("wo-C").unwrap();
        assert_eq!(c.resolve().unwrap().sampler.n_clusters, Some(1));
        assert!(c.apply_preset("nope").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = parse("preset = wo-F\n[data]\ninput = grid.csv # comment\n[sampler]\nsamples = 4\n").unwrap();
        c.set("guidance.pi", "0.7").unwrap();
        assert_eq!(c.get("data.input"), "/tmp/grid.csv");
        let text = c.render();
        let back = parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = parse("[guidance]\npi = 1.5\n").unwrap().resolve().unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = parse("[sampler]\nsamples = many\n").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("sampler.samples"));
        assert!(parse("[model]\nd_model = 10\nheads = 3\n").unwrap().resolve().is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let h = help_text();
        for s in KEYS {
            assert!(h.contains(&format!("{}.{}", s.section, s.key)));
        }
    }
}
