//! Two-stage noise-matching training with Adam and early stopping.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::neural::{NetConfig, NeuralDenoiser};
use super::ConditioningContext;
use crate::data::{DatasetSplit, Window};
use crate::diffusion::{gaussian_grid, q_sample, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::grid::{MaskMatrix, TrafficGrid};
use crate::masking::{mask_sr_tc, MaskPattern, MaskPatternConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fractions of `epochs` at which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Patch length of the training re-masking; the window length when
    /// `None`.
    pub remask_patch: Option<usize>,
}

impl TrainConfig {
    /// Stage-one defaults.
    pub fn unconditional() -> Self {
        Self {
            epochs: 150,
            learning_rate: 2e-3,
            patience: 20,
            weight_decay: 1e-6,
            batch_size: 16,
            seed: 0,
            lr_milestones: vec![0.75, 0.9],
            lr_decay: 0.1,
            remask_patch: None,
        }
    }

    /// Stage-two defaults.
    pub fn conditional() -> Self {
        Self {
            epochs: 80,
            learning_rate: 1e-3,
            patience: 10,
            weight_decay: 1e-5,
            ..Self::unconditional()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight decay must be nonnegative"));
        }
        Ok(())
    }

    /// Learning rate in force during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// Empty when there is no validation split.
    pub validation_loss: Vec<f64>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct Example {
    x_k: TrafficGrid,
    k: usize,
    ctx: ConditioningContext,
    eps: TrafficGrid,
    loss_mask: MaskMatrix,
}

fn make_example(
    w: &Window,
    sched: &NoiseSchedule,
    conditional: bool,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let (n, t) = w.values.shape();
    let k = rng.random_range(1..=sched.n_steps());
    let eps = gaussian_grid(n, t, rng);
    let x_k = q_sample(&w.values, k, &eps, sched)?;
    let ctx = if conditional {
        let cfg = MaskPatternConfig {
            pattern: MaskPattern::SrTc,
            missing_rate: rng.random::<f64>(),
            patch_length: patch.min(t),
            n_communities: 1,
            seed: rng.random(),
        };
        let keep = mask_sr_tc(n, t, &cfg)?.and(&w.available)?;
        ConditioningContext::conditional(&w.values, &keep)?
    } else {
        ConditioningContext::unconditional(n, t)
    };
    Ok(Example {
        x_k,
        k,
        ctx,
        eps,
        loss_mask: w.available.clone(),
    })
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &NeuralDenoiser) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, net: &mut NeuralDenoiser, grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (pi, p) in net.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for j in 0..p.value.len() {
                let g = grads[pi][j] + weight_decay * p.value[j];
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g * g;
                p.value[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn usable(windows: &[Window]) -> Vec<&Window> {
    windows.iter().filter(|w| w.available.observed_count() > 0).collect()
}

fn run(
    mut net: NeuralDenoiser,
    data: &DatasetSplit,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    conditional: bool,
) -> Result<(NeuralDenoiser, TrainReport)> {
    cfg.validate()?;
    let train = usable(&data.train);
    if train.is_empty() {
        return Err(invalid("training split has no usable windows"));
    }
    let shape = (net.config().n_nodes, net.config().n_steps);
    if train[0].values.shape() != shape {
        return Err(crate::error::shape_mismatch(shape, train[0].values.shape()));
    }
    let patch = cfg.remask_patch.unwrap_or(data.window_length);

    // Validation draws are fixed once so successive epochs are comparable.
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed);
    vrng.set_stream(1);
    let validation: Vec<Example> = usable(&data.validation)
        .into_iter()
        .map(|w| make_example(w, sched, conditional, patch, &mut vrng))
        .collect::<Result<_>>()?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&net);
    let mut report = TrainReport {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best = (f64::INFINITY, net.clone());
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let seeds: Vec<u64> = order.iter().map(|_| order_rng.random()).collect();
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let base = b * cfg.batch_size;
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &wi)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seeds[base + j]);
                    let ex = make_example(train[wi], sched, conditional, patch, &mut rng)?;
                    net.loss_and_grad(&ex.x_k, ex.k, &ex.ctx, &ex.eps, &ex.loss_mask)
                })
                .collect();
            let mut total: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                for (t, gi) in total.iter_mut().zip(&g) {
                    for (a, v) in t.iter_mut().zip(gi) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() || total.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    reason: "loss or gradient is not finite".into(),
                });
            }
            total.iter_mut().flatten().for_each(|v| *v *= scale);
            adam.update(&mut net, &total, lr, cfg.weight_decay);
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        report.train_loss.push(train_loss);

        let score = if validation.is_empty() {
            train_loss
        } else {
            let v = validation
                .par_iter()
                .map(|ex| net.loss(&ex.x_k, ex.k, &ex.ctx, &ex.eps, &ex.loss_mask))
                .collect::<Result<Vec<f64>>>()?;
            let v = v.iter().sum::<f64>() / v.len() as f64;
            report.validation_loss.push(v);
            v
        };
        if !score.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                reason: "validation loss is not finite".into(),
            });
        }
        info!("epoch {epoch}: train {train_loss:.5} score {score:.5} lr {lr:e}");
        if score < best.0 {
            best = (score, net.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.1, report))
}

/// Stage one: fit the noise predictor with unconditional contexts only.
pub fn train_unconditional(
    data: &DatasetSplit,
    sched: &NoiseSchedule,
    net_cfg: NetConfig,
    cfg: &TrainConfig,
) -> Result<(NeuralDenoiser, TrainReport)> {
    let net = NeuralDenoiser::new(net_cfg, cfg.seed)?;
    run(net, data, sched, cfg, false)
}

/// Stage two: continue from stage-one weights with conditional contexts
/// built by randomly re-masking the available training entries. Starting
/// without stage-one weights is allowed.
pub fn finetune_conditional(
    init: Option<NeuralDenoiser>,
    net_cfg: NetConfig,
    data: &DatasetSplit,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(NeuralDenoiser, TrainReport)> {
    let net = match init {
        Some(n) => n,
        None => {
            warn!("fine-tuning from random initialization; stage-one weights were not supplied");
            NeuralDenoiser::new(net_cfg, cfg.seed)?
        }
    };
    run(net, data, sched, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_dataset, RawSeries};
    use crate::diffusion::{quadratic_schedule, VarianceMode};

    fn constant_data(n: usize, t: usize, windows: usize) -> DatasetSplit {
        let length = 5 * (windows + t);
        let values = TrafficGrid::new(
            n,
            length,
            (0..n * length).map(|i| 10.0 + (i / length) as f64 + 0.5 * ((i % 2) as f64)).collect(),
        )
        .unwrap();
        prepare_dataset(&RawSeries::fully_observed(values), t, 1, t).unwrap()
    }

    #[test]
    fn milestones_decay_learning_rate() {
        let c = TrainConfig::unconditional();
        assert_eq!(c.learning_rate_at(0), 2e-3);
        assert_eq!(c.learning_rate_at(111), 2e-3);
        assert!((c.learning_rate_at(112) - 2e-4).abs() < 1e-18);
        assert!((c.learning_rate_at(135) - 2e-5).abs() < 1e-18);
        let s = TrainConfig::conditional();
        assert_eq!((s.epochs, s.learning_rate, s.patience, s.weight_decay), (80, 1e-3, 10, 1e-5));
    }

    #[test]
    fn linear_net_validation_loss_decreases() {
        let data = constant_data(2, 4, 40);
        let sched = quadratic_schedule(20, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap();
        let net_cfg = NetConfig {
            d_model: 8,
            n_heads: 1,
            n_layers: 0,
            n_nodes: 2,
            n_steps: 4,
            step_embedding_dim: 16,
        };
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 2e-3,
            patience: 100,
            batch_size: 256,
            ..TrainConfig::unconditional()
        };
        let (_, rep) = train_unconditional(&data, &sched, net_cfg, &cfg).unwrap();
        assert_eq!(rep.validation_loss.len(), 10);
        for w in rep.validation_loss.windows(2) {
            assert!(w[1] < w[0], "{:?}", rep.validation_loss);
        }
    }

    #[test]
    fn training_is_deterministic_and_finetune_runs() {
        let data = constant_data(2, 4, 10);
        let sched = quadratic_schedule(10, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap();
        let net_cfg = NetConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            n_nodes: 2,
            n_steps: 4,
            step_embedding_dim: 8,
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::unconditional()
        };
        let (a, ra) = train_unconditional(&data, &sched, net_cfg, &cfg).unwrap();
        let (b, rb) = train_unconditional(&data, &sched, net_cfg, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let c2 = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::conditional()
        };
        let (_, rc) = finetune_conditional(Some(a), net_cfg, &data, &sched, &c2).unwrap();
        assert_eq!(rc.train_loss.len(), 2);
        let (_, rr) = finetune_conditional(None, net_cfg, &data, &sched, &c2).unwrap();
        assert_eq!(rr.train_loss.len(), 2);
    }
}
