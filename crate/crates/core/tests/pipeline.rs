//! End-to-end runs of the library at toy scale.

use fence_core::data::{prepare_dataset, RawSeries};
use fence_core::denoiser::checkpoint::{load_model, save_model};
use fence_core::denoiser::{
    finetune_conditional, train_unconditional, NetConfig, OracleDenoiser, OracleKind, TrainConfig,
};
use fence_core::diffusion::{quadratic_schedule, VarianceMode};
use fence_core::guidance::{GuidanceConfig, GuidanceMode};
use fence_core::masking::{generate_mask, MaskPatternConfig};
use fence_core::metrics::{crps_dataset, point_metrics};
use fence_core::oracle_world::{make_gaussian_world, synthesize_series};
use fence_core::sampler::{impute, Anchoring, SamplerConfig};
use fence_core::{GraphSpec, MaskMatrix};

#[test]
fn train_impute_evaluate_on_synthetic_series() {
    let world = make_gaussian_world(3, 6, 0.5, 0.7, 0.0, 1).unwrap();
    let series = synthesize_series(&world, 120, 2).unwrap();
    let raw = RawSeries::fully_observed(series);
    let data = prepare_dataset(&raw, 6, 2, 6).unwrap();
    let sched = quadratic_schedule(10, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap();
    let net_cfg = NetConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        n_nodes: 3,
        n_steps: 6,
        step_embedding_dim: 16,
    };
    let stage = |epochs| TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::unconditional()
    };
    let (uncond, r1) = train_unconditional(&data, &sched, net_cfg, &stage(2)).unwrap();
    let (cond, r2) = finetune_conditional(Some(uncond.clone()), net_cfg, &data, &sched, &stage(2)).unwrap();
    assert!(r1.train_loss.iter().chain(&r2.train_loss).all(|l| l.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cond.bin");
    save_model(&path, &cond, &data.normalization).unwrap();
    let (cond, norm) = load_model(&path).unwrap();
    assert_eq!(norm, data.normalization);

    let window = &data.test[0];
    let mask = generate_mask(
        &GraphSpec::ring(3).unwrap(),
        6,
        &MaskPatternConfig {
            missing_rate: 0.5,
            patch_length: 6,
            seed: 4,
            ..MaskPatternConfig::default()
        },
    )
    .unwrap();
    let observed = window.values.masked(&mask).unwrap();
    let scfg = SamplerConfig {
        n_samples: 3,
        seed: 5,
        ..SamplerConfig::default()
    };
    let result = impute(&cond, &uncond, &observed, &mask, &sched, &GuidanceConfig::default(), &scfg).unwrap();
    assert_eq!(result.samples.len(), 3);
    assert_eq!(result.traces.len(), 3 * 10 * 3);

    let eval = mask.complement();
    if eval.observed_count() > 0 {
        let m = point_metrics(&result.mean_imputation, &window.values, &eval).unwrap();
        assert!(m.mae.is_finite() && m.rmse.is_finite());
        assert!(crps_dataset(&result.samples, &window.values, &eval).unwrap().is_finite());
    }
}

#[test]
fn clamped_anchoring_returns_observations_exactly() {
    let prior = make_gaussian_world(4, 5, 0.6, 0.8, 0.0, 3).unwrap();
    let truth = prior.sample_grid();
    let mut mask = MaskMatrix::all_observed(4, 5);
    mask.set(1, 2, false);
    mask.set(2, 0, false);
    let observed = truth.masked(&mask).unwrap();
    let world = prior.observe(&observed, &mask).unwrap();
    let sched = quadratic_schedule(20, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap();
    let cond = OracleDenoiser::new(&world, &sched, OracleKind::Conditional).unwrap();
    let uncond = OracleDenoiser::new(&world, &sched, OracleKind::Prior).unwrap();
    let scfg = SamplerConfig {
        n_samples: 4,
        anchoring: Anchoring::Clamp,
        ..SamplerConfig::default()
    };
    let result = impute(&cond, &uncond, &observed, &mask, &sched, &GuidanceConfig::default(), &scfg).unwrap();
    for s in &result.samples {
        for i in 0..4 {
            for t in 0..5 {
                if mask.is_observed(i, t) {
                    assert_eq!(s.get(i, t), truth.get(i, t));
                }
            }
        }
    }
}

#[test]
fn fully_observed_grid_concentrates_on_observations() {
    let prior = make_gaussian_world(2, 4, 0.6, 0.8, 0.0, 8).unwrap();
    let truth = prior.sample_grid();
    let mask = MaskMatrix::all_observed(2, 4);
    let world = prior.observe(&truth, &mask).unwrap();
    let sched = quadratic_schedule(50, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap();
    let cond = OracleDenoiser::new(&world, &sched, OracleKind::Conditional).unwrap();
    let uncond = OracleDenoiser::new(&world, &sched, OracleKind::Prior).unwrap();
    let gcfg = GuidanceConfig {
        mode: GuidanceMode::FixedCfg(1.0),
        ..GuidanceConfig::default()
    };
    let scfg = SamplerConfig {
        n_samples: 8,
        ..SamplerConfig::default()
    };
    let result = impute(&cond, &uncond, &truth, &mask, &sched, &gcfg, &scfg).unwrap();
    for s in &result.samples {
        for (a, b) in s.values().iter().zip(truth.values()) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let prior = make_gaussian_world(4, 4, 0.6, 0.8, 0.0, 2).unwrap();
    let truth = prior.sample_grid();
    let mut mask = MaskMatrix::all_observed(4, 4);
    for t in 0..4 {
        mask.set(3, t, false);
    }
    let observed = truth.masked(&mask).unwrap();
    let world = prior.observe(&observed, &mask).unwrap();
    let sched = quadratic_schedule(20, 1e-4, 0.5, VarianceMode::BetaTilde).unwrap();
    let cond = OracleDenoiser::new(&world, &sched, OracleKind::Contaminated { pi_true: 0.5 }).unwrap();
    let uncond = OracleDenoiser::new(&world, &sched, OracleKind::Prior).unwrap();
    let scfg = SamplerConfig {
        n_samples: 6,
        seed: 11,
        n_clusters: Some(2),
        ..SamplerConfig::default()
    };
    let go = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| impute(&cond, &uncond, &observed, &mask, &sched, &GuidanceConfig::default(), &scfg).unwrap())
    };
    let a = go(1);
    let b = go(4);
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.traces, b.traces);
}
