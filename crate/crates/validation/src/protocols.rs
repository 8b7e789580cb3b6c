//! Desk-scale training recipes for each dataset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpr_core::config::RunConfig;
use vpr_core::datasets::{DatasetConfig, MovingBallConfig, NestedFactorsConfig, Synthetic1DConfig};
use vpr_core::detection::Criteria;
use vpr_core::evaluation::{
    disentanglement_entropy, event_prediction_accuracy, Detections, DisentanglementReport,
    EventPrediction, KlDecomposition,
};
use vpr_core::model::UpdateMode;
use vpr_core::training::{detection_level, Trainer};
use vpr_core::Result;

/// Episodes used to score a trained model.
pub const EVAL_EPISODES: usize = 64;

pub fn toy(noise: f64, criteria: Criteria, seed: u64, iterations: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset = DatasetConfig::Synthetic1d(Synthetic1DConfig {
        noise,
        ..Synthetic1DConfig::default()
    });
    c.model.num_levels = 1;
    c.model.update_mode = UpdateMode::Toy;
    c.detector.criteria = criteria;
    c.training.iterations = iterations;
    c.training.batch_size = 16;
    c.training.seed = seed;
    c.training.eval_every = 0;
    c.training.checkpoint_every = 0;
    c.evaluation.rollout_level = 1;
    c
}

/// Small dense model shared by the feature-level datasets.
fn small_model(c: &mut RunConfig, levels: usize) {
    c.model.num_levels = levels;
    c.model.latent_dim = 8;
    c.model.deter_dim = 32;
    c.model.layers = 2;
    c.training.batch_size = 16;
    c.training.eval_every = 0;
    c.training.checkpoint_every = 0;
}

pub fn moving_ball(speed: f64, seed: u64, iterations: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset = DatasetConfig::MovingBall(MovingBallConfig {
        speed,
        ..MovingBallConfig::default()
    });
    small_model(&mut c, 2);
    c.training.iterations = iterations;
    c.training.seed = seed;
    c
}

pub fn nested(mode: UpdateMode, seed: u64, iterations: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset = DatasetConfig::NestedFactors(NestedFactorsConfig::default());
    small_model(&mut c, 3);
    c.model.update_mode = mode;
    c.training.iterations = iterations;
    c.training.seed = seed;
    c.evaluation.trials = 16;
    c.evaluation.samples = 20;
    c
}

pub fn train(config: RunConfig) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.run(|_, _| Ok(()))?;
    Ok(t)
}

/// F1 of the detection level's updates against its factor's boundaries.
pub fn detection_f1(t: &Trainer, which: Detections) -> Result<f64> {
    Ok(t.detection_score(EVAL_EPISODES, which)?
        .map_or(f64::NAN, |s| s.f1))
}

/// Mean objective-time gap between updates of the detection level.
pub fn detection_interval(t: &Trainer) -> Result<f64> {
    let (_, run) = t.evaluate(EVAL_EPISODES, false)?;
    Ok(run
        .mean_interval(detection_level(&t.model))
        .unwrap_or(f64::INFINITY))
}

pub fn disentanglement(t: &Trainer) -> Result<DisentanglementReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(t.config.training.seed);
    disentanglement_entropy(&t.config, &t.model, &t.store, &t.detector, &mut rng)
}

pub fn event_prediction(t: &Trainer, steps: usize, episodes: usize) -> Result<EventPrediction> {
    event_prediction_accuracy(
        &t.config,
        &t.model,
        &t.store,
        &t.detector,
        2,
        steps,
        episodes,
    )
}

/// Entropy and cross-entropy gaps at the detection level's criterion evaluations.
pub fn kl_decomposition(t: &Trainer) -> Result<Option<KlDecomposition>> {
    let (_, run) = t.evaluate(EVAL_EPISODES, true)?;
    Ok(run.kl_decomposition(detection_level(&t.model)))
}
