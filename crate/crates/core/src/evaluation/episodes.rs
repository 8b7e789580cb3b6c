use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpr_numerics::{ParamStore, Tensor};

use super::f1::{pooled_f1, BoundaryScore};
use crate::config::RunConfig;
use crate::datasets::{sequence_seed, SequenceSample};
use crate::detection::{DecisionMask, TraceRecord};
use crate::error::{Result, VprError};
use crate::model::{Detector, KlParts, Model, Runtime, Sampling};

/// Which detections to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detections {
    /// Steps where the level actually updated.
    Updates,
    /// Steps where criterion E fired.
    Expected,
    /// Steps where criterion U fired.
    Unexpected,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct KlDecomposition {
    pub entropy_gap: f64,
    pub cross_entropy_gap: f64,
    pub steps: usize,
}

/// Routing record of a batch of evaluation episodes.
#[derive(Clone, Debug, Default)]
pub struct EpisodeRun {
    pub masks: Vec<DecisionMask>,
    /// `[episode][level]` steps at which criterion E fired.
    pub fired_ce: Vec<Vec<Vec<usize>>>,
    /// `[episode][level]` steps at which criterion U fired.
    pub fired_cu: Vec<Vec<Vec<usize>>>,
    pub traces: Vec<TraceRecord>,
    /// `[level]` KL decompositions at steps where the level updated.
    pub parts: Vec<Vec<KlParts>>,
}

impl EpisodeRun {
    fn with_shape(episodes: usize, levels: usize) -> Self {
        Self {
            masks: vec![DecisionMask::new(levels); episodes],
            fired_ce: vec![vec![Vec::new(); levels]; episodes],
            fired_cu: vec![vec![Vec::new(); levels]; episodes],
            traces: Vec::new(),
            parts: vec![Vec::new(); levels],
        }
    }

    /// Detected steps of one episode at a zero-based level.
    pub fn detections(&self, episode: usize, level: usize, which: Detections) -> Vec<usize> {
        match which {
            Detections::Updates => self.masks[episode].boundaries(level),
            Detections::Expected => self.fired_ce[episode][level].clone(),
            Detections::Unexpected => self.fired_cu[episode][level].clone(),
        }
    }

    /// F1 pooled over episodes, against the boundaries of `factor`.
    pub fn f1(
        &self,
        samples: &[SequenceSample],
        level: usize,
        factor: usize,
        tol: usize,
        which: Detections,
    ) -> BoundaryScore {
        let preds: Vec<Vec<usize>> = (0..self.masks.len())
            .map(|e| self.detections(e, level, which))
            .collect();
        pooled_f1(
            preds
                .iter()
                .zip(samples)
                .map(|(p, s)| (p.as_slice(), s.boundaries[factor].as_slice(), s.len())),
            tol,
        )
    }

    /// Mean objective-time gap between consecutive updates of a level,
    /// pooled over episodes. `None` when no episode updated twice.
    pub fn mean_interval(&self, level: usize) -> Option<f64> {
        let (mut total, mut count) = (0usize, 0usize);
        for m in &self.masks {
            let steps = m.subjective_steps(level);
            for w in steps.windows(2) {
                total += w[1] - w[0];
                count += 1;
            }
        }
        (count > 0).then(|| total as f64 / count as f64)
    }

    /// Mean absolute entropy and cross-entropy differences between the
    /// change and static branches over the recorded update steps of a level.
    pub fn kl_decomposition(&self, level: usize) -> Option<KlDecomposition> {
        let parts = self.parts.get(level).filter(|p| !p.is_empty())?;
        let n = parts.len() as f64;
        Some(KlDecomposition {
            entropy_gap: parts
                .iter()
                .map(|p| (p.entropy_ch - p.entropy_st).abs())
                .sum::<f64>()
                / n,
            cross_entropy_gap: parts
                .iter()
                .map(|p| (p.cross_ch - p.cross_st).abs())
                .sum::<f64>()
                / n,
            steps: parts.len(),
        })
    }

    pub fn update_counts(&self) -> Vec<Vec<usize>> {
        self.masks.iter().map(DecisionMask::update_counts).collect()
    }
}

const EVAL_STREAM: u64 = 0x5A3B_1E00_0000_0002;

/// Held-out sequences, drawn from a stream disjoint from training.
pub fn eval_samples(config: &RunConfig, n: usize, len: usize) -> Result<Vec<SequenceSample>> {
    let seed = sequence_seed(config.training.seed ^ EVAL_STREAM, 0);
    (0..n as u64)
        .map(|i| config.dataset.generate_indexed(seed, i, len))
        .collect()
}

/// Stacks step `t` of every sample into a `[rows, obs_dim]` tensor.
pub fn batch_at(samples: &[SequenceSample], t: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.observations[t].clone()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

fn check_lengths(samples: &[SequenceSample]) -> Result<usize> {
    let len = samples.first().map(SequenceSample::len).unwrap_or(0);
    if samples.is_empty() || samples.iter().any(|s| s.len() != len) {
        return Err(VprError::Dimension(
            "episodes must be non-empty and of equal length".into(),
        ));
    }
    Ok(len)
}

/// Runs evaluation episodes with posterior means. The trained detector is
/// copied (row `r` starts from slot `r mod slots`) unless the detector
/// config asks for fresh windows each episode.
pub fn run_episodes(
    model: &Model,
    store: &ParamStore,
    detector: &Detector,
    samples: &[SequenceSample],
    record_parts: bool,
) -> Result<EpisodeRun> {
    let len = check_lengths(samples)?;
    let n = samples.len();
    let levels = model.num_levels();
    let mut det = detector.for_rows(n);
    if det.config.reset_windows_per_episode {
        det.clear();
    }
    let mut run = EpisodeRun::with_shape(n, levels);
    match model {
        Model::Toy(toy) => {
            for (e, sample) in samples.iter().enumerate() {
                let obs: Vec<f64> = sample.observations.iter().map(|o| o[0]).collect();
                let cfg = det.config.clone();
                let ep = toy.run_episode(store, &obs, det.window_mut(e, 0), &cfg)?;
                for step in &ep.steps {
                    if step.decision.fired_ce {
                        run.fired_ce[e][0].push(step.t);
                    }
                    if step.decision.fired_cu {
                        run.fired_cu[e][0].push(step.t);
                    }
                    run.traces
                        .push(TraceRecord::from_decision(e, step.t, 1, &step.decision));
                }
                run.masks[e] = ep.mask;
            }
        }
        Model::Hierarchy(h) => {
            let mut rt = Runtime::new(h, store, n, Sampling::Mean)?;
            rt.record_parts = record_parts;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for t in 0..len {
                let info = rt.step(&batch_at(samples, t)?, &mut det, &mut rng)?;
                for (i, row) in info.decisions.iter().enumerate() {
                    for (e, d) in row.iter().enumerate() {
                        let Some(d) = d else { continue };
                        if d.fired_ce {
                            run.fired_ce[e][i].push(t);
                        }
                        if d.fired_cu {
                            run.fired_cu[e][i].push(t);
                        }
                        run.traces.push(TraceRecord::from_decision(e, t, i + 1, d));
                        if let (true, Some(p)) = (d.open, info.parts[i][e]) {
                            run.parts[i].push(p);
                        }
                    }
                }
            }
            run.masks = rt.into_masks();
        }
    }
    run.traces.sort_by_key(|r| (r.episode, r.t, r.level));
    Ok(run)
}
