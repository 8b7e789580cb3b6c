//! Metrics that drive the generative model: jumpy rollouts, level-restricted
//! resampling and event prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpr_numerics::{Graph, ParamStore, Tensor, Var};

use super::episodes::{batch_at, eval_samples};
use crate::config::RunConfig;
use crate::datasets::{DatasetConfig, SequenceSample};
use crate::distributions::standard_normal;
use crate::error::{Result, VprError};
use crate::model::{Detector, Hierarchy, LevelSnapshot, Model, Runtime, Sampling};

/// Runs the hierarchy over the first `prefix` steps of each sample (one row
/// per sample) and returns the state of every level.
pub fn prime(
    model: &Hierarchy,
    store: &ParamStore,
    detector: &Detector,
    samples: &[SequenceSample],
    prefix: usize,
) -> Result<Vec<LevelSnapshot>> {
    if samples.is_empty() || prefix == 0 || samples.iter().any(|s| s.len() < prefix) {
        return Err(VprError::Dimension(
            "priming needs non-empty samples covering the prefix".into(),
        ));
    }
    let mut det = detector.for_rows(samples.len());
    if det.config.reset_windows_per_episode {
        det.clear();
    }
    let mut rt = Runtime::new(model, store, samples.len(), Sampling::Mean)?;
    // Mean sampling never draws, so the generator is irrelevant.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in 0..prefix {
        rt.step(&batch_at(samples, t)?, &mut det, &mut rng)?;
    }
    Ok((0..model.num_levels()).map(|i| rt.snapshot(i)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutOptions {
    /// Zero-based level whose transition is chained.
    pub level: usize,
    pub steps: usize,
    /// Replace the temporal context of lower levels with zeros and take
    /// their states from the resulting priors.
    pub zero_lower_temporal: bool,
    /// With `zero_lower_temporal`, sample lower states instead of taking means.
    pub sample_lower: bool,
}

struct Decoder<'a> {
    model: &'a Hierarchy,
    store: &'a ParamStore,
    primed: &'a [LevelSnapshot],
}

impl Decoder<'_> {
    /// Decodes from `level` down with `s` at that level. Lower levels keep
    /// their primed states unless `opts` asks for zeroed temporal contexts.
    fn decode_down<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        s: Var,
        opts: &RolloutOptions,
        rng: &mut R,
    ) -> Result<Tensor> {
        let m = self.model;
        let rows = g.value(s).rows();
        let c_top = g.constant(self.primed[opts.level].c.clone())?;
        let mut ctx = m.decode(g, self.store, opts.level, s, c_top)?;
        for j in (0..opts.level).rev() {
            let s_j = if opts.zero_lower_temporal {
                let d0 = g.constant(Tensor::zeros(&[rows, m.deter_dim()]))?;
                let p = m.prior(g, self.store, j, d0, ctx)?;
                if opts.sample_lower {
                    p.rsample(g, standard_normal(rng, rows, m.latent_dim()))?
                } else {
                    p.mean
                }
            } else {
                g.constant(self.primed[j].s.clone())?
            };
            ctx = m.decode(g, self.store, j, s_j, ctx)?;
        }
        let out = m.reconstruct(g, self.store, ctx)?;
        let (r, c) = g.value(out).dims2()?;
        Ok(Tensor::new(
            vec![r, c],
            m.output_to_obs(g.value(out).data()),
        )?)
    }
}

/// Jumpy rollout from primed states. Returns `steps + 1` observation
/// batches: the reconstruction of the primed state, then one per transition.
/// Each transition takes the prior mean of the chained level.
pub fn rollout<R: Rng + ?Sized>(
    model: &Hierarchy,
    store: &ParamStore,
    primed: &[LevelSnapshot],
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if opts.level >= model.num_levels() || primed.len() != model.num_levels() {
        return Err(VprError::Config(format!(
            "rollout level {} is outside a {}-level model",
            opts.level + 1,
            model.num_levels()
        )));
    }
    let dec = Decoder {
        model,
        store,
        primed,
    };
    let lv = &primed[opts.level];
    let (mut s, mut d) = (lv.s.clone(), lv.d.clone());
    let mut frames = Vec::with_capacity(opts.steps + 1);
    let mut g = Graph::new();
    let sv = g.constant(s.clone())?;
    frames.push(dec.decode_down(&mut g, sv, opts, rng)?);
    for _ in 0..opts.steps {
        let mut g = Graph::new();
        let sv = g.constant(s)?;
        let dv = g.constant(d)?;
        let c = g.constant(lv.c.clone())?;
        let d_next = model.transition(&mut g, store, opts.level, sv, dv)?;
        let p = model.prior(&mut g, store, opts.level, d_next, c)?;
        frames.push(dec.decode_down(&mut g, p.mean, opts, rng)?);
        s = g.value(p.mean).clone();
        d = g.value(d_next).clone();
    }
    Ok(frames)
}

fn repeat_row(t: &Tensor, r: usize, n: usize) -> Result<Tensor> {
    let row = t.row_slice(r);
    Ok(Tensor::new(vec![n, row.len()], row.repeat(n))?)
}

/// Shannon entropy (nats) of the empirical distribution of `labels`.
pub fn empirical_entropy(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let n = labels.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Average factor entropies when only `level` (zero-based) is resampled from
/// its change prior. Every primed row is one trial with `samples` draws;
/// the other levels keep their primed states. Returns one entry per factor.
pub fn level_entropy<R: Rng + ?Sized>(
    model: &Hierarchy,
    store: &ParamStore,
    dataset: &DatasetConfig,
    primed: &[LevelSnapshot],
    level: usize,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples == 0 || level >= model.num_levels() {
        return Err(VprError::Config(
            "need at least one sample and a valid level".into(),
        ));
    }
    let trials = primed[0].s.rows();
    let factors = dataset.num_factors();
    let mut total = vec![0.0; factors];
    let opts = RolloutOptions {
        level,
        steps: 0,
        zero_lower_temporal: false,
        sample_lower: false,
    };
    for m in 0..trials {
        let tiled = primed
            .iter()
            .map(|snap| {
                Ok(LevelSnapshot {
                    x: repeat_row(&snap.x, m, samples)?,
                    c: repeat_row(&snap.c, m, samples)?,
                    d: repeat_row(&snap.d, m, samples)?,
                    s: repeat_row(&snap.s, m, samples)?,
                    post_mean: repeat_row(&snap.post_mean, m, samples)?,
                    post_log_var: repeat_row(&snap.post_log_var, m, samples)?,
                    p_ch_mean: repeat_row(&snap.p_ch_mean, m, samples)?,
                    p_ch_valid: vec![false; samples],
                    tau: vec![0; samples],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec = Decoder {
            model,
            store,
            primed: &tiled,
        };
        let lv = &tiled[level];
        let mut g = Graph::new();
        let sv = g.constant(lv.s.clone())?;
        let dv = g.constant(lv.d.clone())?;
        let c = g.constant(lv.c.clone())?;
        let d_next = model.transition(&mut g, store, level, sv, dv)?;
        let p = model.prior(&mut g, store, level, d_next, c)?;
        let s_new = p.rsample(&mut g, standard_normal(rng, samples, model.latent_dim()))?;
        let obs = dec.decode_down(&mut g, s_new, &opts, rng)?;
        if !obs.is_finite() {
            return Err(VprError::Contract("reconstructions are not finite".into()));
        }
        let labels: Vec<Vec<usize>> = (0..samples)
            .map(|r| dataset.factor_labels(obs.row_slice(r)))
            .collect();
        for (f, h) in total.iter_mut().enumerate() {
            let column: Vec<usize> = labels.iter().map(|l| l[f]).collect();
            *h += empirical_entropy(&column);
        }
    }
    Ok(total.into_iter().map(|h| h / trials as f64).collect())
}

/// Average factor entropies under level-restricted resampling, for every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    /// `entropy[level][factor]`, levels zero-based.
    pub entropy: Vec<Vec<f64>>,
    pub samples: usize,
    pub trials: usize,
}

impl DisentanglementReport {
    /// Factor with the largest entropy for each level.
    pub fn argmax_factors(&self) -> Vec<usize> {
        self.entropy
            .iter()
            .map(|row| crate::datasets::argmax(row))
            .collect()
    }

    /// Whether level `n` is most sensitive to factor `n` for every level.
    pub fn ordered(&self) -> bool {
        self.argmax_factors()
            .iter()
            .enumerate()
            .all(|(n, &f)| n == f)
    }
}

/// Primes on `trials` held-out sequences and measures every level.
pub fn disentanglement_entropy<R: Rng + ?Sized>(
    config: &RunConfig,
    model: &Model,
    store: &ParamStore,
    detector: &Detector,
    rng: &mut R,
) -> Result<DisentanglementReport> {
    let h = model.as_hierarchy()?;
    let ev = &config.evaluation;
    let samples = eval_samples(config, ev.trials, config.seq_len())?;
    let primed = prime(h, store, detector, &samples, config.seq_len())?;
    let entropy = (0..h.num_levels())
        .map(|n| level_entropy(h, store, &config.dataset, &primed, n, ev.samples, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(DisentanglementReport {
        entropy,
        samples: ev.samples,
        trials: ev.trials,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventPrediction {
    pub accuracy: f64,
    /// One over the factor's cardinality.
    pub chance: f64,
    pub episodes: usize,
    pub steps: usize,
    /// `[episode][k]` predicted factor value of the k-th event.
    pub predicted: Vec<Vec<usize>>,
    /// `[episode][k]` true factor value after the k-th event.
    pub truth: Vec<Vec<usize>>,
}

/// Held-out sequences long enough to contain `events` boundaries of `factor`
/// after the priming prefix.
fn long_samples(
    config: &RunConfig,
    factor: usize,
    n: usize,
    prefix: usize,
    events: usize,
) -> Result<Vec<SequenceSample>> {
    let mut len = prefix + 4 * events + 16;
    for _ in 0..8 {
        let samples = eval_samples(config, n, len)?;
        if samples.iter().all(|s| {
            s.boundaries[factor]
                .iter()
                .filter(|&&b| b >= prefix)
                .count()
                >= events
        }) {
            return Ok(samples);
        }
        len *= 2;
    }
    Err(VprError::Config(format!(
        "factor {factor} changes too rarely to observe {events} events"
    )))
}

/// Accuracy of a `steps`-long jumpy rollout at one-based `level`: the k-th
/// predicted factor value is compared with the value after the k-th true
/// event following the priming prefix.
pub fn event_prediction_accuracy(
    config: &RunConfig,
    model: &Model,
    store: &ParamStore,
    detector: &Detector,
    level: usize,
    steps: usize,
    episodes: usize,
) -> Result<EventPrediction> {
    let factor = config
        .dataset
        .factor_for_level(level)
        .ok_or_else(|| VprError::Config(format!("no factor is assigned to level {level}")))?;
    if steps == 0 || episodes == 0 || level == 0 || level > model.num_levels() {
        return Err(VprError::Config(
            "event prediction needs steps, episodes and a valid level".into(),
        ));
    }
    let prefix = config.seq_len();
    let samples = long_samples(config, factor, episodes, prefix, steps)?;
    let labels_of = |o: &[f64]| config.dataset.factor_labels(o)[factor];
    let truth: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| {
            s.boundaries[factor]
                .iter()
                .filter(|&&b| b >= prefix)
                .take(steps)
                .map(|&b| labels_of(&s.observations[b]))
                .collect()
        })
        .collect();
    let predicted: Vec<Vec<usize>> = match model {
        Model::Toy(toy) => samples
            .iter()
            .map(|s| {
                let obs: Vec<f64> = s.observations[..prefix].iter().map(|o| o[0]).collect();
                let mut det = detector.for_rows(1);
                if det.config.reset_windows_per_episode {
                    det.clear();
                }
                let cfg = det.config.clone();
                let ep = toy.run_episode(store, &obs, det.window_mut(0, 0), &cfg)?;
                Ok(toy
                    .rollout(store, ep.state, steps)?
                    .iter()
                    .map(|&v| labels_of(&[v]))
                    .collect())
            })
            .collect::<Result<_>>()?,
        Model::Hierarchy(h) => {
            let primed = prime(h, store, detector, &samples, prefix)?;
            let opts = RolloutOptions {
                level: level - 1,
                steps,
                zero_lower_temporal: config.evaluation.zero_lower_temporal,
                sample_lower: config.evaluation.sample_lower,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let frames = rollout(h, store, &primed, &opts, &mut rng)?;
            (0..episodes)
                .map(|e| {
                    frames[1..]
                        .iter()
                        .map(|f| labels_of(f.row_slice(e)))
                        .collect()
                })
                .collect()
        }
    };
    let hits: usize = predicted
        .iter()
        .zip(&truth)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| a == b).count())
        .sum();
    Ok(EventPrediction {
        accuracy: hits as f64 / (episodes * steps) as f64,
        chance: 1.0 / config.dataset.factor_cardinalities()[factor] as f64,
        episodes,
        steps,
        predicted,
        truth,
    })
}

/// Mean objective-time gap between updates of each level, `None` for levels
/// that never updated twice.
pub fn update_rate(run: &super::EpisodeRun, levels: usize) -> Vec<Option<f64>> {
    (0..levels).map(|i| run.mean_interval(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{MovingBallConfig, NestedFactorsConfig};
    use crate::detection::DetectorConfig;
    use crate::model::HierarchyConfig;

    fn tiny(dataset: DatasetConfig, levels: usize) -> (RunConfig, Model, ParamStore, Detector) {
        let mut c = RunConfig {
            dataset,
            model: HierarchyConfig {
                num_levels: levels,
                latent_dim: 3,
                deter_dim: 8,
                layers: 2,
                ..HierarchyConfig::default()
            },
            ..RunConfig::default()
        };
        c.evaluation.rollout_level = levels;
        c.evaluation.trials = 3;
        c.evaluation.samples = 5;
        let c = c.resolve().unwrap();
        let mut store = ParamStore::new();
        let model = Model::init(&c, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let det = Detector::new(DetectorConfig::default(), 2, levels);
        (c, model, store, det)
    }

    #[test]
    fn entropy_of_uniform_labels_is_log_cardinality() {
        assert!((empirical_entropy(&[0, 1, 2, 3]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(empirical_entropy(&[2, 2, 2]), 0.0);
    }

    #[test]
    fn zero_step_rollout_is_primed_reconstruction() {
        let (c, model, store, det) =
            tiny(DatasetConfig::MovingBall(MovingBallConfig::default()), 2);
        let h = model.as_hierarchy().unwrap();
        let samples = eval_samples(&c, 2, 15).unwrap();
        let primed = prime(h, &store, &det, &samples, 15).unwrap();
        let before = primed.clone();
        let opts = RolloutOptions {
            level: 1,
            steps: 0,
            zero_lower_temporal: false,
            sample_lower: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frames = rollout(h, &store, &primed, &opts, &mut rng).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(primed, before);
        let long = rollout(
            h,
            &store,
            &primed,
            &RolloutOptions { steps: 4, ..opts },
            &mut rng,
        )
        .unwrap();
        assert_eq!(long.len(), 5);
        assert_eq!(long[0], frames[0]);
    }

    #[test]
    fn entropies_are_bounded_by_cardinality() {
        let ds = DatasetConfig::NestedFactors(NestedFactorsConfig::default());
        let (c, model, store, det) = tiny(ds.clone(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rep = disentanglement_entropy(&c, &model, &store, &det, &mut rng).unwrap();
        assert_eq!(rep.entropy.len(), 3);
        for row in &rep.entropy {
            assert_eq!(row.len(), 3);
            for &h in row {
                assert!((0.0..=4f64.ln() + 1e-12).contains(&h));
            }
        }
    }

    #[test]
    fn event_prediction_shapes_and_chance() {
        let (c, model, store, det) =
            tiny(DatasetConfig::MovingBall(MovingBallConfig::default()), 2);
        let r = event_prediction_accuracy(&c, &model, &store, &det, 2, 10, 2).unwrap();
        assert_eq!(r.chance, 0.25);
        assert_eq!(r.predicted.len(), 2);
        assert!(r.truth.iter().all(|t| t.len() == 10));
        assert!((0.0..=1.0).contains(&r.accuracy));
    }
}
