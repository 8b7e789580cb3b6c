//! Training loop, checkpoints and on-the-fly boundary scoring.
//!
//! Every source of randomness is derived from `(seed, iteration)`, so a run
//! resumed from a checkpoint replays exactly what the uninterrupted run
//! would have done.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpr_numerics::{adam_step, AdamState, Graph, NumericsError, ParamStore};

use crate::config::RunConfig;
use crate::datasets::{read_dataset, sequence_seed, SequenceSample};
use crate::detection::TraceRecord;
use crate::error::{Result, VprError};
use crate::evaluation::{
    batch_at, eval_samples, run_episodes, BoundaryScore, Detections, EpisodeRun,
};
use crate::model::{Detector, Model, Runtime, Sampling};

const SAMPLING_STREAM: u64 = 0x5A3B_1E00_0000_0001;

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub params: ParamStore,
    pub adam: AdamState,
    pub detector: Detector,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| VprError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VprError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub loss: f64,
    pub recon: f64,
    /// Mean masked KL per sequence, per level.
    pub kl: Vec<f64>,
    pub beta: f64,
    pub lr: f64,
    /// Mean updates per sequence, per level.
    pub updates: Vec<f64>,
    /// Held-out F1 of the detection level, on evaluation iterations.
    pub f1: Option<f64>,
}

/// Append-only CSV of [`IterationLog`]s. The header is written only when
/// the file is new or empty, so resumed runs keep extending the same log.
pub struct MetricsLog {
    file: std::fs::File,
    path: std::path::PathBuf,
    levels: usize,
}

impl MetricsLog {
    pub fn open(path: &Path, levels: usize) -> Result<Self> {
        use std::io::Write;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| VprError::io(path, e))?;
        let empty = file.metadata().map_err(|e| VprError::io(path, e))?.len() == 0;
        if empty {
            let mut cols = vec![
                "iteration".to_string(),
                "loss".into(),
                "recon".into(),
                "beta".into(),
                "lr".into(),
            ];
            cols.extend((1..=levels).map(|n| format!("kl_l{n}")));
            cols.extend((1..=levels).map(|n| format!("updates_l{n}")));
            cols.push("f1".into());
            writeln!(file, "{}", cols.join(",")).map_err(|e| VprError::io(path, e))?;
        }
        Ok(Self {
            file,
            path: path.to_path_buf(),
            levels,
        })
    }

    pub fn append(&mut self, log: &IterationLog) -> Result<()> {
        use std::io::Write;
        let mut cols = vec![
            log.iteration.to_string(),
            log.loss.to_string(),
            log.recon.to_string(),
            log.beta.to_string(),
            log.lr.to_string(),
        ];
        let levels = self.levels;
        let pad = |v: &[f64]| -> Vec<String> {
            (0..levels)
                .map(|i| v.get(i).map_or(String::new(), f64::to_string))
                .collect()
        };
        cols.extend(pad(&log.kl));
        cols.extend(pad(&log.updates));
        cols.push(log.f1.map_or(String::new(), |f| f.to_string()));
        writeln!(self.file, "{}", cols.join(",")).map_err(|e| VprError::io(&self.path, e))
    }
}

/// State captured when training hits a non-finite value.
#[derive(Clone, Debug, Serialize)]
pub struct FailureDump {
    pub iteration: u64,
    pub batch: Vec<SequenceSample>,
    pub traces: Vec<TraceRecord>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: AdamState,
    pub detector: Detector,
    pub iteration: u64,
    file_data: Option<Vec<SequenceSample>>,
    pub last_failure: Option<FailureDump>,
}

fn load_file_data(config: &RunConfig) -> Result<Option<Vec<SequenceSample>>> {
    let Some(path) = &config.training.dataset_file else {
        return Ok(None);
    };
    let records = read_dataset(path)?;
    if records.is_empty() {
        return Err(VprError::Config(format!(
            "{} holds no sequences",
            path.display()
        )));
    }
    let samples: Vec<SequenceSample> = records.into_iter().map(|r| r.sample).collect();
    if samples.iter().any(|s| s.obs_dim() != config.model.obs_dim) {
        return Err(VprError::Dimension(format!(
            "{} does not match obs_dim {}",
            path.display(),
            config.model.obs_dim
        )));
    }
    Ok(Some(samples))
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let config = config.resolve()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
        let model = Model::init(&config, &mut store, &mut rng)?;
        let detector = Detector::new(
            config.detector.clone(),
            config.training.batch_size,
            model.num_levels(),
        );
        Ok(Self {
            file_data: load_file_data(&config)?,
            config,
            model,
            store,
            adam: AdamState::new(),
            detector,
            iteration: 0,
            last_failure: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt.config.resolve()?;
        let model = Model::for_store(&config, &ckpt.params)?;
        if ckpt.detector.slots() != config.training.batch_size {
            return Err(VprError::Contract(
                "checkpoint detector does not match the batch size".into(),
            ));
        }
        let mut store = ckpt.params;
        store.zero_grad();
        Ok(Self {
            file_data: load_file_data(&config)?,
            config,
            model,
            store,
            adam: ckpt.adam,
            detector: ckpt.detector,
            iteration: ckpt.iteration,
            last_failure: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.store.clone();
        params.clear_grads();
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            params,
            adam: self.adam.clone(),
            detector: self.detector.clone(),
        }
    }

    /// Training sequences of iteration `it`.
    pub fn batch(&self, it: u64) -> Result<Vec<SequenceSample>> {
        let b = self.config.training.batch_size as u64;
        let len = self.config.seq_len();
        (0..b)
            .map(|r| {
                let index = it * b + r;
                match &self.file_data {
                    Some(data) => {
                        let s = &data[(index % data.len() as u64) as usize];
                        if s.len() < len {
                            return Err(VprError::Dimension(format!(
                                "dataset sequences have {} steps, training needs {len}",
                                s.len()
                            )));
                        }
                        Ok(truncate(s, len))
                    }
                    None => {
                        self.config
                            .dataset
                            .generate_indexed(self.config.training.seed, index, len)
                    }
                }
            })
            .collect()
    }

    /// Held-out sequences, drawn from a stream disjoint from training.
    pub fn eval_samples(&self, n: usize, len: usize) -> Result<Vec<SequenceSample>> {
        eval_samples(&self.config, n, len)
    }

    pub fn step(&mut self) -> Result<IterationLog> {
        let it = self.iteration;
        let sched = &self.config.training.schedule;
        let (lr, beta) = (sched.lr_at(it), sched.kl_beta(it));
        let batch = self.batch(it)?;
        let mut log = match self.model.clone() {
            Model::Toy(toy) => self.toy_step(&toy, &batch, lr)?,
            Model::Hierarchy(_) => self.hierarchy_step(&batch, lr, beta)?,
        };
        log.lr = lr;
        log.beta = beta;
        self.iteration += 1;
        let every = self.config.training.eval_every;
        if every > 0 && self.iteration % every == 0 {
            log.f1 = Some(self.detection_f1()?);
        }
        Ok(log)
    }

    fn toy_step(
        &mut self,
        toy: &crate::model::ToyModel,
        batch: &[SequenceSample],
        lr: f64,
    ) -> Result<IterationLog> {
        let cfg = self.detector.config.clone();
        let mut pairs = Vec::new();
        let mut updates = 0usize;
        for (r, s) in batch.iter().enumerate() {
            let obs: Vec<f64> = s.observations.iter().map(|o| o[0]).collect();
            let ep = toy.run_episode(&self.store, &obs, self.detector.window_mut(r, 0), &cfg)?;
            updates += ep.mask.update_counts()[0];
            pairs.extend(ep.pairs);
        }
        let mut loss = 0.0;
        if !pairs.is_empty() {
            let mut g = Graph::new();
            let l = toy.fit_loss(&mut g, &self.store, &pairs)?;
            loss = g.value(l).item()?;
            self.apply(&g, l, lr)?;
        }
        Ok(IterationLog {
            iteration: self.iteration,
            loss,
            recon: 0.0,
            kl: vec![loss],
            beta: 0.0,
            lr,
            updates: vec![updates as f64 / batch.len() as f64],
            f1: None,
        })
    }

    fn hierarchy_step(
        &mut self,
        batch: &[SequenceSample],
        lr: f64,
        beta: f64,
    ) -> Result<IterationLog> {
        let it = self.iteration;
        let h = self.model.as_hierarchy()?.clone();
        let rows = batch.len();
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(
            self.config.training.seed ^ SAMPLING_STREAM,
            it,
        ));
        let mut traces = Vec::new();
        let result = (|| -> Result<(Graph, vpr_numerics::Var, IterationLog)> {
            let mut rt = Runtime::new(&h, &self.store, rows, Sampling::Sample)?;
            for t in 0..self.config.seq_len() {
                let info = rt.step(&batch_at(batch, t)?, &mut self.detector, &mut rng)?;
                for (i, row) in info.decisions.iter().enumerate() {
                    for (e, d) in row.iter().enumerate() {
                        if let Some(d) = d {
                            traces.push(TraceRecord::from_decision(e, t, i + 1, d));
                        }
                    }
                }
            }
            let loss = rt.loss(beta)?;
            let value = rt.graph.value(loss).item()?;
            let n = h.num_levels();
            let counts =
                rt.masks()
                    .iter()
                    .map(|m| m.update_counts())
                    .fold(vec![0usize; n], |mut acc, c| {
                        acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                        acc
                    });
            let log = IterationLog {
                iteration: it,
                loss: value,
                recon: rt.recon_total() / rows as f64,
                kl: rt.kl_totals().iter().map(|k| k / rows as f64).collect(),
                beta,
                lr,
                updates: counts.iter().map(|&c| c as f64 / rows as f64).collect(),
                f1: None,
            };
            Ok((rt.graph, loss, log))
        })();
        let (graph, loss, log) = match result {
            Ok(v) => v,
            Err(VprError::Numerics(NumericsError::NonFinite(_))) => {
                return Err(self.fail(batch, traces));
            }
            Err(e) => return Err(e),
        };
        if !log.loss.is_finite() {
            return Err(self.fail(batch, traces));
        }
        match self.apply(&graph, loss, lr) {
            Err(VprError::Numerics(NumericsError::NonFinite(_))) => Err(self.fail(batch, traces)),
            Err(e) => Err(e),
            Ok(()) => Ok(log),
        }
    }

    fn fail(&mut self, batch: &[SequenceSample], traces: Vec<TraceRecord>) -> VprError {
        self.last_failure = Some(FailureDump {
            iteration: self.iteration,
            batch: batch.to_vec(),
            traces,
        });
        VprError::NonFiniteLoss {
            iteration: self.iteration,
        }
    }

    fn apply(&mut self, g: &Graph, loss: vpr_numerics::Var, lr: f64) -> Result<()> {
        let grads = g.backward(loss)?;
        self.store.zero_grad();
        self.store.accumulate(g, &grads)?;
        if let Some(clip) = self.config.training.grad_clip {
            self.store.clip_grad_norm(clip);
        }
        adam_step(&mut self.store, &mut self.adam, lr)?;
        Ok(())
    }

    /// Runs until the configured iteration count, calling `on_log` after
    /// every iteration.
    pub fn run<F>(&mut self, mut on_log: F) -> Result<()>
    where
        F: FnMut(&IterationLog, &Trainer) -> Result<()>,
    {
        while self.iteration < self.config.training.iterations {
            let log = self.step()?;
            on_log(&log, self)?;
        }
        Ok(())
    }

    /// Held-out episodes run with the current parameters and a copy of the
    /// trained detector.
    pub fn evaluate(
        &self,
        n: usize,
        record_parts: bool,
    ) -> Result<(Vec<SequenceSample>, EpisodeRun)> {
        let samples = self.eval_samples(n, self.config.seq_len())?;
        let run = run_episodes(
            &self.model,
            &self.store,
            &self.detector,
            &samples,
            record_parts,
        )?;
        Ok((samples, run))
    }

    /// Boundary score of the level that detects events (the only level in
    /// toy mode, otherwise the second) over `n` held-out episodes. `None`
    /// when the dataset assigns no factor to that level.
    pub fn detection_score(&self, n: usize, which: Detections) -> Result<Option<BoundaryScore>> {
        let level = detection_level(&self.model);
        let Some(factor) = self.config.dataset.factor_for_level(level + 1) else {
            return Ok(None);
        };
        let (samples, run) = self.evaluate(n.max(1), false)?;
        Ok(Some(run.f1(
            &samples,
            level,
            factor,
            self.config.evaluation.tolerance,
            which,
        )))
    }

    pub fn detection_f1(&self) -> Result<f64> {
        Ok(self
            .detection_score(self.config.training.eval_episodes, Detections::Updates)?
            .map_or(f64::NAN, |s| s.f1))
    }
}

/// Zero-based level whose updates are scored as boundaries.
pub fn detection_level(model: &Model) -> usize {
    match model {
        Model::Toy(_) => 0,
        Model::Hierarchy(h) => usize::from(h.num_levels() > 1),
    }
}

fn truncate(s: &SequenceSample, len: usize) -> SequenceSample {
    SequenceSample {
        observations: s.observations[..len].to_vec(),
        boundaries: s
            .boundaries
            .iter()
            .map(|b| b.iter().copied().filter(|&t| t < len).collect())
            .collect(),
        factor_values: s.factor_values.iter().map(|f| f[..len].to_vec()).collect(),
    }
}
