use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use vpr_core::config::RunConfig;
use vpr_core::datasets::{read_dataset, write_dataset, DatasetRecord, SequenceSample};
use vpr_core::evaluation::{
    cu_sensitivity_sweep, disentanglement_entropy, event_prediction_accuracy, run_episodes,
    update_rate, write_csv, write_metrics_csv, write_report_json, BoundaryScore, Detections,
    DisentanglementReport, EpisodeRun, EventPrediction, KlDecomposition, Recorder, SweepGrid,
};
use vpr_core::training::{detection_level, Checkpoint, MetricsLog, Trainer};
use vpr_core::VprError;

use crate::{Command, Common};

pub const OUT_ROOT_ENV: &str = "VPR_OUT_ROOT";
const METRICS: [&str; 5] = [
    "f1",
    "update_rate",
    "disentanglement",
    "rollout",
    "kl_parts",
];

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            common,
            count,
            length,
        } => generate(&common, count, length),
        Command::Train {
            common,
            resume,
            iterations,
        } => train(&common, resume.as_deref(), iterations),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            metrics,
            level,
            steps,
        } => eval(
            &common,
            &checkpoint,
            dataset.as_deref(),
            &metrics,
            level,
            steps,
        ),
        Command::Sweep {
            common,
            grid,
            seeds,
            iterations,
            workers,
        } => sweep(&common, &grid, seeds, iterations, workers),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.training.seed = seed;
    }
    Ok(config)
}

fn output_dir(common: &Common, config: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = match (&common.out, &config.output_dir) {
        (Some(d), _) | (None, Some(d)) => d.clone(),
        (None, None) => std::env::var_os(OUT_ROOT_ENV)
            .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
            .join(command),
    };
    std::fs::create_dir_all(&dir).map_err(|e| VprError::io(&dir, e))?;
    Ok(dir)
}

fn write_snapshot(dir: &Path, config: &RunConfig) -> Result<()> {
    let path = dir.join("config.resolved.toml");
    std::fs::write(&path, config.to_toml_string()?).map_err(|e| VprError::io(&path, e))?;
    Ok(())
}

fn generate(common: &Common, count: usize, length: Option<usize>) -> Result<()> {
    let config = load_config(common)?.resolve()?;
    let len = length.unwrap_or_else(|| config.seq_len());
    if count == 0 || len == 0 {
        return Err(VprError::Config("count and length must be >= 1".into()).into());
    }
    let seed = config.training.seed;
    let records = (0..count as u64)
        .map(|index| {
            Ok(DatasetRecord {
                seed,
                index,
                config: config.dataset.clone(),
                sample: config.dataset.generate_indexed(seed, index, len)?,
            })
        })
        .collect::<vpr_core::Result<Vec<_>>>()?;
    let dir = output_dir(common, &config, "generate")?;
    write_snapshot(&dir, &config)?;
    let path = dir.join("dataset.ndjson");
    write_dataset(&path, &records)?;
    println!(
        "wrote {count} sequences of length {len} to {}",
        path.display()
    );
    for k in 0..config.dataset.num_factors() {
        let total: usize = records.iter().map(|r| r.sample.boundaries[k].len()).sum();
        println!(
            "factor {k}: {total} boundaries ({:.3} per sequence)",
            total as f64 / count as f64
        );
    }
    Ok(())
}

fn train(common: &Common, resume: Option<&Path>, iterations: Option<u64>) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            if let Some(n) = iterations {
                ckpt.config.training.iterations = n;
            }
            if common.config.is_some() || common.seed.is_some() {
                let mut wanted = load_config(common)?.resolve()?;
                wanted.training.iterations = ckpt.config.training.iterations;
                wanted.output_dir.clone_from(&ckpt.config.output_dir);
                if wanted != ckpt.config.clone().resolve()? {
                    return Err(VprError::Config(format!(
                        "{} was trained with a different configuration",
                        path.display()
                    ))
                    .into());
                }
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => {
            let mut config = load_config(common)?;
            if let Some(n) = iterations {
                config.training.iterations = n;
            }
            Trainer::new(config)?
        }
    };
    let dir = output_dir(common, &trainer.config, "train")?;
    write_snapshot(&dir, &trainer.config)?;
    let mut log = MetricsLog::open(&dir.join("metrics.csv"), trainer.model.num_levels())?;
    let ckpt_path = dir.join("checkpoint.json");
    let every = trainer.config.training.checkpoint_every;
    let result = trainer.run(|entry, t| {
        log.append(entry)?;
        if let Some(f1) = entry.f1 {
            println!(
                "iteration {:>6}  loss {:.4}  f1 {f1:.3}",
                t.iteration, entry.loss
            );
        }
        if every > 0 && t.iteration % every == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if let Some(dump) = &trainer.last_failure {
            let path = dir.join("failure.json");
            std::fs::write(&path, serde_json::to_string_pretty(dump)?)
                .map_err(|e| VprError::io(&path, e))?;
            eprintln!("wrote diagnostic dump to {}", path.display());
        }
        return Err(e.into());
    }
    trainer.checkpoint().save(&ckpt_path)?;
    println!(
        "trained to iteration {}; checkpoint at {}",
        trainer.iteration,
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Default, Serialize)]
struct EvalResults {
    f1: Vec<LevelScore>,
    update_rate: Option<Vec<Option<f64>>>,
    disentanglement: Option<DisentanglementReport>,
    rollout: Option<EventPrediction>,
    kl_parts: Option<KlDecomposition>,
}

#[derive(Serialize)]
struct LevelScore {
    level: usize,
    factor: usize,
    score: BoundaryScore,
}

fn file_samples(path: &Path, obs_dim: usize) -> Result<Vec<SequenceSample>> {
    let samples: Vec<SequenceSample> = read_dataset(path)?.into_iter().map(|r| r.sample).collect();
    if samples.is_empty() || samples.iter().any(|s| s.obs_dim() != obs_dim) {
        return Err(VprError::Dimension(format!(
            "{} is empty or does not match obs_dim {obs_dim}",
            path.display()
        ))
        .into());
    }
    Ok(samples)
}

fn eval(
    common: &Common,
    checkpoint: &Path,
    dataset: Option<&Path>,
    metrics: &[String],
    level: Option<usize>,
    steps: Option<usize>,
) -> Result<()> {
    if let Some(m) = metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
        return Err(VprError::UnknownMetric(m.clone()).into());
    }
    let mut ckpt = Checkpoint::load(checkpoint)?;
    if let Some(path) = &common.config {
        ckpt.config.evaluation = RunConfig::load(path)?.evaluation;
    }
    if let Some(seed) = common.seed {
        ckpt.config.training.seed = seed;
    }
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let config = trainer.config.clone();
    let want = |m: &str| metrics.iter().any(|x| x == m);
    let levels = trainer.model.num_levels();
    let mut results = EvalResults::default();
    let mut rec = Recorder::new(checkpoint.display().to_string(), &config)?;

    if want("f1") || want("update_rate") || want("kl_parts") {
        let (samples, run): (Vec<SequenceSample>, EpisodeRun) = match dataset {
            Some(path) => {
                let samples = file_samples(path, config.model.obs_dim)?;
                let run = run_episodes(
                    &trainer.model,
                    &trainer.store,
                    &trainer.detector,
                    &samples,
                    want("kl_parts"),
                )?;
                (samples, run)
            }
            None => trainer.evaluate(config.evaluation.episodes, want("kl_parts"))?,
        };
        if want("f1") {
            for n in 0..levels {
                let Some(factor) = config.dataset.factor_for_level(n + 1) else {
                    continue;
                };
                let score = run.f1(
                    &samples,
                    n,
                    factor,
                    config.evaluation.tolerance,
                    Detections::Updates,
                );
                for (name, v) in [
                    ("precision", score.precision),
                    ("recall", score.recall),
                    ("f1", score.f1),
                    ("tpr", score.true_positive_rate),
                    ("fpr", score.false_positive_rate),
                ] {
                    rec.push(name, Some(n + 1), Some(factor), v);
                }
                results.f1.push(LevelScore {
                    level: n + 1,
                    factor,
                    score,
                });
            }
        }
        if want("update_rate") {
            let rates = update_rate(&run, levels);
            for (n, r) in rates.iter().enumerate() {
                rec.push(
                    "mean_update_interval",
                    Some(n + 1),
                    None,
                    r.unwrap_or(f64::NAN),
                );
            }
            results.update_rate = Some(rates);
        }
        if want("kl_parts") {
            let n = detection_level(&trainer.model);
            let d = run.kl_decomposition(n);
            if let Some(d) = &d {
                rec.push("entropy_gap", Some(n + 1), None, d.entropy_gap);
                rec.push("cross_entropy_gap", Some(n + 1), None, d.cross_entropy_gap);
            }
            results.kl_parts = d;
        }
    }
    if want("disentanglement") {
        let mut rng =
            <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.training.seed);
        let rep = disentanglement_entropy(
            &config,
            &trainer.model,
            &trainer.store,
            &trainer.detector,
            &mut rng,
        )?;
        for (n, row) in rep.entropy.iter().enumerate() {
            for (f, &h) in row.iter().enumerate() {
                rec.push("entropy", Some(n + 1), Some(f), h);
            }
        }
        results.disentanglement = Some(rep);
    }
    if want("rollout") {
        let level = level.unwrap_or(config.evaluation.rollout_level);
        let steps = steps.unwrap_or(config.evaluation.rollout_steps);
        let r = event_prediction_accuracy(
            &config,
            &trainer.model,
            &trainer.store,
            &trainer.detector,
            level,
            steps,
            config.evaluation.episodes,
        )?;
        rec.push(
            "event_accuracy",
            Some(level),
            config.dataset.factor_for_level(level),
            r.accuracy,
        );
        rec.push(
            "event_chance",
            Some(level),
            config.dataset.factor_for_level(level),
            r.chance,
        );
        results.rollout = Some(r);
    }

    let dir = output_dir(common, &config, "eval")?;
    write_snapshot(&dir, &config)?;
    write_metrics_csv(&dir.join("metrics.csv"), &rec.records)?;
    write_report_json(&dir.join("report.json"), &config, &results)?;
    for r in &rec.records {
        let at = r.level.map_or(String::new(), |l| format!(" level {l}"));
        let of = r.factor.map_or(String::new(), |f| format!(" factor {f}"));
        println!("{}{at}{of}: {:.4}", r.metric, r.value);
    }
    Ok(())
}

/// Parses `gamma=1.1,1.2;window=25,50`. Missing axes keep the base config's value.
pub fn parse_grid(spec: &str, base: &RunConfig, seeds: Vec<u64>) -> Result<SweepGrid> {
    let mut grid = SweepGrid {
        gammas: vec![base.detector.gamma],
        windows: vec![base.detector.window],
        seeds,
    };
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| VprError::Config(format!("grid axis `{part}` lacks `=`")))?;
        let values: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .collect();
        let bad = |v: &str| VprError::Config(format!("cannot parse `{v}` on grid axis `{key}`"));
        match key.trim() {
            "gamma" | "γ" => {
                grid.gammas = values
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(v)))
                    .collect::<Result<_, _>>()?
            }
            "window" | "tau_w" | "τ_w" => {
                grid.windows = values
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(v)))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(VprError::Config(format!("unknown grid axis `{other}`")).into()),
        }
    }
    Ok(grid)
}

fn sweep(
    common: &Common,
    grid: &str,
    seeds: Vec<u64>,
    iterations: Option<u64>,
    workers: Option<usize>,
) -> Result<()> {
    let mut base = load_config(common)?;
    if let Some(n) = iterations {
        base.training.iterations = n;
    }
    let base = base.resolve()?;
    let grid = parse_grid(grid, &base, seeds)?;
    let table = cu_sensitivity_sweep(&base, &grid, workers).context("sweep failed")?;
    let dir = output_dir(common, &base, "sweep")?;
    write_snapshot(&dir, &base)?;
    write_csv(&dir.join("sweep_cells.csv"), &table.cells)?;
    write_csv(&dir.join("sweep_marginals.csv"), &table.marginals)?;
    write_report_json(&dir.join("report.json"), &base, &table)?;
    for m in &table.marginals {
        println!(
            "{:?} {:>6}: mean F1 {:.3} (std {:.3})",
            m.axis, m.value, m.mean, m.std
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_both_axes() {
        let g = parse_grid(
            "gamma=1.1,1.2; window=25,50,100",
            &RunConfig::default(),
            vec![0, 1],
        )
        .unwrap();
        assert_eq!(g.gammas, vec![1.1, 1.2]);
        assert_eq!(g.windows, vec![25, 50, 100]);
        assert_eq!(g.seeds, vec![0, 1]);
    }

    #[test]
    fn missing_axis_keeps_base_value() {
        let g = parse_grid("gamma=1.3", &RunConfig::default(), vec![0]).unwrap();
        assert_eq!(g.windows, vec![100]);
    }

    #[test]
    fn bad_grids_rejected() {
        let base = RunConfig::default();
        assert!(parse_grid("gamma", &base, vec![0]).is_err());
        assert!(parse_grid("gamma=x", &base, vec![0]).is_err());
        assert!(parse_grid("speed=1", &base, vec![0]).is_err());
    }
}
