use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, VprError};
use crate::training::Trainer;

/// Grid of detector settings trained from scratch, one model per cell and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub gammas: Vec<f64>,
    pub windows: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub gamma: f64,
    pub window: usize,
    pub seed: u64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    Window,
}

/// F1 statistics over every cell sharing one value of one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub axis: SweepAxis,
    pub value: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub cells: usize,
}

impl Marginal {
    fn over(axis: SweepAxis, value: f64, f1: &[f64]) -> Self {
        let n = f1.len() as f64;
        let mean = f1.iter().sum::<f64>() / n;
        let var = f1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            axis,
            value,
            mean,
            std: var.sqrt(),
            cells: f1.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Row-major over `(gamma, window, seed)`.
    pub cells: Vec<SweepCell>,
    /// Gamma marginals in grid order, then window marginals.
    pub marginals: Vec<Marginal>,
}

impl SweepTable {
    fn from_cells(grid: &SweepGrid, cells: Vec<SweepCell>) -> Self {
        let collect = |keep: &dyn Fn(&SweepCell) -> bool| -> Vec<f64> {
            cells.iter().filter(|c| keep(c)).map(|c| c.f1).collect()
        };
        let mut marginals: Vec<Marginal> = grid
            .gammas
            .iter()
            .map(|&g| Marginal::over(SweepAxis::Gamma, g, &collect(&|c| c.gamma == g)))
            .collect();
        marginals.extend(
            grid.windows.iter().map(|&w| {
                Marginal::over(SweepAxis::Window, w as f64, &collect(&|c| c.window == w))
            }),
        );
        Self { cells, marginals }
    }

    fn axis(&self, axis: SweepAxis) -> impl Iterator<Item = &Marginal> {
        self.marginals.iter().filter(move |m| m.axis == axis)
    }

    /// Largest minus smallest window marginal mean.
    pub fn window_spread(&self) -> f64 {
        let hi = self
            .axis(SweepAxis::Window)
            .map(|m| m.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        let lo = self
            .axis(SweepAxis::Window)
            .map(|m| m.mean)
            .fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn gamma_marginal(&self, gamma: f64) -> Option<f64> {
        self.axis(SweepAxis::Gamma)
            .find(|m| m.value == gamma)
            .map(|m| m.mean)
    }
}

/// The configuration one sweep cell trains with.
pub fn cell_config(base: &RunConfig, gamma: f64, window: usize, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.detector.gamma = gamma;
    c.detector.window = window;
    c.training.seed = seed;
    c
}

/// Trains `base` once per grid cell and seed and scores the detection level
/// on `base.evaluation.episodes` held-out episodes. Cells run in parallel on
/// `workers` threads (all cores when `None`), each with its own model,
/// detector and generators. The table does not depend on the worker count.
pub fn cu_sensitivity_sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    workers: Option<usize>,
) -> Result<SweepTable> {
    if grid.gammas.is_empty() || grid.windows.is_empty() || grid.seeds.is_empty() {
        return Err(VprError::Config(
            "every sweep axis needs at least one value".into(),
        ));
    }
    let jobs: Vec<(f64, usize, u64)> = grid
        .gammas
        .iter()
        .flat_map(|&g| {
            grid.windows
                .iter()
                .flat_map(move |&w| grid.seeds.iter().map(move |&s| (g, w, s)))
        })
        .collect();
    let episodes = base.evaluation.episodes;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| VprError::Config(format!("cannot start sweep workers: {e}")))?;
    let cells = pool.install(|| {
        jobs.into_par_iter()
            .map(|(gamma, window, seed)| {
                let cell = || -> Result<f64> {
                    let mut t = Trainer::new(cell_config(base, gamma, window, seed))?;
                    t.run(|_, _| Ok(()))?;
                    let score = t
                        .detection_score(episodes, super::Detections::Updates)?
                        .ok_or_else(|| {
                            VprError::Config(
                                "the dataset has no factor for the detection level".into(),
                            )
                        })?;
                    Ok(score.f1)
                };
                let f1 = cell().map_err(|e| VprError::SweepCell {
                    gamma,
                    window,
                    seed,
                    source: Box::new(e),
                })?;
                Ok(SweepCell {
                    gamma,
                    window,
                    seed,
                    f1,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepTable::from_cells(grid, cells))
}
