//! Randomized episodes through the hierarchy runtime, checking the routing
//! invariants step by step.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_core::detection::{Criteria, DetectorConfig, WarmupPolicy};
use vpr_core::model::{Detector, Hierarchy, HierarchyConfig, Runtime, Sampling, UpdateMode};
use vpr_numerics::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct RoutingCase {
    pub model: HierarchyConfig,
    pub detector: DetectorConfig,
    pub rows: usize,
    pub len: usize,
    pub sampling: Sampling,
    /// Probability that a row repeats its previous observation.
    pub hold: f64,
    /// Step whose freshly built graph is checked for gradient isolation.
    pub cut_at: Option<usize>,
    pub seed: u64,
}

fn mode_strategy(levels: usize) -> BoxedStrategy<UpdateMode> {
    let fixed = proptest::collection::vec(1usize..4, levels.saturating_sub(1)).prop_map(|mult| {
        let mut k = vec![1usize];
        for m in mult {
            let prev = *k.last().expect("starts with one interval");
            k.push(prev * m);
        }
        UpdateMode::Fixed(k)
    });
    prop_oneof![3 => Just(UpdateMode::Adaptive), 1 => fixed].boxed()
}

fn detector_strategy() -> impl Strategy<Value = DetectorConfig> {
    (0.3f64..2.5, 1usize..12, 0u8..3, 0u8..3).prop_map(|(gamma, window, warm, crit)| {
        DetectorConfig {
            gamma,
            window,
            warmup: [
                WarmupPolicy::MeanOverAvailable,
                WarmupPolicy::SkipUntilFull,
                WarmupPolicy::AlwaysDetectUntilFull,
            ][warm as usize],
            criteria: [
                Criteria::BOTH,
                Criteria::EXPECTED_ONLY,
                Criteria::UNEXPECTED_ONLY,
            ][crit as usize],
            reset_windows_per_episode: false,
        }
    })
}

pub fn case_strategy() -> impl Strategy<Value = RoutingCase> {
    (1usize..5)
        .prop_flat_map(|levels| {
            (
                Just(levels),
                mode_strategy(levels),
                (1usize..4, 2usize..7, 1usize..5, 1usize..3),
                detector_strategy(),
                (1usize..4, 1usize..14, any::<bool>(), 0.0f64..0.9),
                any::<u64>(),
            )
        })
        .prop_flat_map(
            |(
                levels,
                mode,
                (latent, deter, obs, layers),
                detector,
                (rows, len, mean, hold),
                seed,
            )| {
                let cut = if len >= 2 {
                    (1..len).prop_map(Some).boxed()
                } else {
                    Just(None).boxed()
                };
                cut.prop_map(move |cut_at| RoutingCase {
                    model: HierarchyConfig {
                        num_levels: levels,
                        latent_dim: latent,
                        deter_dim: deter,
                        obs_dim: obs,
                        layers,
                        update_mode: mode.clone(),
                        ..HierarchyConfig::default()
                    },
                    detector: detector.clone(),
                    rows,
                    len,
                    sampling: if mean {
                        Sampling::Mean
                    } else {
                        Sampling::Sample
                    },
                    hold,
                    cut_at,
                    seed,
                })
            },
        )
}

fn observations(case: &RoutingCase, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let dim = case.model.obs_dim;
    let mut current: Vec<Vec<f64>> = (0..case.rows)
        .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    (0..case.len)
        .map(|t| {
            if t > 0 {
                for row in &mut current {
                    if !rng.random_bool(case.hold) {
                        *row = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
                    }
                }
            }
            Tensor::from_rows(&current).expect("rectangular batch")
        })
        .collect()
}

fn level_of(param: &str) -> Option<usize> {
    param
        .strip_prefix('l')?
        .split('.')
        .next()?
        .parse::<usize>()
        .ok()
        .map(|n| n - 1)
}

/// Runs one episode and returns the first violated invariant, if any.
pub fn check_episode(case: &RoutingCase) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let mut store = ParamStore::new();
    let model = Hierarchy::new(&case.model, &mut store, &mut rng).map_err(|e| e.to_string())?;
    let n = model.num_levels();
    let obs = observations(case, &mut rng);
    let mut detector = Detector::new(case.detector.clone(), case.rows, n);
    let mut rt =
        Runtime::new(&model, &store, case.rows, case.sampling).map_err(|e| e.to_string())?;

    for (t, o) in obs.iter().enumerate() {
        let before: Vec<_> = (0..n).map(|i| rt.snapshot(i)).collect();
        if case.cut_at == Some(t) {
            rt.truncate().map_err(|e| e.to_string())?;
        }
        let info = rt
            .step(o, &mut detector, &mut rng)
            .map_err(|e| e.to_string())?;
        let after: Vec<_> = (0..n).map(|i| rt.snapshot(i)).collect();

        for r in 0..case.rows {
            if !info.mask[0][r] {
                return Err(format!("t={t} row={r}: first level skipped a step"));
            }
            for i in 0..n {
                let open = info.mask[i][r];
                if i > 0 && open && !info.mask[i - 1][r] {
                    return Err(format!(
                        "t={t} row={r}: level {} open above a closed level",
                        i + 1
                    ));
                }
                if !open && !before[i].row_frozen(&after[i], r) {
                    return Err(format!("t={t} row={r}: blocked level {} changed", i + 1));
                }
                if after[i].tau[r] != before[i].tau[r] + usize::from(open) {
                    return Err(format!(
                        "t={t} row={r}: level {} subjective clock drifted",
                        i + 1
                    ));
                }
            }
        }

        if case.cut_at == Some(t) {
            let highest = (0..case.rows)
                .map(|r| (0..n).rev().find(|&i| info.mask[i][r]).unwrap_or(0))
                .max()
                .unwrap_or(0);
            let loss = rt.loss(1.0).map_err(|e| e.to_string())?;
            if !rt.graph.value(loss).is_finite() {
                return Err(format!("t={t}: non-finite step loss"));
            }
            let grads = rt.graph.backward(loss).map_err(|e| e.to_string())?;
            let lift_above = format!("{}enc.", Hierarchy::prefix(highest));
            for (name, var) in rt.graph.params() {
                let blocked =
                    level_of(name).is_some_and(|l| l > highest) || name.starts_with(&lift_above);
                if !blocked {
                    continue;
                }
                if let Some(g) = grads.get(*var) {
                    if g.data().iter().any(|&v| v != 0.0) {
                        return Err(format!(
                            "t={t}: parameter {name} received gradient with level {} highest open",
                            highest + 1
                        ));
                    }
                }
            }
        }
    }

    for (r, dm) in rt.masks().iter().enumerate() {
        let counts = dm.update_counts();
        if counts[0] != case.len {
            return Err(format!(
                "row {r}: first level updated {} of {} steps",
                counts[0], case.len
            ));
        }
        if !dm.is_nested() {
            return Err(format!("row {r}: decision mask is not nested"));
        }
        if counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("row {r}: update counts increase with level"));
        }
    }
    let loss = rt.loss(1.0).map_err(|e| e.to_string())?;
    let finite = rt.graph.value(loss).is_finite()
        && rt.recon_total().is_finite()
        && rt.kl_totals().iter().all(|k| k.is_finite());
    if !finite {
        return Err("non-finite loss term".into());
    }
    Ok(())
}

/// Checks `cases` random episodes; the error names the first failing case.
pub fn check_many(cases: u32, seed: u64) -> Result<u32, String> {
    let config = Config {
        cases,
        failure_persistence: None,
        rng_seed: proptest::test_runner::RngSeed::Fixed(seed),
        ..Config::default()
    };
    let mut runner = TestRunner::new(config);
    runner
        .run(&case_strategy(), |case| {
            check_episode(&case).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_hold_on_random_episodes() {
        if let Err(e) = check_many(400, 1) {
            panic!("{e}");
        }
    }
}
