use rand::Rng;
use serde::{Deserialize, Serialize};
use vpr_numerics::{Graph, ParamStore, Tensor, Var};

use crate::detection::{decide, CuWindow, Decision, DecisionMask, DetectorConfig};
use crate::distributions::{DiagGaussian, GaussianNode, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Result, VprError};
use crate::nets::{Dense, Init};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Hidden width of the two-layer transition.
    pub hidden: usize,
    /// Posterior variance floor.
    pub base_var: f64,
    /// Posterior variance. When absent it is `base_var + noise^2`, with
    /// `noise` the dataset's observation noise.
    pub posterior_var: Option<f64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            base_var: 0.01,
            posterior_var: None,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(VprError::Config("toy hidden width must be >= 1".into()));
        }
        if !(self.base_var > 0.0) || self.posterior_var.is_some_and(|v| !(v > 0.0)) {
            return Err(VprError::Config("toy variances must be > 0".into()));
        }
        Ok(())
    }

    pub fn resolved_var(&self, noise: f64) -> f64 {
        self.posterior_var.unwrap_or(self.base_var + noise * noise)
    }
}

/// Single-level instance on scalar data. The posterior is a direct map
/// `N(o_t, v)`; only the memoryless transition `s -> (mu, log var)` is
/// learned. Its output layer starts at zero and the head is residual around
/// "no change", so an untrained transition predicts exactly the static
/// belief.
#[derive(Clone, Debug)]
pub struct ToyModel {
    fc1: Dense,
    fc2: Dense,
    posterior_var: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyStep {
    pub t: usize,
    pub decision: Decision,
}

#[derive(Clone, Debug, Default)]
pub struct ToyEpisode {
    pub mask: DecisionMask,
    pub steps: Vec<ToyStep>,
    /// `(previous state, new posterior mean)` at every detected boundary.
    pub pairs: Vec<(f64, f64)>,
    /// Belief state after the last step.
    pub state: f64,
}

impl ToyEpisode {
    pub fn boundaries(&self) -> Vec<usize> {
        self.mask.boundaries(0)
    }

    pub fn fired_ce(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.decision.fired_ce)
            .map(|s| s.t)
            .collect()
    }

    pub fn fired_cu(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.decision.fired_cu)
            .map(|s| s.t)
            .collect()
    }
}

impl ToyModel {
    pub fn new<R: Rng + ?Sized>(
        config: &ToyConfig,
        noise: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            fc1: Dense::register(store, rng, "toy.fc1", 1, config.hidden, Init::FanIn)?,
            fc2: Dense::register(store, rng, "toy.fc2", config.hidden, 2, Init::Zero)?,
            posterior_var: config.resolved_var(noise),
        })
    }

    pub fn posterior_var(&self) -> f64 {
        self.posterior_var
    }

    pub fn posterior(&self, o: f64) -> Result<DiagGaussian> {
        DiagGaussian::new(vec![o], vec![self.posterior_var.ln()])
    }

    /// Transition output for a column of states.
    pub fn transition(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<GaussianNode> {
        let h = self.fc1.forward(g, store, s)?;
        let h = g.leaky_relu(h)?;
        let out = self.fc2.forward(g, store, h)?;
        let dm = g.slice(out, 0, 1)?;
        let dl = g.slice(out, 1, 2)?;
        let mean = g.add(s, dm)?;
        let base = g.constant(Tensor::full(
            &[g.value(s).rows(), 1],
            self.posterior_var.ln(),
        ))?;
        let log_var = g.add(base, dl)?;
        let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(GaussianNode { mean, log_var })
    }

    pub fn predict(&self, store: &ParamStore, s: f64) -> Result<DiagGaussian> {
        let mut g = Graph::new();
        let sv = g.constant(Tensor::scalar(s))?;
        let p = self.transition(&mut g, store, sv)?;
        Ok(p.row(&g, 0))
    }

    /// Mean of `KL(N(target, v) || transition(s))` over boundary pairs.
    pub fn fit_loss(&self, g: &mut Graph, store: &ParamStore, pairs: &[(f64, f64)]) -> Result<Var> {
        if pairs.is_empty() {
            return Err(VprError::Contract("no boundary pairs to fit".into()));
        }
        let n = pairs.len();
        let s = g.constant(Tensor::new(
            vec![n, 1],
            pairs.iter().map(|p| p.0).collect(),
        )?)?;
        let q = GaussianNode {
            mean: g.constant(Tensor::new(
                vec![n, 1],
                pairs.iter().map(|p| p.1).collect(),
            )?)?,
            log_var: g.constant(Tensor::full(&[n, 1], self.posterior_var.ln()))?,
        };
        let p = self.transition(g, store, s)?;
        let kl = q.kl_rows(g, &p)?;
        Ok(g.mean(kl)?)
    }

    /// Runs detection over one scalar sequence.
    pub fn run_episode(
        &self,
        store: &ParamStore,
        obs: &[f64],
        window: &mut CuWindow,
        config: &DetectorConfig,
    ) -> Result<ToyEpisode> {
        let mut ep = ToyEpisode {
            mask: DecisionMask::new(1),
            ..ToyEpisode::default()
        };
        let Some((&first, rest)) = obs.split_first() else {
            return Ok(ep);
        };
        let mut current = self.posterior(first)?;
        let mut state = first;
        let mut p_ch: Option<DiagGaussian> = None;
        ep.mask.push(vec![true])?;
        for (k, &o) in rest.iter().enumerate() {
            let t = k + 1;
            let q = self.posterior(o)?;
            let d_st = q.kl(&current)?;
            let prior = match p_ch.take() {
                Some(p) => p,
                None => self.predict(store, state)?,
            };
            let d_ch = q.kl(&prior)?;
            let decision = decide(d_st, d_ch, window, config);
            ep.mask.push(vec![decision.open])?;
            ep.steps.push(ToyStep { t, decision });
            if decision.open {
                ep.pairs.push((state, o));
                current = q;
                state = o;
            } else {
                p_ch = Some(prior);
            }
        }
        ep.state = state;
        Ok(ep)
    }

    /// Chain of `k` transition means starting from state `s0`.
    pub fn rollout(&self, store: &ParamStore, s0: f64, k: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(k);
        let mut s = s0;
        for _ in 0..k {
            s = self.predict(store, s)?.mean()[0];
            out.push(s);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ToyModel, ParamStore) {
        let mut store = ParamStore::new();
        let m = ToyModel::new(
            &ToyConfig::default(),
            0.0,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        (m, store)
    }

    #[test]
    fn untrained_transition_is_static() {
        let (m, store) = toy();
        let p = m.predict(&store, 0.7).unwrap();
        assert_eq!(p, m.posterior(0.7).unwrap());
    }

    #[test]
    fn untrained_ce_never_fires() {
        let (m, store) = toy();
        let obs: Vec<f64> = (0..30)
            .map(|t| {
                if t < 10 {
                    0.0
                } else if t < 20 {
                    1.0
                } else {
                    -0.5
                }
            })
            .collect();
        // An empty window fires; seed it so only real jumps stand out.
        let mut w = CuWindow::new(100);
        w.push(0.0);
        let ep = m
            .run_episode(&store, &obs, &mut w, &DetectorConfig::default())
            .unwrap();
        assert!(ep.fired_ce().is_empty());
        assert_eq!(ep.boundaries(), vec![10, 20]);
        assert_eq!(ep.pairs, vec![(0.0, 1.0), (1.0, -0.5)]);
    }

    #[test]
    fn static_divergence_grows_with_jump() {
        let m = toy().0;
        let base = m.posterior(0.0).unwrap();
        let mut last = 0.0;
        for k in 1..10 {
            let d = m.posterior(0.1 * k as f64).unwrap().kl(&base).unwrap();
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn oracle_transition_makes_ce_fire_at_jumps() {
        let (m, mut store) = toy();
        // Hand-set the transition to add +1: fc2 bias mean offset 1.
        store.value_mut("toy.fc2.b").unwrap().data_mut()[0] = 1.0;
        let obs: Vec<f64> = (0..30).map(|t| (t / 10) as f64).collect();
        let mut w = CuWindow::new(100);
        let cfg = DetectorConfig {
            criteria: crate::detection::Criteria::EXPECTED_ONLY,
            ..DetectorConfig::default()
        };
        let ep = m.run_episode(&store, &obs, &mut w, &cfg).unwrap();
        assert_eq!(ep.boundaries(), vec![10, 20]);
        for s in &ep.steps {
            if s.t == 10 || s.t == 20 {
                assert!(s.decision.d_ch < s.decision.d_st);
            }
        }
    }

    #[test]
    fn fit_loss_reaches_zero_for_exact_prediction() {
        let (m, mut store) = toy();
        store.value_mut("toy.fc2.b").unwrap().data_mut()[0] = 0.5;
        let mut g = Graph::new();
        let l = m
            .fit_loss(&mut g, &store, &[(0.0, 0.5), (1.0, 1.5)])
            .unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn resolved_variance_adds_noise() {
        let c = ToyConfig::default();
        assert!((c.resolved_var(0.4) - 0.17).abs() < 1e-12);
        let c = ToyConfig {
            posterior_var: Some(0.5),
            ..c
        };
        assert_eq!(c.resolved_var(0.4), 0.5);
    }
}
