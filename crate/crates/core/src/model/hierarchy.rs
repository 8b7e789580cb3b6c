use rand::Rng;
use vpr_numerics::{Graph, ParamStore, Var};

use super::{HierarchyConfig, UpdateMode};
use crate::datasets::ReconLoss;
use crate::distributions::GaussianNode;
use crate::error::{Result, VprError};
use crate::nets::{Dense, GaussianHead, Gru, Init, Mlp, ResidualStack};

/// Networks owned by one level. Parameter names start with `l{n}.`.
#[derive(Clone, Debug)]
pub struct LevelNets {
    /// Observation encoder (first level only).
    pub obs_enc: Option<Mlp>,
    /// Observation reconstructor (first level only).
    pub rec: Option<Mlp>,
    /// Lifts this level's `x` to the next level (absent at the top).
    pub enc: Option<ResidualStack>,
    pub compress: Mlp,
    pub posterior: GaussianHead,
    pub gru: Gru,
    pub tran_fc: Dense,
    pub prior: GaussianHead,
    pub dec: ResidualStack,
}

/// Network layout of a full hierarchy. Parameters live in a separate
/// [`ParamStore`] so the layout can be rebuilt around a loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    config: HierarchyConfig,
    levels: Vec<LevelNets>,
}

impl Hierarchy {
    pub fn new<R: Rng + ?Sized>(
        config: &HierarchyConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if config.update_mode == UpdateMode::Toy {
            return Err(VprError::Config(
                "toy mode uses ToyModel, not Hierarchy".into(),
            ));
        }
        let (s, x, depth) = (config.latent_dim, config.deter_dim, config.layers);
        let mut levels = Vec::with_capacity(config.num_levels);
        for i in 0..config.num_levels {
            let p = format!("l{}", i + 1);
            let first = i == 0;
            let top = i + 1 == config.num_levels;
            let obs_enc = if first {
                Some(Mlp::register(
                    store,
                    rng,
                    &format!("{p}.obs_enc"),
                    config.obs_dim,
                    x,
                    x,
                    depth,
                    Init::FanIn,
                )?)
            } else {
                None
            };
            let rec = if first {
                Some(Mlp::register(
                    store,
                    rng,
                    &format!("{p}.rec"),
                    x,
                    x,
                    config.obs_dim,
                    depth,
                    Init::FanIn,
                )?)
            } else {
                None
            };
            let enc = if top {
                None
            } else {
                Some(ResidualStack::register(
                    store,
                    rng,
                    &format!("{p}.enc"),
                    x,
                    x,
                    depth,
                )?)
            };
            levels.push(LevelNets {
                obs_enc,
                rec,
                enc,
                compress: Mlp::register(
                    store,
                    rng,
                    &format!("{p}.compress"),
                    x,
                    x,
                    x,
                    2,
                    Init::FanIn,
                )?,
                posterior: GaussianHead::register(
                    store,
                    rng,
                    &format!("{p}.post"),
                    3 * x,
                    x,
                    s,
                    depth,
                )?,
                gru: Gru::register(store, rng, &format!("{p}.gru"), s, x)?,
                tran_fc: Dense::register(store, rng, &format!("{p}.tran_fc"), x, s, Init::FanIn)?,
                prior: GaussianHead::register(
                    store,
                    rng,
                    &format!("{p}.prior"),
                    s + x,
                    x,
                    s,
                    depth,
                )?,
                dec: ResidualStack::register(store, rng, &format!("{p}.dec"), s + x, x, depth)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            levels,
        })
    }

    pub fn config(&self) -> &HierarchyConfig {
        &self.config
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &LevelNets {
        &self.levels[i]
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn deter_dim(&self) -> usize {
        self.config.deter_dim
    }

    pub fn recon_loss(&self) -> ReconLoss {
        self.config.recon_loss.unwrap_or(ReconLoss::SquaredError)
    }

    /// Parameter-name prefix of zero-based level `i`.
    pub fn prefix(i: usize) -> String {
        format!("l{}.", i + 1)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, obs: Var) -> Result<Var> {
        let enc = self.levels[0]
            .obs_enc
            .as_ref()
            .expect("first level has an encoder");
        enc.forward(g, store, obs)
    }

    /// `x^{i+1} = f_enc(x^i) + 0.1 x^i` for zero-based level `i`.
    pub fn lift(&self, g: &mut Graph, store: &ParamStore, i: usize, x: Var) -> Result<Var> {
        let enc = self.levels[i]
            .enc
            .as_ref()
            .ok_or_else(|| VprError::Contract(format!("level {} has no level above", i + 1)))?;
        enc.forward(g, store, x, x)
    }

    pub fn posterior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        x: Var,
        d: Var,
        c: Var,
    ) -> Result<GaussianNode> {
        let lv = &self.levels[i];
        let h = lv.compress.forward(g, store, x)?;
        let h = g.leaky_relu(h)?;
        let input = g.concat(&[h, d, c])?;
        lv.posterior.forward(g, store, input)
    }

    pub fn prior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        d: Var,
        c: Var,
    ) -> Result<GaussianNode> {
        let lv = &self.levels[i];
        let h = lv.tran_fc.forward(g, store, d)?;
        let h = g.leaky_relu(h)?;
        let input = g.concat(&[h, c])?;
        lv.prior.forward(g, store, input)
    }

    pub fn transition(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        s: Var,
        d: Var,
    ) -> Result<Var> {
        self.levels[i].gru.forward(g, store, s, d)
    }

    /// Context for the level below: `f_dec(s, c) + 0.1 c`.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        s: Var,
        c: Var,
    ) -> Result<Var> {
        let input = g.concat(&[s, c])?;
        self.levels[i].dec.forward(g, store, input, c)
    }

    pub fn reconstruct(&self, g: &mut Graph, store: &ParamStore, c0: Var) -> Result<Var> {
        let rec = self.levels[0]
            .rec
            .as_ref()
            .expect("first level has a reconstructor");
        rec.forward(g, store, c0)
    }

    /// Summed per-row reconstruction loss as a `[rows, 1]` node.
    pub fn recon_rows(&self, g: &mut Graph, out: Var, target: Var) -> Result<Var> {
        let per = match self.recon_loss() {
            ReconLoss::SquaredError => {
                let diff = g.sub(out, target)?;
                g.square(diff)?
            }
            ReconLoss::BinaryCrossEntropy => {
                // softplus(z) - y z is the logit form of -[y log p + (1 - y) log(1 - p)].
                let sp = g.softplus(out)?;
                let yz = g.mul(target, out)?;
                g.sub(sp, yz)?
            }
        };
        Ok(g.sum_cols(per)?)
    }

    /// Maps reconstruction outputs to observation space.
    pub fn output_to_obs(&self, values: &[f64]) -> Vec<f64> {
        match self.recon_loss() {
            ReconLoss::SquaredError => values.to_vec(),
            ReconLoss::BinaryCrossEntropy => {
                values.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()
            }
        }
    }
}
