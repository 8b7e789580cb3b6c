//! Fully-connected building blocks registered into a [`ParamStore`].

use rand::Rng;
use vpr_numerics::{Graph, ParamStore, Tensor, Var};

use crate::distributions::{GaussianNode, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::Result;

/// Weight of the skip path in residual stacks.
pub const RESIDUAL_SKIP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    FanIn,
    Zero,
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct Dense {
    w: String,
    b: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
    ) -> Result<Self> {
        let (w, b) = match init {
            Init::FanIn => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (
                    uniform_tensor(rng, &[fan_in, fan_out], bound),
                    uniform_tensor(rng, &[1, fan_out], bound),
                )
            }
            Init::Zero => (
                Tensor::zeros(&[fan_in, fan_out]),
                Tensor::zeros(&[1, fan_out]),
            ),
        };
        let dense = Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            fan_in,
            fan_out,
        };
        store.insert(dense.w.clone(), w)?;
        store.insert(dense.b.clone(), b)?;
        Ok(dense)
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.w)?;
        let b = g.param(store, &self.b)?;
        let h = g.matmul(x, w)?;
        Ok(g.add_row(h, b)?)
    }
}

/// Dense layers with leaky-relu between them; the output layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `depth` layers: `input -> hidden -> ... -> output`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        depth: usize,
        last_init: Init,
    ) -> Result<Self> {
        assert!(depth >= 1, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let fan_in = if i == 0 { input } else { hidden };
            let last = i + 1 == depth;
            let fan_out = if last { output } else { hidden };
            let init = if last { last_init } else { Init::FanIn };
            layers.push(Dense::register(
                store,
                rng,
                &format!("{name}.{i}"),
                fan_in,
                fan_out,
                init,
            )?);
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h)?;
            }
        }
        Ok(h)
    }
}

/// `out = mlp(input) + 0.1 * skip`, where `skip` is the part of the input
/// with the output's width.
#[derive(Clone, Debug)]
pub struct ResidualStack {
    mlp: Mlp,
}

impl ResidualStack {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::register(store, rng, name, input, output, output, depth, Init::FanIn)?,
        })
    }

    pub fn stack(&self) -> &Mlp {
        &self.mlp
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var, skip: Var) -> Result<Var> {
        let h = self.mlp.forward(g, store, input)?;
        let s = g.scale(skip, RESIDUAL_SKIP)?;
        Ok(g.add(h, s)?)
    }
}

/// Gated recurrent cell:
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `h̃ = tanh(x Wh + (r ⊙ h) Uh + bh)`, `h' = h + z ⊙ (h̃ − h)`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub update_in: Dense,
    pub update_hid: String,
    pub reset_in: Dense,
    pub reset_hid: String,
    pub cand_in: Dense,
    pub cand_hid: String,
    pub hidden: usize,
}

impl Gru {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let hid = |suffix: &str, store: &mut ParamStore, rng: &mut R| -> Result<String> {
            let n = format!("{name}.{suffix}");
            store.insert(n.clone(), uniform_tensor(rng, &[hidden, hidden], bound))?;
            Ok(n)
        };
        let update_hid = hid("uz", store, rng)?;
        let reset_hid = hid("ur", store, rng)?;
        let cand_hid = hid("uh", store, rng)?;
        Ok(Self {
            update_in: Dense::register(
                store,
                rng,
                &format!("{name}.z"),
                input,
                hidden,
                Init::FanIn,
            )?,
            update_hid,
            reset_in: Dense::register(
                store,
                rng,
                &format!("{name}.r"),
                input,
                hidden,
                Init::FanIn,
            )?,
            reset_hid,
            cand_in: Dense::register(store, rng, &format!("{name}.h"), input, hidden, Init::FanIn)?,
            cand_hid,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let uz = g.param(store, &self.update_hid)?;
        let ur = g.param(store, &self.reset_hid)?;
        let uh = g.param(store, &self.cand_hid)?;

        let zx = self.update_in.forward(g, store, x)?;
        let zh = g.matmul(h, uz)?;
        let z = g.add(zx, zh)?;
        let z = g.sigmoid(z)?;

        let rx = self.reset_in.forward(g, store, x)?;
        let rh = g.matmul(h, ur)?;
        let r = g.add(rx, rh)?;
        let r = g.sigmoid(r)?;

        let cx = self.cand_in.forward(g, store, x)?;
        let rh = g.mul(r, h)?;
        let ch = g.matmul(rh, uh)?;
        let cand = g.add(cx, ch)?;
        let cand = g.tanh(cand)?;

        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        Ok(g.add(h, step)?)
    }
}

/// MLP emitting `(mean, log_var)` with the log-variance clamped.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    mlp: Mlp,
    latent: usize,
}

impl GaussianHead {
    /// The output layer starts at zero so the head initially emits `N(0, I)`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        latent: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::register(
                store,
                rng,
                name,
                input,
                hidden,
                2 * latent,
                depth,
                Init::Zero,
            )?,
            latent,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<GaussianNode> {
        let out = self.mlp.forward(g, store, x)?;
        let mean = g.slice(out, 0, self.latent)?;
        let raw = g.slice(out, self.latent, 2 * self.latent)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(GaussianNode { mean, log_var })
    }
}
