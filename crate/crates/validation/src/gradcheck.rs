//! Reverse-mode gradients of the model's building blocks against central
//! finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_core::nets::{GaussianHead, Gru, Init, Mlp, ResidualStack};
use vpr_numerics::{Graph, ParamStore, Tensor};

const STEP: f64 = 1e-5;
/// Denominator floor for relative errors of vanishing gradients.
const REL_FLOOR: f64 = 1e-6;

/// One randomly sized graph: a GRU step feeding a prior-style head, and a
/// residual encoder feeding a posterior-style head, tied together by the KL
/// between the two heads plus a reconstruction-like square.
struct Case {
    store: ParamStore,
    gru: Gru,
    enc: ResidualStack,
    compress: Mlp,
    post: GaussianHead,
    prior: GaussianHead,
    x: Tensor,
    h: Tensor,
    s: Tensor,
}

impl Case {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let rows = rng.random_range(1..3);
        let latent = rng.random_range(1..3);
        let hidden = rng.random_range(2..4);
        let depth = rng.random_range(1..3);
        let mut store = ParamStore::new();
        let gru = Gru::register(&mut store, rng, "gru", latent, hidden).unwrap();
        let enc = ResidualStack::register(&mut store, rng, "enc", hidden, hidden, depth).unwrap();
        let compress = Mlp::register(
            &mut store,
            rng,
            "compress",
            hidden,
            hidden,
            hidden,
            2,
            Init::FanIn,
        )
        .unwrap();
        let post =
            GaussianHead::register(&mut store, rng, "post", 2 * hidden, hidden, latent, depth)
                .unwrap();
        let prior = GaussianHead::register(&mut store, rng, "prior", hidden, hidden, latent, depth)
            .unwrap();
        // Zero-initialised output layers would hide their own gradients.
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in &names {
            for v in store.value_mut(n).unwrap().data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let mut fill = |r: usize, c: usize| {
            Tensor::new(
                vec![r, c],
                (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let x = fill(rows, hidden);
        let h = fill(rows, hidden);
        let s = fill(rows, latent);
        Self {
            store,
            gru,
            enc,
            compress,
            post,
            prior,
            x,
            h,
            s,
        }
    }

    fn loss(&self, store: &ParamStore, g: &mut Graph) -> vpr_numerics::Var {
        let x = g.constant(self.x.clone()).unwrap();
        let h = g.constant(self.h.clone()).unwrap();
        let s = g.constant(self.s.clone()).unwrap();
        let d = self.gru.forward(g, store, s, h).unwrap();
        let p = self.prior.forward(g, store, d).unwrap();
        let lifted = self.enc.forward(g, store, x, x).unwrap();
        let c = self.compress.forward(g, store, lifted).unwrap();
        let c = g.leaky_relu(c).unwrap();
        let input = g.concat(&[c, d]).unwrap();
        let q = self.post.forward(g, store, input).unwrap();
        let kl = q.kl_rows(g, &p).unwrap();
        let kl = g.sum(kl).unwrap();
        let sq = g.square(q.mean).unwrap();
        let sq = g.mean(sq).unwrap();
        g.add(kl, sq).unwrap()
    }

    fn value(&self, store: &ParamStore) -> f64 {
        let mut g = Graph::new();
        let l = self.loss(store, &mut g);
        g.value(l).item().unwrap()
    }
}

/// Outcome over all cases.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

/// Checks every parameter coordinate of `cases` random graphs.
pub fn model_blocks(cases: usize, seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..cases {
        let case = Case::random(&mut rng);
        let mut store = case.store.clone();
        let mut g = Graph::new();
        let loss = case.loss(&store, &mut g);
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&g, &grads).unwrap();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            let analytic = store.grad(name).unwrap().clone();
            for i in 0..analytic.len() {
                let mut plus = case.store.clone();
                plus.value_mut(name).unwrap().data_mut()[i] += STEP;
                let mut minus = case.store.clone();
                minus.value_mut(name).unwrap().data_mut()[i] -= STEP;
                let fd = (case.value(&plus) - case.value(&minus)) / (2.0 * STEP);
                let a = analytic.data()[i];
                coordinates += 1;
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
                max_rel_err = max_rel_err.max(rel);
            }
        }
    }
    GradcheckReport {
        cases,
        coordinates,
        max_rel_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_match_finite_differences() {
        let r = model_blocks(10, 5);
        assert!(r.coordinates > 100);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
