//! Autodiff against central finite differences on randomly generated graphs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_numerics::{Graph, ParamStore, Schedule, Tensor, Var};

const STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
}

/// A random composite built from every primitive, as a function of one
/// parameter matrix `w` and a fixed input `x`.
fn composite(g: &mut Graph, store: &ParamStore, recipe: &[u8], x: &Tensor) -> Var {
    let w = g.param(store, "w").unwrap();
    let b = g.param(store, "b").unwrap();
    let xin = g.constant(x.clone()).unwrap();
    let mut h = g.matmul(xin, w).unwrap();
    h = g.add_row(h, b).unwrap();
    for &step in recipe {
        h = match step % 9 {
            0 => g.tanh(h).unwrap(),
            1 => g.sigmoid(h).unwrap(),
            2 => g.softplus(h).unwrap(),
            3 => g.leaky_relu(h).unwrap(),
            4 => {
                let s = g.scale(h, 0.3).unwrap();
                g.exp(s).unwrap()
            }
            5 => {
                let sq = g.mul(h, h).unwrap();
                g.sub(h, sq).unwrap()
            }
            6 => {
                let n = g.value(h).cols();
                let left = g.slice(h, 0, n / 2 + 1).unwrap();
                let right = g.slice(h, n / 2, n).unwrap();
                let joined = g.concat(&[right, left]).unwrap();
                g.slice(joined, 0, n).unwrap()
            }
            7 => {
                let s = g.sum_cols(h).unwrap();
                let t = g.tanh(s).unwrap();
                g.mul_col(h, t).unwrap()
            }
            _ => {
                let rows = g.value(h).rows();
                let mask: Vec<bool> = (0..rows).map(|r| r % 2 == 0).collect();
                let alt = g.tanh(h).unwrap();
                g.select_rows(&mask, h, alt).unwrap()
            }
        };
    }
    let c = g.clamp(h, -4.0, 4.0).unwrap();
    g.mean(c).unwrap()
}

fn loss_value(store: &ParamStore, recipe: &[u8], x: &Tensor) -> f64 {
    let mut g = Graph::new();
    let l = composite(&mut g, store, recipe, x);
    g.value(l).item().unwrap()
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let (rows, k, n) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(2..5),
        );
        let x = Tensor::new(
            vec![rows, k],
            (0..rows * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut store = ParamStore::new();
        store
            .insert(
                "w",
                Tensor::new(
                    vec![k, n],
                    (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            )
            .unwrap();
        store
            .insert(
                "b",
                Tensor::new(
                    vec![1, n],
                    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
                )
                .unwrap(),
            )
            .unwrap();
        let recipe: Vec<u8> = (0..rng.random_range(1..6))
            .map(|_| rng.random_range(0..9))
            .collect();

        let mut g = Graph::new();
        let loss = composite(&mut g, &store, &recipe, &x);
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&g, &grads).unwrap();

        for name in ["w", "b"] {
            let analytic = store.grad(name).unwrap().clone();
            for i in 0..analytic.len() {
                let mut plus = store.clone();
                plus.value_mut(name).unwrap().data_mut()[i] += STEP;
                let mut minus = store.clone();
                minus.value_mut(name).unwrap().data_mut()[i] -= STEP;
                let fd = (loss_value(&plus, &recipe, &x) - loss_value(&minus, &recipe, &x))
                    / (2.0 * STEP);
                let a = analytic.data()[i];
                // Kinks (leaky-relu at 0, clamp edges) can straddle the stencil.
                if (a - fd).abs() > 1e-7 {
                    assert!(
                        rel_err(a, fd) < 1e-4,
                        "case {case} recipe {recipe:?} {name}[{i}]: autodiff {a} vs fd {fd}"
                    );
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn lr_stays_between_bounds(it in 0u64..100_000) {
        let s = Schedule::default();
        let lr = s.lr_at(it);
        prop_assert!(lr >= s.final_lr && lr <= s.base_lr);
        prop_assert!(s.lr_at(it + 1) <= lr);
    }

    #[test]
    fn kl_beta_is_monotone_in_unit_interval(it in 0u64..100_000, d in 0u64..5_000) {
        let s = Schedule::default();
        let (a, b) = (s.kl_beta(it), s.kl_beta(it + d));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a);
    }
}
