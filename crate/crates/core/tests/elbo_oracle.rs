//! The hierarchy's loss on a fixed two-level net, recomputed with plain
//! vector arithmetic straight from the layer definitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_core::detection::DetectorConfig;
use vpr_core::model::{Detector, Hierarchy, HierarchyConfig, Runtime, Sampling, UpdateMode};
use vpr_numerics::{ParamStore, Tensor};

const LEAKY: f64 = 0.01;

struct Oracle<'a> {
    store: &'a ParamStore,
    depth: usize,
}

impl Oracle<'_> {
    fn dense(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let w = self.store.value(&format!("{name}.w")).unwrap();
        let b = self.store.value(&format!("{name}.b")).unwrap();
        let (k, n) = (w.shape()[0], w.shape()[1]);
        assert_eq!(k, x.len());
        (0..n)
            .map(|j| b.data()[j] + (0..k).map(|i| x[i] * w.data()[i * n + j]).sum::<f64>())
            .collect()
    }

    fn mlp(&self, name: &str, x: &[f64], depth: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for i in 0..depth {
            h = self.dense(&format!("{name}.{i}"), &h);
            if i + 1 < depth {
                h = leaky(&h);
            }
        }
        h
    }

    fn residual(&self, name: &str, x: &[f64], skip: &[f64]) -> Vec<f64> {
        let h = self.mlp(name, x, self.depth);
        h.iter().zip(skip).map(|(a, s)| a + 0.1 * s).collect()
    }

    fn head(&self, name: &str, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out = self.mlp(name, x, self.depth);
        let k = out.len() / 2;
        let lv = out[k..].iter().map(|v| v.clamp(-10.0, 10.0)).collect();
        (out[..k].to_vec(), lv)
    }

    fn matvec(&self, name: &str, h: &[f64]) -> Vec<f64> {
        let u = self.store.value(name).unwrap();
        let n = u.shape()[1];
        (0..n)
            .map(|j| (0..h.len()).map(|i| h[i] * u.data()[i * n + j]).sum())
            .collect()
    }

    fn gru(&self, p: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let zx = self.dense(&format!("{p}.gru.z"), x);
        let zh = self.matvec(&format!("{p}.gru.uz"), h);
        let rx = self.dense(&format!("{p}.gru.r"), x);
        let rh = self.matvec(&format!("{p}.gru.ur"), h);
        let z: Vec<f64> = zx.iter().zip(&zh).map(|(a, b)| sig(a + b)).collect();
        let r: Vec<f64> = rx.iter().zip(&rh).map(|(a, b)| sig(a + b)).collect();
        let rhv: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cx = self.dense(&format!("{p}.gru.h"), x);
        let ch = self.matvec(&format!("{p}.gru.uh"), &rhv);
        (0..h.len())
            .map(|i| {
                let cand = (cx[i] + ch[i]).tanh();
                h[i] + z[i] * (cand - h[i])
            })
            .collect()
    }

    fn posterior(&self, p: &str, x: &[f64], d: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = leaky(&self.mlp(&format!("{p}.compress"), x, 2));
        self.head(&format!("{p}.post"), &[h, d.to_vec(), c.to_vec()].concat())
    }

    fn prior(&self, p: &str, d: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = leaky(&self.dense(&format!("{p}.tran_fc"), d));
        self.head(&format!("{p}.prior"), &[h, c.to_vec()].concat())
    }
}

fn leaky(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| if a > 0.0 { a } else { LEAKY * a })
        .collect()
}

fn kl(q: &(Vec<f64>, Vec<f64>), p: &(Vec<f64>, Vec<f64>)) -> f64 {
    (0..q.0.len())
        .map(|i| {
            let (mq, lq, mp, lp) = (q.0[i], q.1[i], p.0[i], p.1[i]);
            0.5 * (lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0)
        })
        .sum()
}

#[test]
fn scripted_forward_matches_runtime_loss() {
    let (latent, width, obs_dim, depth) = (2, 3, 2, 2);
    let cfg = HierarchyConfig {
        num_levels: 2,
        latent_dim: latent,
        deter_dim: width,
        obs_dim,
        layers: depth,
        update_mode: UpdateMode::Fixed(vec![1, 2]),
        ..HierarchyConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let model = Hierarchy::new(&cfg, &mut store, &mut rng).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        for v in store.value_mut(n).unwrap().data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    let obs = [[0.3, -0.2], [0.3, 0.9], [-0.5, 0.1], [0.0, 0.4]];
    let beta = 0.7;

    let mut det = Detector::new(DetectorConfig::default(), 1, 2);
    let mut rt = Runtime::new(&model, &store, 1, Sampling::Mean).unwrap();
    for o in &obs {
        rt.step(
            &Tensor::from_rows(&[o.to_vec()]).unwrap(),
            &mut det,
            &mut rng,
        )
        .unwrap();
    }
    let loss = rt.loss(beta).unwrap();
    let got = rt.graph.value(loss).item().unwrap();

    let or = Oracle {
        store: &store,
        depth,
    };
    let zeros = vec![0.0; width];
    let (mut d1, mut c1, mut s1) = (zeros.clone(), zeros.clone(), vec![0.0; latent]);
    let (mut d2, mut s2) = (zeros.clone(), vec![0.0; latent]);
    let c2 = zeros.clone();
    let (mut recon, mut kl_sum) = (0.0, 0.0);
    for (t, o) in obs.iter().enumerate() {
        let x1 = or.mlp("l1.obs_enc", o, depth);
        let x2 = or.residual("l1.enc", &x1, &x1);
        if t % 2 == 0 {
            let prior = if t == 0 {
                (vec![0.0; latent], vec![0.0; latent])
            } else {
                d2 = or.gru("l2", &s2, &d2);
                or.prior("l2", &d2, &c2)
            };
            let q = or.posterior("l2", &x2, &d2, &c2);
            kl_sum += kl(&q, &prior);
            s2 = q.0;
            c1 = or.residual("l2.dec", &[s2.clone(), c2.clone()].concat(), &c2);
        }
        if t > 0 {
            d1 = or.gru("l1", &s1, &d1);
        }
        let prior = or.prior("l1", &d1, &c1);
        let q = or.posterior("l1", &x1, &d1, &c1);
        kl_sum += kl(&q, &prior);
        s1 = q.0;
        let c0 = or.residual("l1.dec", &[s1.clone(), c1.clone()].concat(), &c1);
        let out = or.mlp("l1.rec", &c0, depth);
        recon += out.iter().zip(o).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let expected = recon + beta * kl_sum;
    assert!(
        (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
        "runtime {got} vs scripted {expected}"
    );
}
