//! Diagonal Gaussian beliefs.
//!
//! Every belief in the model (static and change priors and posteriors, the
//! top-level `N(0, I)` prior) is a diagonal Gaussian. KL divergences are
//! always evaluated in closed form: the detector compares KL values
//! directly, so Monte-Carlo noise would leak into boundary decisions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vpr_numerics::{Graph, Tensor, Var};

use crate::error::{Result, VprError};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(VprError::Dimension(format!("{what}: {a} vs {b}")))
    }
}

impl DiagGaussian {
    /// Builds a Gaussian; `log_var` is clamped into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dims(mean.len(), log_var.len(), "mean/log_var")?;
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(VprError::Contract("non-finite Gaussian parameters".into()));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` in `k` dimensions.
    pub fn standard(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            log_var: vec![0.0; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    /// `KL(self || p)`.
    pub fn kl(&self, p: &DiagGaussian) -> Result<f64> {
        check_dims(self.dim(), p.dim(), "kl")?;
        Ok(kl_slices(&self.mean, &self.log_var, &p.mean, &p.log_var))
    }

    pub fn entropy(&self) -> f64 {
        0.5 * self.log_var.iter().map(|lv| 1.0 + LN_2PI + lv).sum::<f64>()
    }

    /// `-E_self[log p]`.
    pub fn cross_entropy(&self, p: &DiagGaussian) -> Result<f64> {
        check_dims(self.dim(), p.dim(), "cross_entropy")?;
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let var_q = self.log_var[i].exp();
            let diff = self.mean[i] - p.mean[i];
            acc += LN_2PI + p.log_var[i] + (var_q + diff * diff) / p.log_var[i].exp();
        }
        Ok(0.5 * acc)
    }

    /// Reparameterised draw `mean + sigma * eps`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * eps
            })
            .collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dims(self.dim(), x.len(), "log_prob")?;
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let diff = x[i] - self.mean[i];
            acc += LN_2PI + self.log_var[i] + diff * diff / self.log_var[i].exp();
        }
        Ok(-0.5 * acc)
    }
}

pub(crate) fn kl_slices(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..mq.len() {
        let diff = mq[i] - mp[i];
        acc += lp[i] - lq[i] + (lq[i].exp() + diff * diff) / lp[i].exp() - 1.0;
    }
    // Rounding can leave a tiny negative for identical inputs.
    (0.5 * acc).max(0.0)
}

/// A batch of diagonal Gaussians living on a [`Graph`], one per row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianNode {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianNode {
    /// Row `r` as a value-level Gaussian.
    pub fn row(&self, g: &Graph, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: g.value(self.mean).row_slice(r).to_vec(),
            log_var: g.value(self.log_var).row_slice(r).to_vec(),
        }
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.mean).rows()
    }

    /// Per-row `KL(self || p)` computed from node values, off the tape.
    pub fn kl_values(&self, g: &Graph, p: &GaussianNode) -> Vec<f64> {
        let (mq, lq) = (g.value(self.mean), g.value(self.log_var));
        let (mp, lp) = (g.value(p.mean), g.value(p.log_var));
        (0..mq.rows())
            .map(|r| {
                kl_slices(
                    mq.row_slice(r),
                    lq.row_slice(r),
                    mp.row_slice(r),
                    lp.row_slice(r),
                )
            })
            .collect()
    }

    /// Per-row `KL(self || p)` as a differentiable `[rows, 1]` node.
    pub fn kl_rows(&self, g: &mut Graph, p: &GaussianNode) -> Result<Var> {
        let diff = g.sub(self.mean, p.mean)?;
        let diff_sq = g.square(diff)?;
        let var_q = g.exp(self.log_var)?;
        let num = g.add(var_q, diff_sq)?;
        let neg_lp = g.neg(p.log_var)?;
        let inv_var_p = g.exp(neg_lp)?;
        let ratio = g.mul(num, inv_var_p)?;
        let log_ratio = g.sub(p.log_var, self.log_var)?;
        let t = g.add(log_ratio, ratio)?;
        let t = g.add_scalar(t, -1.0)?;
        let s = g.sum_cols(t)?;
        Ok(g.scale(s, 0.5)?)
    }

    /// Reparameterised sample using externally drawn standard normals.
    pub fn rsample(&self, g: &mut Graph, eps: Tensor) -> Result<Var> {
        let e = g.constant(eps)?;
        let half = g.scale(self.log_var, 0.5)?;
        let std = g.exp(half)?;
        let noise = g.mul(std, e)?;
        Ok(g.add(self.mean, noise)?)
    }

    /// `N(0, I)` for `rows` rows.
    pub fn standard(g: &mut Graph, rows: usize, dim: usize) -> Result<Self> {
        let mean = g.constant(Tensor::zeros(&[rows, dim]))?;
        let log_var = g.constant(Tensor::zeros(&[rows, dim]))?;
        Ok(Self { mean, log_var })
    }

    pub fn select_rows(
        g: &mut Graph,
        mask: &[bool],
        on_true: &Self,
        on_false: &Self,
    ) -> Result<Self> {
        Ok(Self {
            mean: g.select_rows(mask, on_true.mean, on_false.mean)?,
            log_var: g.select_rows(mask, on_true.log_var, on_false.log_var)?,
        })
    }
}

/// Draws a `[rows, cols]` tensor of standard normals.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g1(m: f64, lv: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![lv]).unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(g1(0.0, 0.0).kl(&g1(0.0, 0.0)).unwrap(), 0.0);
        assert!((g1(1.0, 0.0).kl(&g1(0.0, 0.0)).unwrap() - 0.5).abs() < 1e-15);
        // var = e, log_var = 1
        let expected = 0.5 * (std::f64::consts::E - 1.0 - 1.0);
        assert!((g1(0.0, 1.0).kl(&g1(0.0, 0.0)).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn entropy_closed_forms() {
        let h = DiagGaussian::standard(1).entropy();
        assert!((h - 1.41894).abs() < 1e-5);
        assert!((DiagGaussian::standard(7).entropy() - 7.0 * h).abs() < 1e-12);
        assert!(g1(0.0, -1.0).entropy() < g1(0.0, 0.0).entropy());
    }

    #[test]
    fn cross_entropy_identities() {
        let q = g1(0.3, -0.7);
        assert!((q.cross_entropy(&q).unwrap() - q.entropy()).abs() < 1e-12);
        let ce = g1(1.0, 0.0)
            .cross_entropy(&DiagGaussian::standard(1))
            .unwrap();
        assert!((ce - (DiagGaussian::standard(1).entropy() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let a = DiagGaussian::standard(2);
        let b = DiagGaussian::standard(3);
        assert!(a.kl(&b).is_err());
        assert!(a.cross_entropy(&b).is_err());
        assert!(a.log_prob(&[0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn log_var_is_clamped() {
        let q = g1(0.0, -50.0);
        assert_eq!(q.log_var()[0], LOG_VAR_MIN);
        assert_eq!(g1(0.0, 50.0).log_var()[0], LOG_VAR_MAX);
    }

    #[test]
    fn degenerate_variance_sample_is_mean() {
        let q = DiagGaussian::new(vec![2.5, -1.0], vec![LOG_VAR_MIN; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (s, m) in q.sample(&mut rng).iter().zip(q.mean()) {
            assert!((s - m).abs() < 0.05);
        }
    }

    #[test]
    fn monte_carlo_mean() {
        let q = DiagGaussian::new(vec![1.5], vec![0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| q.sample(&mut rng)[0]).sum::<f64>() / n as f64;
        let sigma = (0.4f64).exp().sqrt();
        assert!((mean - 1.5).abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn log_prob_properties() {
        let q = DiagGaussian::standard(1);
        assert!((q.log_prob(&[0.0]).unwrap() + 0.91894).abs() < 1e-5);
        let q = g1(0.7, -0.3);
        let at_mean = q.log_prob(&[0.7]).unwrap();
        for x in [-1.0, 0.0, 0.69, 0.71, 2.0] {
            assert!(q.log_prob(&[x]).unwrap() < at_mean);
        }
        // Trapezoid quadrature of the density over ±12 sigma.
        let sigma = (-0.3f64).exp().sqrt();
        let (lo, hi, n) = (0.7 - 12.0 * sigma, 0.7 + 12.0 * sigma, 20_000);
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * q.log_prob(&[lo + i as f64 * h]).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn graph_kl_matches_value_kl() {
        let mut g = Graph::new();
        let q = GaussianNode {
            mean: g
                .constant(Tensor::from_rows(&[vec![0.1, -0.4], vec![1.0, 0.0]]).unwrap())
                .unwrap(),
            log_var: g
                .constant(Tensor::from_rows(&[vec![-0.5, 0.2], vec![0.0, 1.0]]).unwrap())
                .unwrap(),
        };
        let p = GaussianNode::standard(&mut g, 2, 2).unwrap();
        let rows = q.kl_rows(&mut g, &p).unwrap();
        let values = q.kl_values(&g, &p);
        for r in 0..2 {
            let direct = q.row(&g, r).kl(&p.row(&g, r)).unwrap();
            assert!((g.value(rows).data()[r] - direct).abs() < 1e-12);
            assert!((values[r] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn rsample_gradient_wrt_mean_is_identity() {
        let mut g = Graph::new();
        let mean = g.constant(Tensor::row(&[0.3, -0.2])).unwrap();
        let log_var = g.constant(Tensor::row(&[0.1, 0.5])).unwrap();
        let q = GaussianNode { mean, log_var };
        let s = q.rsample(&mut g, Tensor::row(&[0.7, -1.1])).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(mean).unwrap().data(), &[1.0, 1.0]);
    }
}
