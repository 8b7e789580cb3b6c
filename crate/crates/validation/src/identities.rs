use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_core::distributions::DiagGaussian;

/// Worst observed values over random Gaussian pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub pairs: usize,
    pub min_kl: f64,
    /// Largest `|kl(q, q)|`.
    pub max_self_kl: f64,
    /// Largest `|kl - (cross_entropy - entropy)|`.
    pub max_decomposition_err: f64,
}

fn random_gaussian(rng: &mut ChaCha8Rng, k: usize) -> DiagGaussian {
    let mean = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let log_var = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
    DiagGaussian::new(mean, log_var).expect("matching dimensions")
}

pub fn gaussian_pairs(pairs: usize, seed: u64) -> IdentityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IdentityReport {
        pairs,
        min_kl: f64::INFINITY,
        max_self_kl: 0.0,
        max_decomposition_err: 0.0,
    };
    for _ in 0..pairs {
        let k = rng.random_range(1..9);
        let q = random_gaussian(&mut rng, k);
        let p = random_gaussian(&mut rng, k);
        let kl = q.kl(&p).unwrap();
        let gap = kl - (q.cross_entropy(&p).unwrap() - q.entropy());
        report.min_kl = report.min_kl.min(kl);
        report.max_self_kl = report.max_self_kl.max(q.kl(&q).unwrap().abs());
        report.max_decomposition_err = report.max_decomposition_err.max(gap.abs());
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hold_on_random_pairs() {
        let r = gaussian_pairs(2000, 9);
        assert!(r.min_kl >= 0.0);
        assert_eq!(r.max_self_kl, 0.0);
        assert!(r.max_decomposition_err < 1e-10, "{r:?}");
    }
}
