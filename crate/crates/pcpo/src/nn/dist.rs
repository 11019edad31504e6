//! Diagonal-Gaussian distribution math for the policy head.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Mean and standard deviation of a diagonal Gaussian, in action units.
#[derive(Debug, Clone, PartialEq)]
pub struct DistParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DistParams {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::DimensionMismatch {
                context: "distribution parameters",
                expected: self.mu.len(),
                actual: self.sigma.len(),
            });
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::NonPositiveSigma);
        }
        Ok(())
    }
}

/// Log density of `a` under the diagonal Gaussian, summed over dimensions.
pub fn log_prob(d: &DistParams, a: &[f64]) -> Result<f64> {
    d.validate()?;
    if a.len() != d.dim() {
        return Err(Error::DimensionMismatch {
            context: "log_prob action",
            expected: d.dim(),
            actual: a.len(),
        });
    }
    let mut lp = 0.0;
    for ((&m, &s), &x) in d.mu.iter().zip(&d.sigma).zip(a) {
        let z = (x - m) / s;
        lp += -s.ln() - 0.5 * LN_2PI - 0.5 * z * z;
    }
    Ok(lp)
}

/// Gradient of `log_prob` with respect to the distribution parameters, packed
/// `[d/dmu.., d/dsigma..]` — the same layout the network's Gaussian head
/// emits, so this doubles as the vjp cotangent for score-function gradients.
pub fn log_prob_grad_dist(d: &DistParams, a: &[f64]) -> Result<Vec<f64>> {
    d.validate()?;
    if a.len() != d.dim() {
        return Err(Error::DimensionMismatch {
            context: "log_prob action",
            expected: d.dim(),
            actual: a.len(),
        });
    }
    let n = d.dim();
    let mut grad = vec![0.0; 2 * n];
    for i in 0..n {
        let s = d.sigma[i];
        let delta = a[i] - d.mu[i];
        grad[i] = delta / (s * s);
        grad[n + i] = delta * delta / (s * s * s) - 1.0 / s;
    }
    Ok(grad)
}

/// Draws `mu + sigma .* z` with `z` standard normal. No clipping happens
/// here; actions are clipped at the environment boundary only.
pub fn sample<R: Rng>(d: &DistParams, rng: &mut R) -> Vec<f64> {
    d.mu
        .iter()
        .zip(&d.sigma)
        .map(|(&m, &s)| {
            let z: f64 = rng.sample(StandardNormal);
            m + s * z
        })
        .collect()
}

/// Closed-form `D_KL(p ‖ q)` between diagonal Gaussians, summed over
/// dimensions.
pub fn kl_diag_gauss(p: &DistParams, q: &DistParams) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            context: "kl distributions",
            expected: p.dim(),
            actual: q.dim(),
        });
    }
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let (mp, sp) = (p.mu[i], p.sigma[i]);
        let (mq, sq) = (q.mu[i], q.sigma[i]);
        kl += (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5;
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(mu: &[f64], sigma: &[f64]) -> DistParams {
        DistParams {
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
        }
    }

    /// Numerical-integration oracle for 1-D KL via trapezoids over ±12 sigma.
    fn kl_numeric_1d(mp: f64, sp: f64, mq: f64, sq: f64) -> f64 {
        let lo = (mp - 12.0 * sp).min(mq - 12.0 * sq);
        let hi = (mp + 12.0 * sp).max(mq + 12.0 * sq);
        let n = 400_000;
        let dx = (hi - lo) / n as f64;
        let logp = |x: f64| -(sp.ln()) - 0.5 * LN_2PI - 0.5 * ((x - mp) / sp).powi(2);
        let logq = |x: f64| -(sq.ln()) - 0.5 * LN_2PI - 0.5 * ((x - mq) / sq).powi(2);
        let f = |x: f64| logp(x).exp() * (logp(x) - logq(x));
        let mut acc = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            acc += f(lo + i as f64 * dx);
        }
        acc * dx
    }

    #[test]
    fn log_prob_standard_normal_at_zero() {
        let lp = log_prob(&d(&[0.0], &[1.0]), &[0.0]).unwrap();
        let expected = -0.5 * LN_2PI; // ≈ -0.91894
        assert!((lp - expected).abs() < 1e-12);
        assert!((lp + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn log_prob_at_mean_is_normalizer() {
        let dist = d(&[1.5, -2.0], &[0.3, 2.0]);
        let lp = log_prob(&dist, &[1.5, -2.0]).unwrap();
        let expected: f64 = dist
            .sigma
            .iter()
            .map(|s| -(s * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn log_prob_translation_invariance() {
        let c = 3.7;
        let base = d(&[0.2, -1.0], &[0.5, 1.5]);
        let shifted = d(&[0.2 + c, -1.0 + c], &[0.5, 1.5]);
        let a = [0.9, 0.1];
        let a_shift = [0.9 + c, 0.1 + c];
        let l0 = log_prob(&base, &a).unwrap();
        let l1 = log_prob(&shifted, &a_shift).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
    }

    #[test]
    fn log_prob_rejects_bad_sigma() {
        assert!(matches!(
            log_prob(&d(&[0.0], &[0.0]), &[0.0]),
            Err(Error::NonPositiveSigma)
        ));
    }

    #[test]
    fn sample_degenerates_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = sample(&d(&[2.0, -1.0], &[1e-12, 1e-12]), &mut rng);
        assert!((a[0] - 2.0).abs() < 1e-9);
        assert!((a[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn sample_is_deterministic_under_seed() {
        let dist = d(&[0.0, 1.0], &[1.0, 0.5]);
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            assert_eq!(sample(&dist, &mut r1), sample(&dist, &mut r2));
        }
    }

    #[test]
    fn sample_empirical_mean_law_of_large_numbers() {
        let dist = d(&[1.2], &[0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sample(&dist, &mut rng)[0]).sum::<f64>() / n as f64;
        let bound = 4.0 * 0.7 / (n as f64).sqrt();
        assert!(
            (mean - 1.2).abs() < bound,
            "empirical mean {mean} deviates more than {bound}"
        );
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let dist = d(&[0.4, -2.0], &[0.9, 3.0]);
        let kl = kl_diag_gauss(&dist, &dist).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_unit_gaussians_one_apart_is_half() {
        let kl = kl_diag_gauss(&d(&[0.0], &[1.0]), &d(&[1.0], &[1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        // Cross-check with the integration oracle.
        let numeric = kl_numeric_1d(0.0, 1.0, 1.0, 1.0);
        assert!((kl - numeric).abs() < 1e-6);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = d(&[0.0], &[1.0]);
        let q = d(&[0.0], &[2.0]);
        let ab = kl_diag_gauss(&p, &q).unwrap();
        let ba = kl_diag_gauss(&q, &p).unwrap();
        assert!((ab - ba).abs() > 1e-2);
        assert!((ab - kl_numeric_1d(0.0, 1.0, 0.0, 2.0)).abs() < 1e-6);
        assert!((ba - kl_numeric_1d(0.0, 2.0, 0.0, 1.0)).abs() < 1e-6);
    }

    #[test]
    fn kl_nonnegative_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = d(
                &[rng.random_range(-3.0..3.0)],
                &[rng.random_range(0.05..4.0)],
            );
            let q = d(
                &[rng.random_range(-3.0..3.0)],
                &[rng.random_range(0.05..4.0)],
            );
            let kl = kl_diag_gauss(&p, &q).unwrap();
            assert!(kl >= -1e-12);
            if kl < 1e-12 {
                // Zero KL only at equal parameters.
                assert!((p.mu[0] - q.mu[0]).abs() < 1e-5);
                assert!((p.sigma[0] - q.sigma[0]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn log_prob_grad_matches_finite_differences() {
        let dist = d(&[0.3, -0.7], &[0.6, 1.4]);
        let a = [0.8, -0.2];
        let grad = log_prob_grad_dist(&dist, &a).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut plus = dist.clone();
            plus.mu[i] += h;
            let mut minus = dist.clone();
            minus.mu[i] -= h;
            let fd = (log_prob(&plus, &a).unwrap() - log_prob(&minus, &a).unwrap()) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-8);

            let mut plus = dist.clone();
            plus.sigma[i] += h;
            let mut minus = dist.clone();
            minus.sigma[i] -= h;
            let fd = (log_prob(&plus, &a).unwrap() - log_prob(&minus, &a).unwrap()) / (2.0 * h);
            assert!((grad[2 + i] - fd).abs() < 1e-8);
        }
    }
}
