//! Fisher(KL-Hessian)-vector products for the Gaussian policy head.
//!
//! The product is the Gauss-Newton form `(1/N) Σ_s Jᵀ(s) F(s) J(s) v + damping·v`
//! where `J(s)` is the Jacobian of the distribution parameters `(mu, sigma)`
//! with respect to the policy parameters at the current point and `F(s)` is
//! the exact Fisher matrix of the diagonal Gaussian in `(mu, sigma)`
//! coordinates, `diag(1/sigma², 2/sigma²)`. At the expansion point this equals
//! the Hessian of the mean KL divergence to the current policy, so the product
//! realizes the trust-region curvature operator without materializing it.

use crate::error::{Error, Result};
use crate::linalg;

use super::{ForwardCache, Network, OutputHead, ParamVector};

/// A policy network bound to a batch of states, with forward activations
/// cached so repeated products (conjugate gradient) pay only the tangent and
/// backprop passes.
pub struct FisherHandle<'a> {
    net: &'a Network,
    caches: Vec<ForwardCache>,
    damping: f64,
}

impl<'a> FisherHandle<'a> {
    pub fn new<I, S>(net: &'a Network, states: I, damping: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[f64]>,
    {
        if !matches!(net.spec().head, OutputHead::GaussianPolicy { .. }) {
            return Err(Error::InvalidConfig(
                "Fisher products require a Gaussian policy head".into(),
            ));
        }
        if damping < 0.0 {
            return Err(Error::InvalidConfig("damping must be >= 0".into()));
        }
        let mut caches = Vec::new();
        for s in states {
            caches.push(net.forward_cached(s.as_ref())?);
        }
        if caches.is_empty() {
            return Err(Error::EmptyBatch {
                context: "fisher handle",
            });
        }
        Ok(Self {
            net,
            caches,
            damping,
        })
    }

    pub fn batch_len(&self) -> usize {
        self.caches.len()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn dim(&self) -> usize {
        self.net.param_count()
    }

    /// The batch states this handle was built over.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.caches.iter().map(|c| c.xs[0].as_slice())
    }

    /// `(1/N) Σ Jᵀ F J v + damping · v`
    pub fn product(&self, v: &ParamVector) -> Result<ParamVector> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "fisher product vector",
                expected: self.dim(),
                actual: v.len(),
            });
        }
        if !linalg::all_finite(v.as_slice()) {
            return Err(Error::NonFiniteInput {
                context: "fisher product vector",
            });
        }
        let action_dim = self
            .net
            .spec()
            .action_dim()
            .expect("checked gaussian head in constructor");
        let out_dim = 2 * action_dim;
        let mut acc = vec![0.0; self.dim()];
        let mut tangent_out = vec![0.0; out_dim];
        for cache in &self.caches {
            self.net.jvp_cached(cache, v.as_slice(), &mut tangent_out);
            // Multiply by the diagonal Gaussian Fisher in (mu, sigma) coords.
            for i in 0..action_dim {
                let sigma = cache.out[action_dim + i];
                let inv_var = 1.0 / (sigma * sigma);
                tangent_out[i] *= inv_var;
                tangent_out[action_dim + i] *= 2.0 * inv_var;
            }
            self.net
                .vjp_cached_into(cache, &tangent_out, 1.0, &mut acc, None)?;
        }
        linalg::scale(&mut acc, 1.0 / self.caches.len() as f64);
        linalg::axpy(&mut acc, self.damping, v.as_slice());
        Ok(ParamVector::from_vec(acc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_util::rel_err;
    use crate::nn::{kl_diag_gauss, MlpSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn policy_2_8_2(seed: u64) -> Network {
        let spec = MlpSpec::gaussian(2, &[8], vec![-1.0, -2.0], vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::init(spec, &mut rng).unwrap()
    }

    fn random_states(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Gradient of the mean KL(pi_theta, pi_theta_old) w.r.t. theta, used by
    /// the finite-difference Hessian oracle. The KL gradient in distribution
    /// coordinates is analytic; the chain to parameters goes through vjp.
    fn mean_kl_grad(net: &Network, old: &Network, states: &[Vec<f64>]) -> Vec<f64> {
        let mut grad = vec![0.0; net.param_count()];
        for s in states {
            let p = net.dist(s).unwrap();
            let q = old.dist(s).unwrap();
            let n = p.dim();
            let mut cot = vec![0.0; 2 * n];
            for i in 0..n {
                // d KL(p‖q) / d mu_p and / d sigma_p
                cot[i] = (p.mu[i] - q.mu[i]) / (q.sigma[i] * q.sigma[i]);
                cot[n + i] = p.sigma[i] / (q.sigma[i] * q.sigma[i]) - 1.0 / p.sigma[i];
            }
            let cache = net.forward_cached(s).unwrap();
            net.vjp_cached_into(&cache, &cot, 1.0 / states.len() as f64, &mut grad, None)
                .unwrap();
        }
        grad
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let net = policy_2_8_2(1);
        let states = random_states(4, 2);
        let h = FisherHandle::new(&net, &states, 0.1).unwrap();
        let out = h.product(&ParamVector::zeros(net.param_count())).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let net = policy_2_8_2(1);
        let states: Vec<Vec<f64>> = vec![];
        assert!(matches!(
            FisherHandle::new(&net, &states, 0.1),
            Err(Error::EmptyBatch { .. })
        ));
    }

    #[test]
    fn product_is_symmetric() {
        let net = policy_2_8_2(3);
        let states = random_states(6, 4);
        let h = FisherHandle::new(&net, &states, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let u = ParamVector::from_vec(
                (0..net.param_count())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let v = ParamVector::from_vec(
                (0..net.param_count())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let hu = h.product(&u).unwrap();
            let hv = h.product(&v).unwrap();
            let uhv = linalg::dot(u.as_slice(), hv.as_slice());
            let vhu = linalg::dot(v.as_slice(), hu.as_slice());
            assert!(
                rel_err(uhv, vhu) <= 1e-8,
                "symmetry violated: {uhv} vs {vhu}"
            );
        }
    }

    #[test]
    fn damping_makes_it_positive_definite() {
        let net = policy_2_8_2(5);
        let states = random_states(3, 6);
        let eps = 0.02;
        let h = FisherHandle::new(&net, &states, eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let v = ParamVector::from_vec(
                (0..net.param_count())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let hv = h.product(&v).unwrap();
            let quad = linalg::dot(v.as_slice(), hv.as_slice());
            let bound = eps * linalg::dot(v.as_slice(), v.as_slice());
            assert!(quad >= bound * (1.0 - 1e-9), "v^T H v = {quad} < {bound}");
        }
    }

    #[test]
    fn matches_finite_difference_kl_hessian() {
        let net = policy_2_8_2(7);
        let states = random_states(5, 8);
        let h = FisherHandle::new(&net, &states, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = ParamVector::from_vec(
            (0..net.param_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        );
        let hv = h.product(&v).unwrap();

        let step = 1e-4;
        let perturbed = |eps: f64| {
            let mut p = net.params().clone();
            linalg::axpy(p.as_mut_slice(), eps, v.as_slice());
            Network::new(net.spec().clone(), p).unwrap()
        };
        let plus = mean_kl_grad(&perturbed(step), &net, &states);
        let minus = mean_kl_grad(&perturbed(-step), &net, &states);
        let fd: Vec<f64> = plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| (p - m) / (2.0 * step))
            .collect();

        // Compare in norm and entrywise on the significant entries.
        let num = hv
            .as_slice()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = linalg::norm2(&fd).max(1e-12);
        assert!(num / den <= 1e-3, "relative norm error {}", num / den);

        // The monitored KL at the expansion point is zero.
        let kl0: f64 = states
            .iter()
            .map(|s| kl_diag_gauss(&net.dist(s).unwrap(), &net.dist(s).unwrap()).unwrap())
            .sum();
        assert!(kl0.abs() < 1e-15);
    }
}
