//! The linearized constrained trust-region subproblem and its dual.
//!
//! One policy update solves
//!
//! ```text
//! max_x  g'x    s.t.  c + b'x <= 0,   (1/2) x'Hx <= delta
//! ```
//!
//! where `g` is the surrogate-objective gradient, `b` the risk-constraint
//! gradient, `c` the estimated expected risk minus the safe limit, and `H`
//! the KL-Hessian (Fisher) curvature operator, applied matrix-free. The dual
//!
//! ```text
//! max_{lambda>0, nu>=0}  -(1/(2 lambda)) (q - 2 nu r + nu^2 s) + nu c - lambda delta
//! ```
//!
//! with `q = g'H⁻¹g`, `r = b'H⁻¹g`, `s = b'H⁻¹b` is solved exactly over its
//! two analytic candidate points; the primal step is
//! `x = (1/lambda*) H⁻¹ (g - b nu*)`. When the trust region and the risk
//! half-space are disjoint there is no feasible step and the recovery rule
//! `x = -sqrt(2 delta / s) H⁻¹ b` moves straight against the risk gradient to
//! the trust-region boundary.

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{log_prob_grad_dist, FisherHandle, Network, ParamVector};
use crate::rollout::Batch;

/// Matrix-free symmetric positive-definite curvature operator.
pub trait HvpOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl HvpOperator for FisherHandle<'_> {
    fn dim(&self) -> usize {
        FisherHandle::dim(self)
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.product(&ParamVector::from_vec(v.to_vec()))?.into_vec())
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    /// Residual dropped below `tol * ||rhs||`.
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Residual norm relative to `||rhs||`; 0 for a zero right-hand side.
    pub relative_residual: f64,
}

/// Standard conjugate gradient on `H x = rhs`, starting from zero. Stops at
/// the tolerance or the iteration cap; hitting the cap is flagged, not an
/// error. Non-finite iterates are errors.
pub fn conjugate_gradient(
    h: &dyn HvpOperator,
    rhs: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgOutcome> {
    let n = rhs.len();
    if n != h.dim() {
        return Err(Error::DimensionMismatch {
            context: "cg right-hand side",
            expected: h.dim(),
            actual: n,
        });
    }
    let rhs_norm = linalg::norm2(rhs);
    if rhs_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            converged: true,
            iterations: 0,
            residual_norm: 0.0,
            relative_residual: 0.0,
        });
    }
    let threshold = tol * rhs_norm;
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rdotr = linalg::dot(&r, &r);
    let mut iterations = 0;
    for k in 0..max_iters {
        if rdotr.sqrt() <= threshold {
            break;
        }
        let hp = h.apply(&p)?;
        let php = linalg::dot(&p, &hp);
        if !php.is_finite() || php <= 0.0 {
            return Err(Error::CgNonFinite { iteration: k });
        }
        let alpha = rdotr / php;
        linalg::axpy(&mut x, alpha, &p);
        linalg::axpy(&mut r, -alpha, &hp);
        let rdotr_new = linalg::dot(&r, &r);
        if !rdotr_new.is_finite() {
            return Err(Error::CgNonFinite { iteration: k });
        }
        let beta = rdotr_new / rdotr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rdotr = rdotr_new;
        iterations = k + 1;
    }
    let residual_norm = rdotr.sqrt();
    Ok(CgOutcome {
        x,
        converged: residual_norm <= threshold,
        iterations,
        residual_norm,
        relative_residual: residual_norm / rhs_norm,
    })
}

/// The linearized constrained instance: objective gradient, risk gradient,
/// constraint offset `c = (estimated expected risk) - d`, trust radius and an
/// implicit curvature handle.
pub struct Subproblem<H: HvpOperator> {
    pub g: ParamVector,
    pub b: ParamVector,
    pub c: f64,
    pub delta: f64,
    pub hvp: H,
}

impl<'a> Subproblem<FisherHandle<'a>> {
    /// States behind the curvature handle (for post-update KL measurement).
    pub fn hvp_states(&self) -> impl Iterator<Item = &[f64]> {
        self.hvp.states()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarTriple {
    /// `g' H⁻¹ g`
    pub q: f64,
    /// `b' H⁻¹ g`
    pub r: f64,
    /// `b' H⁻¹ b`
    pub s: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DualSolution {
    pub lambda_star: f64,
    pub nu_star: f64,
    pub dual_value: f64,
    /// Set when the objective gradient vanished and the multipliers come from
    /// the constraint projection at the clamped lambda.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Feasible,
    Infeasible,
}

/// Raw feasibility indexes of a sample set: `c` and `e = delta - c²/s`.
/// `e` is only evaluated when the verdict depends on it (`c > 0`); with
/// `c <= 0` a zero step is already admissible and the curvature solve is
/// skipped. `e` is `None` as well when the risk gradient vanishes.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityIndexes {
    pub c: f64,
    pub e: Option<f64>,
}

/// Threshold below which `b' H⁻¹ b` counts as a vanished risk gradient.
pub const S_EPSILON: f64 = 1e-12;

/// Solver knobs shared by every curvature solve.
#[derive(Debug, Clone, Copy)]
pub struct CgSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tol: 1e-8,
        }
    }
}

/// Builds the subproblem from a batch: Q-weighted score-function gradients
/// for the objective and the risk constraint, evaluated at the current
/// policy (where the importance ratio is 1), and the empirical constraint
/// offset from the risk returns at segment starts.
///
/// `q_weights`/`q_tilde_weights` must align with `batch.transitions()`; they
/// come from [`crate::rollout::surrogate_weights`]. When `center_q` is set
/// the objective weights are mean-centered (variance reduction; off by
/// default to keep the plain Q-weighted estimator).
pub fn build_subproblem<'a>(
    batch: &Batch,
    policy: &'a Network,
    q_weights: &[f64],
    q_tilde_weights: &[f64],
    d: f64,
    delta: f64,
    damping: f64,
    center_q: bool,
) -> Result<Subproblem<FisherHandle<'a>>> {
    let n = batch.n_transitions();
    if n == 0 {
        return Err(Error::EmptyBatch {
            context: "subproblem batch",
        });
    }
    if q_weights.len() != n || q_tilde_weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "surrogate weights",
            expected: n,
            actual: q_weights.len(),
        });
    }
    if delta <= 0.0 {
        return Err(Error::InvalidConfig("delta must be > 0".into()));
    }
    let q_mean = if center_q {
        q_weights.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };

    let dim = policy.param_count();
    let mut g = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let inv_n = 1.0 / n as f64;
    for (tr, (&qw, &qtw)) in batch
        .transitions()
        .zip(q_weights.iter().zip(q_tilde_weights))
    {
        let cache = policy.forward_cached(&tr.s)?;
        let dist = policy.dist_from_cache(&cache);
        let cot = log_prob_grad_dist(&dist, &tr.a)?;
        policy.vjp_cached_into(&cache, &cot, (qw - q_mean) * inv_n, &mut g, None)?;
        policy.vjp_cached_into(&cache, &cot, qtw * inv_n, &mut b, None)?;
    }
    if !linalg::all_finite(&g) || !linalg::all_finite(&b) {
        return Err(Error::NonFiniteInput {
            context: "subproblem gradients",
        });
    }

    let mut c_sum = 0.0;
    let mut c_count = 0usize;
    for rt in batch.segment_start_risk_returns() {
        c_sum += rt;
        c_count += 1;
    }
    if c_count == 0 {
        return Err(Error::EmptyBatch {
            context: "segment-start risk returns",
        });
    }
    let c = c_sum / c_count as f64 - d;

    let states: Vec<&[f64]> = batch.transitions().map(|tr| tr.s.as_slice()).collect();
    let hvp = FisherHandle::new(policy, states, damping)?;
    Ok(Subproblem {
        g: ParamVector::from_vec(g),
        b: ParamVector::from_vec(b),
        c,
        delta,
        hvp,
    })
}

/// Classifies a sample set's subproblem. The instance is infeasible exactly
/// when `c > 0` and `e = delta - c²/s < 0`: the risk half-space excludes the
/// zero step and the trust region cannot reach it. With a vanished risk
/// gradient the constraint is treated as inactive.
pub fn classify<H: HvpOperator>(
    subp: &Subproblem<H>,
    cg: CgSettings,
) -> Result<(FeasibilityIndexes, Verdict)> {
    let c = subp.c;
    if c <= 0.0 {
        return Ok((FeasibilityIndexes { c, e: None }, Verdict::Feasible));
    }
    let b_norm = linalg::norm2(subp.b.as_slice());
    if b_norm == 0.0 {
        return Ok((FeasibilityIndexes { c, e: None }, Verdict::Feasible));
    }
    let sol = conjugate_gradient(&subp.hvp, subp.b.as_slice(), cg.max_iters, cg.tol)?;
    let s = linalg::dot(subp.b.as_slice(), &sol.x);
    if s <= S_EPSILON {
        return Ok((FeasibilityIndexes { c, e: None }, Verdict::Feasible));
    }
    let e = subp.delta - c * c / s;
    let verdict = if e < 0.0 {
        Verdict::Infeasible
    } else {
        Verdict::Feasible
    };
    Ok((FeasibilityIndexes { c, e: Some(e) }, verdict))
}

/// `H⁻¹g` and `H⁻¹b` plus the dual scalars, shared by the dual solve and the
/// parameter update.
pub struct SubproblemDirections {
    pub x_g: Vec<f64>,
    pub x_b: Vec<f64>,
    pub triple: ScalarTriple,
    pub cg_g: CgOutcome,
    pub cg_b: CgOutcome,
}

/// Runs the two curvature solves. A solve that makes no progress on the
/// residual (or produces non-finite iterates) is a failed update; hitting the
/// iteration cap with a reduced residual is accepted and flagged through the
/// returned [`CgOutcome`]s.
pub fn solve_directions<H: HvpOperator>(
    subp: &Subproblem<H>,
    cg: CgSettings,
) -> Result<SubproblemDirections> {
    let cg_g = conjugate_gradient(&subp.hvp, subp.g.as_slice(), cg.max_iters, cg.tol)?;
    let cg_b = conjugate_gradient(&subp.hvp, subp.b.as_slice(), cg.max_iters, cg.tol)?;
    for outcome in [&cg_g, &cg_b] {
        if !outcome.converged && outcome.relative_residual >= 1.0 {
            return Err(Error::CgNoProgress {
                relative_residual: outcome.relative_residual,
            });
        }
    }
    let q = linalg::dot(subp.g.as_slice(), &cg_g.x).max(0.0);
    let r = linalg::dot(subp.b.as_slice(), &cg_g.x);
    let s = linalg::dot(subp.b.as_slice(), &cg_b.x).max(0.0);
    Ok(SubproblemDirections {
        x_g: cg_g.x.clone(),
        x_b: cg_b.x.clone(),
        triple: ScalarTriple { q, r, s },
        cg_g,
        cg_b,
    })
}

fn dual_value(q: f64, r: f64, s: f64, c: f64, delta: f64, lambda: f64, nu: f64) -> f64 {
    -(q - 2.0 * nu * r + nu * nu * s) / (2.0 * lambda) + nu * c - lambda * delta
}

/// Maximizes the dual exactly over `lambda > 0`, `nu >= 0`.
///
/// With `nu` eliminated by stationarity (`nu(lambda) = max(0, (lambda c + r)/s)`)
/// the dual is a concave single-variable function with one analytic candidate
/// per active interval: `lambda_a = sqrt(q / (2 delta))` where `nu = 0`, and
/// `lambda_b = sqrt((q - r²/s) / (2 delta - c²/s))` where `nu > 0`. Each
/// candidate is projected onto its interval and the better one wins.
pub fn solve_dual<H: HvpOperator>(
    subp: &Subproblem<H>,
    triple: &ScalarTriple,
    lambda_min: f64,
) -> Result<DualSolution> {
    let ScalarTriple { q, r, s } = *triple;
    let (c, delta) = (subp.c, subp.delta);
    if !(q.is_finite() && r.is_finite() && s.is_finite()) {
        return Err(Error::NonFiniteInput {
            context: "dual scalars",
        });
    }

    if q <= 0.0 {
        // Zero objective gradient: nothing to ascend. Clamp lambda and
        // project nu from constraint stationarity.
        let lambda = lambda_min;
        let nu = if s > S_EPSILON {
            ((lambda * c + r) / s).max(0.0)
        } else {
            0.0
        };
        return Ok(DualSolution {
            lambda_star: lambda,
            nu_star: nu,
            dual_value: dual_value(q, r, s, c, delta, lambda, nu),
            degenerate: true,
        });
    }

    let lambda_a = (q / (2.0 * delta)).sqrt();
    if s <= S_EPSILON {
        // Vanished risk gradient: unconstrained trust-region step.
        let lambda = lambda_a.max(lambda_min);
        return Ok(DualSolution {
            lambda_star: lambda,
            nu_star: 0.0,
            dual_value: dual_value(q, 0.0, 0.0, c, delta, lambda, 0.0),
            degenerate: false,
        });
    }

    // Interval boundary where nu(lambda) changes sign: lambda c + r = 0.
    let edge = if c != 0.0 { -r / c } else { f64::NAN };

    // Candidate in the nu = 0 interval {lambda : lambda c + r <= 0}.
    let mut best: Option<DualSolution> = None;
    let lambda_i = if c > 0.0 {
        if r < 0.0 {
            Some(lambda_a.min(edge))
        } else {
            None // interval empty
        }
    } else if c < 0.0 {
        Some(if r > 0.0 { lambda_a.max(edge) } else { lambda_a })
    } else if r <= 0.0 {
        Some(lambda_a)
    } else {
        None
    };
    if let Some(lambda) = lambda_i {
        let lambda = lambda.max(lambda_min);
        let cand = DualSolution {
            lambda_star: lambda,
            nu_star: 0.0,
            dual_value: dual_value(q, r, s, c, delta, lambda, 0.0),
            degenerate: false,
        };
        best = Some(cand);
    }

    // Candidate in the nu > 0 interval {lambda : lambda c + r >= 0}.
    let region_ii_nonempty = if c > 0.0 {
        true
    } else if c < 0.0 {
        r > 0.0
    } else {
        r >= 0.0
    };
    if region_ii_nonempty {
        let a_ii = (q - r * r / s).max(0.0);
        let b_ii = 2.0 * delta - c * c / s;
        let mut lambda = if b_ii > 0.0 {
            (a_ii / b_ii).sqrt()
        } else {
            f64::INFINITY
        };
        // Project onto the interval.
        if c > 0.0 {
            if r < 0.0 {
                lambda = lambda.max(edge);
            }
        } else if c < 0.0 {
            // Bounded above by the edge (r > 0 here).
            lambda = lambda.min(edge);
        }
        if lambda.is_finite() {
            let lambda = lambda.max(lambda_min);
            let nu = ((lambda * c + r) / s).max(0.0);
            let cand = DualSolution {
                lambda_star: lambda,
                nu_star: nu,
                dual_value: dual_value(q, r, s, c, delta, lambda, nu),
                degenerate: false,
            };
            if best.map_or(true, |b| cand.dual_value > b.dual_value) {
                best = Some(cand);
            }
        }
    }

    best.ok_or_else(|| Error::Internal("dual solve found no candidate interval".into()))
}

/// Applies the constrained update
/// `theta' = theta + (1/lambda*) H⁻¹ (g - b nu*)` using the already-solved
/// directions.
pub fn apply_update(
    theta_old: &ParamVector,
    dual: &DualSolution,
    dirs: &SubproblemDirections,
) -> Result<ParamVector> {
    let mut theta = theta_old.clone();
    let inv_lambda = 1.0 / dual.lambda_star;
    let coeff_b = -dual.nu_star * inv_lambda;
    linalg::axpy(theta.as_mut_slice(), inv_lambda, &dirs.x_g);
    linalg::axpy(theta.as_mut_slice(), coeff_b, &dirs.x_b);
    if !linalg::all_finite(theta.as_slice()) {
        return Err(Error::NonFiniteInput {
            context: "updated policy parameters",
        });
    }
    Ok(theta)
}

/// Step length and direction of the recovery rule
/// `theta' = theta - sqrt(2 delta / (b'H⁻¹b)) H⁻¹ b`. Returns `None` (and
/// warns) when the risk gradient vanishes — there is nothing to recover
/// along.
pub fn recovery_step<H: HvpOperator>(
    theta_old: &ParamVector,
    subp: &Subproblem<H>,
    cg: CgSettings,
) -> Result<Option<ParamVector>> {
    let sol = conjugate_gradient(&subp.hvp, subp.b.as_slice(), cg.max_iters, cg.tol)?;
    let s = linalg::dot(subp.b.as_slice(), &sol.x);
    if s <= S_EPSILON {
        log::warn!("recovery skipped: risk-gradient curvature norm {s:.3e} is degenerate");
        return Ok(None);
    }
    let scale = -(2.0 * subp.delta / s).sqrt();
    let mut theta = theta_old.clone();
    linalg::axpy(theta.as_mut_slice(), scale, &sol.x);
    if !linalg::all_finite(theta.as_slice()) {
        return Err(Error::NonFiniteInput {
            context: "recovery parameters",
        });
    }
    Ok(Some(theta))
}

#[cfg(test)]
pub(crate) mod test_oracle {
    //! Grid-search oracle over the dual, independent of the analytic solver.

    use super::*;

    /// Dense SPD matrix operator for small test instances.
    pub struct DenseSpd(pub Vec<Vec<f64>>);

    impl HvpOperator for DenseSpd {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
            Ok(self
                .0
                .iter()
                .map(|row| linalg::dot(row, v))
                .collect())
        }
    }

    /// Golden-section maximum of a unimodal 1-D function on `[lo, hi]`.
    fn golden_max(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let inv_phi = 0.618_033_988_749_894_9_f64;
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let mut f1 = f(x1);
        let mut f2 = f(x2);
        for _ in 0..200 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = f(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = f(x1);
            }
        }
        0.5 * (lo + hi)
    }

    /// Maximizes the dual over `(lambda, nu)` with a dense seed grid followed
    /// by alternating golden-section refinement. The dual is jointly concave
    /// and smooth for `lambda > 0`, so coordinate ascent converges to the
    /// global maximum from any seed.
    pub fn grid_dual_max(q: f64, r: f64, s: f64, c: f64, delta: f64) -> (f64, f64, f64) {
        let lambda_scale = (q / (2.0 * delta)).sqrt().max(1e-6);
        let lambda_lo = lambda_scale * 1e-6;
        let lambda_hi = lambda_scale * 1e6;
        let nu_hi_seed = if s > 0.0 {
            ((lambda_scale * c.abs() + r.abs()) / s + 1.0) * 100.0
        } else {
            1.0
        };
        // Seed grid: log-spaced lambda, linear nu.
        let n = 100;
        let mut best = (lambda_scale, 0.0, f64::NEG_INFINITY);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let lambda = lambda_lo * (lambda_hi / lambda_lo).powf(t);
            for j in 0..=n {
                let nu = nu_hi_seed * j as f64 / n as f64;
                let v = dual_value(q, r, s, c, delta, lambda, nu);
                if v > best.2 {
                    best = (lambda, nu, v);
                }
            }
        }
        // Alternating 1-D refinement on generous fixed brackets.
        let (mut lambda, mut nu) = (best.0, best.1);
        for _ in 0..60 {
            let nu_fixed = nu;
            let log_best = golden_max(
                |t| dual_value(q, r, s, c, delta, t.exp(), nu_fixed),
                (lambda * 1e-6).max(1e-300).ln(),
                (lambda * 1e6).ln(),
            );
            lambda = log_best.exp();
            if s > 0.0 {
                let lambda_fixed = lambda;
                nu = golden_max(
                    |t| dual_value(q, r, s, c, delta, lambda_fixed, t),
                    0.0,
                    (nu + 1.0) * 1e4,
                );
            }
        }
        (lambda, nu, dual_value(q, r, s, c, delta, lambda, nu))
    }

    /// Random SPD matrix `A A' + eps I`.
    pub fn random_spd(dim: usize, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
        let a: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut m = vec![vec![0.0; dim]; dim];
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for (ri, rj) in a[i].iter().zip(&a[j]) {
                    acc += ri * rj;
                }
                m[i][j] = acc + if i == j { 0.3 } else { 0.0 };
            }
        }
        m
    }

    /// Gaussian-elimination solve for the dense oracle.
    pub fn dense_solve(m: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut a: Vec<Vec<f64>> = m.iter().map(|row| row.clone()).collect();
        let mut x = rhs.to_vec();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            x.swap(col, pivot);
            let div = a[col][col];
            for j in col..n {
                a[col][j] /= div;
            }
            x[col] /= div;
            for i in 0..n {
                if i != col && a[i][col] != 0.0 {
                    let f = a[i][col];
                    for j in col..n {
                        a[i][j] -= f * a[col][j];
                    }
                    x[i] -= f * x[col];
                }
            }
        }
        x
    }
}
