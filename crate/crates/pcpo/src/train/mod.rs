//! End-to-end training: synchronized collection, critic updates, feasibility
//! classification and the constrained policy update, plus the single-learner
//! variant (one worker) and a clipped-surrogate baseline over the same
//! machinery.
//!
//! The loop is bulk-synchronous: a concurrent collection phase alternates
//! with a serial update phase that is the only writer of network parameters.
//! Episodes are tracked across iterations by environment resets; an epoch
//! closes once `episodes_per_epoch` episodes have completed, and metrics
//! aggregate per epoch.

mod metrics;

pub use metrics::{EpochMetrics, METRICS_HEADER};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    generate_track, BicycleParams, DoneReason, Environment, IntersectionEnv, LaneEnv,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{
    checkpoint, kl_diag_gauss, log_prob, log_prob_grad_dist, MlpSpec, Network, ParamVector,
    SgdOutcome,
};
use crate::rollout::{
    collect, compute_targets, surrogate_weights, Batch, EpisodeRecord, Feasibility, SampleSet,
    Worker,
};
use crate::solver::{
    apply_update, build_subproblem, classify, recovery_step, solve_directions, solve_dual,
    CgSettings, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Pcpo,
    Cpo,
    Ppo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Lane,
    Intersection,
}

/// Full training configuration. JSON configs mirror these field names;
/// missing fields fall back to the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algo: Algo,
    pub env: EnvKind,
    /// Number of parallel learners K.
    pub workers: usize,
    /// Steps each learner explores per iteration.
    pub n_steps: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lr_value: f64,
    pub lr_risk: f64,
    pub lr_policy: f64,
    /// Risk limit; `None` resolves to the per-environment default
    /// (1 for lane keeping, 5 for the intersection).
    pub d: Option<f64>,
    /// Trust radius.
    pub delta: f64,
    pub ppo_epsilon: f64,
    pub seed: u64,
    /// Hidden layer widths of all three networks.
    pub hidden: Vec<usize>,
    pub damping: f64,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub lambda_min: f64,
    /// Gradient passes over the fresh batch per iteration for each critic.
    pub critic_passes: usize,
    /// Policy gradient passes per batch in the clipped-surrogate baseline.
    pub ppo_passes: usize,
    /// Optional backtracking on the measured KL after the constrained step.
    pub line_search: bool,
    /// Mean-center the objective Q weights (variance reduction).
    pub q_centering: bool,
    pub dump_diagnostics: bool,
    pub dump_samples: bool,
    /// Seed of the lane-keeping track generator (0 = canonical loop).
    pub track_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Pcpo,
            env: EnvKind::Lane,
            workers: 4,
            n_steps: 16,
            episodes_per_epoch: 25,
            epochs: 200,
            gamma: 0.95,
            lr_value: 1e-3,
            lr_risk: 1e-3,
            lr_policy: 1e-4,
            d: None,
            delta: 1e-3,
            ppo_epsilon: 0.2,
            seed: 0,
            hidden: vec![100, 100],
            damping: 1e-2,
            cg_max_iters: 20,
            cg_tol: 1e-8,
            lambda_min: 1e-8,
            critic_passes: 5,
            ppo_passes: 5,
            line_search: false,
            q_centering: false,
            dump_diagnostics: false,
            dump_samples: false,
            track_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn resolved_d(&self) -> f64 {
        self.d.unwrap_or(match self.env {
            EnvKind::Lane => 1.0,
            EnvKind::Intersection => 5.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.workers < 1 {
            return bad("workers must be >= 1");
        }
        if self.n_steps < 1 {
            return bad("n_steps must be >= 1");
        }
        if self.episodes_per_epoch < 1 {
            return bad("episodes_per_epoch must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.lr_value <= 0.0 || self.lr_risk <= 0.0 || self.lr_policy <= 0.0 {
            return bad("learning rates must be > 0");
        }
        if self.delta <= 0.0 {
            return bad("delta must be > 0");
        }
        if self.ppo_epsilon < 0.0 {
            return bad("ppo_epsilon must be >= 0");
        }
        if self.damping <= 0.0 {
            return bad("damping must be > 0");
        }
        if self.cg_max_iters < 1 || self.cg_tol <= 0.0 {
            return bad("cg settings must be positive");
        }
        if self.lambda_min <= 0.0 {
            return bad("lambda_min must be > 0");
        }
        if self.critic_passes < 1 || self.ppo_passes < 1 {
            return bad("gradient pass counts must be >= 1");
        }
        if self.resolved_d() <= 0.0 {
            return bad("risk limit d must be > 0");
        }
        Ok(())
    }

    fn cg_settings(&self) -> CgSettings {
        CgSettings {
            max_iters: self.cg_max_iters,
            tol: self.cg_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    /// Constrained trust-region step from the pooled feasible batch.
    Constrained,
    /// Recovery step along the risk gradient.
    Recovery,
    /// Clipped-surrogate gradient passes.
    Ppo,
    /// Update rejected or skipped; parameters unchanged.
    NoOp,
}

/// One policy-update event, kept for the whole run (diagnostics and tests).
#[derive(Debug, Clone)]
pub struct UpdateLogEntry {
    pub iteration: u64,
    pub kind: UpdateKind,
    /// Measured mean KL(new, old) over the update batch states.
    pub post_kl: Option<f64>,
    pub feasible_sets: usize,
    pub total_sets: usize,
}

/// Scalars of one constrained/recovery solve, dumped to the diagnostics CSV.
#[derive(Debug, Clone)]
struct SolveDiag {
    q: Option<f64>,
    r: Option<f64>,
    s: Option<f64>,
    c: f64,
    e: Option<f64>,
    verdict: &'static str,
    lambda: Option<f64>,
    nu: Option<f64>,
    step_norm: f64,
    post_kl: Option<f64>,
}

pub struct RunOutput {
    pub metrics: Vec<EpochMetrics>,
    pub updates: Vec<UpdateLogEntry>,
    pub policy: Network,
    pub value: Network,
    pub risk: Network,
}

struct EpochAccumulator {
    episodes: Vec<EpisodeRecord>,
    updates: Vec<UpdateLogEntry>,
}

pub struct Trainer<E: Environment> {
    cfg: TrainConfig,
    d: f64,
    policy: Network,
    value: Network,
    risk: Network,
    workers: Vec<Worker<E>>,
    iteration: u64,
    epochs_completed: usize,
    acc: EpochAccumulator,
    completed: Vec<EpochMetrics>,
    update_log: Vec<UpdateLogEntry>,
    diag_log: Vec<(u64, SolveDiag)>,
    critic_skips: u64,
}

const INIT_STREAM_OFFSET: u64 = 0x9E3779B97F4A7C15;

fn params_checksum(p: &ParamVector) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in p.as_slice() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mean_kl_between(
    new_policy: &Network,
    old_policy: &Network,
    states: impl Iterator<Item = impl AsRef<[f64]>>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in states {
        let p = new_policy.dist(s.as_ref())?;
        let q = old_policy.dist(s.as_ref())?;
        total += kl_diag_gauss(&p, &q)?;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Mean TD losses measured on the last pass (before its step) plus the
/// number of skipped steps.
#[derive(Debug, Clone, Copy)]
pub struct CriticStats {
    pub value_loss: f64,
    pub risk_loss: f64,
    pub skipped: u64,
}

/// One gradient step per critic on the mean squared TD loss over ALL sample
/// sets, repeated `passes` times; targets are recomputed before every pass
/// because the bootstrap moves with the critic.
pub fn update_critics(
    sets: &mut [SampleSet],
    value: &mut Network,
    risk: &mut Network,
    lr_value: f64,
    lr_risk: f64,
    gamma: f64,
    passes: usize,
) -> Result<CriticStats> {
    let mut skipped = 0u64;
    let mut last_loss_v = 0.0;
    let mut last_loss_r = 0.0;
    for _ in 0..passes {
        for set in sets.iter_mut() {
            compute_targets(set, value, risk, gamma)?;
        }
        let n: usize = sets.iter().map(|s| s.transitions.len()).sum();
        if n == 0 {
            return Err(Error::EmptyBatch {
                context: "critic update",
            });
        }
        let inv_n = 1.0 / n as f64;
        let mut grad_v = ParamVector::zeros(value.param_count());
        let mut grad_r = ParamVector::zeros(risk.param_count());
        let mut loss_v = 0.0;
        let mut loss_r = 0.0;
        let mut input = Vec::new();
        for set in sets.iter() {
            for (t, tr) in set.transitions.iter().enumerate() {
                input.clear();
                input.extend_from_slice(&tr.s);
                input.extend_from_slice(&tr.a);

                let cache = value.forward_cached(&input)?;
                let resid = cache.out[0] - set.r_targets[t];
                loss_v += 0.5 * resid * resid * inv_n;
                value.vjp_cached_into(&cache, &[1.0], resid * inv_n, grad_v.as_mut_slice(), None)?;

                let cache = risk.forward_cached(&input)?;
                let resid = cache.out[0] - set.r_tilde_targets[t];
                loss_r += 0.5 * resid * resid * inv_n;
                risk.vjp_cached_into(&cache, &[1.0], resid * inv_n, grad_r.as_mut_slice(), None)?;
            }
        }
        if loss_v.is_finite() {
            if value.sgd_step(&grad_v, lr_value)? == SgdOutcome::SkippedNonFinite {
                skipped += 1;
            }
        } else {
            skipped += 1;
            log::warn!("value critic loss non-finite; step skipped");
        }
        if loss_r.is_finite() {
            if risk.sgd_step(&grad_r, lr_risk)? == SgdOutcome::SkippedNonFinite {
                skipped += 1;
            }
        } else {
            skipped += 1;
            log::warn!("risk critic loss non-finite; step skipped");
        }
        last_loss_v = loss_v;
        last_loss_r = loss_r;
    }
    Ok(CriticStats {
        value_loss: last_loss_v,
        risk_loss: last_loss_r,
        skipped,
    })
}

impl<E: Environment> Trainer<E> {
    /// Builds networks and workers. `make_env` constructs learner `i`'s
    /// environment; worker RNG streams are seeded `seed + learner_id`.
    pub fn new<F: FnMut(usize) -> E>(cfg: TrainConfig, mut make_env: F) -> Result<Self> {
        cfg.validate()?;
        let mut effective = cfg;
        if effective.algo == Algo::Cpo && effective.workers != 1 {
            log::warn!(
                "cpo is the single-learner variant; forcing workers from {} to 1",
                effective.workers
            );
            effective.workers = 1;
        }

        let probe = make_env(0);
        let obs_dim = probe.obs_dim();
        let act_dim = probe.action_dim();
        let policy_spec = MlpSpec::gaussian(
            obs_dim,
            &effective.hidden,
            probe.action_low(),
            probe.action_high(),
        );
        let critic_spec = MlpSpec::scalar(obs_dim + act_dim, &effective.hidden);

        let mut init_rng =
            ChaCha8Rng::seed_from_u64(effective.seed.wrapping_add(INIT_STREAM_OFFSET));
        let policy = Network::init(policy_spec, &mut init_rng)?;
        let value = Network::init(critic_spec.clone(), &mut init_rng)?;
        let risk = Network::init(critic_spec, &mut init_rng)?;

        let mut workers = Vec::with_capacity(effective.workers);
        workers.push(Worker::new(0, probe, effective.seed));
        for id in 1..effective.workers {
            workers.push(Worker::new(id, make_env(id), effective.seed));
        }

        let d = effective.resolved_d();
        Ok(Self {
            cfg: effective,
            d,
            policy,
            value,
            risk,
            workers,
            iteration: 0,
            epochs_completed: 0,
            acc: EpochAccumulator {
                episodes: Vec::new(),
                updates: Vec::new(),
            },
            completed: Vec::new(),
            update_log: Vec::new(),
            diag_log: Vec::new(),
            critic_skips: 0,
        })
    }

    pub fn policy(&self) -> &Network {
        &self.policy
    }

    pub fn value(&self) -> &Network {
        &self.value
    }

    pub fn risk(&self) -> &Network {
        &self.risk
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    pub fn update_log(&self) -> &[UpdateLogEntry] {
        &self.update_log
    }

    /// Critic gradient steps skipped for non-finite losses so far.
    pub fn critic_skips(&self) -> u64 {
        self.critic_skips
    }

    /// Runs one synchronized collect / update cycle.
    pub fn step_iteration(&mut self) -> Result<()> {
        let checksum_before = params_checksum(self.policy.params());
        let (mut sets, episodes) =
            collect(&self.policy, &mut self.workers, self.cfg.n_steps, self.iteration)?;
        if params_checksum(self.policy.params()) != checksum_before {
            return Err(Error::Internal(
                "policy parameters changed during collection".into(),
            ));
        }

        let critic_stats = update_critics(
            &mut sets,
            &mut self.value,
            &mut self.risk,
            self.cfg.lr_value,
            self.cfg.lr_risk,
            self.cfg.gamma,
            self.cfg.critic_passes,
        )?;
        self.critic_skips += critic_stats.skipped;
        // Final targets under the updated critics feed the policy phase.
        for set in sets.iter_mut() {
            compute_targets(set, &self.value, &self.risk, self.cfg.gamma)?;
        }

        let entry = match self.cfg.algo {
            Algo::Pcpo | Algo::Cpo => self.constrained_update(&mut sets)?,
            Algo::Ppo => self.ppo_update(&sets)?,
        };
        self.update_log.push(entry.clone());
        self.acc.updates.push(entry);
        self.acc.episodes.extend(episodes);
        self.iteration += 1;
        self.roll_epochs();
        Ok(())
    }

    /// Classifies each sample set on its own subproblem, then either solves
    /// the pooled feasible instance (trust-region dual step) or recovers
    /// along the pooled risk gradient.
    fn constrained_update(&mut self, sets: &mut [SampleSet]) -> Result<UpdateLogEntry> {
        let cg = self.cfg.cg_settings();
        let total_sets = sets.len();
        // All gradients and curvature are evaluated at the pre-update
        // parameters; work against a frozen copy so the live policy stays
        // free for the parameter write at the end.
        let old_policy = self.policy.clone();
        let old_params = old_policy.params().clone();

        let mut feasible_sets = 0;
        for set in sets.iter_mut() {
            let verdict = {
                let batch = Batch::new(vec![&*set])?;
                let (q_w, qt_w) = surrogate_weights(&batch, &self.value, &self.risk)?;
                let subp = build_subproblem(
                    &batch,
                    &old_policy,
                    &q_w,
                    &qt_w,
                    self.d,
                    self.cfg.delta,
                    self.cfg.damping,
                    self.cfg.q_centering,
                )?;
                classify(&subp, cg)?.1
            };
            set.feasibility = match verdict {
                Verdict::Feasible => Feasibility::Feasible,
                Verdict::Infeasible => Feasibility::Infeasible,
            };
            if verdict == Verdict::Feasible {
                feasible_sets += 1;
            }
        }

        let (kind, diag) = if feasible_sets > 0 {
            let batch = Batch::feasible_only(sets)?;
            let (q_w, qt_w) = surrogate_weights(&batch, &self.value, &self.risk)?;
            let subp = build_subproblem(
                &batch,
                &old_policy,
                &q_w,
                &qt_w,
                self.d,
                self.cfg.delta,
                self.cfg.damping,
                self.cfg.q_centering,
            )?;
            // Guard the dual's precondition: the pooled estimates can turn
            // infeasible even when individual sets were not; recover then.
            let (pooled_idx, pooled_verdict) = classify(&subp, cg)?;
            if pooled_verdict == Verdict::Infeasible {
                log::debug!(
                    "iteration {}: pooled feasible batch is itself infeasible (c={}, e={:?}); recovering",
                    self.iteration,
                    pooled_idx.c,
                    pooled_idx.e
                );
                drop(subp);
                self.recovery_from_all_sets(sets, &old_policy, &old_params)?
            } else {
                match solve_directions(&subp, cg) {
                    Err(Error::CgNoProgress { relative_residual }) => {
                        log::warn!(
                            "iteration {}: cg made no progress (residual {relative_residual}); update rejected",
                            self.iteration
                        );
                        (UpdateKind::NoOp, None)
                    }
                    Err(e) => return Err(e),
                    Ok(dirs) => {
                        let dual = solve_dual(&subp, &dirs.triple, self.cfg.lambda_min)?;
                        let mut theta = apply_update(&old_params, &dual, &dirs)?;
                        if self.cfg.line_search {
                            theta = backtrack(
                                &old_policy,
                                &old_params,
                                theta,
                                &subp,
                                self.cfg.delta,
                            )?;
                        }
                        let step_norm = step_norm(&old_params, &theta);
                        self.policy.set_params(theta)?;
                        let post_kl =
                            mean_kl_between(&self.policy, &old_policy, subp.hvp_states())?;
                        let t = dirs.triple;
                        let e = if t.s > crate::solver::S_EPSILON {
                            Some(self.cfg.delta - subp.c * subp.c / t.s)
                        } else {
                            None
                        };
                        (
                            UpdateKind::Constrained,
                            Some(SolveDiag {
                                q: Some(t.q),
                                r: Some(t.r),
                                s: Some(t.s),
                                c: subp.c,
                                e,
                                verdict: "feasible",
                                lambda: Some(dual.lambda_star),
                                nu: Some(dual.nu_star),
                                step_norm,
                                post_kl: Some(post_kl),
                            }),
                        )
                    }
                }
            }
        } else {
            self.recovery_from_all_sets(sets, &old_policy, &old_params)?
        };

        let post_kl = diag.as_ref().and_then(|d| d.post_kl);
        if let Some(d) = diag {
            self.diag_log.push((self.iteration, d));
        }
        Ok(UpdateLogEntry {
            iteration: self.iteration,
            kind,
            post_kl,
            feasible_sets,
            total_sets,
        })
    }

    /// Recovery branch over the pooled all-sample subproblem.
    fn recovery_from_all_sets(
        &mut self,
        sets: &[SampleSet],
        old_policy: &Network,
        old_params: &ParamVector,
    ) -> Result<(UpdateKind, Option<SolveDiag>)> {
        let all = Batch::all(sets)?;
        let (q_all, qt_all) = surrogate_weights(&all, &self.value, &self.risk)?;
        let subp = build_subproblem(
            &all,
            old_policy,
            &q_all,
            &qt_all,
            self.d,
            self.cfg.delta,
            self.cfg.damping,
            self.cfg.q_centering,
        )?;
        match recovery_step(old_params, &subp, self.cfg.cg_settings()) {
            Err(Error::CgNoProgress { relative_residual }) => {
                log::warn!(
                    "iteration {}: recovery cg made no progress (residual {relative_residual})",
                    self.iteration
                );
                Ok((UpdateKind::NoOp, None))
            }
            Err(e) => Err(e),
            Ok(None) => Ok((UpdateKind::NoOp, None)),
            Ok(Some(theta)) => {
                let step_norm = step_norm(old_params, &theta);
                self.policy.set_params(theta)?;
                let post_kl = mean_kl_between(&self.policy, old_policy, subp.hvp_states())?;
                Ok((
                    UpdateKind::Recovery,
                    Some(SolveDiag {
                        q: None,
                        r: None,
                        s: None,
                        c: subp.c,
                        e: None,
                        verdict: "recovery",
                        lambda: None,
                        nu: None,
                        step_norm,
                        post_kl: Some(post_kl),
                    }),
                ))
            }
        }
    }

    /// Clipped-surrogate baseline update: `ppo_passes` ascent steps on
    /// `E[min(ratio * A, clip(ratio, 1±eps) * A)]` with `A` the Q weights.
    fn ppo_update(&mut self, sets: &[SampleSet]) -> Result<UpdateLogEntry> {
        let batch = Batch::all(sets)?;
        let (q_w, _) = surrogate_weights(&batch, &self.value, &self.risk)?;
        let adv: Vec<f64> = if self.cfg.q_centering {
            let mean = q_w.iter().sum::<f64>() / q_w.len() as f64;
            q_w.iter().map(|v| v - mean).collect()
        } else {
            q_w
        };
        let old_policy = self.policy.clone();
        let eps = self.cfg.ppo_epsilon;
        let n = batch.n_transitions();
        let inv_n = 1.0 / n as f64;
        for _ in 0..self.cfg.ppo_passes {
            let mut grad = ParamVector::zeros(self.policy.param_count());
            for (tr, &a_w) in batch.transitions().zip(&adv) {
                let cache = self.policy.forward_cached(&tr.s)?;
                let dist = self.policy.dist_from_cache(&cache);
                let lp = log_prob(&dist, &tr.a)?;
                let ratio = (lp - tr.log_prob_old).exp();
                let unclipped = ratio * a_w;
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a_w;
                if unclipped <= clipped {
                    // Active branch differentiable: d(ratio*A) = A*ratio*dlogpi.
                    // Minimization form flips the ascent sign.
                    let cot = log_prob_grad_dist(&dist, &tr.a)?;
                    self.policy.vjp_cached_into(
                        &cache,
                        &cot,
                        -(a_w * ratio) * inv_n,
                        grad.as_mut_slice(),
                        None,
                    )?;
                }
            }
            self.policy.sgd_step(&grad, self.cfg.lr_policy)?;
        }
        let post_kl = mean_kl_between(
            &self.policy,
            &old_policy,
            batch.transitions().map(|tr| tr.s.as_slice()),
        )?;
        Ok(UpdateLogEntry {
            iteration: self.iteration,
            kind: UpdateKind::Ppo,
            post_kl: Some(post_kl),
            feasible_sets: 0,
            total_sets: sets.len(),
        })
    }

    /// Closes full epochs out of the accumulated episodes. Each epoch takes
    /// exactly `episodes_per_epoch` episodes in completion order; the update
    /// records accumulated so far belong to the first epoch closed.
    fn roll_epochs(&mut self) {
        while self.acc.episodes.len() >= self.cfg.episodes_per_epoch {
            let episodes: Vec<EpisodeRecord> = self
                .acc
                .episodes
                .drain(..self.cfg.episodes_per_epoch)
                .collect();
            let updates = std::mem::take(&mut self.acc.updates);
            self.epochs_completed += 1;
            self.completed
                .push(summarize_epoch(self.epochs_completed, &episodes, &updates));
        }
    }

    pub fn drain_epochs(&mut self) -> Vec<EpochMetrics> {
        std::mem::take(&mut self.completed)
    }

    fn drain_diag(&mut self) -> Vec<(u64, SolveDiag)> {
        std::mem::take(&mut self.diag_log)
    }
}

/// Optional backtracking: shrink the step until the measured KL honors the
/// trust radius. Falls back to the smallest probed step if nothing passes.
fn backtrack(
    old_policy: &Network,
    old_params: &ParamVector,
    theta: ParamVector,
    subp: &crate::solver::Subproblem<crate::nn::FisherHandle<'_>>,
    delta: f64,
) -> Result<ParamVector> {
    let mut step: Vec<f64> = theta
        .as_slice()
        .iter()
        .zip(old_params.as_slice())
        .map(|(n, o)| n - o)
        .collect();
    let mut cand = old_params.clone();
    for _ in 0..10 {
        cand = old_params.clone();
        linalg::axpy(cand.as_mut_slice(), 1.0, &step);
        let mut probe = old_policy.clone();
        probe.set_params(cand.clone())?;
        let kl = mean_kl_between(&probe, old_policy, subp.hvp_states())?;
        if kl <= delta {
            return Ok(cand);
        }
        linalg::scale(&mut step, 0.8);
    }
    log::warn!("line search exhausted; applying the smallest probed step");
    Ok(cand)
}

fn step_norm(old: &ParamVector, new: &ParamVector) -> f64 {
    old.as_slice()
        .iter()
        .zip(new.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn summarize_epoch(
    epoch: usize,
    episodes: &[EpisodeRecord],
    updates: &[UpdateLogEntry],
) -> EpochMetrics {
    let n = episodes.len() as f64;
    let mean_return = episodes.iter().map(|e| e.ret).sum::<f64>() / n;
    let mean_risk = episodes.iter().map(|e| e.risk).sum::<f64>() / n;
    let dev_steps: u32 = episodes
        .iter()
        .filter(|e| e.abs_dev_sum.is_some())
        .map(|e| e.steps)
        .sum();
    let mean_abs_deviation = if dev_steps > 0 {
        Some(
            episodes
                .iter()
                .filter_map(|e| e.abs_dev_sum)
                .sum::<f64>()
                / dev_steps as f64,
        )
    } else {
        None
    };
    let classified: Vec<&UpdateLogEntry> = updates
        .iter()
        .filter(|u| u.kind != UpdateKind::Ppo)
        .collect();
    let total_sets: usize = classified.iter().map(|u| u.total_sets).sum();
    let feasible_fraction = if total_sets > 0 {
        Some(classified.iter().map(|u| u.feasible_sets).sum::<usize>() as f64 / total_sets as f64)
    } else {
        None
    };
    let recovery_count = updates
        .iter()
        .filter(|u| u.kind == UpdateKind::Recovery)
        .count() as u32;
    let kls: Vec<f64> = updates.iter().filter_map(|u| u.post_kl).collect();
    let mean_post_update_kl = if kls.is_empty() {
        None
    } else {
        Some(kls.iter().sum::<f64>() / kls.len() as f64)
    };
    let offlane_count = episodes
        .iter()
        .filter(|e| e.reason == DoneReason::OffLane)
        .count() as u32;
    let collision_count = episodes
        .iter()
        .filter(|e| e.reason == DoneReason::Collision)
        .count() as u32;
    EpochMetrics {
        epoch,
        mean_return,
        mean_risk,
        mean_abs_deviation,
        feasible_fraction,
        recovery_count,
        mean_post_update_kl,
        offlane_count,
        collision_count,
    }
}

const DIAG_HEADER: &str = "iteration,q,r,s,c,e,verdict,lambda,nu,step_norm,post_update_kl";

fn diag_row(iteration: u64, d: &SolveDiag) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        iteration,
        opt(d.q),
        opt(d.r),
        opt(d.s),
        d.c,
        opt(d.e),
        d.verdict,
        opt(d.lambda),
        opt(d.nu),
        d.step_norm,
        opt(d.post_kl),
    )
}

/// Runs a full training job. With an output directory, streams `metrics.csv`
/// (one row per epoch), writes parameter checkpoints every 10 epochs and at
/// the end, and optionally dumps solver diagnostics and raw samples.
pub fn run(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.env {
        EnvKind::Lane => {
            let track = generate_track(cfg.track_seed);
            run_generic(cfg, out_dir, |_| {
                LaneEnv::new(track.clone(), BicycleParams::default())
            })
        }
        EnvKind::Intersection => run_generic(cfg, out_dir, |_| IntersectionEnv::new()),
    }
}

fn run_generic<E, F>(cfg: &TrainConfig, out_dir: Option<&Path>, make_env: F) -> Result<RunOutput>
where
    E: Environment,
    F: FnMut(usize) -> E,
{
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut trainer = Trainer::new(cfg.clone(), make_env)?;
    let mut metrics_file = match out_dir {
        Some(dir) => {
            let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut diag_file = match (cfg.dump_diagnostics, out_dir) {
        (true, Some(dir)) => {
            let mut w = BufWriter::new(File::create(dir.join("diagnostics.csv"))?);
            writeln!(w, "{DIAG_HEADER}")?;
            Some(w)
        }
        _ => None,
    };

    let mut all_metrics = Vec::with_capacity(cfg.epochs);
    while trainer.epochs_completed() < cfg.epochs {
        trainer.step_iteration()?;
        if let Some(w) = diag_file.as_mut() {
            for (iter, d) in trainer.drain_diag() {
                writeln!(w, "{}", diag_row(iter, &d))?;
            }
        }
        for epoch in trainer.drain_epochs() {
            if all_metrics.len() >= cfg.epochs {
                break;
            }
            if let Some(w) = metrics_file.as_mut() {
                writeln!(w, "{}", epoch.to_csv_row())?;
                w.flush()?;
            }
            if epoch.epoch % 10 == 0 {
                if let Some(dir) = out_dir {
                    save_checkpoints(dir, &format!("epoch_{:04}", epoch.epoch), &trainer)?;
                }
            }
            all_metrics.push(epoch);
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoints(dir, "final", &trainer)?;
    }
    if let Some(mut w) = metrics_file {
        w.flush()?;
    }
    if let Some(mut w) = diag_file {
        w.flush()?;
    }
    Ok(RunOutput {
        metrics: all_metrics,
        updates: trainer.update_log.clone(),
        policy: trainer.policy.clone(),
        value: trainer.value.clone(),
        risk: trainer.risk.clone(),
    })
}

fn save_checkpoints<E: Environment>(dir: &Path, tag: &str, trainer: &Trainer<E>) -> Result<()> {
    let nets = [
        ("policy", &trainer.policy),
        ("value", &trainer.value),
        ("risk", &trainer.risk),
    ];
    for (name, net) in nets {
        let path: PathBuf = dir.join(format!("ckpt_{tag}_{name}.bin"));
        checkpoint::save(&path, net.spec(), net.params())?;
    }
    Ok(())
}

/// Deterministic evaluation: actions are the policy mean, no sampling.
pub struct EvalStep {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub risk: f64,
}

pub struct EvalEpisode {
    pub record: EpisodeRecord,
    pub steps: Vec<EvalStep>,
}

pub fn eval_policy<E: Environment>(
    policy: &Network,
    env: &mut E,
    rng: &mut ChaCha8Rng,
    episodes: usize,
) -> Result<Vec<EvalEpisode>> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut steps = Vec::new();
        let mut ret = 0.0;
        let mut risk = 0.0;
        let mut abs_dev = env.deviation().map(|_| 0.0);
        let reason;
        loop {
            let action = policy.dist(&obs)?.mu;
            let outcome = env.step(&action)?;
            ret += outcome.reward;
            risk += outcome.risk;
            if let (Some(acc), Some(dev)) = (abs_dev.as_mut(), env.deviation()) {
                *acc += dev;
            }
            steps.push(EvalStep {
                obs,
                action,
                reward: outcome.reward,
                risk: outcome.risk,
            });
            obs = outcome.obs;
            if outcome.done {
                reason = outcome.reason;
                break;
            }
        }
        out.push(EvalEpisode {
            record: EpisodeRecord {
                ret,
                risk,
                steps: steps.len() as u32,
                abs_dev_sum: abs_dev,
                reason,
            },
            steps,
        });
    }
    Ok(out)
}
