//! Synchronized sample collection under a shared policy.
//!
//! K workers each own one environment and one RNG stream (seeded as
//! `master_seed + learner_id`). A collection round steps every worker
//! `n_steps` times; workers run concurrently but the round is
//! barrier-synchronized — nothing proceeds until all segments are in.
//! Collection and update phases strictly alternate, so policy parameters are
//! read-only while sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{DoneReason, Environment};
use crate::error::{Error, Result};
use crate::nn::{log_prob, sample, Network};

/// One environment transition plus everything the update phase needs: the
/// collection-time log density and the bootstrap action sampled at
/// collection time. `a_next` is `None` on terminal transitions, where the
/// bootstrap term is dropped.
#[derive(Debug, Clone)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub log_prob_old: f64,
    pub r: f64,
    pub r_tilde: f64,
    pub s_next: Vec<f64>,
    pub a_next: Option<Vec<f64>>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Infeasible,
    Unevaluated,
}

/// One learner's segment for one collection round, with n-step reward and
/// risk targets. Targets are recomputed whenever critic parameters change.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub learner_id: usize,
    pub iteration: u64,
    pub transitions: Vec<Transition>,
    pub r_targets: Vec<f64>,
    pub r_tilde_targets: Vec<f64>,
    pub feasibility: Feasibility,
}

/// A view over selected sample sets (all of them, or the feasible ones).
pub struct Batch<'a> {
    sets: Vec<&'a SampleSet>,
}

impl<'a> Batch<'a> {
    pub fn new(sets: Vec<&'a SampleSet>) -> Result<Self> {
        if sets.iter().map(|s| s.transitions.len()).sum::<usize>() == 0 {
            return Err(Error::EmptyBatch { context: "batch" });
        }
        Ok(Self { sets })
    }

    pub fn all(sets: &'a [SampleSet]) -> Result<Self> {
        Self::new(sets.iter().collect())
    }

    pub fn feasible_only(sets: &'a [SampleSet]) -> Result<Self> {
        Self::new(
            sets.iter()
                .filter(|s| s.feasibility == Feasibility::Feasible)
                .collect(),
        )
    }

    pub fn sets(&self) -> &[&'a SampleSet] {
        &self.sets
    }

    pub fn n_transitions(&self) -> usize {
        self.sets.iter().map(|s| s.transitions.len()).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &'a Transition> + '_ {
        self.sets.iter().flat_map(|s| s.transitions.iter())
    }

    /// Risk returns at segment starts, the empirical estimate of the expected
    /// accumulated risk under the sampling policy.
    pub fn segment_start_risk_returns(&self) -> impl Iterator<Item = f64> + '_ {
        self.sets
            .iter()
            .filter(|s| !s.r_tilde_targets.is_empty())
            .map(|s| s.r_tilde_targets[0])
    }
}

/// Statistics of one finished episode, aggregated later into epoch metrics.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub ret: f64,
    pub risk: f64,
    pub steps: u32,
    /// Sum of |d| over the episode's steps (lane keeping only).
    pub abs_dev_sum: Option<f64>,
    pub reason: DoneReason,
}

/// One rollout worker: an environment plus its private RNG stream and the
/// accumulators of the episode currently in progress (episodes span
/// collection rounds).
pub struct Worker<E: Environment> {
    pub learner_id: usize,
    env: E,
    rng: ChaCha8Rng,
    ep_return: f64,
    ep_risk: f64,
    ep_steps: u32,
    ep_abs_dev: Option<f64>,
}

impl<E: Environment> Worker<E> {
    /// Seeds the worker stream as `master_seed + learner_id` and resets the
    /// environment from it.
    pub fn new(learner_id: usize, mut env: E, master_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed.wrapping_add(learner_id as u64));
        env.reset(&mut rng);
        let ep_abs_dev = env.deviation().map(|_| 0.0);
        Self {
            learner_id,
            env,
            rng,
            ep_return: 0.0,
            ep_risk: 0.0,
            ep_steps: 0,
            ep_abs_dev,
        }
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    fn run_segment(
        &mut self,
        policy: &Network,
        n_steps: usize,
        iteration: u64,
    ) -> Result<(SampleSet, Vec<EpisodeRecord>)> {
        let mut transitions: Vec<Transition> = Vec::with_capacity(n_steps);
        let mut episodes = Vec::new();
        let mut obs = self.env.observe();
        let mut pending_action: Option<(Vec<f64>, f64)> = None;
        for _ in 0..n_steps {
            let (a, lp) = match pending_action.take() {
                Some(al) => al,
                None => {
                    let dist = policy.dist(&obs)?;
                    let a = sample(&dist, &mut self.rng);
                    let lp = log_prob(&dist, &a)?;
                    (a, lp)
                }
            };
            let out = self.env.step(&a)?;
            self.ep_return += out.reward;
            self.ep_risk += out.risk;
            self.ep_steps += 1;
            if let (Some(acc), Some(dev)) = (self.ep_abs_dev.as_mut(), self.env.deviation()) {
                *acc += dev;
            }
            let done = out.done;
            let s_next = out.obs.clone();
            if done {
                episodes.push(EpisodeRecord {
                    ret: self.ep_return,
                    risk: self.ep_risk,
                    steps: self.ep_steps,
                    abs_dev_sum: self.ep_abs_dev,
                    reason: out.reason,
                });
                self.ep_return = 0.0;
                self.ep_risk = 0.0;
                self.ep_steps = 0;
                if self.ep_abs_dev.is_some() {
                    self.ep_abs_dev = Some(0.0);
                }
            }
            transitions.push(Transition {
                s: obs,
                a,
                log_prob_old: lp,
                r: out.reward,
                r_tilde: out.risk,
                s_next,
                a_next: None,
                done,
            });
            obs = if done {
                self.env.reset(&mut self.rng)
            } else {
                out.obs
            };
            // The action for the next state is sampled now: it both drives
            // the next step and serves as the bootstrap action of the
            // transition just stored (when the episode continues).
            if !done {
                let dist = policy.dist(&obs)?;
                let a_next = sample(&dist, &mut self.rng);
                let lp_next = log_prob(&dist, &a_next)?;
                transitions.last_mut().unwrap().a_next = Some(a_next.clone());
                pending_action = Some((a_next, lp_next));
            }
        }
        let len = transitions.len();
        let set = SampleSet {
            learner_id: self.learner_id,
            iteration,
            transitions,
            r_targets: vec![0.0; len],
            r_tilde_targets: vec![0.0; len],
            feasibility: Feasibility::Unevaluated,
        };
        Ok((set, episodes))
    }
}

/// Runs one synchronized collection round across all workers, concurrently.
/// All workers hold the same (read-only) policy; the scope join is the
/// barrier between rounds. A panicking worker aborts the round.
pub fn collect<E: Environment>(
    policy: &Network,
    workers: &mut [Worker<E>],
    n_steps: usize,
    iteration: u64,
) -> Result<(Vec<SampleSet>, Vec<EpisodeRecord>)> {
    if workers.is_empty() {
        return Err(Error::EmptyBatch { context: "workers" });
    }
    let results: Vec<std::thread::Result<Result<(SampleSet, Vec<EpisodeRecord>)>>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .iter_mut()
                .map(|w| scope.spawn(move || w.run_segment(policy, n_steps, iteration)))
                .collect();
            handles.into_iter().map(|h| h.join()).collect()
        });
    let mut sets = Vec::with_capacity(results.len());
    let mut episodes = Vec::new();
    for (learner_id, res) in results.into_iter().enumerate() {
        match res {
            Err(_) => return Err(Error::WorkerPanic { learner_id }),
            Ok(inner) => {
                let (set, eps) = inner?;
                sets.push(set);
                episodes.extend(eps);
            }
        }
    }
    Ok((sets, episodes))
}

/// Serial reference path for [`collect`]: identical results, one worker at a
/// time.
pub fn collect_serial<E: Environment>(
    policy: &Network,
    workers: &mut [Worker<E>],
    n_steps: usize,
    iteration: u64,
) -> Result<(Vec<SampleSet>, Vec<EpisodeRecord>)> {
    if workers.is_empty() {
        return Err(Error::EmptyBatch { context: "workers" });
    }
    let mut sets = Vec::with_capacity(workers.len());
    let mut episodes = Vec::new();
    for w in workers.iter_mut() {
        let (set, eps) = w.run_segment(policy, n_steps, iteration)?;
        sets.push(set);
        episodes.extend(eps);
    }
    Ok((sets, episodes))
}

fn q_value(net: &Network, state: &[f64], action: &[f64]) -> Result<f64> {
    let mut input = Vec::with_capacity(state.len() + action.len());
    input.extend_from_slice(state);
    input.extend_from_slice(action);
    net.forward_scalar(&input)
}

/// Recomputes the n-step reward and risk targets of a segment under the
/// current critic parameters. Within the segment,
/// `R_t = sum_k gamma^k r_{t+k} + gamma^n Q(s_{t+n}, a_{t+n})`, truncated at
/// episode ends: the bootstrap term is dropped when the segment (or episode)
/// ends with `done`.
pub fn compute_targets(
    set: &mut SampleSet,
    value_net: &Network,
    risk_net: &Network,
    gamma: f64,
) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidConfig("gamma must be in (0, 1]".into()));
    }
    let n = set.transitions.len();
    set.r_targets.resize(n, 0.0);
    set.r_tilde_targets.resize(n, 0.0);
    let mut cont_r = 0.0;
    let mut cont_rt = 0.0;
    for t in (0..n).rev() {
        let tr = &set.transitions[t];
        if tr.done {
            cont_r = 0.0;
            cont_rt = 0.0;
        } else if t == n - 1 {
            let a_next = tr.a_next.as_ref().ok_or_else(|| {
                Error::Internal("non-terminal segment end without bootstrap action".into())
            })?;
            cont_r = q_value(value_net, &tr.s_next, a_next)?;
            cont_rt = q_value(risk_net, &tr.s_next, a_next)?;
        }
        set.r_targets[t] = tr.r + gamma * cont_r;
        set.r_tilde_targets[t] = tr.r_tilde + gamma * cont_rt;
        cont_r = set.r_targets[t];
        cont_rt = set.r_tilde_targets[t];
    }
    Ok(())
}

/// Evaluates `Q(s, a)` and the risk critic at every stored state-action pair
/// of the batch. These weight the score-function gradients of the surrogate
/// objective (the importance ratio is 1 at the expansion point).
pub fn surrogate_weights(
    batch: &Batch,
    value_net: &Network,
    risk_net: &Network,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = batch.n_transitions();
    if n == 0 {
        return Err(Error::EmptyBatch {
            context: "surrogate weights",
        });
    }
    let mut q = Vec::with_capacity(n);
    let mut q_tilde = Vec::with_capacity(n);
    for tr in batch.transitions() {
        q.push(q_value(value_net, &tr.s, &tr.a)?);
        q_tilde.push(q_value(risk_net, &tr.s, &tr.a)?);
    }
    Ok((q, q_tilde))
}
