//! The search loop: sample a batch of pipelines, evaluate them, store the
//! outcomes, then update the critic, each agent's policy, and each agent's
//! target policy.
//!
//! Three variants share the loop:
//!
//! * the full method: off-policy minibatches from the whole replay buffer,
//!   counterfactual-baseline advantages, divergence-regularized updates,
//!   soft target blending;
//! * `Lite`: plain per-agent gradient ascent on `(R - b)` with a shared
//!   scalar EMA baseline, no critic, no targets;
//! * `OnPolicy`: the full method restricted to minibatches drawn from the
//!   current iteration's experiences only.
//!
//! All randomness is drawn from named per-iteration streams, so a run is a
//! pure function of `(config, seed)` and resume is bit-exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{CriticError, Experience, NeuralQ, QFunction, ReplayBuffer, TabularQ};
use crate::oracle::{multi_objective_reward, MultiObjectiveSpec, OracleResult, RewardOracle};
use crate::policy::{soft_update, LogitGradient, PolicyError, PolicyParams, TargetPolicyParams};
use crate::rng::stream;
use crate::space::{JointAction, JointSpace, SpaceError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("exact counterfactual baseline needs agent {agent} enumerable ({size} > {limit} actions)")]
    ExactBaselineTooLarge { agent: usize, size: u64, limit: u64 },
    #[error("oracle failed more than half of the batch for {0} consecutive iterations")]
    PersistentOracleFailure(usize),
    #[error("non-finite policy gradient; update aborted")]
    NonFiniteGradient,
    #[error("bad hyper-parameter: {0}")]
    BadHyperparams(String),
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
}

/// Which update rule the search runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ma2ml,
    Lite,
    Onpolicy,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Ma2ml => write!(f, "ma2ml"),
            Variant::Lite => write!(f, "lite"),
            Variant::Onpolicy => write!(f, "onpolicy"),
        }
    }
}

/// How the counterfactual expectation over one agent's actions is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMode {
    /// Full enumeration of the agent's flattened action set.
    Exact,
    /// Mean over this many draws from the agent's current policy.
    MonteCarlo(usize),
}

/// Agents above this flat cardinality refuse exact enumeration.
pub const EXACT_BASELINE_LIMIT: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticKind {
    Neural,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Divergence regularization coefficient.
    pub lambda: f64,
    /// Policy learning rate.
    pub eta_theta: f64,
    /// Critic learning rate.
    pub eta_phi: f64,
    /// Target blend factor.
    pub tau: f64,
    /// Pipelines evaluated per iteration.
    pub batch_size: usize,
    /// Replay draws per update.
    pub minibatch_size: usize,
    pub baseline: BaselineMode,
    pub max_iter: usize,
    pub topk: usize,
    pub seed: u64,
    /// Decay of the Lite EMA baseline.
    pub ema_decay: f64,
    pub critic: CriticKind,
    /// Hidden width of the neural critic.
    pub hidden_width: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: 0.2,
            eta_theta: 0.0004,
            eta_phi: 0.005,
            tau: 0.004,
            batch_size: 24,
            minibatch_size: 24,
            baseline: BaselineMode::MonteCarlo(1),
            max_iter: 83,
            topk: 20,
            seed: 0,
            ema_decay: 0.95,
            critic: CriticKind::Neural,
            hidden_width: 64,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg: &str| Err(TrainerError::BadHyperparams(msg.into()));
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be >= 0");
        }
        if !(self.eta_theta > 0.0 && self.eta_phi > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if self.batch_size < 1 || self.minibatch_size < 1 {
            return bad("batch sizes must be >= 1");
        }
        if let BaselineMode::MonteCarlo(m) = self.baseline {
            if m < 1 {
                return bad("Monte Carlo baseline needs at least one sample");
            }
        }
        if self.topk < 1 {
            return bad("topk must be >= 1");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema decay must be in (0, 1)");
        }
        if self.hidden_width < 1 {
            return bad("hidden width must be >= 1");
        }
        Ok(())
    }
}

/// Shared scalar baseline: an exponential moving average of observed rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaBaseline {
    value: f64,
    decay: f64,
    initialized: bool,
}

impl EmaBaseline {
    pub fn new(decay: f64) -> Self {
        EmaBaseline {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    pub fn with_value(value: f64, decay: f64) -> Self {
        EmaBaseline {
            value,
            decay,
            initialized: true,
        }
    }

    /// Current baseline; zero before the first observation.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn observe(&mut self, reward: f64) {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * reward;
        } else {
            self.value = reward;
            self.initialized = true;
        }
    }
}

/// One evaluated pipeline. `reward` is `None` when the oracle failed (the
/// pipeline is logged but excluded from the buffer and the top-k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEval {
    pub iteration: usize,
    pub batch_index: usize,
    pub action: JointAction,
    pub accuracy: Option<f64>,
    pub cost: Option<f64>,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub mean_reward: Option<f64>,
    pub max_reward: Option<f64>,
    /// Per-agent policy entropy after the update.
    pub entropy: Vec<f64>,
    /// Per-agent KL(policy || target) after the update; zero for Lite.
    pub kl: Vec<f64>,
    pub critic_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkEntry {
    pub reward: f64,
    pub iteration: usize,
    pub batch_index: usize,
    pub action: JointAction,
    /// Reward under the oracle's high-fidelity mode, when it has one.
    pub hifi_reward: Option<f64>,
}

/// Full log of a run. Bit-identical across reruns of the same config + seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub evals: Vec<PipelineEval>,
    pub summaries: Vec<IterationSummary>,
    /// Distinct actions, best first; ties by earlier iteration, then
    /// lexicographic action.
    pub topk: Vec<TopkEntry>,
}

impl RunRecord {
    fn insert_topk(&mut self, entry: TopkEntry, k: usize) {
        if let Some(existing) = self.topk.iter().position(|e| e.action == entry.action) {
            // deterministic oracles repeat rewards; keep the earlier sighting
            if entry.reward <= self.topk[existing].reward {
                return;
            }
            self.topk.remove(existing);
        }
        self.topk.push(entry);
        self.topk.sort_by(|a, b| {
            b.reward
                .total_cmp(&a.reward)
                .then(a.iteration.cmp(&b.iteration))
                .then_with(|| a.action.cmp(&b.action))
        });
        self.topk.truncate(k);
    }

    pub fn best_reward(&self) -> Option<f64> {
        self.topk.first().map(|e| e.reward)
    }

    pub fn topk_mean_reward(&self) -> Option<f64> {
        if self.topk.is_empty() {
            None
        } else {
            Some(self.topk.iter().map(|e| e.reward).sum::<f64>() / self.topk.len() as f64)
        }
    }
}

/// Expected value, under agent `i`'s current policy, of the critic with that
/// agent's action replaced and everything else held fixed, minus lambda
/// times the expected log policy/target ratio.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_baseline(
    space: &JointSpace,
    critic: &QFunction,
    policies: &PolicyParams,
    targets: &TargetPolicyParams,
    action: &JointAction,
    agent: usize,
    lambda: f64,
    mode: BaselineMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainerError> {
    let dims = &space.agents[agent].dimensions;
    match mode {
        BaselineMode::Exact => {
            let size = space.agents[agent]
                .flat_cardinality()
                .unwrap_or(u64::MAX);
            if size > EXACT_BASELINE_LIMIT {
                return Err(TrainerError::ExactBaselineTooLarge {
                    agent,
                    size,
                    limit: EXACT_BASELINE_LIMIT,
                });
            }
            let dim_probs: Vec<Vec<f64>> = (0..dims.len())
                .map(|d| policies.probs(agent, d))
                .collect();
            let mut candidate = action.clone();
            let mut sub = vec![0usize; dims.len()];
            let mut total = 0.0;
            loop {
                let prob: f64 = dim_probs.iter().zip(&sub).map(|(p, &a)| p[a]).product();
                if prob > 0.0 {
                    candidate.indices[agent].copy_from_slice(&sub);
                    let q = critic.eval_lenient(space, &candidate);
                    let bracket = if lambda != 0.0 {
                        let log_ratio = policies.agent_log_prob(agent, &sub)
                            - targets.params().agent_log_prob(agent, &sub);
                        q - lambda * log_ratio
                    } else {
                        q
                    };
                    total += prob * bracket;
                }
                // next mixed-radix sub-action
                let mut d = dims.len();
                loop {
                    if d == 0 {
                        return Ok(total);
                    }
                    d -= 1;
                    sub[d] += 1;
                    if sub[d] < dims[d].cardinality {
                        break;
                    }
                    sub[d] = 0;
                }
            }
        }
        BaselineMode::MonteCarlo(m) => {
            let dim_probs: Vec<Vec<f64>> = (0..dims.len())
                .map(|d| policies.probs(agent, d))
                .collect();
            let mut candidate = action.clone();
            let mut total = 0.0;
            for _ in 0..m {
                for (d, probs) in dim_probs.iter().enumerate() {
                    let u: f64 = rng.gen();
                    let mut cum = 0.0;
                    let mut chosen = probs.len() - 1;
                    for (a, &p) in probs.iter().enumerate() {
                        cum += p;
                        if u < cum {
                            chosen = a;
                            break;
                        }
                    }
                    candidate.indices[agent][d] = chosen;
                }
                let q = critic.eval_lenient(space, &candidate);
                let bracket = if lambda != 0.0 {
                    let sub = &candidate.indices[agent];
                    let log_ratio = policies.agent_log_prob(agent, sub)
                        - targets.params().agent_log_prob(agent, sub);
                    q - lambda * log_ratio
                } else {
                    q
                };
                total += bracket;
            }
            Ok(total / m as f64)
        }
    }
}

/// Per-agent advantage: critic value of the taken joint action, minus the
/// lambda-weighted log policy/target ratio at the taken sub-action, minus
/// the counterfactual baseline (which folds the expected ratio term).
#[allow(clippy::too_many_arguments)]
pub fn advantage(
    space: &JointSpace,
    critic: &QFunction,
    policies: &PolicyParams,
    targets: &TargetPolicyParams,
    action: &JointAction,
    agent: usize,
    lambda: f64,
    mode: BaselineMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainerError> {
    let q = critic.eval_lenient(space, action);
    let base = counterfactual_baseline(
        space, critic, policies, targets, action, agent, lambda, mode, rng,
    )?;
    let ratio_term = if lambda != 0.0 {
        let sub = &action.indices[agent];
        lambda
            * (policies.agent_log_prob(agent, sub) - targets.params().agent_log_prob(agent, sub))
    } else {
        0.0
    };
    Ok(q - ratio_term - base)
}

/// One ascent step for agent `i`: the gradient estimate is the minibatch
/// mean of `grad log pi_i(A_i) * advantage`. Returns the updated snapshot;
/// only agent `i`'s logits change.
#[allow(clippy::too_many_arguments)]
pub fn policy_update(
    space: &JointSpace,
    critic: &QFunction,
    policies: &PolicyParams,
    targets: &TargetPolicyParams,
    agent: usize,
    minibatch: &[Experience],
    lambda: f64,
    eta_theta: f64,
    mode: BaselineMode,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyParams, TrainerError> {
    if minibatch.is_empty() {
        return Err(TrainerError::Critic(CriticError::EmptyBatch));
    }
    let mut grad = LogitGradient::zeros_like(policies);
    let weight = 1.0 / minibatch.len() as f64;
    for exp in minibatch {
        let adv = advantage(
            space,
            critic,
            policies,
            targets,
            &exp.action,
            agent,
            lambda,
            mode,
            rng,
        )?;
        grad.accumulate_agent(policies, agent, &exp.action.indices[agent], weight * adv);
    }
    if !grad.is_finite() {
        return Err(TrainerError::NonFiniteGradient);
    }
    policies
        .ascend(&grad, eta_theta)
        .map_err(TrainerError::from)
}

/// REINFORCE step for every agent with the shared scalar baseline, then one
/// EMA observation of the batch mean reward.
pub fn lite_update(
    policies: &PolicyParams,
    batch: &[(JointAction, f64)],
    ema: &mut EmaBaseline,
    eta_theta: f64,
) -> Result<PolicyParams, TrainerError> {
    if batch.is_empty() {
        return Err(TrainerError::Critic(CriticError::EmptyBatch));
    }
    let baseline = ema.value();
    let mut grad = LogitGradient::zeros_like(policies);
    let weight = 1.0 / batch.len() as f64;
    for (action, reward) in batch {
        let advantage = reward - baseline;
        for agent in 0..policies.num_agents() {
            grad.accumulate_agent(policies, agent, &action.indices[agent], weight * advantage);
        }
    }
    if !grad.is_finite() {
        return Err(TrainerError::NonFiniteGradient);
    }
    let updated = policies.ascend(&grad, eta_theta)?;
    let mean = batch.iter().map(|(_, r)| r).sum::<f64>() / batch.len() as f64;
    ema.observe(mean);
    Ok(updated)
}

/// Serialized trainer state; everything a resume needs besides the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub space_fingerprint: u64,
    pub variant: Variant,
    pub iteration: usize,
    pub policies: PolicyParams,
    pub targets: TargetPolicyParams,
    pub critic: QFunction,
    pub buffer: ReplayBuffer,
    pub ema: EmaBaseline,
    pub record: RunRecord,
    pub consecutive_bad: usize,
}

/// Owns all mutable search state. One trainer thread; oracle evaluations
/// within a batch may run concurrently but are collected in batch order
/// before any update, so concurrency never changes outputs.
pub struct Trainer<'a> {
    pub space: &'a JointSpace,
    oracle: &'a dyn RewardOracle,
    pub variant: Variant,
    pub hp: Hyperparams,
    pub reward_transform: Option<MultiObjectiveSpec>,
    pub policies: PolicyParams,
    pub targets: TargetPolicyParams,
    pub critic: QFunction,
    pub buffer: ReplayBuffer,
    pub ema: EmaBaseline,
    pub iteration: usize,
    pub record: RunRecord,
    consecutive_bad: usize,
    /// Smallest buffer id drawn by the most recent minibatch (access audit).
    pub last_minibatch_min_id: Option<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        space: &'a JointSpace,
        oracle: &'a dyn RewardOracle,
        variant: Variant,
        hp: Hyperparams,
        reward_transform: Option<MultiObjectiveSpec>,
    ) -> Result<Self, TrainerError> {
        hp.validate()?;
        let policies = PolicyParams::uniform(space);
        let targets = TargetPolicyParams(policies.clone());
        let critic = match hp.critic {
            CriticKind::Neural => QFunction::Neural(NeuralQ::new(
                space.onehot_width(),
                hp.hidden_width,
                &mut stream(hp.seed, "critic-init", 0),
            )),
            CriticKind::Tabular => QFunction::Tabular(TabularQ::new(space)?),
        };
        let ema = EmaBaseline::new(hp.ema_decay);
        Ok(Trainer {
            space,
            oracle,
            variant,
            hp,
            reward_transform,
            policies,
            targets,
            critic,
            buffer: ReplayBuffer::unbounded(),
            ema,
            iteration: 0,
            record: RunRecord::default(),
            consecutive_bad: 0,
            last_minibatch_min_id: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            space_fingerprint: self.space.fingerprint(),
            variant: self.variant,
            iteration: self.iteration,
            policies: self.policies.clone(),
            targets: self.targets.clone(),
            critic: self.critic.clone(),
            buffer: self.buffer.clone(),
            ema: self.ema.clone(),
            record: self.record.clone(),
            consecutive_bad: self.consecutive_bad,
        }
    }

    /// Rebuilds a trainer mid-run from a checkpoint.
    pub fn restore(
        space: &'a JointSpace,
        oracle: &'a dyn RewardOracle,
        hp: Hyperparams,
        reward_transform: Option<MultiObjectiveSpec>,
        ckpt: Checkpoint,
    ) -> Result<Self, TrainerError> {
        hp.validate()?;
        if ckpt.space_fingerprint != space.fingerprint() {
            return Err(TrainerError::CheckpointMismatch(format!(
                "space fingerprint {:016x} != checkpoint {:016x}",
                space.fingerprint(),
                ckpt.space_fingerprint
            )));
        }
        if !ckpt.policies.matches_space(space) {
            return Err(TrainerError::CheckpointMismatch(
                "policy shape does not match the space".into(),
            ));
        }
        Ok(Trainer {
            space,
            oracle,
            variant: ckpt.variant,
            hp,
            reward_transform,
            policies: ckpt.policies,
            targets: ckpt.targets,
            critic: ckpt.critic,
            buffer: ckpt.buffer,
            ema: ckpt.ema,
            iteration: ckpt.iteration,
            record: ckpt.record,
            consecutive_bad: ckpt.consecutive_bad,
            last_minibatch_min_id: None,
        })
    }

    fn reward_of(&self, res: &OracleResult) -> Option<f64> {
        if res.failed {
            return None;
        }
        match &self.reward_transform {
            Some(spec) => multi_objective_reward(res, spec).ok(),
            None => Some(res.accuracy),
        }
    }

    /// Runs one full iteration: sample, evaluate, store, update.
    pub fn run_iteration(&mut self) -> Result<(), TrainerError> {
        let iter = self.iteration;
        let mut sample_rng = stream(self.hp.seed, "sample", iter as u64);
        let actions: Vec<JointAction> = (0..self.hp.batch_size)
            .map(|_| self.policies.sample(&mut sample_rng).0)
            .collect();
        let results = evaluate_batch(self.oracle, self.space, &actions);

        let fresh_start_id = self.buffer.total_pushed();
        let mut fresh: Vec<(JointAction, f64)> = Vec::new();
        let mut failed = 0usize;
        for (batch_index, (action, res)) in actions.into_iter().zip(results).enumerate() {
            let reward = self.reward_of(&res);
            if let Some(r) = reward {
                self.buffer.push(Experience {
                    action: action.clone(),
                    reward: r,
                });
                self.record.insert_topk(
                    TopkEntry {
                        reward: r,
                        iteration: iter,
                        batch_index,
                        action: action.clone(),
                        hifi_reward: None,
                    },
                    self.hp.topk,
                );
                fresh.push((action.clone(), r));
            } else {
                failed += 1;
            }
            self.record.evals.push(PipelineEval {
                iteration: iter,
                batch_index,
                action,
                accuracy: (!res.failed).then_some(res.accuracy),
                cost: if res.failed { None } else { res.cost },
                reward,
            });
        }

        // the iteration still finishes its bookkeeping when this trips, so
        // an aborted run resumes at the next iteration without duplicates
        let abort = if 2 * failed > self.hp.batch_size {
            self.consecutive_bad += 1;
            self.consecutive_bad >= 3
        } else {
            self.consecutive_bad = 0;
            false
        };

        let mut critic_loss = None;
        if !fresh.is_empty() {
            match self.variant {
                Variant::Lite => {
                    // one gradient step per evaluated pipeline
                    for (action, reward) in &fresh {
                        let single = [(action.clone(), *reward)];
                        self.policies = lite_update(
                            &self.policies,
                            &single,
                            &mut self.ema,
                            self.hp.eta_theta,
                        )?;
                    }
                }
                Variant::Ma2ml | Variant::Onpolicy => {
                    // one (critic, policies, targets) update per evaluated
                    // pipeline, in batch order; the loop granularity matches
                    // per-pipeline updating with the evaluations batched.
                    // Store-then-sample order is respected inside the batch:
                    // the update after pipeline k draws only experiences
                    // stored up to k.
                    let min_id = match self.variant {
                        Variant::Onpolicy => fresh_start_id,
                        _ => 0,
                    };
                    let mut mb_rng = stream(self.hp.seed, "minibatch", iter as u64);
                    let mut baseline_rng = stream(self.hp.seed, "baseline", iter as u64);
                    let mut min_seen: Option<u64> = None;
                    let mut loss_sum = 0.0;
                    for k in 0..fresh.len() {
                        let indices = self.buffer.sample_indices_range(
                            min_id,
                            fresh_start_id + k as u64 + 1,
                            self.hp.minibatch_size,
                            &mut mb_rng,
                        )?;
                        let drawn_min = indices
                            .iter()
                            .map(|&i| self.buffer.id_of_index(i))
                            .min();
                        min_seen = match (min_seen, drawn_min) {
                            (Some(a), Some(b)) => Some(a.min(b)),
                            (a, b) => a.or(b),
                        };
                        let minibatch: Vec<Experience> = indices
                            .iter()
                            .map(|&i| self.buffer.get(i).clone())
                            .collect();
                        loss_sum +=
                            self.critic.update(self.space, &minibatch, self.hp.eta_phi)?;
                        // all agents step from the same pre-update snapshot
                        let snapshot = self.policies.clone();
                        let mut updated = self.policies.clone();
                        for agent in 0..self.space.num_agents() {
                            let stepped = policy_update(
                                self.space,
                                &self.critic,
                                &snapshot,
                                &self.targets,
                                agent,
                                &minibatch,
                                self.hp.lambda,
                                self.hp.eta_theta,
                                self.hp.baseline,
                                &mut baseline_rng,
                            )?;
                            updated.logits[agent] = stepped.logits[agent].clone();
                        }
                        self.policies = updated;
                        self.targets = soft_update(&self.targets, &self.policies, self.hp.tau)?;
                    }
                    self.last_minibatch_min_id = min_seen;
                    critic_loss = Some(loss_sum / fresh.len() as f64);
                }
            }
        }

        let rewards: Vec<f64> = fresh.iter().map(|(_, r)| *r).collect();
        let kl = match self.variant {
            Variant::Lite => vec![0.0; self.space.num_agents()],
            _ => self.policies.kl_per_agent(&self.targets)?,
        };
        self.record.summaries.push(IterationSummary {
            iteration: iter,
            evaluated: self.hp.batch_size,
            failed,
            mean_reward: (!rewards.is_empty())
                .then(|| rewards.iter().sum::<f64>() / rewards.len() as f64),
            max_reward: rewards.iter().copied().reduce(f64::max),
            entropy: self.policies.entropy_per_agent(),
            kl,
            critic_loss,
        });
        self.iteration += 1;
        if abort {
            return Err(TrainerError::PersistentOracleFailure(iter));
        }
        Ok(())
    }

    /// Runs iterations until `limit` (for checkpointed stops).
    pub fn run_to(&mut self, limit: usize) -> Result<(), TrainerError> {
        while self.iteration < limit.min(self.hp.max_iter) {
            self.run_iteration()?;
        }
        Ok(())
    }

    /// Runs the whole budget, then re-evaluates the top-k under the oracle's
    /// high-fidelity mode when it provides one.
    pub fn run_search(&mut self) -> Result<&RunRecord, TrainerError> {
        self.run_to(self.hp.max_iter)?;
        self.finalize_topk();
        Ok(&self.record)
    }

    /// High-fidelity re-evaluation of the running top-k (idempotent).
    pub fn finalize_topk(&mut self) {
        for entry in &mut self.record.topk {
            if entry.hifi_reward.is_none() {
                if let Some(res) = self.oracle.evaluate_hifi(self.space, &entry.action) {
                    if !res.failed {
                        entry.hifi_reward = match &self.reward_transform {
                            Some(spec) => multi_objective_reward(&res, spec).ok(),
                            None => Some(res.accuracy),
                        };
                    }
                }
            }
        }
    }
}

/// Evaluates a batch, possibly concurrently, collecting results in batch
/// order so concurrency never affects downstream state.
pub fn evaluate_batch(
    oracle: &dyn RewardOracle,
    space: &JointSpace,
    actions: &[JointAction],
) -> Vec<OracleResult> {
    let workers = oracle.max_concurrency().min(actions.len());
    if workers <= 1 {
        return actions.iter().map(|a| oracle.evaluate(space, a)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<OracleResult>>> =
        actions.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= actions.len() {
                    break;
                }
                let res = oracle.evaluate(space, &actions[i]);
                *slots[i].lock().unwrap() = Some(res);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}
