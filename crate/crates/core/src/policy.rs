//! Factored categorical policies and their slow-moving targets.
//!
//! Each agent's policy is a product of independent per-dimension softmax
//! distributions over raw logits. Raw logits are never normalized; every
//! consumer goes through [`softmax`], so shifting a dimension's logits by a
//! constant changes nothing observable. The factored exponential-family form
//! gives exact log-probabilities, entropies, KL divergences, and analytic
//! logit gradients, which the verification suite leans on.
//!
//! Policy values are immutable snapshots: updates build a new value, and the
//! trainer owns the single mutable head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{JointAction, JointSpace};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("blend factor tau={0} outside (0, 1]")]
    TauOutOfRange(f64),
    #[error("non-finite logit produced during update")]
    NonFiniteLogit,
}

/// Per-agent, per-dimension logit tables for the factored policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// `logits[agent][dimension][action]`.
    pub logits: Vec<Vec<Vec<f64>>>,
}

/// Target policy: identical shape, blended toward the live policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPolicyParams(pub PolicyParams);

impl TargetPolicyParams {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

/// Gradient of a log-probability with respect to the logits; same shape as
/// [`PolicyParams`]. Each per-dimension block sums to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradient {
    pub values: Vec<Vec<Vec<f64>>>,
}

impl LogitGradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        LogitGradient {
            values: params
                .logits
                .iter()
                .map(|agent| agent.iter().map(|dim| vec![0.0; dim.len()]).collect())
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for agent in &mut self.values {
            for dim in agent {
                for v in dim {
                    *v *= factor;
                }
            }
        }
    }

    /// Adds `weight * (onehot(choices) - softmax(logits))` for one agent.
    pub fn accumulate_agent(
        &mut self,
        params: &PolicyParams,
        agent: usize,
        choices: &[usize],
        weight: f64,
    ) {
        for (d, &chosen) in choices.iter().enumerate() {
            let probs = softmax(&params.logits[agent][d]);
            for (a, p) in probs.iter().enumerate() {
                let indicator = if a == chosen { 1.0 } else { 0.0 };
                self.values[agent][d][a] += weight * (indicator - p);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .flatten()
            .flatten()
            .all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Numerically stable softmax; probabilities are strictly positive for
/// finite logits and sum to 1 up to rounding.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// log softmax(logits)[index], computed without forming the probabilities.
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    (logits[index] - max) - log_sum
}

impl PolicyParams {
    /// All-zero logits: every dimension uniform.
    pub fn uniform(space: &JointSpace) -> Self {
        PolicyParams {
            logits: space
                .agents
                .iter()
                .map(|agent| {
                    agent
                        .dimensions
                        .iter()
                        .map(|dim| vec![0.0; dim.cardinality])
                        .collect()
                })
                .collect(),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.logits.len()
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.logits.len() == other.logits.len()
            && self.logits.iter().zip(&other.logits).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
            })
    }

    pub fn matches_space(&self, space: &JointSpace) -> bool {
        self.logits.len() == space.agents.len()
            && self.logits.iter().zip(&space.agents).all(|(a, s)| {
                a.len() == s.dimensions.len()
                    && a.iter()
                        .zip(&s.dimensions)
                        .all(|(l, d)| l.len() == d.cardinality)
            })
    }

    pub fn probs(&self, agent: usize, dim: usize) -> Vec<f64> {
        softmax(&self.logits[agent][dim])
    }

    /// Samples every dimension independently; returns the joint action and
    /// its log-probability. Deterministic per generator state.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (JointAction, f64) {
        let mut indices = Vec::with_capacity(self.logits.len());
        let mut logprob = 0.0;
        for agent in &self.logits {
            let mut choices = Vec::with_capacity(agent.len());
            for dim in agent {
                let probs = softmax(dim);
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
                logprob += probs[chosen].ln();
                choices.push(chosen);
            }
            indices.push(choices);
        }
        (JointAction { indices }, logprob)
    }

    /// Σ over dimensions of log softmax(logits)[chosen]. Always ≤ 0.
    pub fn log_prob(&self, action: &JointAction) -> Result<f64, PolicyError> {
        self.check_action(action)?;
        let mut total = 0.0;
        for (agent, choices) in self.logits.iter().zip(&action.indices) {
            for (dim, &chosen) in agent.iter().zip(choices) {
                total += log_softmax_at(dim, chosen);
            }
        }
        Ok(total)
    }

    /// log-probability of one agent's sub-action under that agent's factors.
    pub fn agent_log_prob(&self, agent: usize, choices: &[usize]) -> f64 {
        self.logits[agent]
            .iter()
            .zip(choices)
            .map(|(dim, &chosen)| log_softmax_at(dim, chosen))
            .sum()
    }

    /// Shannon entropy of each agent's factored distribution (nats).
    pub fn entropy_per_agent(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|agent| {
                agent
                    .iter()
                    .map(|dim| {
                        softmax(dim)
                            .iter()
                            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    }

    /// KL(self_i || target_i) for each agent; ≥ 0, zero iff equal.
    pub fn kl_per_agent(&self, target: &TargetPolicyParams) -> Result<Vec<f64>, PolicyError> {
        let other = target.params();
        if !self.same_shape(other) {
            return Err(PolicyError::ShapeMismatch(
                "policy and target differ in shape".into(),
            ));
        }
        Ok(self
            .logits
            .iter()
            .zip(&other.logits)
            .map(|(agent_p, agent_q)| {
                agent_p
                    .iter()
                    .zip(agent_q)
                    .map(|(dim_p, dim_q)| {
                        let p = softmax(dim_p);
                        let q = softmax(dim_q);
                        p.iter()
                            .zip(&q)
                            .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect())
    }

    /// ∇ log π(action) with respect to every logit:
    /// per dimension, `onehot(chosen) - softmax(logits)`.
    pub fn grad_log_prob(&self, action: &JointAction) -> Result<LogitGradient, PolicyError> {
        self.check_action(action)?;
        let mut grad = LogitGradient::zeros_like(self);
        for (agent, choices) in action.indices.iter().enumerate() {
            grad.accumulate_agent(self, agent, choices, 1.0);
        }
        Ok(grad)
    }

    /// One gradient-ascent step; fails on non-finite input or result.
    pub fn ascend(&self, grad: &LogitGradient, step: f64) -> Result<PolicyParams, PolicyError> {
        if !grad.is_finite() {
            return Err(PolicyError::NonFiniteLogit);
        }
        let mut next = self.clone();
        for (agent, g_agent) in next.logits.iter_mut().zip(&grad.values) {
            for (dim, g_dim) in agent.iter_mut().zip(g_agent) {
                for (v, g) in dim.iter_mut().zip(g_dim) {
                    *v += step * g;
                    if !v.is_finite() {
                        return Err(PolicyError::NonFiniteLogit);
                    }
                }
            }
        }
        Ok(next)
    }

    fn check_action(&self, action: &JointAction) -> Result<(), PolicyError> {
        if action.indices.len() != self.logits.len()
            || action
                .indices
                .iter()
                .zip(&self.logits)
                .any(|(c, a)| c.len() != a.len() || c.iter().zip(a).any(|(&i, d)| i >= d.len()))
        {
            return Err(PolicyError::ShapeMismatch(
                "action does not match policy shape".into(),
            ));
        }
        Ok(())
    }
}

/// θ̄ := (1−τ)·θ̄ + τ·θ, elementwise.
pub fn soft_update(
    target: &TargetPolicyParams,
    params: &PolicyParams,
    tau: f64,
) -> Result<TargetPolicyParams, PolicyError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(PolicyError::TauOutOfRange(tau));
    }
    if !target.params().same_shape(params) {
        return Err(PolicyError::ShapeMismatch(
            "target and policy differ in shape".into(),
        ));
    }
    let mut blended = target.params().clone();
    for (agent_t, agent_p) in blended.logits.iter_mut().zip(&params.logits) {
        for (dim_t, dim_p) in agent_t.iter_mut().zip(agent_p) {
            for (t, &p) in dim_t.iter_mut().zip(dim_p) {
                *t = (1.0 - tau) * *t + tau * p;
            }
        }
    }
    Ok(TargetPolicyParams(blended))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::space::JointSpace;

    fn toy_space() -> JointSpace {
        JointSpace::parse(
            r#"{"agents":[
                {"name":"a","dimensions":[{"name":"d0","cardinality":4}]},
                {"name":"b","dimensions":[{"name":"d0","cardinality":2},{"name":"d1","cardinality":3}]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn uniform_init_gives_equal_probabilities() {
        let params = PolicyParams::uniform(&toy_space());
        assert_eq!(params.probs(0, 0), vec![0.25; 4]);
        let h = params.entropy_per_agent();
        assert!((h[0] - 4f64.ln()).abs() < 1e-12);
        assert!((h[1] - (2f64.ln() + 3f64.ln())).abs() < 1e-12);
        let target = TargetPolicyParams(params.clone());
        let kl = params.kl_per_agent(&target).unwrap();
        assert!(kl.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn near_degenerate_softmax_always_picks_the_spike() {
        let space = toy_space();
        let mut params = PolicyParams::uniform(&space);
        params.logits[0][0] = vec![50.0, 0.0, 0.0, 0.0];
        params.logits[1][0] = vec![50.0, 0.0];
        params.logits[1][1] = vec![50.0, 0.0, 0.0];
        let mut rng = stream(1, "sample", 0);
        for _ in 0..200 {
            let (action, lp) = params.sample(&mut rng);
            assert_eq!(action.flat(), vec![0, 0, 0]);
            assert!(lp.abs() < 1e-12, "logprob {lp}");
        }
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let space = toy_space();
        let params = PolicyParams::uniform(&space);
        let mut a = stream(9, "sample", 4);
        let mut b = stream(9, "sample", 4);
        for _ in 0..50 {
            assert_eq!(params.sample(&mut a), params.sample(&mut b));
        }
    }

    #[test]
    fn empirical_frequencies_match_softmax_within_3_sigma() {
        let space = JointSpace::parse(
            r#"{"agents":[{"name":"a","dimensions":[{"name":"d","cardinality":3}]}]}"#,
        )
        .unwrap();
        let mut params = PolicyParams::uniform(&space);
        params.logits[0][0] = vec![0.7, -0.2, 0.0];
        let probs = params.probs(0, 0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        let mut rng = stream(123, "freq", 0);
        for _ in 0..n {
            let (action, _) = params.sample(&mut rng);
            counts[action.indices[0][0]] += 1;
        }
        for (a, &p) in probs.iter().enumerate() {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = counts[a] as f64 / n as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "dim action {a}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn log_prob_matches_closed_forms() {
        let space = toy_space();
        let params = PolicyParams::uniform(&space);
        let action = JointAction {
            indices: vec![vec![2], vec![1, 0]],
        };
        let lp = params.log_prob(&action).unwrap();
        assert!((lp - (0.25f64.ln() + 0.5f64.ln() + (1.0f64 / 3.0).ln())).abs() < 1e-12);

        // logits [1,0], index 0 -> ln(e/(e+1))
        let space1 = JointSpace::parse(
            r#"{"agents":[{"name":"a","dimensions":[{"name":"d","cardinality":2}]}]}"#,
        )
        .unwrap();
        let mut p1 = PolicyParams::uniform(&space1);
        p1.logits[0][0] = vec![1.0, 0.0];
        let lp = p1
            .log_prob(&JointAction {
                indices: vec![vec![0]],
            })
            .unwrap();
        let expected = (std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((lp - expected).abs() < 1e-12);
        assert!((lp + 0.31326).abs() < 1e-5);
    }

    #[test]
    fn probabilities_sum_to_one_over_full_enumeration() {
        let space = toy_space();
        let mut params = PolicyParams::uniform(&space);
        let mut rng = stream(5, "logits", 0);
        for agent in &mut params.logits {
            for dim in agent {
                for v in dim {
                    *v = rng.gen::<f64>() * 4.0 - 2.0;
                }
            }
        }
        let total: f64 = space
            .enumerate_actions()
            .map(|a| params.log_prob(&a).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn entropy_matches_brute_force_on_enumerable_space() {
        let space = toy_space();
        let mut params = PolicyParams::uniform(&space);
        let mut rng = stream(6, "logits", 0);
        for agent in &mut params.logits {
            for dim in agent {
                for v in dim {
                    *v = rng.gen::<f64>() * 3.0 - 1.5;
                }
            }
        }
        let total_entropy: f64 = params.entropy_per_agent().iter().sum();
        let brute: f64 = space
            .enumerate_actions()
            .map(|a| {
                let p = params.log_prob(&a).unwrap().exp();
                -p * p.ln()
            })
            .sum();
        assert!((total_entropy - brute).abs() < 1e-10);
    }

    #[test]
    fn kl_closed_form_and_nonnegativity() {
        let space = JointSpace::parse(
            r#"{"agents":[{"name":"a","dimensions":[{"name":"d","cardinality":2}]}]}"#,
        )
        .unwrap();
        let mut p = PolicyParams::uniform(&space);
        p.logits[0][0] = vec![1.0, 0.0];
        let q = TargetPolicyParams(PolicyParams::uniform(&space));
        let kl = p.kl_per_agent(&q).unwrap()[0];
        // direct evaluation of sum p ln(p/q) at p = softmax([1,0]), q = [0.5,0.5]
        let p0 = std::f64::consts::E / (1.0 + std::f64::consts::E);
        let expected = p0 * (p0 / 0.5).ln() + (1.0 - p0) * ((1.0 - p0) / 0.5).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.11099).abs() < 1e-4);

        let mut rng = stream(7, "klsweep", 0);
        for _ in 0..1000 {
            let mut a = PolicyParams::uniform(&space);
            let mut b = PolicyParams::uniform(&space);
            a.logits[0][0] = vec![rng.gen::<f64>() * 6.0 - 3.0, rng.gen::<f64>() * 6.0 - 3.0];
            b.logits[0][0] = vec![rng.gen::<f64>() * 6.0 - 3.0, rng.gen::<f64>() * 6.0 - 3.0];
            let kl = a.kl_per_agent(&TargetPolicyParams(b)).unwrap()[0];
            assert!(kl >= 0.0, "negative KL {kl}");
        }
    }

    #[test]
    fn grad_log_prob_closed_form_and_zero_sum() {
        let space = JointSpace::parse(
            r#"{"agents":[{"name":"a","dimensions":[{"name":"d","cardinality":2}]}]}"#,
        )
        .unwrap();
        let params = PolicyParams::uniform(&space);
        let grad = params
            .grad_log_prob(&JointAction {
                indices: vec![vec![0]],
            })
            .unwrap();
        assert!((grad.values[0][0][0] - 0.5).abs() < 1e-15);
        assert!((grad.values[0][0][1] + 0.5).abs() < 1e-15);

        let space = toy_space();
        let mut params = PolicyParams::uniform(&space);
        let mut rng = stream(8, "logits", 0);
        for agent in &mut params.logits {
            for dim in agent {
                for v in dim {
                    *v = rng.gen::<f64>() * 4.0 - 2.0;
                }
            }
        }
        let action = JointAction {
            indices: vec![vec![3], vec![0, 2]],
        };
        let grad = params.grad_log_prob(&action).unwrap();
        for agent in &grad.values {
            for dim in agent {
                assert!(dim.iter().sum::<f64>().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn grad_log_prob_matches_central_finite_differences() {
        let space = toy_space();
        let mut rng = stream(11, "fd", 0);
        for _ in 0..20 {
            let mut params = PolicyParams::uniform(&space);
            for agent in &mut params.logits {
                for dim in agent {
                    for v in dim {
                        *v = rng.gen::<f64>() * 4.0 - 2.0;
                    }
                }
            }
            let action = JointAction {
                indices: vec![
                    vec![rng.gen_range(0..4)],
                    vec![rng.gen_range(0..2), rng.gen_range(0..3)],
                ],
            };
            let grad = params.grad_log_prob(&action).unwrap();
            let eps = 1e-5;
            let mut max_abs_diff = 0.0f64;
            let mut max_fd = 0.0f64;
            for agent in 0..params.logits.len() {
                for dim in 0..params.logits[agent].len() {
                    for a in 0..params.logits[agent][dim].len() {
                        let mut plus = params.clone();
                        plus.logits[agent][dim][a] += eps;
                        let mut minus = params.clone();
                        minus.logits[agent][dim][a] -= eps;
                        let fd = (plus.log_prob(&action).unwrap()
                            - minus.log_prob(&action).unwrap())
                            / (2.0 * eps);
                        max_abs_diff = max_abs_diff.max((grad.values[agent][dim][a] - fd).abs());
                        max_fd = max_fd.max(fd.abs());
                    }
                }
            }
            assert!(
                max_abs_diff / max_fd.max(1e-12) < 1e-6,
                "relative error {}",
                max_abs_diff / max_fd
            );
        }
    }

    #[test]
    fn shift_invariance_within_1e12() {
        let space = toy_space();
        let mut params = PolicyParams::uniform(&space);
        params.logits[0][0] = vec![0.3, -1.2, 2.0, 0.0];
        let mut shifted = params.clone();
        for v in &mut shifted.logits[0][0] {
            *v += 17.5;
        }
        for (p, q) in params.probs(0, 0).iter().zip(shifted.probs(0, 0)) {
            assert!((p - q).abs() < 1e-12);
        }
        let action = JointAction {
            indices: vec![vec![2], vec![1, 1]],
        };
        let lp_a = params.log_prob(&action).unwrap();
        let lp_b = shifted.log_prob(&action).unwrap();
        assert!((lp_a - lp_b).abs() < 1e-12);
        let h_a: f64 = params.entropy_per_agent().iter().sum();
        let h_b: f64 = shifted.entropy_per_agent().iter().sum();
        assert!((h_a - h_b).abs() < 1e-12);
        let kl = params
            .kl_per_agent(&TargetPolicyParams(shifted.clone()))
            .unwrap();
        assert!(kl.iter().all(|&v| v.abs() < 1e-12));
        let mut rng_a = stream(3, "shift", 0);
        let mut rng_b = stream(3, "shift", 0);
        for _ in 0..100 {
            assert_eq!(params.sample(&mut rng_a).0, shifted.sample(&mut rng_b).0);
        }
    }

    #[test]
    fn soft_update_blends_and_contracts_geometrically() {
        let space = toy_space();
        let mut params = PolicyParams::uniform(&space);
        params.logits[0][0] = vec![1.0, 2.0, 3.0, 4.0];
        let target = TargetPolicyParams(PolicyParams::uniform(&space));

        // tau = 1 copies the live policy.
        let t1 = soft_update(&target, &params, 1.0).unwrap();
        assert_eq!(t1.params(), &params);

        // paper-default tau blends 0.4% of the new logits.
        let t = soft_update(&target, &params, 0.004).unwrap();
        assert!((t.params().logits[0][0][3] - 0.016).abs() < 1e-15);

        // repeated updates converge geometrically: gap shrinks by (1 - tau).
        let tau = 0.25;
        let mut target = TargetPolicyParams(PolicyParams::uniform(&space));
        let mut prev_gap = f64::INFINITY;
        for _ in 0..30 {
            target = soft_update(&target, &params, tau).unwrap();
            let gap: f64 = target.params().logits[0][0]
                .iter()
                .zip(&params.logits[0][0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if prev_gap.is_finite() && prev_gap > 1e-12 {
                assert!((gap / prev_gap - (1.0 - tau)).abs() < 1e-9);
            }
            prev_gap = gap;
        }
    }

    #[test]
    fn soft_update_rejects_bad_tau() {
        let space = toy_space();
        let params = PolicyParams::uniform(&space);
        let target = TargetPolicyParams(params.clone());
        assert!(soft_update(&target, &params, 0.0).is_err());
        assert!(soft_update(&target, &params, 1.5).is_err());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let space = toy_space();
        let params = PolicyParams::uniform(&space);
        let bad = JointAction {
            indices: vec![vec![0]],
        };
        assert!(params.log_prob(&bad).is_err());
        assert!(params.grad_log_prob(&bad).is_err());
    }
}
